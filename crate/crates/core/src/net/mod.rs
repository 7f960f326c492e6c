//! The CNN and ResNet architectures, their construction, and tapped forward
//! passes.

mod build;
mod spec;
mod trace;

pub use build::{build, Forward, Network, Tap, TapFn};
pub use spec::{LayerDef, NetworkSpec, Topology};
pub use trace::{
    final_features, forward_with_trace, penultimate_activations, LayerStats, PropagationTrace,
    TraceOptions,
};
