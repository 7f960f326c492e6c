use super::spec::{LayerDef, NetworkSpec, Topology};
use crate::autodiff::{Eager, Graph};
use crate::error::{invalid, shape_err, Result};
use crate::norm::{apply_activation_norm, apply_weight_norm, correction_scale, wn_shift, NormKind};
use crate::tensor::{gaussian_init, Rng, Tensor};

/// Where a tap fires during the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    /// Output of tapped layer `layer` (a conv layer or a residual block).
    Output { layer: usize },
    /// A convolution output that feeds a normalizer (or the corrected
    /// activation for WN/SWS). `slot` counts these within the layer.
    PreNorm { layer: usize, slot: usize },
}

pub type TapFn<'a, G> = dyn FnMut(&mut G, Tap, &<G as Graph>::V) -> Result<()> + 'a;

/// Indices into the parameter store for one normalizer.
#[derive(Clone, Copy, Debug)]
struct NormSlot {
    gamma: usize,
    beta: usize,
    v: Option<usize>,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    weight: usize,
    stride: usize,
    pad: usize,
    /// For activation normalizers, the layer after the conv. For WN/SWS,
    /// `gamma` is the per-filter gain and `beta` a bias added after the conv.
    norm: Option<NormSlot>,
    /// SWS main-path convs carry the `c` output scale.
    corrected: bool,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvUnit,
    conv2: ConvUnit,
    /// Pre-activation only: the normalizer on the block input.
    pre: Option<NormSlot>,
    shortcut: Option<ConvUnit>,
    alpha: Option<usize>,
}

#[derive(Clone, Debug)]
enum Unit {
    Conv(ConvUnit),
    Block(Block),
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<V> {
    pub logits: V,
    /// Final feature map, `N × C × H × W`.
    pub features: V,
}

/// An instantiated network. Parameters live in one flat store so training
/// and autodiff can bind them in a fixed order.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
    names: Vec<String>,
    units: Vec<Unit>,
    /// Stage index of every tapped layer; `None` outside residual stages.
    stages: Vec<Option<usize>>,
    classifier: usize,
    feature_width: usize,
}

struct Builder<'a> {
    spec: &'a NetworkSpec,
    rng: &'a Rng,
    params: Vec<Tensor>,
    names: Vec<String>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(t);
        self.names.push(name);
        self.params.len() - 1
    }

    fn weight(&mut self, name: String, shape: Vec<usize>) -> Result<usize> {
        let fan_in = shape[1..].iter().product();
        self.weight_fan_in(name, shape, fan_in)
    }

    fn weight_fan_in(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> Result<usize> {
        // Each tensor draws from its own stream, so adding a layer never
        // shifts the weights of the others.
        let mut r = self.rng.fork(self.params.len() as u64);
        let w = gaussian_init(&shape, fan_in, &mut r)?;
        Ok(self.push(name, w))
    }

    fn norm_slot(&mut self, name: &str, c: usize) -> Result<NormSlot> {
        let ns = &self.spec.normalizer;
        let kind = ns.kind;
        if kind.is_grouped() {
            ns.group_size_for(c)?;
        }
        let pshape = vec![1, c, 1, 1];
        let gamma = if kind.is_parametric() {
            vec![c, 1, 1, 1]
        } else {
            pshape.clone()
        };
        Ok(NormSlot {
            gamma: self.push(format!("{name}.gamma"), Tensor::ones(gamma)),
            beta: self.push(format!("{name}.beta"), Tensor::zeros(pshape.clone())),
            v: if kind.is_evonorm() {
                Some(self.push(format!("{name}.v"), Tensor::ones(pshape)))
            } else {
                None
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        norm: bool,
        corrected: bool,
    ) -> Result<ConvUnit> {
        let weight = self.weight(format!("{name}.weight"), vec![cout, cin, k, k])?;
        let kind = self.spec.normalizer.kind;
        let norm = if norm && kind != NormKind::None {
            Some(self.norm_slot(name, cout)?)
        } else {
            None
        };
        Ok(ConvUnit {
            weight,
            stride,
            pad: k / 2,
            norm,
            corrected: corrected && kind == NormKind::ScaledWeightStandardization,
        })
    }
}

pub fn build(spec: &NetworkSpec, rng: &Rng) -> Result<Network> {
    spec.validate()?;
    let mut b = Builder {
        spec,
        rng,
        params: Vec::new(),
        names: Vec::new(),
    };
    let kind = spec.normalizer.kind;
    let preact = spec.topology == Topology::Preactivation;
    let k = spec.kernel;
    let mut units = Vec::new();
    let mut stages = Vec::new();
    let mut cin = spec.input[0];
    let mut stage = 0;
    for def in &spec.layers {
        match *def {
            LayerDef::Conv { filters, stride } => {
                let c = spec.scaled(filters)?;
                let name = format!("layer{}", stages.len());
                units.push(Unit::Conv(b.conv(&name, cin, c, k, stride, true, true)?));
                stages.push(None);
                cin = c;
            }
            LayerDef::Stage {
                filters,
                blocks,
                stride,
            } => {
                let c = spec.scaled(filters)?;
                for i in 0..blocks {
                    let name = format!("stage{stage}.block{i}");
                    let s = if i == 0 { stride } else { 1 };
                    let pre = if preact && kind.is_activation_based() {
                        Some(b.norm_slot(&format!("{name}.pre"), cin)?)
                    } else {
                        None
                    };
                    let conv1 = b.conv(&format!("{name}.conv1"), cin, c, k, s, true, true)?;
                    let conv2 = b.conv(
                        &format!("{name}.conv2"),
                        c,
                        c,
                        k,
                        1,
                        !preact || kind.is_parametric(),
                        true,
                    )?;
                    let shortcut = if s != 1 || cin != c {
                        let sc_norm = kind.is_activation_based() || kind.is_parametric();
                        Some(b.conv(&format!("{name}.shortcut"), cin, c, 1, s, sc_norm, false)?)
                    } else {
                        None
                    };
                    let alpha = if spec.skip_init {
                        Some(b.push(format!("{name}.alpha"), Tensor::zeros(vec![1, 1, 1, 1])))
                    } else {
                        None
                    };
                    units.push(Unit::Block(Block {
                        conv1,
                        conv2,
                        pre,
                        shortcut,
                        alpha,
                    }));
                    stages.push(Some(stage));
                    cin = c;
                }
                stage += 1;
            }
        }
    }
    // Stored `C × K` so logits are `pooled · W`.
    let classifier =
        b.weight_fan_in("classifier.weight".into(), vec![cin, spec.num_classes], cin)?;
    let Builder { params, names, .. } = b;
    let net = Network {
        spec: spec.clone(),
        params,
        names,
        units,
        stages,
        classifier,
        feature_width: cin,
    };
    if !net.params.iter().all(Tensor::all_finite) {
        return invalid("non-finite weight at init");
    }
    Ok(net)
}

impl Network {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Number of tapped layers.
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_of(&self, layer: usize) -> Option<usize> {
        self.stages.get(layer).copied().flatten()
    }

    /// Channels of the final feature map.
    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// SkipInit scalars, in block order.
    pub fn alphas(&self) -> Vec<f64> {
        self.units
            .iter()
            .filter_map(|u| match u {
                Unit::Block(b) => b.alpha.map(|a| self.params[a].data()[0]),
                Unit::Conv(_) => None,
            })
            .collect()
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 4 || x.shape()[1..] != self.spec.input {
            return shape_err(format!(
                "expected N x {:?} input, got {:?}",
                self.spec.input,
                x.shape()
            ));
        }
        Ok(())
    }

    /// Runs the network on any graph, with `params` bound in store order.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        params: &[G::V],
        x: &G::V,
        tap: &mut TapFn<'_, G>,
    ) -> Result<Forward<G::V>> {
        if params.len() != self.params.len() {
            return invalid(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                params.len()
            ));
        }
        let f = Fwd {
            net: self,
            g,
            p: params,
        };
        f.run(x, tap)
    }

    /// Eager forward pass without taps.
    pub fn forward_eager(&self, x: &Tensor) -> Result<Forward<Tensor>> {
        self.check_input(x)?;
        self.forward(&mut Eager, &self.params, x, &mut |_, _, _| Ok(()))
    }
}

struct Fwd<'a, G: Graph> {
    net: &'a Network,
    g: &'a mut G,
    p: &'a [G::V],
}

impl<G: Graph> Fwd<'_, G> {
    fn kind(&self) -> NormKind {
        self.net.spec.normalizer.kind
    }

    /// `φ`: ReLU, `c·(ReLU − b)` for WN, identity after EvoNorms.
    fn act(&mut self, z: &G::V) -> G::V {
        match self.kind() {
            NormKind::EvoNormB0 | NormKind::EvoNormS0 => z.clone(),
            NormKind::WeightNorm => {
                let r = self.g.relu(z);
                let r = self.g.add_scalar(&r, -wn_shift());
                self.g.scale(&r, correction_scale())
            }
            _ => self.g.relu(z),
        }
    }

    fn norm(&mut self, slot: Option<NormSlot>, z: &G::V) -> Result<G::V> {
        let Some(s) = slot else { return Ok(z.clone()) };
        if self.kind().is_parametric() {
            return self.g.add(z, &self.p[s.beta]);
        }
        let v = s.v.map(|i| &self.p[i]);
        apply_activation_norm(
            self.g,
            &self.net.spec.normalizer,
            z,
            &self.p[s.gamma],
            &self.p[s.beta],
            v,
        )
    }

    fn conv(&mut self, u: &ConvUnit, x: &G::V) -> Result<G::V> {
        let w = &self.p[u.weight];
        let kind = self.kind();
        if !kind.is_parametric() {
            return self.g.conv2d(x, w, u.stride, u.pad);
        }
        let gain = match u.norm {
            Some(s) => self.p[s.gamma].clone(),
            None => invalid("weight-normalized conv without a gain")?,
        };
        let mut wn = apply_weight_norm(self.g, kind, w, &gain, true)?;
        if u.corrected {
            wn = self.g.scale(&wn, correction_scale());
        }
        self.g.conv2d(x, &wn, u.stride, u.pad)
    }

    /// conv → tap → normalizer.
    fn conv_norm(
        &mut self,
        u: &ConvUnit,
        x: &G::V,
        layer: usize,
        slot: usize,
        tap: &mut TapFn<'_, G>,
    ) -> Result<G::V> {
        let z = self.conv(u, x)?;
        if u.norm.is_some() {
            tap(self.g, Tap::PreNorm { layer, slot }, &z)?;
        }
        self.norm(u.norm, &z)
    }

    fn block(&mut self, b: &Block, y: &G::V, layer: usize, tap: &mut TapFn<'_, G>) -> Result<G::V> {
        let topo = self.net.spec.topology;
        let sc = match &b.shortcut {
            Some(u) => {
                let z = self.conv(u, y)?;
                self.norm(u.norm, &z)?
            }
            None => y.clone(),
        };
        let mut r = if topo == Topology::Preactivation {
            let h = self.norm(b.pre, y)?;
            let h = self.act(&h);
            let h = self.conv_norm(&b.conv1, &h, layer, 0, tap)?;
            let h = self.act(&h);
            self.conv_norm(&b.conv2, &h, layer, 1, tap)?
        } else {
            let h = self.conv_norm(&b.conv1, y, layer, 0, tap)?;
            let h = self.act(&h);
            let h = self.conv_norm(&b.conv2, &h, layer, 1, tap)?;
            if topo == Topology::ReluOnResidual {
                self.act(&h)
            } else {
                h
            }
        };
        if let Some(a) = b.alpha {
            r = self.g.mul(&r, &self.p[a])?;
        }
        let sum = self.g.add(&sc, &r)?;
        Ok(match topo {
            Topology::Standard | Topology::SkipInit => self.act(&sum),
            _ => sum,
        })
    }

    fn run(mut self, x: &G::V, tap: &mut TapFn<'_, G>) -> Result<Forward<G::V>> {
        let mut y = x.clone();
        for (layer, unit) in self.net.units.iter().enumerate() {
            y = match unit {
                Unit::Conv(u) => {
                    let h = self.conv_norm(u, &y, layer, 0, tap)?;
                    self.act(&h)
                }
                Unit::Block(b) => self.block(b, &y, layer, tap)?,
            };
            tap(self.g, Tap::Output { layer }, &y)?;
        }
        let shape = self.g.shape(&y);
        let pooled = self.g.mean(&y, &[2, 3])?;
        let pooled = self.g.reshape(&pooled, &[shape[0], shape[1]])?;
        let logits = self.g.matmul(&pooled, &self.p[self.net.classifier])?;
        Ok(Forward {
            logits,
            features: y,
        })
    }
}
