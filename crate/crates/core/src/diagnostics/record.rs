use serde::{Deserialize, Serialize};

/// One measured value. Fits are stored as separate metrics (`slope`,
/// `intercept`, `pearson_r`, ...) so every record is a single number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub experiment: String,
    pub normalizer: String,
    pub params: String,
    pub arch: String,
    pub batch: usize,
    pub seed: u64,
    pub metric: String,
    pub layer: Option<usize>,
    pub value: f64,
    /// The value is not finite because the run diverged.
    #[serde(default)]
    pub diverged: bool,
}

impl DiagnosticRecord {
    /// Sort key that makes report order independent of scheduling.
    pub fn sort_key(&self) -> (&str, &str, &str, &str, u64, usize, &str, Option<usize>) {
        (
            &self.experiment,
            &self.normalizer,
            &self.params,
            &self.arch,
            self.seed,
            self.batch,
            &self.metric,
            self.layer,
        )
    }
}
