use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{LossConfig, QuantWeighting, ReconTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Proposed,
    ProposedVar1,
    ProposedVar2,
    Lloyd,
    LloydLog,
    Round,
    Vector,
    Pca,
    Nq,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Proposed,
        Method::ProposedVar1,
        Method::ProposedVar2,
        Method::Lloyd,
        Method::LloydLog,
        Method::Round,
        Method::Vector,
        Method::Pca,
        Method::Nq,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::ProposedVar1 => "proposed-var1",
            Method::ProposedVar2 => "proposed-var2",
            Method::Lloyd => "lloyd",
            Method::LloydLog => "lloyd-log",
            Method::Round => "round",
            Method::Vector => "vector",
            Method::Pca => "pca",
            Method::Nq => "nq",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown method tag {s:?}")))
    }
}

/// Loss-mode override for the scalar end-to-end methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Plain MSE plus fixed-weight penalty.
    Fixed,
    AdaptiveLog,
    AdaptiveNoLog,
    FixedLog,
}

impl LossMode {
    pub fn loss_config(self, beta: f64, eps: f64) -> LossConfig {
        let (recon, weighting) = match self {
            LossMode::Fixed => (ReconTerm::Mse, QuantWeighting::Fixed),
            LossMode::AdaptiveLog => (ReconTerm::Log, QuantWeighting::Adaptive),
            LossMode::AdaptiveNoLog => (ReconTerm::Mse, QuantWeighting::Adaptive),
            LossMode::FixedLog => (ReconTerm::Log, QuantWeighting::Fixed),
        };
        LossConfig {
            beta,
            eps,
            recon,
            weighting,
        }
    }
}

/// Training hyperparameters. Read from a flat `key = value` file; every key
/// is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Latent width `M`.
    pub latent_dim: usize,
    /// Average bits per output `B`.
    pub bits: u32,
    /// Hidden width; 0 selects `4 * latent_dim`.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch learning-rate multiplier.
    pub lr_decay: f64,
    pub beta: f64,
    pub eps: f64,
    /// Overrides the method's default loss (scalar end-to-end methods only).
    pub loss_mode: Option<LossMode>,
    /// Epochs between bit-allocation refreshes; 0 disables them.
    pub refresh_every: usize,
    /// Encoder outputs sampled for each allocation refresh and K-means batch.
    pub alloc_samples: usize,
    pub b_min: u32,
    pub b_max: u32,
    pub kmeans_iters: usize,
    /// Sub-vector length of the vector baseline.
    pub vector_l: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Proposed,
            latent_dim: 32,
            bits: 2,
            hidden: 0,
            epochs: 60,
            batch_size: 50,
            lr: 3e-3,
            lr_decay: 0.998,
            beta: 0.1,
            eps: 1e-12,
            loss_mode: None,
            refresh_every: 1,
            alloc_samples: 2000,
            b_min: 1,
            b_max: 8,
            kmeans_iters: 100,
            vector_l: 2,
            seed: 0,
        }
    }
}

/// Largest vector-baseline codebook, in scalar entries.
pub const VECTOR_CODEBOOK_CAP: usize = 1 << 16;

/// How a scalar end-to-end run is carried out after resolving method defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarPlan {
    pub loss: LossConfig,
    /// `None` keeps the equal allocation for the whole run.
    pub refresh_every: Option<usize>,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            4 * self.latent_dim
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.latent_dim == 0 || self.epochs == 0 || self.batch_size == 0 {
            return bad("latent_dim, epochs and batch_size must be positive".into());
        }
        if self.alloc_samples == 0 || self.kmeans_iters == 0 {
            return bad("alloc_samples and kmeans_iters must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) || !(self.beta > 0.0) || !(self.eps > 0.0) {
            return bad("lr, lr_decay, beta and eps must be positive".into());
        }
        if self.b_min == 0 || self.b_min > self.b_max || self.b_max > 16 {
            return bad(format!("bit bounds [{}, {}] invalid", self.b_min, self.b_max));
        }
        if self.method != Method::Nq && (self.bits < self.b_min || self.bits > self.b_max) {
            return bad(format!(
                "bits {} outside bounds [{}, {}]",
                self.bits, self.b_min, self.b_max
            ));
        }
        if self.method == Method::Vector {
            self.vector_codebook_len()?;
        }
        Ok(())
    }

    /// Number of codevectors of the vector baseline, after the feasibility checks.
    pub fn vector_codebook_len(&self) -> Result<usize> {
        let l = self.vector_l;
        if l == 0 || self.latent_dim % l != 0 {
            return Err(Error::Config(format!(
                "vector length {l} must divide latent_dim {}",
                self.latent_dim
            )));
        }
        let bits = l as u64 * self.bits as u64;
        if bits > 16 || (l << bits) > VECTOR_CODEBOOK_CAP {
            return Err(Error::Infeasible(format!(
                "L = {l}, B = {} needs {l} x 2^{bits} codebook entries (cap {VECTOR_CODEBOOK_CAP})",
                self.bits
            )));
        }
        Ok(1 << bits)
    }

    /// Resolves the loss and refresh cadence for the scalar end-to-end
    /// methods. The ablations are expansions of the proposed method.
    pub fn scalar_plan(&self) -> Result<ScalarPlan> {
        let (default_mode, cadence) = match self.method {
            Method::Proposed => (LossMode::AdaptiveLog, self.refresh_every),
            Method::ProposedVar1 => (LossMode::FixedLog, 0),
            Method::ProposedVar2 => (LossMode::AdaptiveNoLog, self.refresh_every),
            m => {
                return Err(Error::Config(format!(
                    "method {m} is not a scalar end-to-end method"
                )))
            }
        };
        let mode = match self.method {
            Method::Proposed => self.loss_mode.unwrap_or(default_mode),
            _ => default_mode,
        };
        Ok(ScalarPlan {
            loss: mode.loss_config(self.beta, self.eps),
            refresh_every: (cadence > 0).then_some(cadence),
        })
    }
}
