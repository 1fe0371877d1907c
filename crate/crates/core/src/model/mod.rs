//! Generative and variational machinery: gated MLP trunks, diagonal
//! Gaussian heads, standard-normal and VampPrior priors, flat and
//! two-level latents, multinomial and Bernoulli likelihoods, and the ELBO.

mod checkpoint;
mod forward;
mod gaussian;
pub mod gradcheck;
mod objective;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use forward::{gated_layer, log_lik_bernoulli, log_lik_multinomial};
pub use gaussian::{kl_diag_gauss, log_normal_diag, sample, GaussianParams, LatentSample, LOG_VAR_MAX, LOG_VAR_MIN};
pub use objective::{ElboDecomposition, ElboReport};
pub use params::{GatedLayer, GaussianHead, Linear, ModelParams, Network, Stage};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Standard,
    Vamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hierarchy {
    Flat,
    TwoLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    Multinomial,
    Bernoulli,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(PriorKind { Standard => "standard", Vamp => "vamp" });
str_enum!(Hierarchy { Flat => "flat", TwoLevel => "two_level" });
str_enum!(Likelihood { Multinomial => "multinomial", Bernoulli => "bernoulli" });

/// Whether input dropout is active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout_rate: f64 },
    Eval,
}

/// Architecture of a model. `latent_z2` is the latent dimension of flat
/// models; `latent_z1` is used only by two-level models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_items: usize,
    pub prior: PriorKind,
    pub hierarchy: Hierarchy,
    pub likelihood: Likelihood,
    pub gated: bool,
    /// Hidden layers per trunk.
    pub depth: usize,
    pub hidden: usize,
    pub latent_z1: usize,
    pub latent_z2: usize,
    /// Number of pseudo-inputs; ignored by the standard prior.
    pub n_pseudo: usize,
}

impl ModelConfig {
    pub fn new(n_items: usize, variant: Variant) -> Self {
        let mut cfg = ModelConfig {
            n_items,
            prior: PriorKind::Standard,
            hierarchy: Hierarchy::Flat,
            likelihood: Likelihood::Multinomial,
            gated: false,
            depth: 1,
            hidden: 600,
            latent_z1: 200,
            latent_z2: 200,
            n_pseudo: 1000,
        };
        variant.apply(&mut cfg);
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_items", self.n_items),
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("latent_z2", self.latent_z2),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hierarchy == Hierarchy::TwoLevel {
            if self.prior != PriorKind::Vamp {
                return Err(Error::Config(
                    "two-level models place the VampPrior on z2; prior must be vamp".into(),
                ));
            }
            if self.latent_z1 == 0 {
                return Err(Error::Config("latent_z1 must be at least 1".into()));
            }
        }
        if self.prior == PriorKind::Vamp && self.n_pseudo == 0 {
            return Err(Error::Config("the VampPrior needs K >= 1 pseudo-inputs".into()));
        }
        Ok(())
    }

    pub fn two_level(&self) -> bool {
        self.hierarchy == Hierarchy::TwoLevel
    }

    pub fn vamp(&self) -> bool {
        self.prior == PriorKind::Vamp
    }

    /// Width of the decoder input.
    pub fn decoder_input(&self) -> usize {
        match self.hierarchy {
            Hierarchy::Flat => self.latent_z2,
            Hierarchy::TwoLevel => self.latent_z1 + self.latent_z2,
        }
    }

    /// Short grid-cell label, e.g. `vamp/two_level/gated/multinomial`.
    pub fn cell_name(&self) -> String {
        format!(
            "{}/{}/{}/{}",
            self.prior,
            self.hierarchy,
            if self.gated { "gated" } else { "ungated" },
            self.likelihood
        )
    }
}

/// Named model variants from the comparison grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    MultiVae,
    MultiVaeGated,
    Vamp,
    VampGated,
    HVamp,
    HVampGated,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::MultiVae,
        Variant::MultiVaeGated,
        Variant::Vamp,
        Variant::VampGated,
        Variant::HVamp,
        Variant::HVampGated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MultiVae => "Multi-VAE",
            Variant::MultiVaeGated => "Multi-VAE (Gated)",
            Variant::Vamp => "Vamp",
            Variant::VampGated => "Vamp (Gated)",
            Variant::HVamp => "H+Vamp",
            Variant::HVampGated => "H+Vamp (Gated)",
        }
    }

    /// Sets prior, hierarchy and gating; leaves everything else alone.
    pub fn apply(self, cfg: &mut ModelConfig) {
        let (prior, hierarchy, gated) = match self {
            Variant::MultiVae => (PriorKind::Standard, Hierarchy::Flat, false),
            Variant::MultiVaeGated => (PriorKind::Standard, Hierarchy::Flat, true),
            Variant::Vamp => (PriorKind::Vamp, Hierarchy::Flat, false),
            Variant::VampGated => (PriorKind::Vamp, Hierarchy::Flat, true),
            Variant::HVamp => (PriorKind::Vamp, Hierarchy::TwoLevel, false),
            Variant::HVampGated => (PriorKind::Vamp, Hierarchy::TwoLevel, true),
        };
        cfg.prior = prior;
        cfg.hierarchy = hierarchy;
        cfg.gated = gated;
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
            .collect::<String>()
            .to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| {
                let name: String = v
                    .name()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric() || *c == '+')
                    .collect::<String>()
                    .to_ascii_lowercase();
                name == key
            })
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model name {s:?}; expected one of: {}",
                    Variant::ALL.map(Variant::name).join(", ")
                ))
            })
    }
}
