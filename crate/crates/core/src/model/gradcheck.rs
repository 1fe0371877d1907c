//! Finite-difference verification of full-model ELBO gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ModelParams;
use super::{Hierarchy, Likelihood, ModelConfig, Mode, PriorKind};
use crate::error::{Error, Result};
use crate::numcore::{central_difference, Matrix};

/// Settings for [`check_model`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub beta: f64,
    pub dropout_rate: f64,
    /// Seeds the frozen dropout mask and sampling noise.
    pub noise_seed: u64,
    pub eps: f64,
    /// Adds this amount to the first entry of the named tensor's analytic
    /// gradient; lets callers confirm that a broken gradient is caught.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            beta: 1.0,
            dropout_rate: 0.5,
            noise_seed: 0,
            eps: 1e-5,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ModelCheck {
    pub cell: String,
    pub max_rel_err: f64,
    pub tensors: Vec<TensorCheck>,
    pub n_params: usize,
}

impl ModelCheck {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Every valid combination of prior, hierarchy, gating and likelihood.
/// The standard prior is only paired with flat latents.
pub fn grid(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for (prior, hierarchy) in [
        (PriorKind::Standard, Hierarchy::Flat),
        (PriorKind::Vamp, Hierarchy::Flat),
        (PriorKind::Vamp, Hierarchy::TwoLevel),
    ] {
        for gated in [false, true] {
            for likelihood in [Likelihood::Multinomial, Likelihood::Bernoulli] {
                out.push(ModelConfig {
                    prior,
                    hierarchy,
                    gated,
                    likelihood,
                    ..base.clone()
                });
            }
        }
    }
    out
}

/// Compares the analytic gradient of −mean(ELBO) on `x` with central
/// differences, for every tensor including the pseudo-inputs. Dropout and
/// sampling noise are frozen by reseeding before every evaluation.
/// Relative error is |a − fd| / max(1, |a|).
pub fn check_model(params: &ModelParams, x: &Matrix, opts: &GradCheckOptions) -> Result<ModelCheck> {
    if !(1e-6..=1e-3).contains(&opts.eps) {
        return Err(Error::Domain(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            opts.eps
        )));
    }
    let mode = Mode::Train {
        dropout_rate: opts.dropout_rate,
    };
    let loss = |p: &ModelParams| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
        Ok(-p.elbo(x, opts.beta, mode, &mut rng)?.elbo)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    let (_, mut grads) = params.elbo_with_grads(x, opts.beta, mode, &mut rng)?;
    if let Some((name, delta)) = &opts.corrupt {
        let slot = grads
            .named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("no tensor named {name}")))?
            .1;
        slot.data_mut()[0] += delta;
    }

    let mut tensors = Vec::new();
    for (idx, (name, analytic)) in grads.named().into_iter().enumerate() {
        let original = params.net.named()[idx].1;
        let numeric = central_difference(
            |m| {
                let mut p = params.clone();
                *probe_slot(&mut p, idx) = m.clone();
                loss(&p)
            },
            original,
            opts.eps,
        )?;
        let err = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        tensors.push(TensorCheck {
            name,
            max_rel_err: err,
        });
    }
    Ok(ModelCheck {
        cell: params.config.cell_name(),
        max_rel_err: tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max),
        tensors,
        n_params: params.n_params(),
    })
}

fn probe_slot(p: &mut ModelParams, idx: usize) -> &mut Matrix {
    p.net.named_mut().swap_remove(idx).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn setup(cfg: ModelConfig, seed: u64) -> (ModelParams, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ModelParams::init(cfg, None, &mut rng).unwrap();
        let x = Matrix::from_fn(3, p.config.n_items, |r, c| ((r * 7 + c * 3) % 4 == 0) as u8 as f64);
        (p, x)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 5,
            latent_z1: 2,
            latent_z2: 3,
            n_pseudo: 2,
            ..ModelConfig::new(8, Variant::MultiVae)
        }
    }

    #[test]
    fn grid_has_twelve_valid_cells() {
        let g = grid(&small());
        assert_eq!(g.len(), 12);
        for c in &g {
            c.validate().unwrap();
        }
    }

    #[test]
    fn every_cell_passes() {
        for cfg in grid(&small()) {
            let (p, x) = setup(cfg, 1);
            let check = check_model(&p, &x, &GradCheckOptions::default()).unwrap();
            assert!(check.max_rel_err < 1e-4, "{}: {:?}", check.cell, check.worst());
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (p, x) = setup(ModelConfig { ..small() }, 2);
        let opts = GradCheckOptions {
            corrupt: Some(("decoder.0.linear.weight".into(), 0.01)),
            ..Default::default()
        };
        let check = check_model(&p, &x, &opts).unwrap();
        assert!(check.max_rel_err > 1e-3);
        assert_eq!(check.worst().unwrap().name, "decoder.0.linear.weight");
    }
}
