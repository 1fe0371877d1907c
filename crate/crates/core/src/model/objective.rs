use rand::Rng;
use serde::{Deserialize, Serialize};

use super::forward::Graph;
use super::gaussian::{log_normal_diag, sample, GaussianParams};
use super::params::{ModelParams, Network};
use super::Mode;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Var};

/// Batch means of the single-sample ELBO and its parts. Flat models
/// report their only KL term in `kl_z2` and zero in `kl_z1`. For the
/// VampPrior `kl_z2` is the Monte Carlo estimate log q(z2|x) − log p(z2).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub elbo: f64,
    pub recon: f64,
    pub kl_z1: f64,
    pub kl_z2: f64,
}

/// Monte Carlo estimates of the reconstruction term, the expected entropy
/// of q(z2|x), and the cross-entropy E[−log p(z2)] under the prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboDecomposition {
    pub recon: f64,
    pub posterior_entropy: f64,
    pub cross_entropy: f64,
    /// Standard error of `cross_entropy` over all draws.
    pub cross_entropy_std_err: f64,
    pub n_samples: usize,
}

struct ElboNodes {
    elbo: Var,
    recon: Var,
    kl_z1: Option<Var>,
    kl_z2: Var,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

/// Random draws happen in a fixed order: dropout mask, z2 noise, z1 noise.
fn build<'a, R: Rng + ?Sized>(
    g: &mut Graph<'a>,
    x: &'a Matrix,
    beta: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<ElboNodes> {
    check_beta(beta)?;
    if x.rows() == 0 {
        return Err(Error::EmptyDataset("ELBO of an empty batch".into()));
    }
    let xn = g.input(x, mode, rng)?;
    let h = g.features(xn)?;
    let q2 = g.head_z2(h)?;
    let z2 = g.sample(q2, rng)?;

    let (z1, kl_z1) = if g.params.config.two_level() {
        let q1 = g.encode_z1(h, z2)?;
        let z1 = g.sample(q1, rng)?;
        let p1 = g.prior_z1(z2)?;
        (Some(z1), Some(g.kl(q1, p1)?))
    } else {
        (None, None)
    };

    let logits = g.decode(z1, z2)?;
    let xv = g.tape.leaf_ref(x);
    let recon = g.log_lik(logits, xv)?;

    let kl_z2 = if g.params.config.vamp() {
        let log_q = g.log_normal(z2, q2)?;
        let log_p = g.vamp_log_density(z2)?;
        g.tape.sub(log_q, log_p)?
    } else {
        g.kl_standard(q2)?
    };
    let penalty = match kl_z1 {
        Some(k1) => g.tape.add(kl_z2, k1)?,
        None => kl_z2,
    };
    let scaled = g.tape.scale(penalty, beta);
    let elbo = g.tape.sub(recon, scaled)?;
    Ok(ElboNodes {
        elbo,
        recon,
        kl_z1,
        kl_z2,
    })
}

fn mean(m: &Matrix) -> f64 {
    m.sum() / m.rows() as f64
}

fn report(g: &Graph, n: &ElboNodes) -> ElboReport {
    ElboReport {
        elbo: mean(g.value(n.elbo)),
        recon: mean(g.value(n.recon)),
        kl_z1: n.kl_z1.map_or(0.0, |v| mean(g.value(v))),
        kl_z2: mean(g.value(n.kl_z2)),
    }
}

impl ModelParams {
    /// Single-sample ELBO over the rows of `x`.
    pub fn elbo<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        beta: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ElboReport> {
        let mut g = Graph::new(self);
        let nodes = build(&mut g, x, beta, mode, rng)?;
        Ok(report(&g, &nodes))
    }

    /// Per-row single-sample ELBO terms: (elbo, recon, kl_z1 + kl_z2).
    pub fn elbo_per_user<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        beta: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<(f64, f64, f64)>> {
        let mut g = Graph::new(self);
        let n = build(&mut g, x, beta, mode, rng)?;
        let kl1 = n.kl_z1.map(|v| g.value(v).clone());
        Ok((0..x.rows())
            .map(|r| {
                let k1 = kl1.as_ref().map_or(0.0, |m| m.get(r, 0));
                (
                    g.value(n.elbo).get(r, 0),
                    g.value(n.recon).get(r, 0),
                    g.value(n.kl_z2).get(r, 0) + k1,
                )
            })
            .collect())
    }

    /// The ELBO report and the gradient of the loss −mean(elbo) with
    /// respect to every tensor.
    pub fn elbo_with_grads<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        beta: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(ElboReport, Network<Matrix>)> {
        let mut g = Graph::new(self);
        let nodes = build(&mut g, x, beta, mode, rng)?;
        let total = g.tape.sum(nodes.elbo);
        let loss = g.tape.scale(total, -1.0 / x.rows() as f64);
        let mut grads = g.tape.backward(loss)?;
        let out = g.net.map(|_, &v| grads.take(v));
        Ok((report(&g, &nodes), out))
    }

    /// Deterministic latents for scoring: z2 is the mean of q(z2|x); z1 is
    /// the mean of q(z1|x, z2) for two-level models and equals z2 otherwise.
    pub fn fold_in_latents(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new(self);
        let xn = g.input_eval(x)?;
        let h = g.features(xn)?;
        let q2 = g.head_z2(h)?;
        if self.config.two_level() {
            let q1 = g.encode_z1(h, q2.mean)?;
            Ok((g.value(q1.mean).clone(), g.value(q2.mean).clone()))
        } else {
            let z2 = g.value(q2.mean).clone();
            Ok((z2.clone(), z2))
        }
    }

    /// Decoder logits at the fold-in latents of each row of `x`.
    pub fn scores(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(self);
        let xn = g.input_eval(x)?;
        let h = g.features(xn)?;
        let q2 = g.head_z2(h)?;
        let z1 = if self.config.two_level() {
            Some(g.encode_z1(h, q2.mean)?.mean)
        } else {
            None
        };
        let logits = g.decode(z1, q2.mean)?;
        Ok(g.value(logits).clone())
    }

    /// Log prior density of z2 under this model's prior.
    pub fn log_prior_z2(&self, z: &Matrix) -> Result<Vec<f64>> {
        if self.config.vamp() {
            self.vamp_log_density(z)
        } else {
            log_normal_diag(z, &GaussianParams::standard(z.rows(), z.cols()))
        }
    }

    /// Monte Carlo decomposition of the ELBO on `x` with `n_mc` draws per
    /// user, without dropout.
    pub fn elbo_decomposition<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        n_mc: usize,
        rng: &mut R,
    ) -> Result<ElboDecomposition> {
        if x.rows() == 0 || n_mc == 0 {
            return Err(Error::EmptyDataset(
                "decomposition needs a non-empty batch and at least one draw".into(),
            ));
        }
        let q2 = self.encode_z2(x)?;
        let posterior_entropy = q2.entropy().iter().sum::<f64>() / x.rows() as f64;
        let mut recon = 0.0;
        let mut ce = Vec::with_capacity(x.rows() * n_mc);
        for _ in 0..n_mc {
            let z2 = sample(&q2, rng);
            let z1 = if self.config.two_level() {
                let q1 = self.encode_z1(x, &z2.z)?;
                Some(sample(&q1, rng).z)
            } else {
                None
            };
            let logits = self.decode(z1.as_ref(), &z2.z)?;
            let ll = match self.config.likelihood {
                super::Likelihood::Multinomial => super::log_lik_multinomial(&logits, x)?,
                super::Likelihood::Bernoulli => super::log_lik_bernoulli(&logits, x)?,
            };
            recon += ll.iter().sum::<f64>();
            ce.extend(self.log_prior_z2(&z2.z)?.into_iter().map(|v| -v));
        }
        let n = ce.len() as f64;
        let ce_mean = ce.iter().sum::<f64>() / n;
        let var = if ce.len() > 1 {
            ce.iter().map(|v| (v - ce_mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(ElboDecomposition {
            recon: recon / n,
            posterior_entropy,
            cross_entropy: ce_mean,
            cross_entropy_std_err: (var / n).sqrt(),
            n_samples: ce.len(),
        })
    }
}
