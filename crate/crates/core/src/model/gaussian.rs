use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, LN_2PI};

/// Bounds applied to every head's log-variance.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussians, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    pub mean: Matrix,
    pub log_var: Matrix,
}

impl GaussianParams {
    pub fn new(mean: Matrix, log_var: Matrix) -> Result<Self> {
        mean.expect_same_shape(&log_var, "gaussian mean and log-variance")?;
        Ok(GaussianParams { mean, log_var })
    }

    /// `rows` copies of N(0, I) in `dim` dimensions.
    pub fn standard(rows: usize, dim: usize) -> Self {
        GaussianParams {
            mean: Matrix::zeros(rows, dim),
            log_var: Matrix::zeros(rows, dim),
        }
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    /// Differential entropy of each row's distribution.
    pub fn entropy(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|r| {
                0.5 * self
                    .log_var
                    .row(r)
                    .iter()
                    .map(|lv| lv + 1.0 + LN_2PI)
                    .sum::<f64>()
            })
            .collect()
    }
}

/// A reparameterized draw: `z = mean + exp(log_var / 2) * noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub z: Matrix,
    pub params: GaussianParams,
    pub noise: Matrix,
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub(crate) fn reparameterize(mean: f64, log_var: f64, noise: f64) -> f64 {
    (0.5 * log_var).exp() * noise + mean
}

pub fn sample<R: Rng + ?Sized>(g: &GaussianParams, rng: &mut R) -> LatentSample {
    let noise = standard_normal(g.rows(), g.dim(), rng);
    let z = Matrix::from_fn(g.rows(), g.dim(), |r, c| {
        reparameterize(g.mean.get(r, c), g.log_var.get(r, c), noise.get(r, c))
    });
    LatentSample {
        z,
        params: g.clone(),
        noise,
    }
}

/// Closed-form KL(q ‖ p) for each row pair.
pub fn kl_diag_gauss(q: &GaussianParams, p: &GaussianParams) -> Result<Vec<f64>> {
    if q.mean.shape() != p.mean.shape() {
        return Err(Error::Shape(format!(
            "KL between {}x{} and {}x{} gaussians",
            q.rows(),
            q.dim(),
            p.rows(),
            p.dim()
        )));
    }
    Ok((0..q.rows())
        .map(|r| {
            let mut acc = 0.0;
            for d in 0..q.dim() {
                let (mq, lq) = (q.mean.get(r, d), q.log_var.get(r, d));
                let (mp, lp) = (p.mean.get(r, d), p.log_var.get(r, d));
                let diff = mq - mp;
                acc += (lq - lp).exp() + diff * diff * (-lp).exp() - 1.0 + lp - lq;
            }
            0.5 * acc
        })
        .collect())
}

/// log N(z_r; mean_r, diag exp(log_var_r)) for each row r.
pub fn log_normal_diag(z: &Matrix, g: &GaussianParams) -> Result<Vec<f64>> {
    z.expect_same_shape(&g.mean, "evaluation point and gaussian")?;
    Ok((0..z.rows())
        .map(|r| {
            let mut acc = 0.0;
            for d in 0..z.cols() {
                let lv = g.log_var.get(r, d);
                let diff = z.get(r, d) - g.mean.get(r, d);
                acc += LN_2PI + lv + diff * diff * (-lv).exp();
            }
            -0.5 * acc
        })
        .collect())
}
