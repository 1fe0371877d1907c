use crate::error::{Error, Result};
use crate::model::Network;
use crate::numcore::Matrix;

/// Adaptive-moment optimizer state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: Network<Matrix>,
    pub second: Network<Matrix>,
    pub step: u64,
}

impl Adam {
    pub fn new(like: &Network<Matrix>) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
        }
    }

    /// One bias-corrected update of `params` in place. Gradients are
    /// checked before anything is modified.
    pub fn update(&mut self, params: &mut Network<Matrix>, grads: &Network<Matrix>, lr: f64) -> Result<()> {
        let next = self.step + 1;
        let g = grads.named();
        let p = params.named();
        if g.len() != p.len() {
            return Err(Error::Shape("gradient layout differs from parameters".into()));
        }
        for ((name, grad), (_, param)) in g.iter().zip(&p) {
            param.expect_same_shape(grad, name)?;
            if !grad.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of {name}"),
                    step: next,
                });
            }
        }
        self.step = next;
        let c1 = 1.0 - self.beta1.powf(next as f64);
        let c2 = 1.0 - self.beta2.powf(next as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((((_, param), (_, grad)), (_, m)), (_, v)) in params
            .named_mut()
            .into_iter()
            .zip(g)
            .zip(self.first.named_mut())
            .zip(self.second.named_mut())
        {
            let it = param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Network<Matrix> {
        let cfg = ModelConfig {
            hidden: 3,
            latent_z2: 2,
            n_pseudo: 2,
            ..ModelConfig::new(4, Variant::Vamp)
        };
        ModelParams::init(cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().net
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = net();
        let before = p.clone();
        let ones = p.map(|_, m| Matrix::filled(m.rows(), m.cols(), 1.0));
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &ones, 1e-3).unwrap();
        for ((_, a), (_, b)) in p.named().into_iter().zip(before.named()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
            }
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = net();
        let before = p.clone();
        let mut opt = Adam::new(&p);
        let zeros = p.zeros_like();
        opt.update(&mut p, &zeros, 1e-3).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut p = net();
        let mut g = p.zeros_like();
        g.output.bias.data_mut()[1] = f64::NAN;
        let mut opt = Adam::new(&p);
        match opt.update(&mut p, &g, 1e-3) {
            Err(Error::NonFinite { what, step }) => {
                assert!(what.contains("output.bias"));
                assert_eq!(step, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
    }
}
