use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::dataset::InteractionVector;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Affine map `x·weight + bias`; `weight` is in×out, `bias` 1×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

/// `(x·W + b) ⊗ σ(x·V + c)` when `gate` is present, else `tanh(x·W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedLayer<T> {
    pub linear: Linear<T>,
    pub gate: Option<Linear<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead<T> {
    pub mean: Linear<T>,
    pub log_var: Linear<T>,
}

/// A trunk of hidden layers followed by a Gaussian head.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub trunk: Vec<GatedLayer<T>>,
    pub head: GaussianHead<T>,
}

/// Every learnable tensor of a model. Generic so the same layout can hold
/// values, tape handles, gradients or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    /// q(z2|x); the only encoder of flat models. Its trunk output doubles
    /// as the x-features consumed by `encoder_z1`.
    pub encoder_z2: Stage<T>,
    /// q(z1|x, z2), two-level only.
    pub encoder_z1: Option<Stage<T>>,
    /// p(z1|z2), two-level only.
    pub prior_z1: Option<Stage<T>>,
    pub decoder: Vec<GatedLayer<T>>,
    /// Decoder logit head, hidden → M.
    pub output: Linear<T>,
    /// K×M pseudo-inputs of the VampPrior.
    pub pseudo_inputs: Option<T>,
}

type Visitor<'f, T, U> = dyn FnMut(&str, &T) -> U + 'f;

impl<T> Linear<T> {
    fn map<U>(&self, p: &str, f: &mut Visitor<'_, T, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{p}.weight"), &self.weight),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn collect<'s>(&'s self, p: &str, out: &mut Vec<(String, &'s T)>) {
        out.push((format!("{p}.weight"), &self.weight));
        out.push((format!("{p}.bias"), &self.bias));
    }

    fn collect_mut<'s>(&'s mut self, p: &str, out: &mut Vec<(String, &'s mut T)>) {
        out.push((format!("{p}.weight"), &mut self.weight));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

impl<T> GatedLayer<T> {
    fn map<U>(&self, p: &str, f: &mut Visitor<'_, T, U>) -> GatedLayer<U> {
        GatedLayer {
            linear: self.linear.map(&format!("{p}.linear"), f),
            gate: self.gate.as_ref().map(|g| g.map(&format!("{p}.gate"), f)),
        }
    }

    fn collect<'s>(&'s self, p: &str, out: &mut Vec<(String, &'s T)>) {
        self.linear.collect(&format!("{p}.linear"), out);
        if let Some(g) = &self.gate {
            g.collect(&format!("{p}.gate"), out);
        }
    }

    fn collect_mut<'s>(&'s mut self, p: &str, out: &mut Vec<(String, &'s mut T)>) {
        self.linear.collect_mut(&format!("{p}.linear"), out);
        if let Some(g) = &mut self.gate {
            g.collect_mut(&format!("{p}.gate"), out);
        }
    }
}

fn map_trunk<T, U>(trunk: &[GatedLayer<T>], p: &str, f: &mut Visitor<'_, T, U>) -> Vec<GatedLayer<U>> {
    trunk
        .iter()
        .enumerate()
        .map(|(i, l)| l.map(&format!("{p}.{i}"), f))
        .collect()
}

impl<T> Stage<T> {
    fn map<U>(&self, p: &str, f: &mut Visitor<'_, T, U>) -> Stage<U> {
        Stage {
            trunk: map_trunk(&self.trunk, &format!("{p}.trunk"), f),
            head: GaussianHead {
                mean: self.head.mean.map(&format!("{p}.head.mean"), f),
                log_var: self.head.log_var.map(&format!("{p}.head.log_var"), f),
            },
        }
    }

    fn collect<'s>(&'s self, p: &str, out: &mut Vec<(String, &'s T)>) {
        for (i, l) in self.trunk.iter().enumerate() {
            l.collect(&format!("{p}.trunk.{i}"), out);
        }
        self.head.mean.collect(&format!("{p}.head.mean"), out);
        self.head.log_var.collect(&format!("{p}.head.log_var"), out);
    }

    fn collect_mut<'s>(&'s mut self, p: &str, out: &mut Vec<(String, &'s mut T)>) {
        for (i, l) in self.trunk.iter_mut().enumerate() {
            l.collect_mut(&format!("{p}.trunk.{i}"), out);
        }
        self.head.mean.collect_mut(&format!("{p}.head.mean"), out);
        self.head.log_var.collect_mut(&format!("{p}.head.log_var"), out);
    }
}

impl<T> Network<T> {
    /// Applies `f` to every tensor with its dotted name, preserving layout.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Network<U> {
        let f: &mut Visitor<'_, T, U> = &mut f;
        Network {
            encoder_z2: self.encoder_z2.map("encoder_z2", f),
            encoder_z1: self.encoder_z1.as_ref().map(|s| s.map("encoder_z1", f)),
            prior_z1: self.prior_z1.as_ref().map(|s| s.map("prior_z1", f)),
            decoder: map_trunk(&self.decoder, "decoder", f),
            output: self.output.map("output", f),
            pseudo_inputs: self.pseudo_inputs.as_ref().map(|u| f("pseudo_inputs", u)),
        }
    }

    /// All tensors with dotted names, in a fixed canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.encoder_z2.collect("encoder_z2", &mut out);
        if let Some(s) = &self.encoder_z1 {
            s.collect("encoder_z1", &mut out);
        }
        if let Some(s) = &self.prior_z1 {
            s.collect("prior_z1", &mut out);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            l.collect(&format!("decoder.{i}"), &mut out);
        }
        self.output.collect("output", &mut out);
        if let Some(u) = &self.pseudo_inputs {
            out.push(("pseudo_inputs".to_string(), u));
        }
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.encoder_z2.collect_mut("encoder_z2", &mut out);
        if let Some(s) = &mut self.encoder_z1 {
            s.collect_mut("encoder_z1", &mut out);
        }
        if let Some(s) = &mut self.prior_z1 {
            s.collect_mut("prior_z1", &mut out);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.collect_mut(&format!("decoder.{i}"), &mut out);
        }
        self.output.collect_mut("output", &mut out);
        if let Some(u) = &mut self.pseudo_inputs {
            out.push(("pseudo_inputs".to_string(), u));
        }
        out
    }
}

impl Network<Matrix> {
    pub fn n_params(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn zeros_like(&self) -> Network<Matrix> {
        self.map(|_, m| Matrix::zeros(m.rows(), m.cols()))
    }
}

/// A model: its architecture plus learned tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub net: Network<Matrix>,
}

/// Shapes of every tensor, with a constructor for each entry.
fn build(cfg: &ModelConfig, init: &mut dyn FnMut(&str, usize, usize) -> Matrix) -> Network<Matrix> {
    let mut linear = |name: &str, fan_in: usize, fan_out: usize| Linear {
        weight: init(&format!("{name}.weight"), fan_in, fan_out),
        bias: Matrix::zeros(1, fan_out),
    };
    let mut trunk = |name: &str, input: usize| -> Vec<GatedLayer<Matrix>> {
        (0..cfg.depth)
            .map(|i| {
                let fan_in = if i == 0 { input } else { cfg.hidden };
                GatedLayer {
                    linear: linear(&format!("{name}.{i}.linear"), fan_in, cfg.hidden),
                    gate: cfg
                        .gated
                        .then(|| linear(&format!("{name}.{i}.gate"), fan_in, cfg.hidden)),
                }
            })
            .collect()
    };
    let mut stage_trunks = Vec::new();
    stage_trunks.push(trunk("encoder_z2.trunk", cfg.n_items));
    if cfg.two_level() {
        stage_trunks.push(trunk("encoder_z1.trunk", cfg.hidden + cfg.latent_z2));
        stage_trunks.push(trunk("prior_z1.trunk", cfg.latent_z2));
    }
    let decoder = trunk("decoder", cfg.decoder_input());

    let mut head = |name: &str, out: usize| GaussianHead {
        mean: linear(&format!("{name}.head.mean"), cfg.hidden, out),
        log_var: linear(&format!("{name}.head.log_var"), cfg.hidden, out),
    };
    let mut trunks = stage_trunks.into_iter();
    let encoder_z2 = Stage {
        trunk: trunks.next().expect("encoder trunk"),
        head: head("encoder_z2", cfg.latent_z2),
    };
    let (encoder_z1, prior_z1) = if cfg.two_level() {
        (
            Some(Stage {
                trunk: trunks.next().expect("z1 encoder trunk"),
                head: head("encoder_z1", cfg.latent_z1),
            }),
            Some(Stage {
                trunk: trunks.next().expect("z1 prior trunk"),
                head: head("prior_z1", cfg.latent_z1),
            }),
        )
    } else {
        (None, None)
    };
    let output = linear("output", cfg.hidden, cfg.n_items);
    Network {
        encoder_z2,
        encoder_z1,
        prior_z1,
        decoder,
        output,
        pseudo_inputs: cfg.vamp().then(|| Matrix::zeros(cfg.n_pseudo, cfg.n_items)),
    }
}

impl ModelParams {
    /// All weights, biases and pseudo-inputs zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let net = build(&config, &mut |_, r, c| Matrix::zeros(r, c));
        Ok(ModelParams { config, net })
    }

    /// Glorot-uniform weights and zero biases. Pseudo-inputs copy `K`
    /// randomly chosen training users (with replacement only if `K` exceeds
    /// their number) plus N(0, 0.01²) noise; without training users they are
    /// drawn uniformly from [0, 1).
    pub fn init(
        config: ModelConfig,
        training: Option<&[InteractionVector]>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut net = build(&config, &mut |_, r, c| {
            let bound = (6.0 / (r + c) as f64).sqrt();
            Matrix::from_fn(r, c, |_, _| rng.random_range(-bound..bound))
        });
        if let Some(pseudo) = &mut net.pseudo_inputs {
            match training {
                Some(users) if !users.is_empty() => {
                    let k = config.n_pseudo;
                    let chosen: Vec<usize> = if k <= users.len() {
                        index::sample(rng, users.len(), k).into_vec()
                    } else {
                        (0..k).map(|_| rng.random_range(0..users.len())).collect()
                    };
                    let noise = Normal::new(0.0, 0.01).expect("valid normal");
                    for (row, &u) in chosen.iter().enumerate() {
                        let dense = pseudo.row_mut(row);
                        for &i in users[u].items() {
                            if i >= config.n_items {
                                return Err(Error::Bounds {
                                    index: i,
                                    len: config.n_items,
                                });
                            }
                            dense[i] = 1.0;
                        }
                        for v in dense.iter_mut() {
                            *v += noise.sample(rng);
                        }
                    }
                }
                _ => {
                    for v in pseudo.data_mut() {
                        *v = rng.random_range(0.0..1.0);
                    }
                }
            }
        }
        Ok(ModelParams { config, net })
    }

    /// Checks that tensor shapes match the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = build(&self.config, &mut |_, r, c| Matrix::zeros(r, c));
        let want = expected.named();
        let have = self.net.named();
        if want.len() != have.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((wn, w), (hn, h)) in want.iter().zip(&have) {
            if wn != hn || w.shape() != h.shape() {
                return Err(Error::Shape(format!(
                    "tensor {hn} is {}x{}; expected {wn} {}x{}",
                    h.rows(),
                    h.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            latent_z1: 3,
            latent_z2: 4,
            n_pseudo: 5,
            depth: 2,
            ..ModelConfig::new(20, variant)
        }
    }

    #[test]
    fn shapes_chain_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in Variant::ALL {
            let p = ModelParams::init(small(v), None, &mut rng).unwrap();
            p.validate().unwrap();
            let names: Vec<String> = p.net.named().into_iter().map(|(n, _)| n).collect();
            assert_eq!(names.iter().any(|n| n.contains(".gate.")), p.config.gated);
            assert_eq!(names.iter().any(|n| n == "pseudo_inputs"), p.config.vamp());
            assert_eq!(names.iter().any(|n| n.starts_with("prior_z1")), p.config.two_level());
        }
    }

    #[test]
    fn named_and_named_mut_agree() {
        let mut p = ModelParams::zeros(small(Variant::HVampGated)).unwrap();
        let a: Vec<String> = p.net.named().into_iter().map(|(n, _)| n).collect();
        let b: Vec<String> = p.net.named_mut().into_iter().map(|(n, _)| n).collect();
        let c: Vec<String> = p.net.map(|n, _| n.to_string()).named().into_iter().map(|(_, n)| n.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn pseudo_inputs_copy_training_users() {
        let users: Vec<InteractionVector> = (0..10)
            .map(|u| InteractionVector::new(u, vec![u, (u + 1) % 20]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ModelParams::init(small(Variant::Vamp), Some(&users), &mut rng).unwrap();
        let pseudo = p.net.pseudo_inputs.as_ref().unwrap();
        for k in 0..pseudo.rows() {
            let row = pseudo.row(k);
            let ones = row.iter().filter(|v| (*v - 1.0).abs() < 0.05).count();
            let zeros = row.iter().filter(|v| v.abs() < 0.05).count();
            assert_eq!(ones, 2);
            assert_eq!(zeros, 18);
        }
    }

    #[test]
    fn validate_catches_bad_shapes() {
        let mut p = ModelParams::zeros(small(Variant::Vamp)).unwrap();
        p.net.output.bias = Matrix::zeros(1, 3);
        assert!(matches!(p.validate(), Err(Error::Shape(_))));
    }
}
