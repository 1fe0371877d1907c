//! Forward computations recorded on a tape. The matrix-level entry points
//! in this module and in `objective` build a throwaway tape and read the
//! values back, so training and evaluation share one code path.

use rand::Rng;

use super::gaussian::{standard_normal, GaussianParams, LOG_VAR_MAX, LOG_VAR_MIN};
use super::params::{GatedLayer, GaussianHead, Linear, ModelParams, Network};
use super::{Likelihood, Mode};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var, LN_2PI};

fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let xw = tape.matmul(x, l.weight)?;
    tape.add_row(xw, l.bias)
}

fn layer(tape: &mut Tape, x: Var, l: &GatedLayer<Var>) -> Result<Var> {
    let pre = linear(tape, x, &l.linear)?;
    match &l.gate {
        Some(g) => {
            let gate_pre = linear(tape, x, g)?;
            let gate = tape.sigmoid(gate_pre);
            tape.mul(pre, gate)
        }
        None => Ok(tape.tanh(pre)),
    }
}

fn trunk(tape: &mut Tape, mut x: Var, layers: &[GatedLayer<Var>]) -> Result<Var> {
    for l in layers {
        x = layer(tape, x, l)?;
    }
    Ok(x)
}

fn head(tape: &mut Tape, h: Var, head: &GaussianHead<Var>) -> Result<(Var, Var)> {
    let mean = linear(tape, h, &head.mean)?;
    let raw = linear(tape, h, &head.log_var)?;
    Ok((mean, tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)))
}

/// Tape handles for one diagonal Gaussian per row.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GaussVars {
    pub mean: Var,
    pub log_var: Var,
}

/// A tape with every model tensor bound as a leaf.
pub(crate) struct Graph<'a> {
    pub tape: Tape<'a>,
    pub net: Network<Var>,
    pub params: &'a ModelParams,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let mut tape = Tape::new();
        let mut leaves = params
            .net
            .named()
            .into_iter()
            .map(|(_, m)| tape.leaf_ref(m))
            .collect::<Vec<_>>()
            .into_iter();
        let net = params.net.map(|_, _| leaves.next().expect("same layout"));
        Graph { tape, net, params }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    pub fn gauss(&self, g: GaussVars) -> GaussianParams {
        GaussianParams {
            mean: self.value(g.mean).clone(),
            log_var: self.value(g.log_var).clone(),
        }
    }

    /// Dense input after optional dropout and row L2 normalization.
    pub fn input<R: Rng + ?Sized>(&mut self, x: &'a Matrix, mode: Mode, rng: &mut R) -> Result<Var> {
        self.check_input(x)?;
        let raw = match mode {
            Mode::Train { dropout_rate } if dropout_rate > 0.0 => {
                if dropout_rate >= 1.0 {
                    return Err(Error::Config(format!(
                        "dropout rate must lie in [0, 1), got {dropout_rate}"
                    )));
                }
                let keep = 1.0 / (1.0 - dropout_rate);
                let dropped = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    if rng.random::<f64>() < dropout_rate {
                        0.0
                    } else {
                        x.get(r, c) * keep
                    }
                });
                self.tape.leaf(dropped)
            }
            _ => self.tape.leaf_ref(x),
        };
        Ok(self.tape.l2_normalize_rows(raw))
    }

    /// Normalized input without dropout.
    pub fn input_eval(&mut self, x: &'a Matrix) -> Result<Var> {
        self.check_input(x)?;
        let raw = self.tape.leaf_ref(x);
        Ok(self.tape.l2_normalize_rows(raw))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.params.config.n_items {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {} items",
                x.cols(),
                self.params.config.n_items
            )));
        }
        Ok(())
    }

    /// Trunk features of a normalized input, shared by both encoders.
    pub fn features(&mut self, xn: Var) -> Result<Var> {
        trunk(&mut self.tape, xn, &self.net.encoder_z2.trunk)
    }

    pub fn head_z2(&mut self, features: Var) -> Result<GaussVars> {
        let (mean, log_var) = head(&mut self.tape, features, &self.net.encoder_z2.head)?;
        Ok(GaussVars { mean, log_var })
    }

    pub fn encode_z1(&mut self, features: Var, z2: Var) -> Result<GaussVars> {
        let stage = self.net.encoder_z1.as_ref().ok_or_else(flat_err)?;
        let input = self.tape.concat_cols(features, z2)?;
        let h = trunk(&mut self.tape, input, &stage.trunk)?;
        let (mean, log_var) = head(&mut self.tape, h, &stage.head)?;
        Ok(GaussVars { mean, log_var })
    }

    pub fn prior_z1(&mut self, z2: Var) -> Result<GaussVars> {
        let stage = self.net.prior_z1.as_ref().ok_or_else(flat_err)?;
        let h = trunk(&mut self.tape, z2, &stage.trunk)?;
        let (mean, log_var) = head(&mut self.tape, h, &stage.head)?;
        Ok(GaussVars { mean, log_var })
    }

    /// `mean + exp(log_var / 2) * noise` with `noise` held constant.
    pub fn reparameterize(&mut self, g: GaussVars, noise: Matrix) -> Result<Var> {
        let half = self.tape.scale(g.log_var, 0.5);
        let sd = self.tape.exp(half);
        let eps = self.tape.leaf(noise);
        let spread = self.tape.mul(sd, eps)?;
        self.tape.add(spread, g.mean)
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, g: GaussVars, rng: &mut R) -> Result<Var> {
        let (rows, cols) = self.value(g.mean).shape();
        self.reparameterize(g, standard_normal(rows, cols, rng))
    }

    /// Decoder logits from `z1` (two-level) and `z2`.
    pub fn decode(&mut self, z1: Option<Var>, z2: Var) -> Result<Var> {
        let input = match (self.params.config.two_level(), z1) {
            (true, Some(z1)) => self.tape.concat_cols(z1, z2)?,
            (false, None) => z2,
            (true, None) => {
                return Err(Error::Config("two-level decoder needs both latents".into()))
            }
            (false, Some(_)) => {
                return Err(Error::Config("flat decoder takes a single latent".into()))
            }
        };
        let want = self.params.config.decoder_input();
        if self.value(input).cols() != want {
            return Err(Error::Config(format!(
                "decoder input has {} columns, expected {want}",
                self.value(input).cols()
            )));
        }
        let h = trunk(&mut self.tape, input, &self.net.decoder)?;
        linear(&mut self.tape, h, &self.net.output)
    }

    /// Per-row log-likelihood (n×1) of `x` under the configured likelihood.
    pub fn log_lik(&mut self, logits: Var, x: Var) -> Result<Var> {
        log_lik(&mut self.tape, self.params.config.likelihood, logits, x)
    }

    /// Per-row log N(z; g), n×1.
    pub fn log_normal(&mut self, z: Var, g: GaussVars) -> Result<Var> {
        let t = &mut self.tape;
        let diff = t.sub(z, g.mean)?;
        let sq = t.mul(diff, diff)?;
        let neg = t.neg(g.log_var);
        let inv = t.exp(neg);
        let quad = t.mul(sq, inv)?;
        let terms = t.add(quad, g.log_var)?;
        let summed = t.sum_rows(terms);
        let scaled = t.scale(summed, -0.5);
        let d = self.tape.value(z).cols() as f64;
        Ok(self.tape.add_scalar(scaled, -0.5 * d * LN_2PI))
    }

    /// Per-row closed-form KL(q ‖ p), n×1.
    pub fn kl(&mut self, q: GaussVars, p: GaussVars) -> Result<Var> {
        let t = &mut self.tape;
        let dl = t.sub(q.log_var, p.log_var)?;
        let ratio = t.exp(dl);
        let dm = t.sub(q.mean, p.mean)?;
        let dm2 = t.mul(dm, dm)?;
        let neg_lp = t.neg(p.log_var);
        let inv_p = t.exp(neg_lp);
        let quad = t.mul(dm2, inv_p)?;
        let a = t.add(ratio, quad)?;
        let b = t.sub(a, dl)?;
        let shifted = t.add_scalar(b, -1.0);
        let summed = t.sum_rows(shifted);
        Ok(t.scale(summed, 0.5))
    }

    /// Per-row KL(q ‖ N(0, I)), n×1.
    pub fn kl_standard(&mut self, q: GaussVars) -> Result<Var> {
        let t = &mut self.tape;
        let var = t.exp(q.log_var);
        let m2 = t.mul(q.mean, q.mean)?;
        let a = t.add(var, m2)?;
        let b = t.sub(a, q.log_var)?;
        let shifted = t.add_scalar(b, -1.0);
        let summed = t.sum_rows(shifted);
        Ok(t.scale(summed, 0.5))
    }

    /// Per-row log VampPrior density (n×1): the pseudo-inputs go through
    /// the z2 encoder without dropout and form an equal-weight mixture.
    pub fn vamp_log_density(&mut self, z: Var) -> Result<Var> {
        let pseudo = self.net.pseudo_inputs.ok_or_else(|| {
            Error::Config("model uses the standard prior; it has no pseudo-inputs".into())
        })?;
        let k = self.value(pseudo).rows();
        if k == 0 {
            return Err(Error::Config("the VampPrior needs K >= 1 pseudo-inputs".into()));
        }
        let un = self.tape.l2_normalize_rows(pseudo);
        let h = self.features(un)?;
        let comps = self.head_z2(h)?;
        let pdf = self.tape.pairwise_gauss_log_pdf(z, comps.mean, comps.log_var)?;
        let lse = self.tape.logsumexp_rows(pdf)?;
        Ok(self.tape.add_scalar(lse, -(k as f64).ln()))
    }
}

fn flat_err() -> Error {
    Error::Config("operation requires a two-level model".into())
}

pub(crate) fn log_lik(tape: &mut Tape, kind: Likelihood, logits: Var, x: Var) -> Result<Var> {
    match kind {
        Likelihood::Multinomial => {
            let logp = tape.log_softmax_rows(logits)?;
            let picked = tape.mul(x, logp)?;
            Ok(tape.sum_rows(picked))
        }
        Likelihood::Bernoulli => {
            let on = tape.log_sigmoid(logits);
            let neg = tape.neg(logits);
            let off = tape.log_sigmoid(neg);
            let not_x = tape.value(x).map(|v| 1.0 - v);
            let not_x = tape.leaf(not_x);
            let a = tape.mul(x, on)?;
            let b = tape.mul(not_x, off)?;
            let both = tape.add(a, b)?;
            Ok(tape.sum_rows(both))
        }
    }
}

fn column(m: &Matrix) -> Vec<f64> {
    m.data().to_vec()
}

fn bind_layer<'a>(tape: &mut Tape<'a>, l: &'a Linear<Matrix>) -> Linear<Var> {
    Linear {
        weight: tape.leaf_ref(&l.weight),
        bias: tape.leaf_ref(&l.bias),
    }
}

/// One hidden layer applied to the rows of `x`.
pub fn gated_layer(x: &Matrix, p: &GatedLayer<Matrix>) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xv = tape.leaf_ref(x);
    let l = GatedLayer {
        linear: bind_layer(&mut tape, &p.linear),
        gate: p.gate.as_ref().map(|g| bind_layer(&mut tape, g)),
    };
    let out = layer(&mut tape, xv, &l)?;
    Ok(tape.value(out).clone())
}

fn lik(kind: Likelihood, logits: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    logits.expect_same_shape(x, "logits and interactions")?;
    let mut tape = Tape::new();
    let l = tape.leaf_ref(logits);
    let xv = tape.leaf_ref(x);
    let out = log_lik(&mut tape, kind, l, xv)?;
    Ok(column(tape.value(out)))
}

/// Σ_i x_i log softmax(logits)_i per row; the multinomial coefficient is
/// omitted.
pub fn log_lik_multinomial(logits: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    lik(Likelihood::Multinomial, logits, x)
}

/// Σ_i [x_i log σ(l_i) + (1 − x_i) log σ(−l_i)] per row.
pub fn log_lik_bernoulli(logits: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    lik(Likelihood::Bernoulli, logits, x)
}

impl ModelParams {
    /// q(z2|x) for each row of `x`, without dropout.
    pub fn encode_z2(&self, x: &Matrix) -> Result<GaussianParams> {
        let mut g = Graph::new(self);
        let xn = g.input_eval(x)?;
        let h = g.features(xn)?;
        let q = g.head_z2(h)?;
        Ok(g.gauss(q))
    }

    /// q(z2|x) with input dropout at `dropout_rate`.
    pub fn encode_z2_train<R: Rng + ?Sized>(
        &self,
        x: &Matrix,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<GaussianParams> {
        let mut g = Graph::new(self);
        let xn = g.input(x, Mode::Train { dropout_rate }, rng)?;
        let h = g.features(xn)?;
        let q = g.head_z2(h)?;
        Ok(g.gauss(q))
    }

    /// q(z1|x, z2) for each row, without dropout.
    pub fn encode_z1(&self, x: &Matrix, z2: &Matrix) -> Result<GaussianParams> {
        if !self.config.two_level() {
            return Err(flat_err());
        }
        let mut g = Graph::new(self);
        let xn = g.input_eval(x)?;
        let h = g.features(xn)?;
        let z2 = g.tape.leaf_ref(z2);
        let q = g.encode_z1(h, z2)?;
        Ok(g.gauss(q))
    }

    /// p(z1|z2) for each row of `z2`.
    pub fn prior_z1(&self, z2: &Matrix) -> Result<GaussianParams> {
        if !self.config.two_level() {
            return Err(flat_err());
        }
        let mut g = Graph::new(self);
        let z2 = g.tape.leaf_ref(z2);
        let p = g.prior_z1(z2)?;
        Ok(g.gauss(p))
    }

    /// Logits over all items. Two-level models need `z1`; flat models
    /// decode `z2` alone.
    pub fn decode(&self, z1: Option<&Matrix>, z2: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new(self);
        let z1 = z1.map(|z| g.tape.leaf_ref(z));
        let z2 = g.tape.leaf_ref(z2);
        let logits = g.decode(z1, z2)?;
        Ok(g.value(logits).clone())
    }

    /// log VampPrior density of each row of `z`.
    pub fn vamp_log_density(&self, z: &Matrix) -> Result<Vec<f64>> {
        if z.cols() != self.config.latent_z2 {
            return Err(Error::Shape(format!(
                "latent has {} columns, expected {}",
                z.cols(),
                self.config.latent_z2
            )));
        }
        let mut g = Graph::new(self);
        let zv = g.tape.leaf_ref(z);
        let out = g.vamp_log_density(zv)?;
        Ok(column(g.value(out)))
    }
}
