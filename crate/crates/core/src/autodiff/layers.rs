use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Uniform in ±√(6 / (fan_in + fan_out)) for a `fan_out × fan_in` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(rng: &mut R, fan_out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_out * fan_in)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::from_vec(&[fan_out, fan_in], values).expect("sized by construction")
}

/// Fully connected layer storing `{name}.weight` (out×in) and `{name}.bias`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub name: String,
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        name: impl Into<String>,
        input: usize,
        output: usize,
        activation: Activation,
    ) -> Self {
        Dense {
            name: name.into(),
            input,
            output,
            activation,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        params.insert(
            self.weight_name(),
            xavier_uniform(rng, self.output, self.input),
        );
        params.insert(self.bias_name(), Tensor::vector(vec![0.0; self.output]));
    }

    /// `activation(x · Wᵀ + b)` for a batch `x: n×input`.
    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, x: Var) -> Result<Var> {
        let w = tape.param(params, &self.weight_name())?;
        let b = tape.param(params, &self.bias_name())?;
        let z = tape.matmul_t(x, w)?;
        let z = tape.add_bias(z, b)?;
        Ok(self.activation.apply(tape, z))
    }
}

/// LSTM layer storing `{name}.w_ih` (4h×d), `{name}.w_hh` (4h×h) and
/// `{name}.bias` (4h). Gate blocks are ordered input, forget, output,
/// candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

/// Per-step outputs of an unrolled LSTM on a tape.
pub struct LstmTrace {
    pub hidden_states: Vec<Var>,
    /// Per step: sigmoid gates (input, forget, output) and tanh candidate.
    pub gates: Vec<(Var, Var)>,
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Lstm {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn param_names(&self) -> [String; 3] {
        [
            format!("{}.w_ih", self.name),
            format!("{}.w_hh", self.name),
            format!("{}.bias", self.name),
        ]
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) {
        let h = self.hidden;
        let [w_ih, w_hh, bias] = self.param_names();
        params.insert(w_ih, xavier_uniform(rng, 4 * h, self.input));
        params.insert(w_hh, xavier_uniform(rng, 4 * h, h));
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        params.insert(bias, Tensor::vector(b));
    }

    /// Unroll over `steps` time steps. `inputs` stacks the sequence
    /// step-major: rows `t·batch .. (t+1)·batch` hold step `t`.
    /// Missing initial states are zeros.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        params: &ParameterSet,
        inputs: Var,
        steps: usize,
        batch: usize,
        initial: Option<(Var, Var)>,
    ) -> Result<LstmTrace> {
        let h = self.hidden;
        let xv = tape.value(inputs);
        if xv.cols() != self.input || xv.rows() != steps * batch {
            return Err(Error::Shape {
                op: "lstm",
                expected: format!("{}×{}", steps * batch, self.input),
                got: format!("{}×{}", xv.rows(), xv.cols()),
            });
        }
        let [w_ih, w_hh, bias] = self.param_names();
        let w_ih = tape.param(params, &w_ih)?;
        let w_hh = tape.param(params, &w_hh)?;
        let bias = tape.param(params, &bias)?;

        if steps == 0 {
            let (h0, c0) = match initial {
                Some(s) => s,
                None => {
                    let h0 = tape.input(Tensor::zeros(&[batch, h]));
                    let c0 = tape.input(Tensor::zeros(&[batch, h]));
                    (h0, c0)
                }
            };
            return Ok(LstmTrace {
                hidden_states: Vec::new(),
                gates: Vec::new(),
                h: h0,
                c: c0,
            });
        }

        // Input projections for every step in one product.
        let projected = tape.matmul_t(inputs, w_ih)?;
        let mut state = initial;
        let mut hidden_states = Vec::with_capacity(steps);
        let mut gates_out = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut pre = tape.slice_rows(projected, t * batch, batch)?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul_t(h_prev, w_hh)?;
                pre = tape.add(pre, rec)?;
            }
            let pre = tape.add_bias(pre, bias)?;
            let sig = tape.slice_cols(pre, 0, 3 * h)?;
            let sig = tape.sigmoid(sig);
            let cand = tape.slice_cols(pre, 3 * h, h)?;
            let cand = tape.tanh(cand);
            let i = tape.slice_cols(sig, 0, h)?;
            let f = tape.slice_cols(sig, h, h)?;
            let o = tape.slice_cols(sig, 2 * h, h)?;
            let ig = tape.mul(i, cand)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let h_t = tape.mul(o, tc)?;
            hidden_states.push(h_t);
            gates_out.push((sig, cand));
            state = Some((h_t, c));
        }
        let (h_last, c_last) = state.expect("steps > 0");
        Ok(LstmTrace {
            hidden_states,
            gates: gates_out,
            h: h_last,
            c: c_last,
        })
    }
}

/// Standalone LSTM cell weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCellParams {
    /// 4h×d, gate blocks ordered input, forget, output, candidate.
    pub w_ih: Tensor,
    /// 4h×h.
    pub w_hh: Tensor,
    /// 4h.
    pub bias: Tensor,
    pub hidden: usize,
    pub input: usize,
}

impl LstmCellParams {
    pub fn new(w_ih: Tensor, w_hh: Tensor, bias: Tensor) -> Result<Self> {
        let hidden = w_hh.cols();
        let input = w_ih.cols();
        let ok = w_ih.rows() == 4 * hidden && w_hh.rows() == 4 * hidden && bias.len() == 4 * hidden;
        if !ok {
            return Err(Error::Shape {
                op: "lstm params",
                expected: format!("w_ih 4h×d, w_hh 4h×h, bias 4h with h = {hidden}"),
                got: format!("{:?} {:?} {:?}", w_ih.shape(), w_hh.shape(), bias.shape()),
            });
        }
        Ok(LstmCellParams {
            w_ih,
            w_hh,
            bias,
            hidden,
            input,
        })
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_ih: Tensor::zeros(&[4 * hidden, input]),
            w_hh: Tensor::zeros(&[4 * hidden, hidden]),
            bias: Tensor::vector(vec![0.0; 4 * hidden]),
            hidden,
            input,
        }
    }

    /// Glorot-uniform weights, zero biases except forget gates at 1.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let layer = Lstm::new("cell", input, hidden);
        let mut ps = ParameterSet::new();
        layer.init(&mut ps, rng);
        Self::from_set(&ps, "cell").expect("just initialized")
    }

    pub fn from_set(params: &ParameterSet, name: &str) -> Result<Self> {
        let layer = Lstm::new(name, 0, 0);
        let [a, b, c] = layer.param_names();
        Self::new(
            params.value(&a)?.clone(),
            params.value(&b)?.clone(),
            params.value(&c)?.clone(),
        )
    }

    pub fn to_set(&self, params: &mut ParameterSet, name: &str) {
        let [a, b, c] = Lstm::new(name, self.input, self.hidden).param_names();
        params.insert(a, self.w_ih.clone());
        params.insert(b, self.w_hh.clone());
        params.insert(c, self.bias.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmOutput {
    /// w×h, one row per step.
    pub hidden_states: Tensor,
    /// w×4h activated gates per step (input, forget, output, candidate).
    pub gates: Tensor,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Run an LSTM cell over a `w×d` sequence.
pub fn lstm_forward(
    sequence: &Tensor,
    params: &LstmCellParams,
    h0: Option<&[f64]>,
    c0: Option<&[f64]>,
) -> Result<LstmOutput> {
    let (w, d, h) = (sequence.rows(), sequence.cols(), params.hidden);
    let empty = sequence.is_empty();
    if !empty && d != params.input {
        return Err(Error::Shape {
            op: "lstm_forward",
            expected: format!("{} input columns", params.input),
            got: d.to_string(),
        });
    }
    for s in [h0, c0].into_iter().flatten() {
        if s.len() != h {
            return Err(Error::Shape {
                op: "lstm_forward",
                expected: format!("initial state of length {h}"),
                got: s.len().to_string(),
            });
        }
    }
    let h0 = h0.map_or_else(|| vec![0.0; h], <[f64]>::to_vec);
    let c0 = c0.map_or_else(|| vec![0.0; h], <[f64]>::to_vec);
    let steps = if empty { 0 } else { w };
    if steps == 0 {
        return Ok(LstmOutput {
            hidden_states: Tensor::zeros(&[0, h]),
            gates: Tensor::zeros(&[0, 4 * h]),
            h: h0,
            c: c0,
        });
    }

    let mut ps = ParameterSet::new();
    params.to_set(&mut ps, "cell");
    let layer = Lstm::new("cell", params.input, h);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::matrix(
        steps,
        params.input,
        sequence.values().to_vec(),
    )?);
    let hv = tape.input(Tensor::matrix(1, h, h0)?);
    let cv = tape.input(Tensor::matrix(1, h, c0)?);
    let trace = layer.unroll(&mut tape, &ps, x, steps, 1, Some((hv, cv)))?;

    let mut hs = Vec::with_capacity(steps * h);
    let mut gs = Vec::with_capacity(steps * 4 * h);
    for (hvar, (sig, cand)) in trace.hidden_states.iter().zip(&trace.gates) {
        hs.extend_from_slice(tape.value(*hvar).values());
        gs.extend_from_slice(tape.value(*sig).values());
        gs.extend_from_slice(tape.value(*cand).values());
    }
    Ok(LstmOutput {
        hidden_states: Tensor::matrix(steps, h, hs)?,
        gates: Tensor::matrix(steps, 4 * h, gs)?,
        h: tape.value(trace.h).values().to_vec(),
        c: tape.value(trace.c).values().to_vec(),
    })
}

/// `activation(W · x + b)` for a single input vector.
pub fn dense_forward(
    input: &[f64],
    weights: &Tensor,
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    if weights.cols() != input.len() || weights.rows() != bias.len() {
        return Err(Error::Shape {
            op: "dense_forward",
            expected: format!("weights {}×{}", bias.len(), input.len()),
            got: format!("{:?}", weights.shape()),
        });
    }
    let mut ps = ParameterSet::new();
    ps.insert("d.weight", weights.clone());
    ps.insert("d.bias", Tensor::vector(bias.to_vec()));
    let layer = Dense::new("d", input.len(), bias.len(), activation);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::matrix(1, input.len(), input.to_vec())?);
    let y = layer.forward(&mut tape, &ps, x)?;
    Ok(tape.value(y).values().to_vec())
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op,
            expected: a.len().to_string(),
            got: b.len().to_string(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

pub fn mse_loss(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_pair("mse_loss", predictions, targets)?;
    let mut tape = Tape::new();
    let p = tape.input(Tensor::vector(predictions.to_vec()));
    let l = tape.mse(p, Tensor::vector(targets.to_vec()))?;
    Ok(tape.value(l).values()[0])
}

pub fn bce_loss(probabilities: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair("bce_loss", probabilities, labels)?;
    let mut tape = Tape::new();
    let p = tape.input(Tensor::vector(probabilities.to_vec()));
    let l = tape.bce(p, Tensor::vector(labels.to_vec()))?;
    Ok(tape.value(l).values()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckReport};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let p = LstmCellParams::zeros(3, 4);
        let x = Tensor::matrix(5, 3, (0..15).map(f64::from).collect()).unwrap();
        let out = lstm_forward(&x, &p, None, None).unwrap();
        assert!(out.hidden_states.values().iter().all(|&v| v == 0.0));
        assert!(out.c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_sequence_returns_initial_state() {
        let p = LstmCellParams::zeros(2, 3);
        let out = lstm_forward(
            &Tensor::zeros(&[0, 2]),
            &p,
            Some(&[0.1, 0.2, 0.3]),
            Some(&[1.0, 2.0, 3.0]),
        )
        .unwrap();
        assert_eq!(out.hidden_states.rows(), 0);
        assert_eq!(out.h, vec![0.1, 0.2, 0.3]);
        assert_eq!(out.c, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmCellParams::init(5, 4, &mut rng);
        let b = p.bias.values();
        assert!(b[..4].iter().all(|&x| x == 0.0));
        assert!(b[4..8].iter().all(|&x| x == 1.0));
        assert!(b[8..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lstm_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, d, h) = (3, 2, 3);
        let x = random_tensor(&mut rng, w, d);
        let p = LstmCellParams::new(
            random_tensor(&mut rng, 4 * h, d),
            random_tensor(&mut rng, 4 * h, h),
            Tensor::vector((0..4 * h).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        )
        .unwrap();
        let out = lstm_forward(&x, &p, None, None).unwrap();

        let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
        for t in 0..w {
            let mut z = vec![0.0; 4 * h];
            for (r, zr) in z.iter_mut().enumerate() {
                *zr = p.bias.values()[r];
                for k in 0..d {
                    *zr += p.w_ih.at(r, k) * x.at(t, k);
                }
                for k in 0..h {
                    *zr += p.w_hh.at(r, k) * hp[k];
                }
            }
            let mut hn = vec![0.0; h];
            for j in 0..h {
                let (i, f, o, g) = (
                    sig(z[j]),
                    sig(z[h + j]),
                    sig(z[2 * h + j]),
                    z[3 * h + j].tanh(),
                );
                cp[j] = f * cp[j] + i * g;
                hn[j] = o * cp[j].tanh();
                assert!((out.hidden_states.at(t, j) - hn[j]).abs() < 1e-12);
                assert!((out.gates.at(t, j) - i).abs() < 1e-12);
                assert!((out.gates.at(t, 3 * h + j) - g).abs() < 1e-12);
            }
            hp = hn;
        }
        for j in 0..h {
            assert!((out.h[j] - hp[j]).abs() < 1e-12);
            assert!((out.c[j] - cp[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_shape_errors() {
        let p = LstmCellParams::zeros(3, 2);
        assert!(matches!(
            lstm_forward(&Tensor::zeros(&[4, 2]), &p, None, None),
            Err(Error::Shape { .. })
        ));
        assert!(lstm_forward(&Tensor::zeros(&[4, 3]), &p, Some(&[0.0]), None).is_err());
        assert!(LstmCellParams::new(
            Tensor::zeros(&[8, 3]),
            Tensor::zeros(&[8, 2]),
            Tensor::vector(vec![0.0; 7])
        )
        .is_err());
    }

    #[test]
    fn dense_cases() {
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let x = [0.5, -2.0, 7.0];
        assert_eq!(
            dense_forward(&x, &eye, &[0.0; 3], Activation::Identity).unwrap(),
            x.to_vec()
        );
        let zero = Tensor::zeros(&[2, 3]);
        assert_eq!(
            dense_forward(&x, &zero, &[0.0; 2], Activation::Sigmoid).unwrap(),
            vec![0.5, 0.5]
        );
        assert!(dense_forward(&x, &zero, &[0.0; 3], Activation::Identity).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_tensor(&mut rng, 4, 3);
        let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for act in [
            Activation::Identity,
            Activation::Relu,
            Activation::Sigmoid,
            Activation::Tanh,
        ] {
            let got = dense_forward(&x, &w, &b, act).unwrap();
            for r in 0..4 {
                let mut z = b[r];
                for k in 0..3 {
                    z += w.at(r, k) * x[k];
                }
                let want = match act {
                    Activation::Identity => z,
                    Activation::Relu => z.max(0.0),
                    Activation::Sigmoid => sig(z),
                    Activation::Tanh => z.tanh(),
                };
                assert!((got[r] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_cases() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((bce_loss(&[0.5], &[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.5], &[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(mse_loss(&[], &[]), Err(Error::EmptyInput(_))));
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..50).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
        let mse: f64 = p
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 50.0;
        let bce: f64 = -p
            .iter()
            .zip(&y)
            .map(|(p, y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / 50.0;
        assert!((mse_loss(&p, &t).unwrap() - mse).abs() < 1e-12);
        assert!((bce_loss(&p, &y).unwrap() - bce).abs() < 1e-12);
    }

    fn lstm_dense_check(seed: u64, corrupt: bool) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (steps, batch, d, h) = (4, 3, 5, 6);
        let lstm = Lstm::new("lstm", d, h);
        let head = Dense::new("head", h, 1, Activation::Identity);
        let mut params = ParameterSet::new();
        lstm.init(&mut params, &mut rng);
        head.init(&mut params, &mut rng);
        let x = random_tensor(&mut rng, steps * batch, d);
        let y = random_tensor(&mut rng, batch, 1);
        grad_check(
            &params,
            |ps| {
                ps.zero_grad();
                let mut tape = Tape::new();
                let xv = tape.input(x.clone());
                let trace = lstm.unroll(&mut tape, ps, xv, steps, batch, None)?;
                let out = head.forward(&mut tape, ps, trace.h)?;
                let loss = tape.mse(out, y.clone())?;
                tape.backward(loss, ps)?;
                if corrupt {
                    for (_, p) in ps.iter_mut() {
                        if let Some(g) = p.grad.as_mut() {
                            g.values_mut().iter_mut().for_each(|v| *v *= 2.0);
                        }
                    }
                }
                Ok(tape.value(loss).values()[0])
            },
            1e-5,
            64,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn lstm_dense_gradients_match_finite_differences() {
        for seed in 0..5 {
            let report = lstm_dense_check(seed, false);
            assert!(report.passes(1e-4), "seed {seed}: {:?}", report);
            assert_eq!(report.per_tensor.len(), 5);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let report = lstm_dense_check(1, true);
        assert!(report.max_relative_error() > 0.3);
    }
}
