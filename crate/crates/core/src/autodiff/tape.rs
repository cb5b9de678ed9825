//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the tape
//! in reverse and accumulates parameter gradients into a [`ParameterSet`].
//! Tensors are treated as matrices with rows = batch. Nodes built only from
//! inputs carry no gradient and are skipped during the backward sweep.

use std::collections::HashMap;

use super::tensor::gemm;
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    /// `a · bᵀ` with `a: n×k`, `b: m×k`.
    MatMulT(Var, Var),
    Add(Var, Var),
    /// `a: n×m` plus a length-`m` bias on every row.
    AddBias(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    Mse(Var, Tensor),
    Bce(Var, Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the
/// cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(op: &'static str, expected: String, got: String) -> Error {
    Error::Shape { op, expected, got }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf bound to `params[name]`. Repeated calls with the same
    /// name return the same node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params.value(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()), true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a · wᵀ` for `a: n×k` and `w: m×k`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        let (n, k, m) = (av.rows(), av.cols(), wv.rows());
        if wv.cols() != k {
            return Err(shape_err(
                "matmul",
                format!("right operand with {k} columns"),
                format!("{:?}", wv.shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            av.values(),
            (k as isize, 1),
            wv.values(),
            (1, k as isize),
            0.0,
            &mut out,
        );
        let rg = self.needs(&[a, w]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulT(a, w), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.rows() != sb.rows() || sa.cols() != sb.cols() {
            return Err(shape_err(
                op,
                format!("{:?}", sa.shape()),
                format!("{:?}", sb.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let m = av.cols();
        if bv.len() != m {
            return Err(shape_err(
                "add_bias",
                format!("bias of length {m}"),
                bv.len().to_string(),
            ));
        }
        let mut out = av.clone();
        for row in out.values_mut().chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(bv.values()) {
                *x += b;
            }
        }
        let rg = self.needs(&[a, bias]);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a)
                .values()
                .iter()
                .zip(self.value(b).values())
                .map(|(x, y)| x * y)
                .collect(),
        )?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.needs(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.needs(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if start + len > m {
            return Err(shape_err(
                "slice_cols",
                format!("at most {m} columns"),
                format!("{start}+{len}"),
            ));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&av.values()[r * m + start..r * m + start + len]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(n, len, out)?, Op::SliceCols(a, start), rg))
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if start + len > n {
            return Err(shape_err(
                "slice_rows",
                format!("at most {n} rows"),
                format!("{start}+{len}"),
            ));
        }
        let out = av.values()[start * m..(start + len) * m].to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::matrix(len, m, out)?, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or(Error::EmptyInput("concat_cols"))?;
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != n {
                return Err(shape_err(
                    "concat_cols",
                    format!("{n} rows"),
                    format!("{:?}", v.shape()),
                ));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::matrix(n, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Mean squared error against constant targets of the same shape.
    pub fn mse(&mut self, pred: Var, targets: Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != targets.len() {
            return Err(shape_err(
                "mse",
                pv.len().to_string(),
                targets.len().to_string(),
            ));
        }
        if pv.is_empty() {
            return Err(Error::EmptyInput("mse"));
        }
        let loss = pv
            .values()
            .iter()
            .zip(targets.values())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / pv.len() as f64;
        let rg = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, targets), rg))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce(&mut self, prob: Var, labels: Tensor) -> Result<Var> {
        let pv = self.value(prob);
        if pv.len() != labels.len() {
            return Err(shape_err(
                "bce",
                pv.len().to_string(),
                labels.len().to_string(),
            ));
        }
        if pv.is_empty() {
            return Err(Error::EmptyInput("bce"));
        }
        let loss = pv
            .values()
            .iter()
            .zip(labels.values())
            .map(|(&p, &y)| bce_term(p, y))
            .sum::<f64>()
            / pv.len() as f64;
        let rg = self.needs(&[prob]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce(prob, labels), rg))
    }

    /// Accumulate d`loss`/d`param` into `params` for every parameter node.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::State(
                "backward called before any forward pass".into(),
            ));
        };
        if node.value.len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(node.value.shape(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(name) => params.accumulate_grad(name, &g)?,
                Op::MatMulT(a, w) => {
                    let (av, wv) = (self.value(*a), self.value(*w));
                    let (n, k, m) = (av.rows(), av.cols(), wv.rows());
                    if self.nodes[a.0].requires_grad {
                        // dA = dC · W
                        let mut da = vec![0.0; n * k];
                        gemm(
                            n,
                            m,
                            k,
                            g.values(),
                            (m as isize, 1),
                            wv.values(),
                            (k as isize, 1),
                            0.0,
                            &mut da,
                        );
                        accumulate(&mut grads, *a, Tensor::matrix(n, k, da)?);
                    }
                    if self.nodes[w.0].requires_grad {
                        // dW = dCᵀ · A
                        let mut dw = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            g.values(),
                            (1, m as isize),
                            av.values(),
                            (k as isize, 1),
                            0.0,
                            &mut dw,
                        );
                        accumulate(&mut grads, *w, Tensor::from_vec(wv.shape(), dw)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, reshape_like(&g, self.value(*b))?);
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, reshape_like(&g, self.value(*a))?);
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.nodes[bias.0].requires_grad {
                        let bv = self.value(*bias);
                        let m = bv.len();
                        let mut db = vec![0.0; m];
                        for row in g.values().chunks(m) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        accumulate(&mut grads, *bias, Tensor::from_vec(bv.shape(), db)?);
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let d = zip_map(&g, self.value(*b), |g, y| g * y);
                        accumulate(&mut grads, *a, d);
                    }
                    if self.nodes[b.0].requires_grad {
                        let d = zip_map(&g, self.value(*a), |g, x| g * x);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * y * (1.0 - y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let d = zip_map(&g, &node.value, |g, y| g * (1.0 - y * y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, &node.value, |g, y| if y > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (n, m) = (av.rows(), av.cols());
                    let len = g.cols();
                    let mut d = vec![0.0; n * m];
                    for r in 0..n {
                        d[r * m + start..r * m + start + len].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape(), d)?);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let m = av.cols();
                    let mut d = vec![0.0; av.len()];
                    d[start * m..start * m + g.len()].copy_from_slice(g.values());
                    accumulate(&mut grads, *a, Tensor::from_vec(av.shape(), d)?);
                }
                Op::ConcatCols(parts) => {
                    let n = g.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let c = pv.cols();
                        if self.nodes[p.0].requires_grad {
                            let mut d = Vec::with_capacity(n * c);
                            for r in 0..n {
                                d.extend_from_slice(&g.row(r)[offset..offset + c]);
                            }
                            accumulate(&mut grads, *p, Tensor::from_vec(pv.shape(), d)?);
                        }
                        offset += c;
                    }
                }
                Op::Mse(pred, targets) => {
                    let pv = self.value(*pred);
                    let scale = g.values()[0] * 2.0 / pv.len() as f64;
                    let d = zip_map(pv, targets, |p, t| scale * (p - t));
                    accumulate(&mut grads, *pred, d);
                }
                Op::Bce(prob, labels) => {
                    let pv = self.value(*prob);
                    let scale = g.values()[0] / pv.len() as f64;
                    let d = zip_map(pv, labels, |p, y| {
                        if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                            0.0
                        } else {
                            scale * ((1.0 - y) / (1.0 - p) - y / p)
                        }
                    });
                    accumulate(&mut grads, *prob, d);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(b.shape(), values).expect("zip_map over equal-length tensors")
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(like.shape(), g.values().to_vec())
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps_with(name: &str, t: Tensor) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert(name, t);
        ps
    }

    #[test]
    fn backward_requires_forward() {
        let tape = Tape::new();
        let mut ps = ParameterSet::new();
        assert!(matches!(
            tape.backward(Var(0), &mut ps),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let mut ps = ps_with("w", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let w = tape.param(&ps, "w").unwrap();
        assert!(matches!(tape.backward(w, &mut ps), Err(Error::State(_))));
    }

    #[test]
    fn mse_gradient_closed_form() {
        let preds = vec![0.3, -1.2, 2.5, 0.0, 7.1];
        let targets = vec![1.0, -1.0, 2.0, 0.5, 6.0];
        let mut ps = ps_with("p", Tensor::matrix(5, 1, preds.clone()).unwrap());
        let mut tape = Tape::new();
        let p = tape.param(&ps, "p").unwrap();
        let loss = tape
            .mse(p, Tensor::matrix(5, 1, targets.clone()).unwrap())
            .unwrap();
        tape.backward(loss, &mut ps).unwrap();
        let g = ps.grad("p").unwrap();
        for i in 0..5 {
            let want = 2.0 * (preds[i] - targets[i]) / 5.0;
            assert!((g.values()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut ps = ps_with("used", Tensor::matrix(1, 1, vec![2.0]).unwrap());
        ps.insert("unused", Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let mut tape = Tape::new();
        let u = tape.param(&ps, "used").unwrap();
        let _ = tape.param(&ps, "unused").unwrap();
        let loss = tape.mse(u, Tensor::scalar(0.0)).unwrap();
        tape.backward(loss, &mut ps).unwrap();
        assert_eq!(ps.grad("unused").unwrap().values(), &[0.0]);
        assert_eq!(ps.grad("used").unwrap().values(), &[4.0]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.input(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(tape.matmul_t(a, b).is_err());
        assert!(tape.add(a, b).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
        assert!(tape.slice_rows(a, 1, 2).is_err());
        let bias = tape.input(Tensor::vector(vec![0.0; 2]));
        assert!(tape.add_bias(a, bias).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
