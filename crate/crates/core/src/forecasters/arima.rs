use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::linreg::fit_ols;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::ingest::UserId;

/// Users with fewer valid days are left out of the ARIMA protocol.
pub const ARIMA_MIN_DAYS: usize = 20;

/// Share of each user's series used for fitting in the protocol.
const FIT_FRACTION: f64 = 0.7;
const SCALE_FLOOR: f64 = 1e-8;
const MAX_ITERATIONS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArimaOrder {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl ArimaOrder {
    pub const RANDOM_WALK: ArimaOrder = ArimaOrder { p: 0, d: 1, q: 0 };

    pub fn new(p: usize, d: usize, q: usize) -> Self {
        ArimaOrder { p, d, q }
    }
}

/// Fitted coefficients on the standardized differenced series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaFit {
    pub order: ArimaOrder,
    /// Order originally asked for; differs from `order` after a fallback.
    pub requested: ArimaOrder,
    pub center: f64,
    pub scale: f64,
    /// Zero unless `d = 0`.
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// Mean squared one-step residual on the standardized scale.
    pub css: f64,
    pub residual_count: usize,
}

impl ArimaFit {
    pub fn fell_back(&self) -> bool {
        self.order != self.requested
    }
}

fn difference(series: &[f64], d: usize) -> Vec<f64> {
    let mut x = series.to_vec();
    for _ in 0..d {
        x = x.windows(2).map(|p| p[1] - p[0]).collect();
    }
    x
}

/// True when every root of `1 − Σ aᵢ zⁱ` lies outside the unit circle,
/// checked by stepping the coefficients down to reflection coefficients.
fn roots_outside_unit_circle(coefs: &[f64]) -> bool {
    let mut a = coefs.to_vec();
    while let Some(&r) = a.last() {
        if !r.is_finite() || r.abs() >= 1.0 {
            return false;
        }
        let k = a.len();
        let denom = 1.0 - r * r;
        let prev: Vec<f64> = (0..k - 1)
            .map(|i| (a[i] + r * a[k - 2 - i]) / denom)
            .collect();
        a = prev;
    }
    true
}

fn is_admissible(ar: &[f64], ma: &[f64]) -> bool {
    let neg_ma: Vec<f64> = ma.iter().map(|t| -t).collect();
    roots_outside_unit_circle(ar) && roots_outside_unit_circle(&neg_ma)
}

struct Css<'a> {
    x: &'a [f64],
    p: usize,
    q: usize,
    with_intercept: bool,
}

impl Css<'_> {
    fn dim(&self) -> usize {
        usize::from(self.with_intercept) + self.p + self.q
    }

    fn unpack<'b>(&self, beta: &'b [f64]) -> (f64, &'b [f64], &'b [f64]) {
        let o = usize::from(self.with_intercept);
        let c = if self.with_intercept { beta[0] } else { 0.0 };
        (c, &beta[o..o + self.p], &beta[o + self.p..])
    }

    /// Mean squared residual and its gradient.
    fn evaluate(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let (c, ar, ma) = self.unpack(beta);
        let (n, k, o) = (self.x.len(), self.dim(), usize::from(self.with_intercept));
        let mut e = vec![0.0; n];
        let mut de = vec![vec![0.0; k]; n];
        let mut sse = 0.0;
        let mut grad = vec![0.0; k];
        for t in self.p..n {
            let mut pred = c;
            for (i, phi) in ar.iter().enumerate() {
                pred += phi * self.x[t - 1 - i];
            }
            for (j, theta) in ma.iter().enumerate() {
                if t > j {
                    pred += theta * e[t - 1 - j];
                }
            }
            e[t] = self.x[t] - pred;
            let mut d = vec![0.0; k];
            if self.with_intercept {
                d[0] = -1.0;
            }
            for i in 0..self.p {
                d[o + i] = -self.x[t - 1 - i];
            }
            for j in 0..self.q {
                if t > j {
                    d[o + self.p + j] = -e[t - 1 - j];
                }
            }
            for (j, theta) in ma.iter().enumerate() {
                if t > j {
                    for (dv, prev) in d.iter_mut().zip(&de[t - 1 - j]) {
                        *dv -= theta * prev;
                    }
                }
            }
            sse += e[t] * e[t];
            for (g, dv) in grad.iter_mut().zip(&d) {
                *g += 2.0 * e[t] * dv;
            }
            de[t] = d;
        }
        let m = (n - self.p) as f64;
        (sse / m, grad.into_iter().map(|g| g / m).collect())
    }
}

fn standardize(x: &[f64], centered: bool) -> (f64, f64, Vec<f64>) {
    let n = x.len().max(1) as f64;
    let center = if centered {
        x.iter().sum::<f64>() / n
    } else {
        0.0
    };
    let scale = (x.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(SCALE_FLOOR);
    (
        center,
        scale,
        x.iter().map(|v| (v - center) / scale).collect(),
    )
}

/// Autoregressive least-squares start for the AR part.
fn ols_start(x: &[f64], p: usize, with_intercept: bool) -> Result<(f64, Vec<f64>)> {
    if p == 0 {
        let c = if with_intercept && !x.is_empty() {
            x.iter().sum::<f64>() / x.len() as f64
        } else {
            0.0
        };
        return Ok((c, Vec::new()));
    }
    let rows = x.len() - p;
    let design: Vec<f64> = (p..x.len())
        .flat_map(|t| (1..=p).map(move |i| x[t - i]))
        .collect();
    if with_intercept {
        let fit = fit_ols(&Tensor::matrix(rows, p, design)?, &x[p..])?;
        Ok((fit.intercept, fit.coefficients))
    } else {
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        for t in p..x.len() {
            for i in 0..p {
                rhs[i] += x[t - 1 - i] * x[t];
                for j in 0..p {
                    gram[i * p + j] += x[t - 1 - i] * x[t - 1 - j];
                }
            }
        }
        for i in 0..p {
            gram[i * p + i] += super::RIDGE_LAMBDA;
        }
        Ok((0.0, solve_small(gram, rhs, p)))
    }
}

/// Gaussian elimination with partial pivoting for tiny systems.
fn solve_small(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("nonempty");
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let d = a[col * n + col];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
        let d = a[r * n + r];
        x[r] = if d.abs() < 1e-300 {
            0.0
        } else {
            (b[r] - s) / d
        };
    }
    x
}

/// Conditional-sum-of-squares fit: difference `d` times, standardize, then
/// gradient descent with backtracking from the least-squares AR start.
/// Orders whose fit is not stationary and invertible fall back to (0,1,0).
pub fn fit_arima(series: &[f64], order: ArimaOrder) -> Result<ArimaFit> {
    let need = order.p + order.d + order.q + 10;
    if series.len() <= need {
        return Err(Error::SeriesTooShort {
            len: series.len(),
            need,
        });
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("ARIMA input at index {i}"),
        });
    }
    let fit = fit_css(series, order)?;
    if is_admissible(&fit.ar, &fit.ma) && fit.css.is_finite() {
        return Ok(fit);
    }
    warn!("ARIMA{order:?} fit is not stationary and invertible, using (0,1,0)");
    let mut fallback = fit_css(series, ArimaOrder::RANDOM_WALK)?;
    fallback.requested = order;
    Ok(fallback)
}

fn fit_css(series: &[f64], order: ArimaOrder) -> Result<ArimaFit> {
    let with_intercept = order.d == 0;
    let (center, scale, x) = standardize(&difference(series, order.d), with_intercept);
    let css = Css {
        x: &x,
        p: order.p,
        q: order.q,
        with_intercept,
    };
    let (c0, mut ar0) = ols_start(&x, order.p, with_intercept)?;
    if !roots_outside_unit_circle(&ar0) {
        ar0.iter_mut().for_each(|a| *a = 0.0);
    }
    let mut beta: Vec<f64> = Vec::with_capacity(css.dim());
    if with_intercept {
        beta.push(c0);
    }
    beta.extend(ar0);
    beta.extend(std::iter::repeat_n(0.0, order.q));

    let (mut loss, mut grad) = css.evaluate(&beta);
    let mut step: f64 = 1.0;
    if !beta.is_empty() {
        for _ in 0..MAX_ITERATIONS {
            let g2: f64 = grad.iter().map(|g| g * g).sum();
            if g2 < 1e-20 {
                break;
            }
            let mut accepted = None;
            let mut trial_step = (step * 2.0).min(10.0);
            for _ in 0..60 {
                let trial: Vec<f64> = beta
                    .iter()
                    .zip(&grad)
                    .map(|(b, g)| b - trial_step * g)
                    .collect();
                let (_, ar, ma) = css.unpack(&trial);
                if is_admissible(ar, ma) {
                    let (l, g) = css.evaluate(&trial);
                    if l.is_finite() && l <= loss - 1e-4 * trial_step * g2 {
                        accepted = Some((trial, l, g));
                        break;
                    }
                }
                trial_step *= 0.5;
            }
            let Some((b, l, g)) = accepted else { break };
            let improvement = loss - l;
            beta = b;
            grad = g;
            step = trial_step;
            loss = l;
            if improvement <= 1e-14 * loss.max(1e-300) {
                break;
            }
        }
    }
    let (c, ar, ma) = css.unpack(&beta);
    Ok(ArimaFit {
        order,
        requested: order,
        center,
        scale,
        intercept: c,
        ar: ar.to_vec(),
        ma: ma.to_vec(),
        css: loss,
        residual_count: x.len() - order.p,
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// One-step forecast after `history` (raw units), with residuals rebuilt
/// over the history and differencing integrated back.
pub fn forecast_one(fit: &ArimaFit, history: &[f64]) -> Result<f64> {
    let ArimaOrder { p, d, .. } = fit.order;
    let need = (d + p).max(1);
    if history.len() < need {
        return Err(Error::SeriesTooShort {
            len: history.len(),
            need: need - 1,
        });
    }
    let x: Vec<f64> = difference(history, d)
        .iter()
        .map(|v| (v - fit.center) / fit.scale)
        .collect();
    let n = x.len();
    let mut e = vec![0.0; n];
    let one_step = |t: usize, e: &[f64]| {
        let mut pred = fit.intercept;
        for (i, phi) in fit.ar.iter().enumerate() {
            if t > i {
                pred += phi * x[t - 1 - i];
            }
        }
        for (j, theta) in fit.ma.iter().enumerate() {
            if t > j {
                pred += theta * e[t - 1 - j];
            }
        }
        pred
    };
    for t in p..n {
        e[t] = x[t] - one_step(t, &e);
    }
    let step = fit.center + fit.scale * one_step(n, &e);
    let len = history.len();
    let level: f64 = (1..=d)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * binomial(d, k) * history[len - k]
        })
        .sum();
    let forecast = level + step;
    if !forecast.is_finite() {
        return Err(Error::NonFinite {
            context: "ARIMA forecast".into(),
        });
    }
    Ok(forecast)
}

/// Order with the lowest conditional-sum-of-squares AIC over
/// p, q ∈ {0..3}, d ∈ {0, 1}.
pub fn select_order_aic(series: &[f64]) -> Result<ArimaOrder> {
    let mut best: Option<(f64, ArimaOrder)> = None;
    for d in 0..=1 {
        for p in 0..=3 {
            for q in 0..=3 {
                let order = ArimaOrder { p, d, q };
                let Ok(fit) = fit_arima(series, order) else {
                    continue;
                };
                if fit.fell_back() {
                    continue;
                }
                let k = (p + q + usize::from(d == 0)) as f64;
                let m = fit.residual_count as f64;
                let var = (fit.css * fit.scale * fit.scale).max(1e-300);
                let aic = m * var.ln() + 2.0 * k;
                if best.is_none_or(|(b, _)| aic < b) {
                    best = Some((aic, order));
                }
            }
        }
    }
    best.map(|(_, o)| o).ok_or(Error::SeriesTooShort {
        len: series.len(),
        need: 10,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArimaUserForecasts {
    pub fit: ArimaFit,
    pub predictions: Vec<f64>,
    pub actuals: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArimaEvaluation {
    pub per_user: BTreeMap<UserId, ArimaUserForecasts>,
    pub excluded: Vec<UserId>,
}

impl ArimaEvaluation {
    /// Absolute errors pooled over users in user order.
    pub fn absolute_errors(&self) -> Vec<f64> {
        self.per_user
            .values()
            .flat_map(|u| {
                u.predictions
                    .iter()
                    .zip(&u.actuals)
                    .map(|(p, a)| (p - a).abs())
            })
            .collect()
    }
}

/// Per user: fit on the first 70% of the daily series, then forecast each
/// remaining day one step ahead from all observed days before it, without
/// refitting. `None` chooses each user's order by AIC. Users with fewer
/// than [`ARIMA_MIN_DAYS`] days, or too few to fit, are excluded with a
/// warning.
pub fn evaluate_arima_protocol(
    series: &BTreeMap<UserId, Vec<f64>>,
    order: Option<ArimaOrder>,
) -> Result<ArimaEvaluation> {
    let mut out = ArimaEvaluation::default();
    for (user, s) in series {
        if s.len() < ARIMA_MIN_DAYS {
            warn!(
                "excluding user {user} from ARIMA evaluation: {} valid days < {ARIMA_MIN_DAYS}",
                s.len()
            );
            out.excluded.push(user.clone());
            continue;
        }
        let n_fit = (s.len() as f64 * FIT_FRACTION).floor() as usize;
        let fitted = match order {
            Some(o) => fit_arima(&s[..n_fit], o),
            None => select_order_aic(&s[..n_fit]).and_then(|o| fit_arima(&s[..n_fit], o)),
        };
        let fit = match fitted {
            Ok(f) => f,
            Err(Error::SeriesTooShort { len, need }) => {
                warn!("excluding user {user} from ARIMA evaluation: fit span {len} ≤ {need}");
                out.excluded.push(user.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut predictions = Vec::with_capacity(s.len() - n_fit);
        for t in n_fit..s.len() {
            predictions.push(forecast_one(&fit, &s[..t])?);
        }
        out.per_user.insert(
            user.clone(),
            ArimaUserForecasts {
                fit,
                predictions,
                actuals: s[n_fit..].to_vec(),
            },
        );
    }
    Ok(out)
}
