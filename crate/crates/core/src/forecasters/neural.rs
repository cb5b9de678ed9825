use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Architecture, Head, Modality, ModelConfig, ModelWeights, TrainedForecaster, FUSED_DIM,
};
use crate::autodiff::{
    Activation, Adam, AdamConfig, Dense, Lstm, ParameterSet, Tape, Tensor, Var, GRAD_CLIP_NORM,
};
use crate::dataset::{fit_normalization, label_goal, NormalizationStats, Outcome, WindowedExample};
use crate::error::{Error, Result};
use crate::ingest::{ACTIVITY_DIM, ENGAGEMENT_DIM};

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Normalized fused window, `w × 65` row-major. A modality whose window is
/// absent encodes as zeros.
pub fn encode_inputs(example: &WindowedExample, stats: &NormalizationStats) -> Result<Vec<f64>> {
    let w = example.window();
    let mut out = vec![0.0; w * FUSED_DIM];
    let has_u = example.u_window.cols() == ENGAGEMENT_DIM && example.u_window.rows() == w;
    let has_v = example.v_window.cols() == ACTIVITY_DIM && example.v_window.rows() == w;
    for t in 0..w {
        let row = &mut out[t * FUSED_DIM..(t + 1) * FUSED_DIM];
        if has_u {
            for (c, x) in example.u_window.row(t).iter().enumerate() {
                row[c] = (x - stats.engagement_mean[c]) / stats.engagement_std[c];
            }
        }
        if has_v {
            for (c, x) in example.v_window.row(t).iter().enumerate() {
                row[ENGAGEMENT_DIM + c] = (x - stats.activity_mean[c]) / stats.activity_std[c];
            }
        }
    }
    Ok(out)
}

/// Layer layout of one LSTM architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub architecture: Architecture,
    pub head: Head,
    pub window: usize,
    pub hidden: usize,
    pub late_hidden: usize,
    pub late_decision: usize,
}

impl Network {
    pub fn from_config(config: &ModelConfig) -> Result<Self> {
        if !config.architecture.is_lstm() {
            return Err(Error::Config(format!(
                "{} is not a recurrent architecture",
                config.architecture
            )));
        }
        Ok(Network {
            architecture: config.architecture,
            head: config.head,
            window: config.window,
            hidden: config.hidden,
            late_hidden: config.late_hidden,
            late_decision: config.late_decision,
        })
    }

    fn single_layers(&self) -> (Lstm, Dense) {
        let (_, d) = self.architecture.modality().columns();
        (
            Lstm::new("lstm", d, self.hidden),
            Dense::new("decision", self.hidden, 1, Activation::Identity),
        )
    }

    fn late_layers(&self) -> [(Lstm, Dense); 2] {
        let branch = |name: &str, d: usize| {
            (
                Lstm::new(format!("lstm_{name}"), d, self.late_hidden),
                Dense::new(
                    format!("temporary_{name}"),
                    self.late_hidden,
                    self.late_decision,
                    Activation::Tanh,
                ),
            )
        };
        [
            branch("engagement", ENGAGEMENT_DIM),
            branch("activity", ACTIVITY_DIM),
        ]
    }

    fn late_decision_layer(&self) -> Dense {
        Dense::new("decision", 2 * self.late_decision, 1, Activation::Identity)
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterSet {
        let mut params = ParameterSet::new();
        if self.architecture == Architecture::LstmLate {
            for (lstm, dense) in self.late_layers() {
                lstm.init(&mut params, rng);
                dense.init(&mut params, rng);
            }
            self.late_decision_layer().init(&mut params, rng);
        } else {
            let (lstm, dense) = self.single_layers();
            lstm.init(&mut params, rng);
            dense.init(&mut params, rng);
        }
        params
    }

    /// Step-major stack of one modality's columns for a batch.
    fn stacked(&self, batch: &[&[f64]], modality: Modality) -> Result<Tensor> {
        let (start, len) = modality.columns();
        let mut values = Vec::with_capacity(self.window * batch.len() * len);
        for t in 0..self.window {
            for x in batch {
                let base = t * FUSED_DIM + start;
                values.extend_from_slice(&x[base..base + len]);
            }
        }
        Tensor::matrix(self.window * batch.len(), len, values)
    }

    /// Batch forward pass to a `batch × 1` output: the regression value, or
    /// the goal probability under a classification head.
    pub fn forward(&self, tape: &mut Tape, params: &ParameterSet, batch: &[&[f64]]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("forward batch"));
        }
        for x in batch {
            if x.len() != self.window * FUSED_DIM {
                return Err(Error::Shape {
                    op: "network input",
                    expected: format!("{} values", self.window * FUSED_DIM),
                    got: x.len().to_string(),
                });
            }
        }
        let n = batch.len();
        let out = if self.architecture == Architecture::LstmLate {
            let [(lstm_u, temp_u), (lstm_v, temp_v)] = self.late_layers();
            let xu = tape.input(self.stacked(batch, Modality::Engagement)?);
            let xv = tape.input(self.stacked(batch, Modality::Activity)?);
            let hu = lstm_u.unroll(tape, params, xu, self.window, n, None)?.h;
            let hv = lstm_v.unroll(tape, params, xv, self.window, n, None)?.h;
            let du = temp_u.forward(tape, params, hu)?;
            let dv = temp_v.forward(tape, params, hv)?;
            let joined = tape.concat_cols(&[du, dv])?;
            self.late_decision_layer().forward(tape, params, joined)?
        } else {
            let (lstm, dense) = self.single_layers();
            let x = tape.input(self.stacked(batch, self.architecture.modality())?);
            let h = lstm.unroll(tape, params, x, self.window, n, None)?.h;
            dense.forward(tape, params, h)?
        };
        Ok(match self.head {
            Head::Regression => out,
            Head::Classification { .. } => tape.sigmoid(out),
        })
    }

    /// Mean loss on a batch; with `backward`, the set's gradients are
    /// replaced by the gradients of that loss.
    pub fn loss(
        &self,
        params: &mut ParameterSet,
        batch: &[&[f64]],
        targets: &[f64],
        backward: bool,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, batch)?;
        let y = Tensor::matrix(targets.len(), 1, targets.to_vec())?;
        let loss = match self.head {
            Head::Regression => tape.mse(out, y)?,
            Head::Classification { .. } => tape.bce(out, y)?,
        };
        if backward {
            params.zero_grad();
            tape.backward(loss, params)?;
        }
        Ok(tape.value(loss).values()[0])
    }

    /// Outputs for encoded inputs, in chunks.
    pub fn predict_encoded(&self, params: &ParameterSet, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(PREDICT_CHUNK) {
            let batch: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let y = self.forward(&mut tape, params, &batch)?;
            out.extend_from_slice(tape.value(y).values());
        }
        Ok(out)
    }

    fn mean_loss(
        &self,
        params: &mut ParameterSet,
        inputs: &[Vec<f64>],
        targets: &[f64],
    ) -> Result<f64> {
        let mut total = 0.0;
        for (xs, ys) in inputs
            .chunks(PREDICT_CHUNK)
            .zip(targets.chunks(PREDICT_CHUNK))
        {
            let batch: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            total += self.loss(params, &batch, ys, false)? * ys.len() as f64;
        }
        Ok(total / targets.len() as f64)
    }
}

fn training_targets(
    config: &ModelConfig,
    stats: &NormalizationStats,
    examples: &[WindowedExample],
) -> Result<Vec<f64>> {
    examples
        .iter()
        .map(|e| match config.head {
            Head::Regression => stats.normalize_target(config.outcome, e.target(config.outcome)?),
            Head::Classification { threshold } => {
                Ok(if label_goal(e, threshold)? { 1.0 } else { 0.0 })
            }
        })
        .collect()
}

/// Minibatch Adam with gradient clipping and early stopping on validation
/// loss (training loss when `val` is empty). The best epoch's parameters are
/// kept. Normalization statistics come from `train` only.
pub fn train_lstm(
    config: &ModelConfig,
    train: &[WindowedExample],
    val: &[WindowedExample],
) -> Result<TrainedForecaster> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    let net = Network::from_config(config)?;
    let stats = fit_normalization(train)?;
    if config.head == Head::Regression {
        stats.target_stats(config.outcome)?;
    } else {
        stats.target_stats(Outcome::Steps)?;
    }
    let encode = |set: &[WindowedExample]| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .map(|e| {
                super::check_example(config, e)?;
                encode_inputs(e, &stats)
            })
            .collect()
    };
    let train_x = encode(train)?;
    let train_y = training_targets(config, &stats, train)?;
    let val_x = encode(val)?;
    let val_y = training_targets(config, &stats, val)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = net.init(&mut rng);
    let mut adam = Adam::new(AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;
    let mut log = Vec::new();

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&[f64]> = idx.iter().map(|&i| train_x[i].as_slice()).collect();
            let ys: Vec<f64> = idx.iter().map(|&i| train_y[i]).collect();
            let loss = net.loss(&mut params, &batch, &ys, true)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!(
                        "{} training loss at epoch {epoch}, batch {b} (loss {loss})",
                        config.architecture
                    ),
                });
            }
            total += loss * ys.len() as f64;
            params.clip_grad_norm(GRAD_CLIP_NORM);
            adam.step(&mut params)?;
        }
        let train_loss = total / train_x.len() as f64;
        let val_loss = if val_x.is_empty() {
            train_loss
        } else {
            net.mean_loss(&mut params, &val_x, &val_y)?
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{} validation loss at epoch {epoch}", config.architecture),
            });
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let mut params = best.1;
    params.zero_grad();
    Ok(TrainedForecaster {
        config: config.clone(),
        normalization: Some(stats),
        weights: ModelWeights::Neural { params },
        training_log: log,
    })
}
