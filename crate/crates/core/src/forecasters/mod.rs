//! Forecasting models behind one contract: early-fusion, late-fusion and
//! unimodal LSTMs, flattened-window linear regression and per-user ARIMA.

mod arima;
mod linreg;
mod neural;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterSet, Tensor};
use crate::dataset::{NormalizationStats, Outcome, WindowedExample, WINDOW_SIZES};
use crate::error::{Error, Result};
use crate::ingest::{UserId, ACTIVITY_DIM, ENGAGEMENT_DIM};

pub use arima::{
    evaluate_arima_protocol, fit_arima, forecast_one, select_order_aic, ArimaEvaluation, ArimaFit,
    ArimaOrder, ArimaUserForecasts, ARIMA_MIN_DAYS,
};
pub use linreg::{fit_ols, train_linreg, OlsFit, RIDGE_LAMBDA};
pub use neural::{encode_inputs, train_lstm, EpochLog, Network};

/// Width of a fused engagement+activity day.
pub const FUSED_DIM: usize = ENGAGEMENT_DIM + ACTIVITY_DIM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    LstmEarly,
    LstmLate,
    LstmEngagement,
    LstmActivity,
    LinregMultimodal,
    LinregEngagement,
    LinregActivity,
    Arima,
}

/// Which input channels a model reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Multimodal,
    Engagement,
    Activity,
}

impl Modality {
    pub const ALL: [Modality; 3] = [
        Modality::Multimodal,
        Modality::Engagement,
        Modality::Activity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Multimodal => "multimodal",
            Modality::Engagement => "engagement",
            Modality::Activity => "activity",
        }
    }

    /// Column range of the fused day this modality reads.
    pub fn columns(self) -> (usize, usize) {
        match self {
            Modality::Multimodal => (0, FUSED_DIM),
            Modality::Engagement => (0, ENGAGEMENT_DIM),
            Modality::Activity => (ENGAGEMENT_DIM, ACTIVITY_DIM),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Architecture {
    pub const ALL: [Architecture; 8] = [
        Architecture::LstmEarly,
        Architecture::LstmLate,
        Architecture::LstmEngagement,
        Architecture::LstmActivity,
        Architecture::LinregMultimodal,
        Architecture::LinregEngagement,
        Architecture::LinregActivity,
        Architecture::Arima,
    ];

    pub const LSTM: [Architecture; 4] = [
        Architecture::LstmEarly,
        Architecture::LstmLate,
        Architecture::LstmEngagement,
        Architecture::LstmActivity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::LstmEarly => "lstm_early",
            Architecture::LstmLate => "lstm_late",
            Architecture::LstmEngagement => "lstm_engagement",
            Architecture::LstmActivity => "lstm_activity",
            Architecture::LinregMultimodal => "linreg_multimodal",
            Architecture::LinregEngagement => "linreg_engagement",
            Architecture::LinregActivity => "linreg_activity",
            Architecture::Arima => "arima",
        }
    }

    pub fn is_lstm(self) -> bool {
        Self::LSTM.contains(&self)
    }

    pub fn is_linreg(self) -> bool {
        matches!(
            self,
            Architecture::LinregMultimodal
                | Architecture::LinregEngagement
                | Architecture::LinregActivity
        )
    }

    pub fn modality(self) -> Modality {
        match self {
            Architecture::LstmEarly | Architecture::LstmLate | Architecture::LinregMultimodal => {
                Modality::Multimodal
            }
            Architecture::LstmEngagement | Architecture::LinregEngagement => Modality::Engagement,
            Architecture::LstmActivity | Architecture::LinregActivity | Architecture::Arima => {
                Modality::Activity
            }
        }
    }

    /// LSTM architecture reading one modality (early fusion for both).
    pub fn lstm_for(modality: Modality) -> Architecture {
        match modality {
            Modality::Multimodal => Architecture::LstmEarly,
            Modality::Engagement => Architecture::LstmEngagement,
            Modality::Activity => Architecture::LstmActivity,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Regression,
    /// Probability that next-day steps exceed `threshold`.
    Classification {
        threshold: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub window: usize,
    /// Hidden size of the early-fusion and unimodal LSTMs.
    pub hidden: usize,
    /// Hidden size of each late-fusion branch.
    pub late_hidden: usize,
    /// Width of each late-fusion branch's decision layer.
    pub late_decision: usize,
    pub head: Head,
    pub outcome: Outcome,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    pub arima_order: ArimaOrder,
    /// Choose the ARIMA order per user by AIC instead of `arima_order`.
    pub arima_auto: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: Architecture::LstmEarly,
            window: 7,
            hidden: 64,
            late_hidden: 32,
            late_decision: 16,
            head: Head::Regression,
            outcome: Outcome::Steps,
            learning_rate: 1e-3,
            max_epochs: 200,
            batch_size: 32,
            patience: 10,
            seed: 0,
            arima_order: ArimaOrder { p: 1, d: 1, q: 1 },
            arima_auto: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !WINDOW_SIZES.contains(&self.window) {
            return Err(Error::Config(format!(
                "window {} is not one of {WINDOW_SIZES:?}",
                self.window
            )));
        }
        if self.architecture.is_lstm() {
            let sizes = [
                ("hidden", self.hidden),
                ("late_hidden", self.late_hidden),
                ("late_decision", self.late_decision),
                ("batch_size", self.batch_size),
                ("max_epochs", self.max_epochs),
            ];
            if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
            if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                return Err(Error::Config("learning_rate must be positive".into()));
            }
        }
        if let Head::Classification { threshold } = self.head {
            if !threshold.is_finite() {
                return Err(Error::Config(
                    "classification threshold must be finite".into(),
                ));
            }
            if self.outcome != Outcome::Steps {
                return Err(Error::Config(
                    "goal classification is defined on steps".into(),
                ));
            }
            if !self.architecture.is_lstm() {
                return Err(Error::Config(format!(
                    "{} has no classification head",
                    self.architecture
                )));
            }
        }
        Ok(())
    }
}

/// Learned state of a forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelWeights {
    Neural { params: ParameterSet },
    Linear { fit: OlsFit },
    Arima { fits: BTreeMap<UserId, ArimaFit> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedForecaster {
    pub config: ModelConfig,
    pub normalization: Option<NormalizationStats>,
    pub weights: ModelWeights,
    pub training_log: Vec<EpochLog>,
}

/// Row-wise `[u | v]`.
pub fn fuse_early(u_window: &Tensor, v_window: &Tensor) -> Result<Tensor> {
    if u_window.rows() != v_window.rows() {
        return Err(Error::WindowMismatch {
            expected: u_window.rows(),
            got: v_window.rows(),
        });
    }
    let (du, dv) = (u_window.cols(), v_window.cols());
    let mut values = Vec::with_capacity(u_window.rows() * (du + dv));
    for r in 0..u_window.rows() {
        values.extend_from_slice(u_window.row(r));
        values.extend_from_slice(v_window.row(r));
    }
    Tensor::matrix(u_window.rows(), du + dv, values)
}

/// Train any architecture. ARIMA models are fitted per user on `train`'s
/// users via [`fit_arima_forecaster`] instead.
pub fn train(
    config: &ModelConfig,
    train: &[WindowedExample],
    val: &[WindowedExample],
) -> Result<TrainedForecaster> {
    config.validate()?;
    match config.architecture {
        a if a.is_lstm() => train_lstm(config, train, val),
        a if a.is_linreg() => train_linreg(config, train),
        _ => Err(Error::Config(
            "ARIMA is fitted per user from daily series, not from windows".into(),
        )),
    }
}

/// Wrap per-user ARIMA fits as a forecaster; prediction reads the window's
/// step history.
pub fn fit_arima_forecaster(
    config: &ModelConfig,
    series: &BTreeMap<UserId, Vec<f64>>,
) -> Result<TrainedForecaster> {
    let mut fits = BTreeMap::new();
    for (user, s) in series {
        let order = if config.arima_auto {
            select_order_aic(s)?
        } else {
            config.arima_order
        };
        fits.insert(user.clone(), fit_arima(s, order)?);
    }
    Ok(TrainedForecaster {
        config: config.clone(),
        normalization: None,
        weights: ModelWeights::Arima { fits },
        training_log: Vec::new(),
    })
}

fn check_example(config: &ModelConfig, example: &WindowedExample) -> Result<()> {
    if example.window() != config.window {
        return Err(Error::WindowMismatch {
            expected: config.window,
            got: example.window(),
        });
    }
    let modality = config.architecture.modality();
    let needs_u = modality != Modality::Activity;
    let needs_v = modality != Modality::Engagement;
    if needs_u && example.u_window.cols() != ENGAGEMENT_DIM {
        return Err(Error::MissingModality(format!(
            "{} needs the engagement window",
            config.architecture
        )));
    }
    if needs_v && example.v_window.cols() != ACTIVITY_DIM {
        return Err(Error::MissingModality(format!(
            "{} needs the activity window",
            config.architecture
        )));
    }
    Ok(())
}

impl TrainedForecaster {
    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    fn stats(&self) -> Result<&NormalizationStats> {
        self.normalization
            .as_ref()
            .ok_or_else(|| Error::State("forecaster has no normalization statistics".into()))
    }

    /// Forecast for one example: raw-unit outcome (clamped at 0) for
    /// regression, goal probability for classification.
    pub fn predict(&self, example: &WindowedExample) -> Result<f64> {
        Ok(self.predict_batch(std::slice::from_ref(example))?[0])
    }

    pub fn predict_batch(&self, examples: &[WindowedExample]) -> Result<Vec<f64>> {
        for e in examples {
            check_example(&self.config, e)?;
        }
        match &self.weights {
            ModelWeights::Neural { params } => {
                let stats = self.stats()?;
                let net = Network::from_config(&self.config)?;
                let raw = net.predict_encoded(
                    params,
                    &examples
                        .iter()
                        .map(|e| encode_inputs(e, stats))
                        .collect::<Result<Vec<_>>>()?,
                )?;
                self.finish(raw)
            }
            ModelWeights::Linear { fit } => {
                let stats = self.stats()?;
                let (start, len) = self.config.architecture.modality().columns();
                let raw = examples
                    .iter()
                    .map(|e| {
                        let x = linreg::flatten(&encode_inputs(e, stats)?, start, len);
                        Ok(fit.predict(&x))
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.finish(raw)
            }
            ModelWeights::Arima { fits } => examples
                .iter()
                .map(|e| {
                    let fit = fits.get(&e.user_id).ok_or_else(|| {
                        Error::State(format!("no ARIMA fit for user {}", e.user_id))
                    })?;
                    let history: Vec<f64> = (0..e.window()).map(|r| e.v_window.at(r, 0)).collect();
                    Ok(forecast_one(fit, &history)?.max(0.0))
                })
                .collect(),
        }
    }

    fn finish(&self, raw: Vec<f64>) -> Result<Vec<f64>> {
        match self.config.head {
            Head::Classification { .. } => Ok(raw),
            Head::Regression => {
                let stats = self.stats()?;
                raw.into_iter()
                    .map(|z| Ok(stats.denormalize_target(self.config.outcome, z)?.max(0.0)))
                    .collect()
            }
        }
    }
}
