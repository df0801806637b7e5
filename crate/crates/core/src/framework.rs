//! The full forecaster: decompose the input, forecast the seasonal
//! component with the pyramid and the trend with a linear map shared
//! across variables, and sum the two predictions elementwise. Modes swap
//! the pyramid onto the trend branch or bypass decomposition entirely.

use crate::decompose::{decompose, DecompositionConfig};
use crate::params::{init_fan_in, BoundParams, ParamStore};
use crate::pyramid::{init_pyramid_params, mtpnet_forward, PyramidConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::Dropout;
use crate::ModelError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PYRAMID_PREFIX: &str = "pyramid";
pub const TREND_WEIGHTS: &str = "linear.weights";
pub const TREND_BIAS: &str = "linear.bias";

/// Which branch the pyramid serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelMode {
    /// Seasonal -> pyramid, trend -> linear (the default composition).
    Decomposed,
    /// Seasonal -> linear, trend -> pyramid (for data without distinct
    /// seasonality).
    TrendAsMtpnet,
    /// Feed the raw input straight into the pyramid.
    NoDecomposition,
}

impl ModelMode {
    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Decomposed => "decomposed",
            ModelMode::TrendAsMtpnet => "trend_as_mtpnet",
            ModelMode::NoDecomposition => "no_decomposition",
        }
    }
}

/// A forecaster: configuration plus its parameter store.
#[derive(Debug, Clone)]
pub struct ForecastModel {
    pub pyramid: PyramidConfig,
    pub decomposition: DecompositionConfig,
    pub mode: ModelMode,
    pub params: ParamStore,
}

impl ForecastModel {
    /// Validate the configuration and create seeded parameters.
    pub fn init(
        pyramid: PyramidConfig,
        decomposition: DecompositionConfig,
        mode: ModelMode,
        seed: u64,
    ) -> Result<Self, ModelError> {
        pyramid.validate()?;
        decomposition
            .validate()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_pyramid_params(&pyramid, PYRAMID_PREFIX, &mut rng, &mut params);
        if mode != ModelMode::NoDecomposition {
            params.insert(
                TREND_WEIGHTS,
                init_fan_in(&mut rng, &[pyramid.lookback, pyramid.horizon], pyramid.lookback),
            );
            params.insert(TREND_BIAS, Tensor::zeros(&[pyramid.horizon]));
        }
        Ok(ForecastModel {
            pyramid,
            decomposition,
            mode,
            params,
        })
    }

    /// Forward pass on an existing tape with bound parameters (training
    /// path; pass a dropout context to regularize).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: &Tensor,
        drop: &mut Option<Dropout>,
    ) -> Result<Var, ModelError> {
        match self.mode {
            ModelMode::NoDecomposition => {
                mtpnet_forward(tape, &self.pyramid, bound, PYRAMID_PREFIX, x, drop)
            }
            ModelMode::Decomposed => {
                let parts = decompose(x, &self.decomposition)
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                let seasonal_pred = mtpnet_forward(
                    tape,
                    &self.pyramid,
                    bound,
                    PYRAMID_PREFIX,
                    &parts.seasonal,
                    drop,
                )?;
                let trend_in = tape.constant(parts.trend);
                let trend_pred = trend_linear(
                    tape,
                    trend_in,
                    bound.var(TREND_WEIGHTS),
                    bound.var(TREND_BIAS),
                )?;
                Ok(tape.add(seasonal_pred, trend_pred)?)
            }
            ModelMode::TrendAsMtpnet => {
                let parts = decompose(x, &self.decomposition)
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                let trend_pred = mtpnet_forward(
                    tape,
                    &self.pyramid,
                    bound,
                    PYRAMID_PREFIX,
                    &parts.trend,
                    drop,
                )?;
                let seasonal_in = tape.constant(parts.seasonal);
                let seasonal_pred = trend_linear(
                    tape,
                    seasonal_in,
                    bound.var(TREND_WEIGHTS),
                    bound.var(TREND_BIAS),
                )?;
                Ok(tape.add(trend_pred, seasonal_pred)?)
            }
        }
    }

    /// Evaluation forecast: fresh tape, no gradients, no dropout.
    pub fn forecast(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&self.params, &mut tape, false);
        let out = self.forward(&mut tape, &bound, x, &mut None)?;
        Ok(tape.value(out).clone())
    }
}

/// Per-variable linear trend forecast: each output column is
/// `weightsᵀ x column + bias`, with the same `I x H` weights for every
/// variable.
pub fn trend_linear(tape: &mut Tape, x: Var, weights: Var, bias: Var) -> Result<Var, ModelError> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weights).to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[0] != ws[0] {
        return Err(ModelError::Tensor(crate::TensorError::ShapeMismatch {
            op: "trend_linear",
            left: xs,
            right: ws,
        }));
    }
    let by_var = tape.permute(x, &[1, 0])?; // D x I
    let projected = tape.matmul(by_var, weights)?; // D x H
    let with_bias = tape.add(projected, bias)?; // bias broadcast over rows
    Ok(tape.permute(with_bias, &[1, 0])?) // H x D
}
