//! Seasonal / trend-cyclical decomposition.
//!
//! The trend is the mean of one or more centered moving averages with odd
//! kernels (replicate-padded at the boundaries); the seasonal component is
//! the residual, so the two always sum back to the input.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecomposeError {
    #[error("moving-average kernel must be odd, got {0}")]
    EvenKernel(usize),
    #[error("kernel {kernel} exceeds 2*len-1 = {max} for series of length {len}")]
    KernelTooLong { kernel: usize, len: usize, max: usize },
    #[error("kernel size list must be non-empty")]
    NoKernels,
    #[error("input must be a non-empty I x D matrix, got shape {0:?}")]
    BadInput(Vec<usize>),
}

/// Pooling branches used to form the trend (all odd).
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionConfig {
    pub kernel_sizes: Vec<usize>,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            kernel_sizes: vec![25],
        }
    }
}

impl DecompositionConfig {
    pub fn new(kernel_sizes: Vec<usize>) -> Self {
        DecompositionConfig { kernel_sizes }
    }

    pub fn validate(&self) -> Result<(), DecomposeError> {
        if self.kernel_sizes.is_empty() {
            return Err(DecomposeError::NoKernels);
        }
        for &k in &self.kernel_sizes {
            if k % 2 == 0 || k == 0 {
                return Err(DecomposeError::EvenKernel(k));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecompositionOutput {
    pub seasonal: Tensor,
    pub trend: Tensor,
}

/// Per-column centered moving average with replicate ("edge") padding, so
/// the output length equals the input length.
pub fn moving_average(x: &Tensor, kernel: usize) -> Result<Tensor, DecomposeError> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(DecomposeError::BadInput(shape.to_vec()));
    }
    if kernel % 2 == 0 || kernel == 0 {
        return Err(DecomposeError::EvenKernel(kernel));
    }
    let (rows, cols) = (shape[0], shape[1]);
    if kernel > 2 * rows - 1 {
        return Err(DecomposeError::KernelTooLong {
            kernel,
            len: rows,
            max: 2 * rows - 1,
        });
    }
    let half = (kernel - 1) / 2;
    let xd = x.data();
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for o in 0..kernel {
                let idx = (i + o).saturating_sub(half).min(rows - 1);
                acc += xd[idx * cols + j];
            }
            out[i * cols + j] = acc / kernel as f64;
        }
    }
    Ok(Tensor::new(vec![rows, cols], out).expect("same shape"))
}

/// Split `x` into trend (mean of the pooling branches) and seasonal
/// (residual) components.
pub fn decompose(
    x: &Tensor,
    cfg: &DecompositionConfig,
) -> Result<DecompositionOutput, DecomposeError> {
    cfg.validate()?;
    let mut trend = Tensor::zeros(x.shape());
    for &k in &cfg.kernel_sizes {
        let ma = moving_average(x, k)?;
        for (t, m) in trend.data_mut().iter_mut().zip(ma.data()) {
            *t += m;
        }
    }
    let n = cfg.kernel_sizes.len() as f64;
    for t in trend.data_mut() {
        *t /= n;
    }
    let seasonal_data: Vec<f64> = x
        .data()
        .iter()
        .zip(trend.data())
        .map(|(v, t)| v - t)
        .collect();
    let seasonal = Tensor::new(x.shape().to_vec(), seasonal_data).expect("same shape");
    Ok(DecompositionOutput { seasonal, trend })
}
