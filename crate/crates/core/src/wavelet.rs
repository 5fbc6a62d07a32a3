//! Orthonormal 2-D Haar transform and the wavelet resampling layers.
//!
//! Subbands are stacked channel-blocked in the order LL, HL, LH, HH: for an
//! input with `c` channels, output channels `0..c` hold LL, `c..2c` hold HL
//! and so on. For the 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2     HL = (a - b + c - d) / 2
//! LH = (a + b - c - d) / 2     HH = (a - b - c + d) / 2
//! ```
//!
//! The analysis matrix is symmetric and orthogonal, so it is its own inverse.

use candle_core::{Tensor, D};

use crate::error::{dim_err, Result};
use crate::nn::pointwise;
use crate::params::{Init, Scope};

/// Number of subbands produced by one analysis level.
pub const SUBBANDS: usize = 4;

const HAAR: [[f64; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

fn haar_matrix(like: &Tensor) -> Result<Tensor> {
    let flat: Vec<f64> = HAAR.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (4, 4), like.device())?.to_dtype(like.dtype())?)
}

/// Haar analysis: `(b, c, h, w)` to `(b, 4c, h/2, w/2)`.
pub fn dwt2d(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("dwt2d needs even spatial dims, got {h}x{w}"));
    }
    let (h2, w2) = (h / 2, w / 2);
    // (b, c, h2, dy, w2, dx) -> (b, c, dy, dx, h2, w2)
    let blocks = x
        .reshape(&[b, c, h2, 2, w2, 2][..])?
        .permute([0, 1, 3, 5, 2, 4])?
        .reshape((b, c, 4, h2 * w2))?;
    let bands = haar_matrix(x)?.broadcast_matmul(&blocks)?;
    Ok(bands
        .transpose(1, 2)?
        .reshape((b, 4 * c, h2, w2))?)
}

/// Haar synthesis, the exact inverse of [`dwt2d`].
pub fn idwt2d(s: &Tensor) -> Result<Tensor> {
    let (b, c4, h2, w2) = s.dims4()?;
    if c4 % SUBBANDS != 0 {
        return Err(dim_err!("idwt2d needs a multiple of 4 channels, got {c4}"));
    }
    let c = c4 / SUBBANDS;
    let bands = s.reshape((b, 4, c, h2 * w2))?.transpose(1, 2)?.contiguous()?;
    let blocks = haar_matrix(s)?.broadcast_matmul(&bands)?;
    Ok(blocks
        .reshape(&[b, c, 2, 2, h2, w2][..])?
        .permute([0, 1, 4, 2, 5, 3])?
        .reshape((b, c, 2 * h2, 2 * w2))?)
}

/// Haar analysis followed by a bias-free 1x1 map from `4 c_in` to `c_out`.
#[derive(Debug, Clone)]
pub struct WaveletDown {
    mix: Tensor,
}

impl WaveletDown {
    pub fn new(scope: &mut Scope, c_in: usize, c_out: usize) -> Result<Self> {
        let mix = scope.param("mix", &[c_out, SUBBANDS * c_in], Init::FanIn(SUBBANDS * c_in))?;
        Ok(Self { mix })
    }

    pub fn from_weight(mix: Tensor) -> Self {
        Self { mix }
    }

    pub fn weight(&self) -> &Tensor {
        &self.mix
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        let expect = self.mix.dim(D::Minus1)?;
        if expect != SUBBANDS * c {
            return Err(dim_err!("wavelet down expects {} input channels, got {c}", expect / 4));
        }
        pointwise(&dwt2d(x)?, &self.mix, None)
    }
}

/// Bias-free 1x1 map from `c_in` to `4 c_out`, followed by Haar synthesis.
#[derive(Debug, Clone)]
pub struct WaveletUp {
    expand: Tensor,
}

impl WaveletUp {
    pub fn new(scope: &mut Scope, c_in: usize, c_out: usize) -> Result<Self> {
        let expand = scope.param("expand", &[SUBBANDS * c_out, c_in], Init::FanIn(c_in))?;
        Ok(Self { expand })
    }

    pub fn from_weight(expand: Tensor) -> Self {
        Self { expand }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        idwt2d(&pointwise(x, &self.expand, None)?)
    }
}
