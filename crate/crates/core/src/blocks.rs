//! Network blocks: the balanced ConvNeXt block, the lambda embedding and
//! the cross-resolution attention block.

use candle_core::{Tensor, D};

use crate::error::{dim_err, Error, Result};
use crate::nn::{channel_layer_norm, depthwise_conv2d, gelu, linear, pointwise, softmax_last};
use crate::params::{Init, Scope};

/// Lambda range the codec is trained for.
pub const LAMBDA_MIN: f64 = 64.0;
pub const LAMBDA_MAX: f64 = 8192.0;

const LN_EPS: f64 = 1e-6;
const DW_KERNEL: usize = 7;
const MLP_RATIO: usize = 4;
const MAX_PERIOD: f64 = 1000.0;

/// Splits `x` into its per-channel spatial mean (broadcast back over space)
/// and the residual.
pub fn dc_hc_split(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let dc = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let dc = dc.broadcast_as(x.shape())?.contiguous()?;
    let hc = (x - &dc)?;
    Ok((dc, hc))
}

/// Conditioning vector produced from one lambda value.
#[derive(Debug, Clone)]
pub struct LambdaEmbedding {
    /// `(1, d_lambda)`.
    pub vector: Tensor,
    pub lambda: f64,
}

/// Sinusoidal features of `log2(lambda)`, then a two-layer perceptron.
#[derive(Debug, Clone)]
pub struct LambdaEmbedNet {
    dim: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl LambdaEmbedNet {
    pub fn new(scope: &mut Scope, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("lambda embedding dim must be even, got {dim}")));
        }
        Ok(Self {
            dim,
            w1: scope.param("fc1.weight", &[dim, dim], Init::FanIn(dim))?,
            b1: scope.param("fc1.bias", &[dim], Init::Zeros)?,
            w2: scope.param("fc2.weight", &[dim, dim], Init::FanIn(dim))?,
            b2: scope.param("fc2.bias", &[dim], Init::Zeros)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The fixed sinusoidal encoding of `log2(lambda)`.
    pub fn encode(&self, lambda: f64) -> Vec<f64> {
        let t = lambda.log2();
        let half = self.dim / 2;
        let mut out = Vec::with_capacity(self.dim);
        let freqs: Vec<f64> = (0..half)
            .map(|k| (-(MAX_PERIOD.ln()) * k as f64 / half as f64).exp())
            .collect();
        out.extend(freqs.iter().map(|f| (t * f).sin()));
        out.extend(freqs.iter().map(|f| (t * f).cos()));
        out
    }

    pub fn embed(&self, lambda: f64) -> Result<LambdaEmbedding> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
        }
        if !(LAMBDA_MIN..=LAMBDA_MAX).contains(&lambda) {
            log::warn!("lambda {lambda} outside the trained range [{LAMBDA_MIN}, {LAMBDA_MAX}]");
        }
        let feat = Tensor::from_vec(self.encode(lambda), (1, self.dim), self.w1.device())?
            .to_dtype(self.w1.dtype())?;
        let h = gelu(&linear(&feat, &self.w1, &self.b1)?)?;
        let vector = linear(&h, &self.w2, &self.b2)?;
        Ok(LambdaEmbedding { vector, lambda })
    }
}

/// Balanced ConvNeXt block.
///
/// depthwise 7x7 -> `alpha * DC + beta * HC` -> channel LayerNorm -> lambda
/// scale -> 1x1 expansion (x4) -> GELU -> 1x1 projection -> residual add.
#[derive(Debug, Clone)]
pub struct BConvNeXt {
    channels: usize,
    dw_weight: Tensor,
    dw_bias: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
    lam_weight: Tensor,
    lam_bias: Tensor,
    pw1_weight: Tensor,
    pw1_bias: Tensor,
    pub pw2_weight: Tensor,
    pub pw2_bias: Tensor,
}

impl BConvNeXt {
    pub fn new(scope: &mut Scope, channels: usize, d_lambda: usize) -> Result<Self> {
        Self::with_output_init(scope, channels, d_lambda, false)
    }

    /// Like [`BConvNeXt::new`]; `zero_output` zero-initialises the last
    /// projection so the block starts as the identity.
    pub fn with_output_init(
        scope: &mut Scope,
        channels: usize,
        d_lambda: usize,
        zero_output: bool,
    ) -> Result<Self> {
        let c = channels;
        let hidden = MLP_RATIO * c;
        let out_init = if zero_output { Init::Zeros } else { Init::FanIn(hidden) };
        Ok(Self {
            channels: c,
            dw_weight: scope.param("dw.weight", &[c, DW_KERNEL, DW_KERNEL], Init::FanIn(49))?,
            dw_bias: scope.param("dw.bias", &[c], Init::Zeros)?,
            alpha: scope.param("alpha", &[c], Init::Ones)?,
            beta: scope.param("beta", &[c], Init::Ones)?,
            lam_weight: scope.param("lambda.weight", &[c, d_lambda], Init::Zeros)?,
            lam_bias: scope.param("lambda.bias", &[c], Init::Ones)?,
            pw1_weight: scope.param("pw1.weight", &[hidden, c], Init::FanIn(c))?,
            pw1_bias: scope.param("pw1.bias", &[hidden], Init::Zeros)?,
            pw2_weight: scope.param("pw2.weight", &[c, hidden], out_init)?,
            pw2_bias: scope.param("pw2.bias", &[c], Init::Zeros)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Depthwise convolution followed by the DC/HC rebalancing.
    pub fn balanced_features(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        let y = depthwise_conv2d(x, &self.dw_weight, Some(&self.dw_bias))?;
        let (dc, hc) = dc_hc_split(&y)?;
        let dc = dc.broadcast_mul(&self.alpha.reshape((1, c, 1, 1))?)?;
        let hc = hc.broadcast_mul(&self.beta.reshape((1, c, 1, 1))?)?;
        Ok((dc + hc)?)
    }

    /// Per-channel scale derived from the lambda embedding, `(1, c, 1, 1)`.
    pub fn lambda_scale(&self, e: &LambdaEmbedding) -> Result<Tensor> {
        let s = linear(&gelu(&e.vector)?, &self.lam_weight, &self.lam_bias)?;
        Ok(s.reshape((1, self.channels, 1, 1))?)
    }

    pub fn forward(&self, x: &Tensor, e: &LambdaEmbedding) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.channels {
            return Err(dim_err!("B-ConvNeXt of width {} got {c} channels", self.channels));
        }
        let f = self.balanced_features(x)?;
        let f = channel_layer_norm(&f, LN_EPS)?.broadcast_mul(&self.lambda_scale(e)?)?;
        let h = gelu(&pointwise(&f, &self.pw1_weight, Some(&self.pw1_bias))?)?;
        let h = pointwise(&h, &self.pw2_weight, Some(&self.pw2_bias))?;
        Ok((x + h)?)
    }
}

/// Number of attention heads in [`CrossAttention`].
pub const ATTENTION_HEADS: usize = 4;

/// Queries from high-resolution features attend over keys and values taken
/// from the previous (half-resolution) stage. The low-resolution side gets
/// a depthwise 3x3 conditional positional encoding first.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    c_high: usize,
    c_low: usize,
    heads: usize,
    cpe_weight: Tensor,
    cpe_bias: Tensor,
    q_weight: Tensor,
    q_bias: Tensor,
    k_weight: Tensor,
    k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub o_weight: Tensor,
    pub o_bias: Tensor,
}

impl CrossAttention {
    pub fn new(scope: &mut Scope, c_high: usize, c_low: usize) -> Result<Self> {
        if c_high % ATTENTION_HEADS != 0 {
            return Err(Error::Config(format!(
                "attention width {c_high} not divisible by {ATTENTION_HEADS} heads"
            )));
        }
        Ok(Self {
            c_high,
            c_low,
            heads: ATTENTION_HEADS,
            cpe_weight: scope.param("cpe.weight", &[c_low, 3, 3], Init::FanIn(9))?,
            cpe_bias: scope.param("cpe.bias", &[c_low], Init::Zeros)?,
            q_weight: scope.param("q.weight", &[c_high, c_high], Init::FanIn(c_high))?,
            q_bias: scope.param("q.bias", &[c_high], Init::Zeros)?,
            k_weight: scope.param("k.weight", &[c_high, c_low], Init::FanIn(c_low))?,
            k_bias: scope.param("k.bias", &[c_high], Init::Zeros)?,
            v_weight: scope.param("v.weight", &[c_high, c_low], Init::FanIn(c_low))?,
            v_bias: scope.param("v.bias", &[c_high], Init::Zeros)?,
            o_weight: scope.param("o.weight", &[c_high, c_high], Init::FanIn(c_high))?,
            o_bias: scope.param("o.bias", &[c_high], Init::Zeros)?,
        })
    }

    pub fn forward(&self, f_high: &Tensor, f_low: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(f_high, f_low)?.0)
    }

    /// Also returns the attention weights, `(b, heads, hw_high, hw_low)`.
    pub fn forward_with_weights(&self, f_high: &Tensor, f_low: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, ch, h, w) = f_high.dims4()?;
        let (bl, cl, hl, wl) = f_low.dims4()?;
        if ch != self.c_high || cl != self.c_low || b != bl {
            return Err(dim_err!(
                "cross attention expects ({}, {}) channels, got ({ch}, {cl})",
                self.c_high,
                self.c_low
            ));
        }
        if h != 2 * hl || w != 2 * wl {
            return Err(dim_err!(
                "low-resolution features {hl}x{wl} are not half of {h}x{w}"
            ));
        }
        let (heads, dh) = (self.heads, ch / self.heads);
        let (ph, pl) = (h * w, hl * wl);

        let low = (f_low + depthwise_conv2d(f_low, &self.cpe_weight, Some(&self.cpe_bias))?)?;
        let qn = channel_layer_norm(f_high, LN_EPS)?;
        let kn = channel_layer_norm(&low, LN_EPS)?;

        let q = pointwise(&qn, &self.q_weight, Some(&self.q_bias))?
            .reshape((b, heads, dh, ph))?
            .transpose(2, 3)?
            .contiguous()?;
        let k = pointwise(&kn, &self.k_weight, Some(&self.k_bias))?.reshape((b, heads, dh, pl))?;
        let v = pointwise(&kn, &self.v_weight, Some(&self.v_bias))?
            .reshape((b, heads, dh, pl))?
            .transpose(2, 3)?
            .contiguous()?;

        let logits = (q.matmul(&k)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&logits)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(2, 3)?
            .reshape((b, ch, h, w))?;
        let out = pointwise(&mixed, &self.o_weight, Some(&self.o_bias))?;
        Ok(((f_high + out)?, attn))
    }
}
