//! Latent variable block: prior and posterior branches, sampling,
//! quantisation, the discretised Gaussian PMF and rate terms.
//!
//! Rates are measured in bits everywhere.
//!
//! Student (practical codec):
//! * posterior `U(mu - 1/2, mu + 1/2)`, sampled as `mu + u` during training
//!   and replaced by `mu_hat + round(mu - mu_hat)` at test time;
//! * prior `N(mu_hat, sigma_hat^2) * U(-1/2, 1/2)`, whose mass at integer
//!   offsets from `mu_hat` is the coding PMF.
//!
//! Teacher (bound model): Gaussian posterior and Gaussian prior with a
//! closed-form KL.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{BConvNeXt, LambdaEmbedding};
use crate::error::{dim_err, Error, Result};
use crate::nn::{abs_zero_subgrad, normal_cdf, pointwise};
use crate::params::{Init, Scope};

/// Lower clamp on the prior scale.
pub const SIGMA_MIN: f64 = 0.11;
/// Symbols live in `[-SYMBOL_MAX, SYMBOL_MAX]`.
pub const SYMBOL_MAX: i64 = 64;
/// Number of symbols in the coding alphabet.
pub const ALPHABET: usize = (2 * SYMBOL_MAX + 1) as usize;
/// Floor applied to the training-time likelihood before taking the log.
pub const DENSITY_FLOOR: f64 = 1.0 / 65536.0;

const TEACHER_LOG_SIGMA_RANGE: (f64, f64) = (-7.0, 7.0);
const PRIOR_LOG_SIGMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    /// Student, additive uniform noise.
    Train,
    /// Student, scalar quantisation.
    Test,
    /// Teacher, reparameterised Gaussian sample.
    Teacher,
}

#[derive(Debug, Clone)]
pub struct PosteriorParams {
    pub mu: Tensor,
    /// Present only for the teacher.
    pub sigma: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct PriorParams {
    pub mu_hat: Tensor,
    /// Elementwise `>= SIGMA_MIN`.
    pub sigma_hat: Tensor,
}

#[derive(Debug, Clone)]
pub struct LatentRecord {
    /// 1-based position in the decoding order.
    pub index: usize,
    pub z: Tensor,
    /// `None` on the decode path, which never sees the encoder.
    pub posterior: Option<PosteriorParams>,
    pub prior: PriorParams,
    /// Integer offsets from `mu_hat`, test mode only. NCHW raster order.
    pub symbols: Option<Vec<i32>>,
    /// Bits per batch item, shape `(b,)`.
    pub rate_bits: Tensor,
}

/// Uniform noise in `[-1/2, 1/2)` shaped like `like`.
pub fn uniform_noise(like: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let n = like.elem_count();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// Standard normal noise shaped like `like`.
pub fn gaussian_noise(like: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let n = like.elem_count();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())?)
}

/// `z = mu + noise`.
pub fn posterior_sample_train(p: &PosteriorParams, noise: &Tensor) -> Result<Tensor> {
    if p.sigma.is_some() {
        return Err(Error::Variant(
            "uniform-noise sampling needs a student posterior".into(),
        ));
    }
    Ok((&p.mu + noise)?)
}

/// Round half away from zero, clamped to the coding alphabet.
pub fn quantize_residual(r: f64) -> i32 {
    r.round().clamp(-(SYMBOL_MAX as f64), SYMBOL_MAX as f64) as i32
}

/// Test-time quantisation. Returns the symbols `round(mu - mu_hat)` (clamped
/// to the alphabet) and `z_hat = mu_hat + symbols`.
pub fn quantize_test(post: &PosteriorParams, prior: &PriorParams) -> Result<(Vec<i32>, Tensor)> {
    if post.sigma.is_some() {
        return Err(Error::Variant("quantisation needs a student posterior".into()));
    }
    if post.mu.dims() != prior.mu_hat.dims() {
        return Err(dim_err!(
            "posterior {:?} and prior {:?} disagree",
            post.mu.dims(),
            prior.mu_hat.dims()
        ));
    }
    let mu = host_f64(&post.mu)?;
    let mu_hat = host_f64(&prior.mu_hat)?;
    let symbols: Vec<i32> = mu
        .iter()
        .zip(&mu_hat)
        .map(|(m, h)| quantize_residual(m - h))
        .collect();
    let z_hat = dequantize(&prior.mu_hat, &symbols)?;
    Ok((symbols, z_hat))
}

/// `mu_hat + symbols`, shared by the encoder and the decoder.
pub fn dequantize(mu_hat: &Tensor, symbols: &[i32]) -> Result<Tensor> {
    if symbols.len() != mu_hat.elem_count() {
        return Err(dim_err!(
            "{} symbols for a latent of {} elements",
            symbols.len(),
            mu_hat.elem_count()
        ));
    }
    let s: Vec<f32> = symbols.iter().map(|&v| v as f32).collect();
    let s = Tensor::from_vec(s, mu_hat.shape(), mu_hat.device())?.to_dtype(mu_hat.dtype())?;
    Ok((mu_hat + s)?)
}

pub(crate) fn host_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Mass of `N(0, sigma_hat^2)` on `[n - 1/2, n + 1/2]`.
pub fn pmf_eval(sigma_hat: f64, n: i64) -> Result<f64> {
    if !(sigma_hat > 0.0) {
        return Err(Error::Domain(format!("prior scale must be positive, got {sigma_hat}")));
    }
    if n.abs() > SYMBOL_MAX {
        return Err(Error::Range { symbol: n, max: SYMBOL_MAX });
    }
    Ok(centered_mass(sigma_hat, n))
}

// Evaluated on |n| in the lower tail, which is both exact-symmetric and
// accurate far from the mode.
fn centered_mass(sigma_hat: f64, n: i64) -> f64 {
    let a = n.unsigned_abs() as f64;
    std_normal_cdf((0.5 - a) / sigma_hat) - std_normal_cdf((-0.5 - a) / sigma_hat)
}

/// Coding probability of one symbol: [`pmf_eval`] with the out-of-range
/// tail mass folded into the two extreme symbols.
pub fn folded_pmf(sigma_hat: f64, n: i64) -> f64 {
    let mut p = centered_mass(sigma_hat, n);
    if n.abs() == SYMBOL_MAX {
        p += std_normal_cdf((-0.5 - SYMBOL_MAX as f64) / sigma_hat);
    }
    p
}

/// The full folded PMF over `[-SYMBOL_MAX, SYMBOL_MAX]`, renormalised to sum
/// to one. Index `i` holds symbol `i - SYMBOL_MAX`.
pub fn pmf_table(sigma_hat: f64) -> Vec<f64> {
    let mut half: Vec<f64> = (0..=SYMBOL_MAX).map(|n| folded_pmf(sigma_hat, n)).collect();
    let total = half[0] + 2.0 * half[1..].iter().sum::<f64>();
    for p in &mut half {
        *p /= total;
    }
    let mut out = Vec::with_capacity(ALPHABET);
    out.extend(half[1..].iter().rev());
    out.extend(half.iter());
    out
}

/// Ideal code length in bits of `n` under the coding PMF.
pub fn symbol_bits(sigma_hat: f64, n: i64) -> f64 {
    -folded_pmf(sigma_hat, n).max(f64::MIN_POSITIVE).log2()
}

/// Elementwise training rate in bits: `-log2` of the prior density
/// (Gaussian convolved with a unit uniform) at `z`, floored.
pub fn student_rate_map(z: &Tensor, prior: &PriorParams) -> Result<Tensor> {
    let r = abs_zero_subgrad(&(z - &prior.mu_hat)?)?;
    let upper = normal_cdf(&(r.neg()? + 0.5)?.div(&prior.sigma_hat)?)?;
    let lower = normal_cdf(&(r.neg()? - 0.5)?.div(&prior.sigma_hat)?)?;
    let lik = (upper - lower)?.maximum(DENSITY_FLOOR)?;
    Ok((lik.log()? * (-1.0 / std::f64::consts::LN_2))?)
}

/// Training rate in bits per batch item, `(b,)`.
pub fn rate_train_student(post: &PosteriorParams, prior: &PriorParams, z: &Tensor) -> Result<Tensor> {
    if post.sigma.is_some() {
        return Err(Error::Variant("student rate needs a student posterior".into()));
    }
    sum_per_item(&student_rate_map(z, prior)?)
}

/// Elementwise Gaussian KL in bits.
pub fn teacher_kl_map(post: &PosteriorParams, prior: &PriorParams) -> Result<Tensor> {
    let sigma = post
        .sigma
        .as_ref()
        .ok_or_else(|| Error::Variant("closed-form KL needs a teacher posterior".into()))?;
    let var_ratio = (sigma / &prior.sigma_hat)?.sqr()?;
    let mean_term = ((&post.mu - &prior.mu_hat)? / &prior.sigma_hat)?.sqr()?;
    // log(s_hat / s) + (s^2 + (mu - mu_hat)^2) / (2 s_hat^2) - 1/2
    let nats = ((prior.sigma_hat.log()? - sigma.log()?)? + ((var_ratio + mean_term)? * 0.5)?)?;
    Ok(((nats - 0.5)? * (1.0 / std::f64::consts::LN_2))?)
}

/// Closed-form KL of the teacher posterior from its prior, bits per batch
/// item.
pub fn kl_teacher(post: &PosteriorParams, prior: &PriorParams) -> Result<Tensor> {
    let sigma = post
        .sigma
        .as_ref()
        .ok_or_else(|| Error::Variant("closed-form KL needs a teacher posterior".into()))?;
    let min = sigma.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::Domain(format!("posterior scale must be positive, got {min}")));
    }
    sum_per_item(&teacher_kl_map(post, prior)?)
}

fn sum_per_item(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.sum(1)?)
}

fn conv3x3(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.conv2d(w, 1, 1, 1, 1)?;
    Ok(y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
}

/// Source of the latent value on the decode path.
pub enum LatentInput<'a> {
    /// Encoder features are available: infer the posterior.
    Encode {
        enc: &'a Tensor,
        mode: LatentMode,
    },
    /// Decoder only: the symbols come from the bitstream.
    Symbols(Vec<i32>),
}

/// One latent variable block.
#[derive(Debug, Clone)]
pub struct LatentBlock {
    index: usize,
    variant: Variant,
    width: usize,
    channels: usize,
    prior_w: Tensor,
    prior_b: Tensor,
    merge_w: Tensor,
    merge_b: Tensor,
    post_blocks: Vec<BConvNeXt>,
    post_out_w: Tensor,
    post_out_b: Tensor,
    embed_w: Tensor,
    embed_b: Tensor,
}

impl LatentBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        scope: &mut Scope,
        index: usize,
        variant: Variant,
        width: usize,
        channels: usize,
        posterior_blocks: usize,
        d_lambda: usize,
    ) -> Result<Self> {
        let (c, zc) = (width, channels);
        let post_out = match variant {
            Variant::Student => zc,
            Variant::Teacher => 2 * zc,
        };
        let mut post_blocks = Vec::with_capacity(posterior_blocks);
        for i in 0..posterior_blocks {
            post_blocks.push(BConvNeXt::new(&mut scope.sub(format!("posterior.{i}")), c, d_lambda)?);
        }
        Ok(Self {
            index,
            variant,
            width: c,
            channels: zc,
            prior_w: scope.param("prior.weight", &[2 * zc, c, 3, 3], Init::FanIn(9 * c))?,
            prior_b: scope.param("prior.bias", &[2 * zc], Init::Zeros)?,
            merge_w: scope.param("merge.weight", &[c, 2 * c, 3, 3], Init::FanIn(18 * c))?,
            merge_b: scope.param("merge.bias", &[c], Init::Zeros)?,
            post_blocks,
            post_out_w: scope.param("posterior.out.weight", &[post_out, c], Init::FanIn(c))?,
            post_out_b: scope.param("posterior.out.bias", &[post_out], Init::Zeros)?,
            embed_w: scope.param("embed.weight", &[c, zc], Init::FanIn(zc))?,
            embed_b: scope.param("embed.bias", &[c], Init::Zeros)?,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn latent_channels(&self) -> usize {
        self.channels
    }

    pub fn prior(&self, dec: &Tensor) -> Result<PriorParams> {
        let zc = self.channels;
        let out = conv3x3(dec, &self.prior_w, &self.prior_b)?;
        let mu_hat = out.narrow(1, 0, zc)?;
        let log_sigma = out.narrow(1, zc, zc)?.clamp(SIGMA_MIN.ln(), PRIOR_LOG_SIGMA_MAX)?;
        Ok(PriorParams {
            mu_hat,
            sigma_hat: log_sigma.exp()?,
        })
    }

    pub fn posterior(&self, dec: &Tensor, enc: &Tensor, e: &LambdaEmbedding) -> Result<PosteriorParams> {
        if dec.dims() != enc.dims() {
            return Err(dim_err!(
                "decoder features {:?} and encoder features {:?} are not aligned",
                dec.dims(),
                enc.dims()
            ));
        }
        let mut h = conv3x3(&Tensor::cat(&[dec, enc], 1)?, &self.merge_w, &self.merge_b)?;
        for blk in &self.post_blocks {
            h = blk.forward(&h, e)?;
        }
        let out = pointwise(&h, &self.post_out_w, Some(&self.post_out_b))?;
        let zc = self.channels;
        Ok(match self.variant {
            Variant::Student => PosteriorParams { mu: out, sigma: None },
            Variant::Teacher => {
                let (lo, hi) = TEACHER_LOG_SIGMA_RANGE;
                PosteriorParams {
                    mu: out.narrow(1, 0, zc)?,
                    sigma: Some(out.narrow(1, zc, zc)?.clamp(lo, hi)?.exp()?),
                }
            }
        })
    }

    /// Adds the embedded latent to the decoder features.
    pub fn inject(&self, dec: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok((dec + pointwise(z, &self.embed_w, Some(&self.embed_b))?)?)
    }

    pub fn forward(
        &self,
        dec: &Tensor,
        input: LatentInput<'_>,
        e: &LambdaEmbedding,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, LatentRecord)> {
        let (_, c, _, _) = dec.dims4()?;
        if c != self.width {
            return Err(dim_err!("latent block of width {} got {c} channels", self.width));
        }
        let prior = self.prior(dec)?;
        let (z, posterior, symbols, rate_bits) = match input {
            LatentInput::Encode { enc, mode } => {
                let post = self.posterior(dec, enc, e)?;
                match (mode, self.variant) {
                    (LatentMode::Train, Variant::Student) => {
                        let z = posterior_sample_train(&post, &uniform_noise(&post.mu, rng)?)?;
                        let rate = rate_train_student(&post, &prior, &z)?;
                        (z, Some(post), None, rate)
                    }
                    (LatentMode::Test, Variant::Student) => {
                        let (symbols, z) = quantize_test(&post, &prior)?;
                        let rate = self.symbol_rate(&prior, &symbols)?;
                        (z, Some(post), Some(symbols), rate)
                    }
                    (LatentMode::Teacher, Variant::Teacher) => {
                        let sigma = post.sigma.as_ref().expect("teacher posterior has sigma");
                        let eps = gaussian_noise(&post.mu, rng)?;
                        let z = (&post.mu + (sigma * eps)?)?;
                        let rate = kl_teacher(&post, &prior)?;
                        (z, Some(post), None, rate)
                    }
                    (mode, variant) => {
                        return Err(Error::Variant(format!(
                            "{mode:?} mode is not available for the {variant:?} latent block"
                        )))
                    }
                }
            }
            LatentInput::Symbols(symbols) => {
                if self.variant != Variant::Student {
                    return Err(Error::Variant("only the student decodes symbols".into()));
                }
                let z = dequantize(&prior.mu_hat, &symbols)?;
                let rate = self.symbol_rate(&prior, &symbols)?;
                (z, None, Some(symbols), rate)
            }
        };
        let out = self.inject(dec, &z)?;
        let record = LatentRecord {
            index: self.index,
            z,
            posterior,
            prior,
            symbols,
            rate_bits,
        };
        Ok((out, record))
    }

    fn symbol_rate(&self, prior: &PriorParams, symbols: &[i32]) -> Result<Tensor> {
        let b = prior.sigma_hat.dim(0)?;
        let sigma = host_f64(&prior.sigma_hat)?;
        let per_item = sigma.len() / b;
        let bits: Vec<f64> = sigma
            .chunks(per_item)
            .zip(symbols.chunks(per_item))
            .map(|(s, n)| s.iter().zip(n).map(|(&s, &n)| symbol_bits(s, n as i64)).sum())
            .collect();
        Ok(Tensor::from_vec(bits, b, prior.sigma_hat.device())?.to_dtype(prior.sigma_hat.dtype())?)
    }
}
