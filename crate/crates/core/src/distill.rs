//! Bound-guided training losses: affinity matrices, feature alignment,
//! reconstruction supervision and the overall objective.
//!
//! Rates are in bits; `L_lambda = bits per pixel + lambda * MSE` with pixel
//! values on `[0, 1]`. L1 terms use a zero subgradient at zero.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BConvNeXt, LambdaEmbedding, LAMBDA_MAX, LAMBDA_MIN};
use crate::error::{dim_err, Error, Result};
use crate::model::{ArchConfig, CodecOutput, NUM_TAPS};
use crate::nn::{abs_zero_subgrad, scalar};
use crate::params::{ParamStore, Scope};

/// Added to channel norms before dividing.
pub const AFFINITY_EPS: f64 = 1e-8;
/// Weight of the summed feature losses.
pub const W_FEATURE: f64 = 1.0;
/// Weight of the reconstruction supervision loss.
pub const W_RS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// Plain rate-distortion training.
    #[default]
    None,
    /// Affinity feature alignment plus reconstruction supervision.
    Affinity,
    /// Mean squared tap difference, an ablation baseline.
    Mse,
}

/// Pixel-to-pixel cosine similarity, `(b, c, h, w)` to `(b, hw, hw)`.
pub fn affinity(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.reshape((b, c, h * w))?;
    let norm = (flat.sqr()?.sum_keepdim(1)?.sqrt()? + AFFINITY_EPS)?;
    let n = flat.broadcast_div(&norm)?;
    Ok(n.transpose(1, 2)?.contiguous()?.matmul(&n)?)
}

/// L1 plus cosine distance between two affinity matrices, taken over the
/// whole batch at once.
pub fn loss_feature(a_b: &Tensor, a_p: &Tensor) -> Result<Tensor> {
    if a_b.dims() != a_p.dims() {
        return Err(dim_err!("affinity shapes {:?} and {:?} differ", a_b.dims(), a_p.dims()));
    }
    let l1 = abs_zero_subgrad(&(a_b - a_p)?)?.mean_all()?;
    let (fb, fp) = (a_b.flatten_all()?, a_p.flatten_all()?);
    let dot = (&fb * &fp)?.sum_all()?;
    let norms = (fb.sqr()?.sum_all()?.sqrt()? * fp.sqr()?.sum_all()?.sqrt()?)?;
    let cos = (dot / norms)?;
    Ok((l1 + cos.affine(-1.0, 1.0)?)?)
}

/// Mean absolute difference of two reconstructions.
pub fn loss_rs(xhat_b: &Tensor, xhat_p: &Tensor) -> Result<Tensor> {
    if xhat_b.dims() != xhat_p.dims() {
        return Err(dim_err!(
            "reconstruction shapes {:?} and {:?} differ",
            xhat_b.dims(),
            xhat_p.dims()
        ));
    }
    Ok(abs_zero_subgrad(&(xhat_b - xhat_p)?)?.mean_all()?)
}

/// Mean squared difference of two tap tensors.
pub fn loss_mse(f_b: &Tensor, f_p: &Tensor) -> Result<Tensor> {
    if f_b.dims() != f_p.dims() {
        return Err(dim_err!("tap shapes {:?} and {:?} differ", f_b.dims(), f_p.dims()));
    }
    Ok((f_b - f_p)?.sqr()?.mean_all()?)
}

/// Log-uniform draw from `[64, 8192]`.
pub fn sample_lambda(rng: &mut impl Rng) -> f64 {
    let (lo, hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    rng.random_range(lo..=hi).exp().clamp(LAMBDA_MIN, LAMBDA_MAX)
}

/// Two B-ConvNeXt blocks whose outputs are averaged. Starts as the identity.
#[derive(Debug, Clone)]
pub struct TapAdapter {
    first: BConvNeXt,
    second: BConvNeXt,
}

impl TapAdapter {
    pub fn new(scope: &mut Scope, channels: usize, d_lambda: usize) -> Result<Self> {
        Ok(Self {
            first: BConvNeXt::with_output_init(&mut scope.sub("a"), channels, d_lambda, true)?,
            second: BConvNeXt::with_output_init(&mut scope.sub("b"), channels, d_lambda, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, e: &LambdaEmbedding) -> Result<Tensor> {
        Ok(((self.first.forward(x, e)? + self.second.forward(x, e)?)? * 0.5)?)
    }
}

/// Student-side adapters for every feature tap, in their own parameter
/// store. They are trained with the student and dropped at inference.
pub struct Adapters {
    store: ParamStore,
    taps: Vec<TapAdapter>,
}

impl Adapters {
    pub fn new(config: &ArchConfig, seed: u64, dtype: candle_core::DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let mut root = store.root();
        let taps = config
            .tap_channels()
            .iter()
            .enumerate()
            .map(|(j, &c)| TapAdapter::new(&mut root.sub(format!("tap{}", j + 1)), c, config.d_lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { store, taps })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn tap(&self, j: usize) -> &TapAdapter {
        &self.taps[j]
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_lambda: f64,
    pub l_feature: [f64; NUM_TAPS],
    pub l_rs: f64,
    pub total: f64,
    pub lambda: f64,
    pub w_feature: f64,
    pub w_rs: f64,
}

impl LossReport {
    pub fn l_feature_sum(&self) -> f64 {
        self.l_feature.iter().sum()
    }
}

/// The differentiable objective and its report.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub l_lambda: Tensor,
    pub report: LossReport,
}

/// What the student is matched against.
pub struct GuidanceInputs<'a> {
    pub mode: Guidance,
    /// Teacher output; must not carry gradients.
    pub teacher: &'a CodecOutput,
    pub adapters: &'a Adapters,
    pub embedding: &'a LambdaEmbedding,
    /// Zero-based tap indices that contribute.
    pub taps: &'a [usize],
}

/// `bits / pixel + lambda * MSE`, averaged over the batch.
pub fn rate_distortion(out: &CodecOutput, x: &Tensor, lambda: f64) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = x.to_dtype(out.reconstruction.dtype())?;
    let bpp = (out.total_rate_bits.mean_all()? / (h * w) as f64)?;
    let mse = (&out.reconstruction - &x)?.sqr()?.mean_all()?;
    Ok((bpp + (mse * lambda)?)?)
}

/// The overall loss. `guidance` is `None` for unguided training.
pub fn loss_total(
    student: &CodecOutput,
    x: &Tensor,
    lambda: f64,
    guidance: Option<&GuidanceInputs<'_>>,
) -> Result<LossTerms> {
    if !(LAMBDA_MIN..=LAMBDA_MAX).contains(&lambda) {
        log::warn!("training lambda {lambda} outside [{LAMBDA_MIN}, {LAMBDA_MAX}]");
    }
    let l_lambda = rate_distortion(student, x, lambda)?;
    let mut total = l_lambda.clone();
    let mut l_feature = [0.0; NUM_TAPS];
    let mut l_rs = 0.0;
    if let Some(g) = guidance.filter(|g| g.mode != Guidance::None) {
        let mut feature_sum: Option<Tensor> = None;
        for &j in g.taps {
            if j >= NUM_TAPS {
                return Err(Error::Config(format!("tap index {} out of range", j + 1)));
            }
            let adapted = g.adapters.tap(j).forward(&student.features[j], g.embedding)?;
            let teacher_tap = &g.teacher.features[j];
            let term = match g.mode {
                Guidance::Affinity => loss_feature(&affinity(teacher_tap)?, &affinity(&adapted)?)?,
                Guidance::Mse => loss_mse(teacher_tap, &adapted)?,
                Guidance::None => unreachable!(),
            };
            l_feature[j] = scalar(&term)?;
            feature_sum = Some(match feature_sum {
                Some(acc) => (acc + term)?,
                None => term,
            });
        }
        if let Some(fs) = feature_sum {
            total = (total + (fs * W_FEATURE)?)?;
        }
        if g.mode == Guidance::Affinity {
            let rs = loss_rs(&g.teacher.reconstruction, &student.reconstruction)?;
            l_rs = scalar(&rs)?;
            total = (total + (rs * W_RS)?)?;
        }
    }
    let report = LossReport {
        l_lambda: scalar(&l_lambda)?,
        l_feature,
        l_rs,
        total: scalar(&total)?,
        lambda,
        w_feature: W_FEATURE,
        w_rs: W_RS,
    };
    Ok(LossTerms { total, l_lambda, report })
}

/// Detaches every tensor of a teacher output.
pub fn detach_output(out: &CodecOutput) -> CodecOutput {
    CodecOutput {
        reconstruction: out.reconstruction.detach(),
        records: out.records.clone(),
        total_rate_bits: out.total_rate_bits.detach(),
        features: out.features.iter().map(|f| f.detach()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Codec;
    use crate::testing::gradcheck;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn affinity_small_cases() {
        // Two pixels with channel vectors (1, 0) and (0, 1).
        let f = Tensor::from_vec(vec![1.0f64, 0.0, 0.0, 1.0], (1, 2, 1, 2), &Device::Cpu).unwrap();
        let a = vals(&affinity(&f).unwrap());
        for (got, want) in a.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 1e-7);
        }
        let v = Tensor::from_vec(vec![0.3f64, -2.0, 0.7], (1, 3, 1, 1), &Device::Cpu).unwrap();
        let shared = v.broadcast_as((1, 3, 4, 4)).unwrap().contiguous().unwrap();
        assert!(vals(&affinity(&shared).unwrap()).iter().all(|x| (x - 1.0).abs() < 1e-6));
    }

    #[test]
    fn feature_loss_values() {
        let a = affinity(&randn(&[2, 5, 3, 3], 1)).unwrap();
        assert!(scalar(&loss_feature(&a, &a).unwrap()).unwrap().abs() < 1e-12);
        let neg = a.neg().unwrap();
        let got = scalar(&loss_feature(&a, &neg).unwrap()).unwrap();
        let mean_abs = vals(&a).iter().map(|v| v.abs()).sum::<f64>() / a.elem_count() as f64;
        assert!((got - (2.0 * mean_abs + 2.0)).abs() < 1e-9);
        assert!(loss_feature(&a, &a.narrow(1, 0, 4).unwrap()).is_err());
    }

    #[test]
    fn rs_loss_values() {
        let x = randn(&[1, 3, 4, 4], 2);
        assert_eq!(scalar(&loss_rs(&x, &x).unwrap()).unwrap(), 0.0);
        let y = (&x + 0.1).unwrap();
        assert!((scalar(&loss_rs(&x, &y).unwrap()).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn lambda_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut draws: Vec<f64> = (0..100_000).map(|_| sample_lambda(&mut rng)).collect();
        assert!(draws.iter().all(|l| (LAMBDA_MIN..=LAMBDA_MAX).contains(l)));
        draws.sort_by(f64::total_cmp);
        let median = draws[draws.len() / 2];
        assert!((700.0..=740.0).contains(&median), "{median}");
        let mut again = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(sample_lambda(&mut again), {
            let mut r = ChaCha8Rng::seed_from_u64(42);
            sample_lambda(&mut r)
        });
    }

    #[test]
    fn guidance_vanishes_when_student_matches_teacher() {
        let config = ArchConfig::toy();
        let codec = Codec::new(config.clone(), 1).unwrap();
        let adapters = Adapters::new(&config, 2, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let out = codec.forward_train(&x, 512.0, &mut rng).unwrap();
        let teacher = detach_output(&out);
        let e = codec.embed_lambda(512.0).unwrap();
        let taps: Vec<usize> = (0..NUM_TAPS).collect();
        let g = GuidanceInputs {
            mode: Guidance::Affinity,
            teacher: &teacher,
            adapters: &adapters,
            embedding: &e,
            taps: &taps,
        };
        let terms = loss_total(&out, &x, 512.0, Some(&g)).unwrap();
        assert!((terms.report.total - terms.report.l_lambda).abs() <= 1e-5 * terms.report.l_lambda.abs());
        assert_eq!((terms.report.w_feature, terms.report.w_rs), (1.0, 1.0));
    }

    #[test]
    fn rate_gradient_matches_finite_differences() {
        use crate::latent::{rate_train_student, PosteriorParams, PriorParams};
        let mu_hat = randn(&[1, 2, 3, 3], 5);
        let sigma = (randn(&[1, 2, 3, 3], 6).abs().unwrap() + 0.3).unwrap();
        let z = randn(&[1, 2, 3, 3], 7);
        let err = gradcheck(
            |m| {
                let post = PosteriorParams { mu: z.clone(), sigma: None };
                let prior = PriorParams { mu_hat: m.clone(), sigma_hat: sigma.clone() };
                rate_train_student(&post, &prior, &z)?.sum_all().map_err(Into::into)
            },
            &mu_hat,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-3, "{err}");
    }

    #[test]
    fn feature_loss_gradient_matches_finite_differences() {
        let teacher = affinity(&randn(&[1, 8, 4, 4], 8)).unwrap();
        let f = randn(&[1, 8, 4, 4], 9);
        let err = gradcheck(|t| loss_feature(&teacher, &affinity(t)?), &f, 1e-6).unwrap();
        assert!(err <= 1e-3, "{err}");
    }
}
