//! Finite-difference gradient checking.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::scalar;

/// Compares the autodiff gradient of the scalar `f(x)` at `x` with central
/// differences of step `eps`. Returns the norm-wise relative error
/// `|g_auto - g_fd| / max(|g_auto|, |g_fd|)`.
///
/// `x` must be `F64`.
pub fn gradcheck(f: impl Fn(&Tensor) -> Result<Tensor>, x: &Tensor, eps: f64) -> Result<f64> {
    if x.dtype() != DType::F64 {
        return Err(Error::Config("gradcheck needs an f64 input".into()));
    }
    let var = Var::from_tensor(x)?;
    let out = f(var.as_tensor())?;
    let grads = out.backward()?;
    let auto = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x.elem_count()],
    };

    let base = x.flatten_all()?.to_vec1::<f64>()?;
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + eps;
        let up = scalar(&f(&Tensor::from_vec(probe.clone(), x.shape(), x.device())?)?)?;
        probe[i] = base[i] - eps;
        let down = scalar(&f(&Tensor::from_vec(probe, x.shape(), x.device())?)?)?;
        numeric.push((up - down) / (2.0 * eps));
    }

    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = auto.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&auto).max(norm(&numeric));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&diff) / scale)
}
