//! PSNR, rate-distortion curves and the Bjøntegaard delta rate.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Minimum PSNR overlap, in dB, for a BD-rate to be reported.
pub const MIN_OVERLAP_DB: f64 = 3.0;
/// Minimum number of points on an [`RdCurve`].
pub const MIN_CURVE_POINTS: usize = 2;

/// PSNR in dB for signals on `[0, 1]`. Identical inputs give `+inf`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(dim_err!("psnr of shapes {:?} and {:?}", x.dims(), y.dims()));
    }
    let d = (x.to_dtype(DType::F64)? - y.to_dtype(DType::F64)?)?;
    let mse = d.sqr()?.mean_all()?.to_scalar::<f64>()?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Points sorted by strictly increasing bpp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < MIN_CURVE_POINTS {
            return Err(Error::Evaluation(format!(
                "an RD curve needs at least {MIN_CURVE_POINTS} points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points
            .iter()
            .find(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr.is_finite()))
        {
            return Err(Error::Evaluation(format!(
                "invalid RD point (bpp {}, psnr {})",
                p.bpp, p.psnr
            )));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::Evaluation("RD curve has repeated bpp values".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        let lo = self.points.iter().map(|p| p.psnr).fold(f64::INFINITY, f64::min);
        let hi = self.points.iter().map(|p| p.psnr).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Log-rate as a function of PSNR. Needs PSNR strictly increasing with
    /// bpp.
    fn log_rate_interpolant(&self) -> Result<Pchip> {
        if self.points.windows(2).any(|w| w[1].psnr <= w[0].psnr) {
            return Err(Error::Evaluation(
                "PSNR must increase strictly with bpp for BD-rate".into(),
            ));
        }
        let x: Vec<f64> = self.points.iter().map(|p| p.psnr).collect();
        let y: Vec<f64> = self.points.iter().map(|p| p.bpp.ln()).collect();
        Ok(Pchip::new(x, y))
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch-Carlson slopes,
/// three-point one-sided end slopes).
#[derive(Debug, Clone)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` strictly increasing, at least two points.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        assert!(x.len() >= 2 && x.len() == y.len());
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Self { x, y, d }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let k = self.x[1..n - 1].partition_point(|&v| v <= t);
        let (x0, x1) = (self.x[k], self.x[k + 1]);
        let h = x1 - x0;
        let s = (t - x0) / h;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s),
            s * (1.0 - s) * (1.0 - s),
            s * s * (3.0 - 2.0 * s),
            s * s * (s - 1.0),
        );
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }

    /// Exact integral over `[a, b]`, both inside the knot range.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        // Four-point Gauss-Legendre is exact for the cubic pieces.
        const NODES: [f64; 4] = [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
        const WEIGHTS: [f64; 4] = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];
        let mut cuts: Vec<f64> = vec![a];
        cuts.extend(self.x.iter().copied().filter(|&v| v > a && v < b));
        cuts.push(b);
        cuts.windows(2)
            .map(|w| {
                let (mid, half) = ((w[0] + w[1]) / 2.0, (w[1] - w[0]) / 2.0);
                NODES
                    .iter()
                    .zip(WEIGHTS)
                    .map(|(&t, wt)| wt * self.eval(mid + half * t))
                    .sum::<f64>()
                    * half
            })
            .sum()
    }
}

fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// Average rate difference of `test` against `anchor` at equal PSNR, in
/// percent. Negative means `test` needs fewer bits.
pub fn bdrate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let fa = anchor.log_rate_interpolant()?;
    let ft = test.log_rate_interpolant()?;
    let (a_lo, a_hi) = anchor.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if !(hi - lo >= MIN_OVERLAP_DB) {
        return Err(Error::Evaluation(format!(
            "PSNR overlap of {:.3} dB is below {MIN_OVERLAP_DB} dB",
            (hi - lo).max(0.0)
        )));
    }
    let avg_diff = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);
    Ok((avg_diff.exp() - 1.0) * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn curve(pts: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(pts.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()).unwrap()
    }

    fn anchor() -> RdCurve {
        curve(&[(0.2, 28.1), (0.45, 31.0), (0.8, 33.6), (1.3, 36.2), (2.1, 38.9)])
    }

    /// Oracle: trapezoid rule on piecewise-linear log-rate, fine grid.
    fn linear_bd(a: &RdCurve, t: &RdCurve) -> f64 {
        let interp = |c: &RdCurve, q: f64| {
            let p = c.points();
            let k = p.windows(2).position(|w| q <= w[1].psnr).unwrap_or(p.len() - 2);
            let s = (q - p[k].psnr) / (p[k + 1].psnr - p[k].psnr);
            p[k].bpp.ln() * (1.0 - s) + p[k + 1].bpp.ln() * s
        };
        let lo = a.points()[0].psnr.max(t.points()[0].psnr);
        let hi = a.points().last().unwrap().psnr.min(t.points().last().unwrap().psnr);
        let n = 20_000;
        let step = (hi - lo) / n as f64;
        let mut acc = 0.0;
        for i in 0..n {
            let (q0, q1) = (lo + i as f64 * step, lo + (i + 1) as f64 * step);
            let f = |q| interp(t, q) - interp(a, q);
            acc += 0.5 * (f(q0) + f(q1)) * step;
        }
        ((acc / (hi - lo)).exp() - 1.0) * 100.0
    }

    #[test]
    fn psnr_cases() {
        let zeros = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(psnr(&zeros, &zeros).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&zeros, &ones).unwrap(), 0.0);
        let step = (zeros.to_dtype(DType::F64).unwrap() + 1.0 / 255.0).unwrap();
        let oracle = 20.0 * 255f64.log10();
        assert!((oracle - 48.1308).abs() < 1e-3);
        assert!((psnr(&zeros, &step).unwrap() - oracle).abs() < 1e-9);
        let small = Tensor::zeros((1, 3, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(psnr(&zeros, &small), Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_and_scaled_curves() {
        let a = anchor();
        assert_eq!(bdrate(&a, &a).unwrap(), 0.0);
        let scaled = curve(
            &a.points()
                .iter()
                .map(|p| (p.bpp * 0.9, p.psnr))
                .collect::<Vec<_>>(),
        );
        let bd = bdrate(&a, &scaled).unwrap();
        assert!((bd + 10.0).abs() < 0.1, "{bd}");
        assert!((linear_bd(&a, &scaled) + 10.0).abs() < 1e-6);
        assert!((bd - linear_bd(&a, &scaled)).abs() < 1e-6);
    }

    #[test]
    fn swapped_arguments_invert() {
        let a = anchor();
        let t = curve(&[(0.18, 28.4), (0.41, 31.5), (0.77, 34.0), (1.2, 36.3), (2.0, 39.4)]);
        let ab = bdrate(&a, &t).unwrap();
        let ba = bdrate(&t, &a).unwrap();
        assert!((ab - (-ba / (1.0 + ba / 100.0))).abs() < 0.2);
        // Smooth curves: the cubic and linear schemes agree closely.
        assert!((ab - linear_bd(&a, &t)).abs() < 1.0, "{ab} vs {}", linear_bd(&a, &t));
    }

    #[test]
    fn insufficient_overlap_is_an_error() {
        let a = curve(&[(0.2, 28.0), (0.4, 29.0), (0.8, 30.0), (1.6, 31.0)]);
        let t = curve(&[(0.2, 30.0), (0.4, 31.0), (0.8, 32.0), (1.6, 33.0)]);
        assert!(matches!(bdrate(&a, &t), Err(Error::Evaluation(_))));
    }

    #[test]
    fn pchip_interpolates_knots_and_preserves_monotonicity() {
        let x = vec![0.0, 1.0, 2.5, 3.0, 5.0];
        let y = vec![0.0, 0.3, 0.4, 2.0, 2.1];
        let p = Pchip::new(x.clone(), y.clone());
        for (xi, yi) in x.iter().zip(&y) {
            assert!((p.eval(*xi) - yi).abs() < 1e-12);
        }
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=500 {
            let v = p.eval(5.0 * i as f64 / 500.0);
            assert!(v >= prev - 1e-12);
            prev = v;
        }
        // Integral of a linear interpolant through two points.
        let line = Pchip::new(vec![0.0, 2.0], vec![1.0, 3.0]);
        assert!((line.integrate(0.0, 2.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn curve_validation() {
        assert!(RdCurve::new(vec![RdPoint { bpp: 0.1, psnr: 30.0 }]).is_err());
        assert!(RdCurve::new(vec![RdPoint { bpp: 0.1, psnr: 30.0 }, RdPoint { bpp: 0.1, psnr: 31.0 }]).is_err());
        assert!(RdCurve::new(vec![RdPoint { bpp: -0.1, psnr: 30.0 }, RdPoint { bpp: 0.2, psnr: 31.0 }]).is_err());
        let c = curve(&[(0.5, 32.0), (0.2, 30.0)]);
        assert_eq!(c.points()[0].bpp, 0.2);
    }
}
