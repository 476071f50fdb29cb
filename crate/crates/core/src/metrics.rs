//! Quality and rate metrics, Bjøntegaard delta rate and complexity
//! accounting.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::model::{CanfVcpp, FrameMode, RefBuffer};
use crate::nn::{count_macs, ParamStore};

/// `10·log10(max² / mse)`; `+∞` for a zero error.
pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// PSNR over all samples jointly.
pub fn psnr(orig: &[f64], recon: &[f64], max_val: f64) -> Result<f64> {
    if orig.len() != recon.len() {
        return Err(Error::Shape(format!("{} vs {} samples", orig.len(), recon.len())));
    }
    if orig.is_empty() {
        return Err(Error::Metric("PSNR of an empty signal".into()));
    }
    let mse = orig.iter().zip(recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / orig.len() as f64;
    Ok(psnr_from_mse(mse, max_val))
}

/// RGB PSNR of two frames with values in `[0, 1]`, over the joint MSE of
/// all three channels.
pub fn psnr_rgb(orig: &Frame, recon: &Frame) -> Result<f64> {
    if (orig.height(), orig.width()) != (recon.height(), recon.width()) {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            orig.height(),
            orig.width(),
            recon.height(),
            recon.width()
        )));
    }
    let a: Vec<f64> = orig.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = recon.data().iter().map(|&v| v as f64).collect();
    psnr(&a, &b, 1.0)
}

pub fn bpp(bits: f64, height: usize, width: usize) -> Result<f64> {
    if height == 0 || width == 0 {
        return Err(Error::Metric("zero-area frame".into()));
    }
    Ok(bits / (height * width) as f64)
}

/// Total bits over total pixels of `(bits, height, width)` frames.
pub fn aggregate_bpp(frames: &[(f64, usize, usize)]) -> Result<f64> {
    let pixels: usize = frames.iter().map(|&(_, h, w)| h * w).sum();
    if pixels == 0 {
        return Err(Error::Metric("no pixels to average over".into()));
    }
    Ok(frames.iter().map(|f| f.0).sum::<f64>() / pixels as f64)
}

/// A rate-distortion point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub psnr: f64,
}

/// Rate-distortion curve with strictly increasing rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Metric("a curve needs at least 2 points".into()));
        }
        if points.iter().any(|p| !p.psnr.is_finite() || !p.bpp.is_finite() || p.bpp <= 0.0) {
            return Err(Error::Metric("curve points need finite PSNR and positive rate".into()));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::Metric("rates must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }
}

/// Monotone piecewise-cubic Hermite interpolant (Fritsch–Carlson slopes).
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Metric("interpolation nodes must be strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = delta[0];
            d[1] = delta[0];
            return Ok(Self { x, y, d });
        }
        for k in 1..n - 1 {
            if delta[k - 1] * delta[k] > 0.0 {
                let w1 = 2.0 * h[k] + h[k - 1];
                let w2 = h[k] + 2.0 * h[k - 1];
                d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
            }
        }
        let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
            let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
            if s.signum() != d0.signum() {
                0.0
            } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
                3.0 * d0
            } else {
                s
            }
        };
        d[0] = end(h[0], h[1], delta[0], delta[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        Ok(Self { x, y, d })
    }

    /// Exact integral over `[a, b]` inside the node range.
    fn integrate(&self, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[k], self.x[k + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if hi <= lo {
                continue;
            }
            let h = x1 - x0;
            let (y0, y1, d0, d1) = (self.y[k], self.y[k + 1], self.d[k], self.d[k + 1]);
            // p(s) = c0 + c1 s + c2 s² + c3 s³, s = x − x0
            let c0 = y0;
            let c1 = d0;
            let c2 = (3.0 * (y1 - y0) / h - 2.0 * d0 - d1) / h;
            let c3 = (d0 + d1 - 2.0 * (y1 - y0) / h) / (h * h);
            let prim = |s: f64| c0 * s + c1 * s * s / 2.0 + c2 * s.powi(3) / 3.0 + c3 * s.powi(4) / 4.0;
            total += prim(hi - x0) - prim(lo - x0);
        }
        total
    }
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent (negative
/// means savings): `log10(bpp)` is interpolated as a monotone cubic of PSNR
/// and integrated over the common PSNR range.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    if anchor.points.len() < 4 || test.points.len() < 4 {
        return Err(Error::Metric("BD-rate needs at least 4 points per curve".into()));
    }
    let fit = |c: &RdCurve| {
        let mut pts = c.points.clone();
        pts.sort_by(|a, b| a.psnr.total_cmp(&b.psnr));
        Pchip::new(pts.iter().map(|p| p.psnr).collect(), pts.iter().map(|p| p.bpp.log10()).collect())
    };
    let fa = fit(anchor)?;
    let ft = fit(test)?;
    let lo = fa.x[0].max(ft.x[0]);
    let hi = fa.x[fa.x.len() - 1].min(ft.x[ft.x.len() - 1]);
    if hi <= lo {
        return Err(Error::Metric("the curves do not overlap in PSNR".into()));
    }
    let avg = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(avg) - 1.0))
}

/// How BD-rate numbers in reports are computed.
pub const BD_RATE_METHOD: &str =
    "BD-rate: log10(bpp) vs PSNR, monotone piecewise-cubic Hermite (Fritsch–Carlson) fit, exact integral over the common PSNR range";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params_millions: f64,
    pub kmacs_per_pixel: f64,
    pub buffer_frfm: usize,
    /// Resolution the MAC count was taken at.
    pub height: usize,
    pub width: usize,
}

/// Parameter count (millions) of `store` and thousands of MACs per pixel
/// executed by `run` over `pixels` pixels.
pub fn measure_complexity(store: &ParamStore, pixels: usize, run: impl FnOnce() -> Result<()>) -> Result<(f64, f64)> {
    if pixels == 0 {
        return Err(Error::Metric("zero pixel count".into()));
    }
    let (out, macs) = count_macs(run);
    out?;
    Ok((store.num_parameters() as f64 / 1e6, macs as f64 / pixels as f64 / 1e3))
}

/// Parameter count, MACs per pixel of coding one P-frame with conditional
/// motion (frame 3 of a GOP) at `height × width`, and buffer size.
pub fn complexity_report(store: &ParamStore, model: &CanfVcpp, height: usize, width: usize) -> Result<ComplexityReport> {
    let frame = Tensor::zeros((1, 3, height, width), store.dtype(), &Device::Cpu)?;
    let mut buf = RefBuffer::new();
    for _ in 0..2 {
        model.code_frame(&mut buf, Some(&frame), (1, height, width), &mut FrameMode::Estimate)?;
    }
    let (params_millions, kmacs_per_pixel) = measure_complexity(store, height * width, || {
        model.code_frame(&mut buf, Some(&frame), (1, height, width), &mut FrameMode::Estimate)?;
        Ok(())
    })?;
    Ok(ComplexityReport {
        params_millions,
        kmacs_per_pixel,
        buffer_frfm: model.buffer_frfm(),
        height,
        width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(points.iter().map(|&(bpp, psnr)| RdPoint { bpp, psnr }).collect()).unwrap()
    }

    fn anchor() -> RdCurve {
        curve(&[(0.05, 30.1), (0.09, 32.4), (0.16, 34.6), (0.3, 36.9)])
    }

    fn scaled(c: &RdCurve, k: f64) -> RdCurve {
        curve(&c.points().iter().map(|p| (p.bpp * k, p.psnr)).collect::<Vec<_>>())
    }

    #[test]
    fn psnr_oracles() {
        assert!((psnr_from_mse(65.025, 255.0) - 30.0).abs() < 1e-9);
        assert!((psnr(&[0.0, 0.0], &[255.0, 255.0], 255.0).unwrap()).abs() < 1e-12);
        assert!(psnr(&[1.0], &[1.0], 1.0).unwrap().is_infinite());
        assert!(psnr(&[1.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn bpp_rules() {
        assert_eq!(bpp(1_036_800.0, 1080, 1920).unwrap(), 0.5);
        assert_eq!(bpp(0.0, 2, 2).unwrap(), 0.0);
        assert!(bpp(1.0, 0, 5).is_err());
        let agg = aggregate_bpp(&[(100.0, 4, 4), (60.0, 4, 4)]).unwrap();
        assert_eq!(agg, 160.0 / 32.0);
    }

    #[test]
    fn single_conv_complexity() {
        use crate::nn::{Conv2d, ConvConfig};
        let store = ParamStore::new(0);
        let conv = Conv2d::new(&store.root().pp("c"), 8, 16, ConvConfig::same(3)).unwrap();
        let x = Tensor::zeros((1, 8, 64, 64), candle_core::DType::F32, &Device::Cpu).unwrap();
        let (params, kmacs) = measure_complexity(&store, 64 * 64, || conv.forward(&x).map(|_| ())).unwrap();
        assert_eq!(store.num_parameters(), 8 * 16 * 9 + 16);
        assert_eq!(params, 1168.0 / 1e6);
        assert_eq!(kmacs * 1e3, 1152.0);
        let empty = ParamStore::new(0);
        assert_eq!(measure_complexity(&empty, 64 * 64, || Ok(())).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn report_is_resolution_declared() {
        let store = ParamStore::new(0);
        let model = CanfVcpp::new(&store, &crate::ModelConfig::tiny()).unwrap();
        let a = complexity_report(&store, &model, 64, 64).unwrap();
        let b = complexity_report(&store, &model, 64, 128).unwrap();
        assert_eq!(a.params_millions, b.params_millions);
        assert_eq!(a.buffer_frfm, 15);
        assert!(a.kmacs_per_pixel > 0.0 && b.kmacs_per_pixel > 0.0);
        assert_eq!((b.height, b.width), (64, 128));
    }

    #[test]
    fn bd_rate_oracles() {
        let a = anchor();
        assert_eq!(bd_rate(&a, &a).unwrap(), 0.0);
        assert!((bd_rate(&a, &scaled(&a, 0.5)).unwrap() + 50.0).abs() < 0.1);
        assert!((bd_rate(&a, &scaled(&a, 2.0)).unwrap() - 100.0).abs() < 0.2);
    }

    #[test]
    fn bd_rate_errors() {
        let a = anchor();
        let short = curve(&[(0.1, 30.0), (0.2, 32.0), (0.3, 33.0)]);
        assert!(bd_rate(&a, &short).is_err());
        let far = curve(&[(0.1, 50.0), (0.2, 51.0), (0.3, 52.0), (0.4, 53.0)]);
        assert!(bd_rate(&a, &far).is_err());
        assert!(RdCurve::new(vec![RdPoint { bpp: 0.1, psnr: 30.0 }, RdPoint { bpp: 0.1, psnr: 31.0 }]).is_err());
    }

    #[test]
    fn pchip_reproduces_linear_data_and_integrates_exactly() {
        let p = Pchip::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]).unwrap();
        // y = 2x + 1 → ∫_0^4 = 16 + 4
        assert!((p.integrate(0.0, 4.0) - 20.0).abs() < 1e-12);
        assert!((p.integrate(0.5, 2.5) - (2.5f64.powi(2) + 2.5 - 0.25 - 0.5)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bd_rate_is_a_multiplicative_inverse(k in 0.3f64..3.0) {
            let a = anchor();
            let b = scaled(&a, k);
            let ab = bd_rate(&a, &b).unwrap() / 100.0;
            let ba = bd_rate(&b, &a).unwrap() / 100.0;
            prop_assert!(((1.0 + ab) * (1.0 + ba) - 1.0).abs() < 5e-3);
            prop_assert!(((ab) - (k - 1.0)).abs() < 1e-9);
        }

        #[test]
        fn aggregation_ignores_order(bits in proptest::collection::vec(0.0f64..1e5, 1..8), seed in any::<u64>()) {
            let frames: Vec<(f64, usize, usize)> = bits.iter().map(|&b| (b, 16, 32)).collect();
            let mut shuffled = frames.clone();
            let n = shuffled.len();
            shuffled.rotate_left((seed as usize) % n);
            shuffled.reverse();
            let a = aggregate_bpp(&frames).unwrap();
            let b = aggregate_bpp(&shuffled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn psnr_decreases_with_mse(a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
            prop_assume!(a < b);
            prop_assert!(psnr_from_mse(a, 1.0) > psnr_from_mse(b, 1.0));
        }
    }
}
