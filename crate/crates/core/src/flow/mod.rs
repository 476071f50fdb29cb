//! Backward bilinear warping, flow rescaling and the temporal-propagated
//! flow used as the modulation state signal.
//!
//! Flow tensors are `(N, 2, H, W)`: channel 0 is the horizontal
//! displacement `dx`, channel 1 the vertical `dy`, both in pixels.

mod flo;
mod nets;

pub use flo::{read_flo, write_flo};
pub use nets::{FlowEstimator, FlowExtrapolator};

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};

/// Samples `src` (N, C, H, W) at absolute pixel coordinates `xs`, `ys`
/// (N, H', W') with bilinear weights and clamp-to-edge borders.
pub fn bilinear_sample(src: &Tensor, xs: &Tensor, ys: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = src.dims4()?;
    let (n2, oh, ow) = xs.dims3()?;
    if n2 != n || ys.dims() != xs.dims() {
        return Err(Error::Shape(format!(
            "sample grid {:?}/{:?} for source {:?}",
            xs.dims(),
            ys.dims(),
            src.dims()
        )));
    }
    let x = xs.clamp(0f64, (w - 1) as f64)?;
    let y = ys.clamp(0f64, (h - 1) as f64)?;
    let x0 = x.floor()?.detach();
    let y0 = y.floor()?.detach();
    let wx = (&x - &x0)?.unsqueeze(1)?;
    let wy = (&y - &y0)?.unsqueeze(1)?;
    let x1 = (&x0 + 1.0)?.clamp(0f64, (w - 1) as f64)?;
    let y1 = (&y0 + 1.0)?.clamp(0f64, (h - 1) as f64)?;

    let flat = src.reshape((n, c, h * w))?;
    let gather = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        let idx = ((yy * w as f64)? + xx)?
            .to_dtype(DType::U32)?
            .reshape((n, 1, oh * ow))?
            .broadcast_as((n, c, oh * ow))?
            .contiguous()?;
        Ok(flat.gather(&idx, 2)?.reshape((n, c, oh, ow))?)
    };
    let v00 = gather(&y0, &x0)?;
    let v01 = gather(&y0, &x1)?;
    let v10 = gather(&y1, &x0)?;
    let v11 = gather(&y1, &x1)?;

    let one_wx = wx.affine(-1.0, 1.0)?;
    let one_wy = wy.affine(-1.0, 1.0)?;
    let top = (v00.broadcast_mul(&one_wx)? + v01.broadcast_mul(&wx)?)?;
    let bottom = (v10.broadcast_mul(&one_wx)? + v11.broadcast_mul(&wx)?)?;
    Ok((top.broadcast_mul(&one_wy)? + bottom.broadcast_mul(&wy)?)?)
}

fn pixel_grid(n: usize, h: usize, w: usize, like: &Tensor) -> Result<(Tensor, Tensor)> {
    let dev = like.device();
    let dt = like.dtype();
    let gx = Tensor::arange(0u32, w as u32, dev)?
        .to_dtype(dt)?
        .reshape((1, 1, w))?
        .broadcast_as((n, h, w))?;
    let gy = Tensor::arange(0u32, h as u32, dev)?
        .to_dtype(dt)?
        .reshape((1, h, 1))?
        .broadcast_as((n, h, w))?;
    Ok((gx, gy))
}

/// Backward warp: `out(y, x) = src(y + dy(y, x), x + dx(y, x))`.
///
/// Differentiable with respect to both `src` and `flow`. Zero flow returns
/// `src` bit-exactly.
pub fn warp(src: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = src.dims4()?;
    let (fnn, fc, fh, fw) = flow.dims4()?;
    if fc != 2 || fh != h || fw != w || (fnn != n && fnn != 1) {
        return Err(Error::Shape(format!(
            "flow {:?} cannot warp source {:?}",
            flow.dims(),
            src.dims()
        )));
    }
    let flow = if fnn != n {
        flow.broadcast_as((n, 2, h, w))?
    } else {
        flow.clone()
    };
    let (gx, gy) = pixel_grid(n, h, w, src)?;
    let xs = (gx + flow.narrow(1, 0, 1)?.squeeze(1)?)?;
    let ys = (gy + flow.narrow(1, 1, 1)?.squeeze(1)?)?;
    bilinear_sample(src, &xs, &ys)
}

/// Bilinear resize with half-pixel centers (a 2× reduction averages 2×2
/// blocks). Differentiable.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, _, h, w) = src.dims4()?;
    if out_h == h && out_w == w {
        return Ok(src.clone());
    }
    let (gx, gy) = pixel_grid(n, out_h, out_w, src)?;
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let xs = gx.affine(sx, 0.5 * sx - 0.5)?;
    let ys = gy.affine(sy, 0.5 * sy - 0.5)?;
    bilinear_sample(src, &xs, &ys)
}

/// Resizes a flow field by `scale` and multiplies its displacements by the
/// same factor.
pub fn rescale_flow(flow: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("flow scale {scale} must be > 0")));
    }
    let (_, c, h, w) = flow.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow with {c} channels")));
    }
    let th = h as f64 * scale;
    let tw = w as f64 * scale;
    if th.fract() != 0.0 || tw.fract() != 0.0 || th < 1.0 || tw < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "scale {scale} maps {h}x{w} to non-integer size {th}x{tw}"
        )));
    }
    if scale == 1.0 {
        return Ok(flow.clone());
    }
    Ok((resize_bilinear(flow, th as usize, tw as usize)? * scale)?)
}

/// Flow from the current frame back to the first frame of the GOP,
/// accumulated after every decoded motion field.
#[derive(Debug, Clone, Default)]
pub struct PropagatedFlowState {
    flow_to_first: Option<Tensor>,
    t: usize,
}

impl PropagatedFlowState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn flow_to_first(&self) -> Option<&Tensor> {
        self.flow_to_first.as_ref()
    }

    /// Index of the last frame folded in (0 when empty).
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.flow_to_first.is_none()
    }

    /// Called at every GOP boundary.
    pub fn reset(&mut self) {
        self.flow_to_first = None;
        self.t = 0;
    }

    /// Replaces the stored field with a gradient-free copy.
    pub fn detach(&mut self) {
        if let Some(f) = self.flow_to_first.take() {
            self.flow_to_first = Some(f.detach());
        }
    }

    /// `t = 2`: store `f_hat`; otherwise `warp(prev, f_hat) + f_hat`, each
    /// displacement channel warped as its own scalar field.
    pub fn update(&mut self, f_hat: &Tensor, t: usize) -> Result<()> {
        if t < 2 {
            return Err(Error::InvalidArgument(format!("propagated flow update at t = {t}")));
        }
        let next = if t == 2 {
            f_hat.clone()
        } else {
            let prev = self.flow_to_first.as_ref().ok_or(Error::EmptyFlowState(t))?;
            (warp(prev, f_hat)? + f_hat)?
        };
        self.flow_to_first = Some(next);
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn dev() -> Device {
        Device::Cpu
    }

    fn const_flow(n: usize, h: usize, w: usize, dx: f64, dy: f64, dt: DType) -> Tensor {
        let a = Tensor::full(dx, (n, 1, h, w), &dev()).unwrap();
        let b = Tensor::full(dy, (n, 1, h, w), &dev()).unwrap();
        Tensor::cat(&[a, b], 1).unwrap().to_dtype(dt).unwrap()
    }

    /// Scalar bilinear sampler with clamped coordinates.
    fn oracle_sample(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        let v = |yy: usize, xx: usize| img[yy * w + xx];
        (1.0 - ay) * ((1.0 - ax) * v(y0, x0) + ax * v(y0, x1)) + ay * ((1.0 - ax) * v(y1, x0) + ax * v(y1, x1))
    }

    #[test]
    fn zero_flow_is_identity_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let vals: Vec<f32> = (0..2 * 3 * 9 * 7).map(|_| rng.random::<f32>()).collect();
        let src = Tensor::from_vec(vals.clone(), (2, 3, 9, 7), &dev()).unwrap();
        let flow = Tensor::zeros((2, 2, 9, 7), DType::F32, &dev()).unwrap();
        let out = warp(&src, &flow).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(out, vals);
    }

    #[test]
    fn impulse_moves_against_flow() {
        let mut img = vec![0f32; 8 * 8];
        img[3 * 8 + 4] = 1.0;
        let src = Tensor::from_vec(img, (1, 1, 8, 8), &dev()).unwrap();
        let out = warp(&src, &const_flow(1, 8, 8, 1.0, 0.0, DType::F32)).unwrap();
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (i, &x) in v.iter().enumerate() {
            let expect = if i == 3 * 8 + 3 { 1.0 } else { 0.0 };
            assert_eq!(x, expect, "pixel {i}");
        }
    }

    #[test]
    fn constant_image_invariant() {
        let src = Tensor::full(0.37f32, (1, 3, 6, 6), &dev()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let f: Vec<f32> = (0..72).map(|_| rng.random_range(-2.0..2.0)).collect();
        let flow = Tensor::from_vec(f, (1, 2, 6, 6), &dev()).unwrap();
        let out = warp(&src, &flow).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(out.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn matches_scalar_oracle() {
        let (h, w) = (7, 9);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let img: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let fl: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let src = Tensor::from_vec(img.clone(), (1, 1, h, w), &dev()).unwrap();
        let flow = Tensor::from_vec(fl.clone(), (1, 2, h, w), &dev()).unwrap();
        let out = warp(&src, &flow).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for y in 0..h {
            for x in 0..w {
                let dx = fl[y * w + x];
                let dy = fl[h * w + y * w + x];
                let e = oracle_sample(&img, h, w, y as f64 + dy, x as f64 + dx);
                assert!((out[y * w + x] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let src = Tensor::zeros((1, 3, 8, 8), DType::F32, &dev()).unwrap();
        let flow = Tensor::zeros((1, 2, 4, 4), DType::F32, &dev()).unwrap();
        assert!(matches!(warp(&src, &flow), Err(Error::Shape(_))));
    }

    /// Central differences against the analytic gradient in f64, away from
    /// integer sample positions where bilinear interpolation has kinks.
    #[test]
    fn warp_gradient_matches_finite_differences() {
        let (h, w) = (8, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let img: Vec<f64> = (0..2 * h * w).map(|_| rng.random()).collect();
        let fl: Vec<f64> = (0..2 * h * w)
            .map(|_| rng.random_range(-1i32..=1) as f64 + rng.random_range(0.2..0.8))
            .collect();
        let weights: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(weights, (1, 2, h, w), &dev()).unwrap();
        let loss_of = |s: &Tensor, f: &Tensor| -> Tensor {
            (warp(s, f).unwrap() * &wt).unwrap().sum_all().unwrap()
        };
        let sv = Var::from_tensor(&Tensor::from_vec(img.clone(), (1, 2, h, w), &dev()).unwrap()).unwrap();
        let fv = Var::from_tensor(&Tensor::from_vec(fl.clone(), (1, 2, h, w), &dev()).unwrap()).unwrap();
        let grads = loss_of(sv.as_tensor(), fv.as_tensor()).backward().unwrap();
        let gs = grads.get(sv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gf = grads.get(fv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();

        let eps = 1e-3;
        let eval = |s: &[f64], f: &[f64]| -> f64 {
            let st = Tensor::from_vec(s.to_vec(), (1, 2, h, w), &dev()).unwrap();
            let ft = Tensor::from_vec(f.to_vec(), (1, 2, h, w), &dev()).unwrap();
            loss_of(&st, &ft).to_scalar::<f64>().unwrap()
        };
        let mut checked = 0;
        for i in (0..2 * h * w).step_by(5) {
            // flow
            let sample_x = (i % w) as f64 + fl[i % (h * w)];
            let sample_y = ((i / w) % h) as f64 + fl[h * w + i % (h * w)];
            let inside = sample_x > 0.0 && sample_x < (w - 1) as f64 && sample_y > 0.0 && sample_y < (h - 1) as f64;
            let (mut fp, mut fm) = (fl.clone(), fl.clone());
            fp[i] += eps;
            fm[i] -= eps;
            let num = (eval(&img, &fp) - eval(&img, &fm)) / (2.0 * eps);
            if inside {
                let rel = (num - gf[i]).abs() / num.abs().max(gf[i].abs()).max(1e-6);
                assert!(rel < 1e-3 || (num - gf[i]).abs() < 1e-9, "flow grad {i}: {num} vs {}", gf[i]);
                checked += 1;
            }
            // source
            let (mut sp, mut sm) = (img.clone(), img.clone());
            sp[i] += eps;
            sm[i] -= eps;
            let num = (eval(&sp, &fl) - eval(&sm, &fl)) / (2.0 * eps);
            let rel = (num - gs[i]).abs() / num.abs().max(gs[i].abs()).max(1e-6);
            assert!(rel < 1e-3 || (num - gs[i]).abs() < 1e-9, "src grad {i}: {num} vs {}", gs[i]);
        }
        assert!(checked > 5);
    }

    #[test]
    fn rescale_flow_gradient_matches_finite_differences() {
        let (h, w) = (8, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let fl: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let wts: Vec<f64> = (0..2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wt = Tensor::from_vec(wts, (1, 2, 4, 4), &dev()).unwrap();
        let loss = |f: &Tensor| (rescale_flow(f, 0.5).unwrap() * &wt).unwrap().sum_all().unwrap();
        let fv = Var::from_tensor(&Tensor::from_vec(fl.clone(), (1, 2, h, w), &dev()).unwrap()).unwrap();
        let g = loss(fv.as_tensor()).backward().unwrap();
        let ga = g.get(fv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..2 * h * w {
            let mut p = fl.clone();
            let mut m = fl.clone();
            p[i] += 1e-3;
            m[i] -= 1e-3;
            let lp = loss(&Tensor::from_vec(p, (1, 2, h, w), &dev()).unwrap()).to_scalar::<f64>().unwrap();
            let lm = loss(&Tensor::from_vec(m, (1, 2, h, w), &dev()).unwrap()).to_scalar::<f64>().unwrap();
            let num = (lp - lm) / 2e-3;
            assert!((num - ga[i]).abs() <= 1e-3 * num.abs().max(ga[i].abs()).max(1e-6) + 1e-9);
        }
    }

    #[test]
    fn rescale_constant_flow() {
        let f = const_flow(1, 8, 8, 4.0, 2.0, DType::F32);
        let r = rescale_flow(&f, 0.5).unwrap();
        assert_eq!(r.dims(), &[1, 2, 4, 4]);
        let v = r.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v[..16].iter().all(|&x| x == 2.0));
        assert!(v[16..].iter().all(|&x| x == 1.0));
        assert_eq!(rescale_flow(&f, 1.0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            f.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let z = Tensor::zeros((1, 2, 8, 8), DType::F32, &dev()).unwrap();
        let zr = rescale_flow(&z, 0.25).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(zr.iter().all(|&x| x == 0.0));
        assert!(rescale_flow(&f, 0.3).is_err());
    }

    #[test]
    fn propagated_flow_recurrence() {
        let v = const_flow(1, 16, 16, 3.0, -2.0, DType::F32);
        let mut st = PropagatedFlowState::new();
        assert!(matches!(st.update(&v, 3), Err(Error::EmptyFlowState(3))));
        for t in 2..=8 {
            st.update(&v, t).unwrap();
            let acc = st.flow_to_first().unwrap();
            let k = (t - 1) as f32;
            let dx = acc.narrow(1, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let dy = acc.narrow(1, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            for y in 4..12 {
                for x in 4..12 {
                    assert!((dx[y * 16 + x] - 3.0 * k).abs() < 1e-6);
                    assert!((dy[y * 16 + x] + 2.0 * k).abs() < 1e-6);
                }
            }
        }
        st.reset();
        assert!(st.is_empty());
    }

    #[test]
    fn zero_flows_accumulate_to_zero() {
        let z = Tensor::zeros((1, 2, 8, 8), DType::F32, &dev()).unwrap();
        let mut st = PropagatedFlowState::new();
        for t in 2..6 {
            st.update(&z, t).unwrap();
            let v = st.flow_to_first().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }
}
