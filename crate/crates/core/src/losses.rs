//! Training objectives and their gradients.
//!
//! Every loss returns its value together with the gradient w.r.t. each
//! differentiable argument, so the training loop never needs a tape here.

use crate::error::{Error, Result};
use crate::exec;
use crate::img::{Image, LUMA};
use crate::tonecurve::LUT_SIZE;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of DSSIM in the mixed image loss (L1 gets `1 - lambda`).
    pub lambda_dssim: f64,
    pub omega_before: f64,
    pub omega_after: f64,
    /// First iteration that uses `omega_after`.
    pub omega_switch: u64,
    pub curve_weight: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub spa_region: usize,
    /// Floor on the input's mean luminance in the spatial-consistency coefficient.
    pub spa_mean_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            omega_before: 1.0,
            omega_after: 0.1,
            omega_switch: 3000,
            curve_weight: 10.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            spa_region: 4,
            spa_mean_floor: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_dssim) {
            return Err(Error::InvalidArgument("lambda_dssim must lie in [0, 1]".into()));
        }
        if self.ssim_window == 0 || self.ssim_window % 2 == 0 {
            return Err(Error::InvalidArgument("ssim_window must be odd".into()));
        }
        if self.spa_region == 0 {
            return Err(Error::InvalidArgument("spa_region must be positive".into()));
        }
        Ok(())
    }

    /// Weight of the histogram-target term at `iteration`.
    pub fn omega(&self, iteration: u64) -> f64 {
        if iteration < self.omega_switch {
            self.omega_before
        } else {
            self.omega_after
        }
    }
}

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1D Gaussian taps.
pub fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let taps: Vec<f64> = (0..window)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable zero-padded "same" filtering of one plane. Self-adjoint for
/// symmetric kernels.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = x as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &Image, ch: usize) -> Vec<f64> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Per-channel SSIM sum and its gradients for one channel.
fn ssim_channel(x: &[f64], y: &[f64], w: usize, h: usize, k: &[f64], want_grad: bool) -> (f64, Vec<f64>, Vec<f64>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_x = blur(x, w, h, k);
    let mu_y = blur(y, w, h, k);
    let e_xx = blur(&sq(x, x), w, h, k);
    let e_yy = blur(&sq(y, y), w, h, k);
    let e_xy = blur(&sq(x, y), w, h, k);
    let n = w * h;
    let mut total = 0.0;
    let (mut g_mx, mut g_my, mut g_xx, mut g_yy, mut g_xy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        Default::default()
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = vx + vy + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if want_grad {
            let d_vx = -s / b2;
            let d_vy = d_vx;
            let d_cxy = 2.0 * a1 / (b1 * b2);
            let d_mx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            let d_my = 2.0 * mx * a2 / (b1 * b2) - s * 2.0 * my / b1;
            g_xx[i] = d_vx;
            g_yy[i] = d_vy;
            g_xy[i] = d_cxy;
            g_mx[i] = d_mx - 2.0 * mx * d_vx - my * d_cxy;
            g_my[i] = d_my - 2.0 * my * d_vy - mx * d_cxy;
        }
    }
    if !want_grad {
        return (total, Vec::new(), Vec::new());
    }
    let b_mx = blur(&g_mx, w, h, k);
    let b_my = blur(&g_my, w, h, k);
    let b_xx = blur(&g_xx, w, h, k);
    let b_yy = blur(&g_yy, w, h, k);
    let b_xy = blur(&g_xy, w, h, k);
    let dx = (0..n).map(|i| b_mx[i] + 2.0 * x[i] * b_xx[i] + y[i] * b_xy[i]).collect();
    let dy = (0..n).map(|i| b_my[i] + 2.0 * y[i] * b_yy[i] + x[i] * b_xy[i]).collect();
    (total, dx, dy)
}

fn ssim_impl(x: &Image, y: &Image, cfg: &LossConfig, want_grad: bool) -> Result<(f64, Image, Image)> {
    x.check_same_shape(y, "ssim")?;
    if x.is_empty() {
        return Err(Error::InvalidArgument("ssim of an empty image".into()));
    }
    let k = gaussian_kernel(cfg.ssim_window, cfg.ssim_sigma);
    let (w, h) = (x.width, x.height);
    let per_channel = exec::map_indexed(3, |ch| ssim_channel(&plane(x, ch), &plane(y, ch), w, h, &k, want_grad));
    let n = (w * h * 3) as f64;
    let mut value = 0.0;
    let mut dx = Image::new(w, h);
    let mut dy = Image::new(w, h);
    for (ch, (s, gx, gy)) in per_channel.into_iter().enumerate() {
        value += s;
        if want_grad {
            for i in 0..w * h {
                dx.data[3 * i + ch] = gx[i] / n;
                dy.data[3 * i + ch] = gy[i] / n;
            }
        }
    }
    Ok((value / n, dx, dy))
}

/// Mean SSIM over pixels and channels (Gaussian window, zero padding).
pub fn ssim(x: &Image, y: &Image, cfg: &LossConfig) -> Result<f64> {
    Ok(ssim_impl(x, y, cfg, false)?.0)
}

/// Mean SSIM and its gradients w.r.t. both images.
pub fn ssim_grad(x: &Image, y: &Image, cfg: &LossConfig) -> Result<(f64, Image, Image)> {
    ssim_impl(x, y, cfg, true)
}

/// Value of a loss with gradients for both image arguments.
#[derive(Clone, Debug)]
pub struct PairLoss {
    pub value: f64,
    pub d_pred: Image,
    pub d_target: Image,
}

/// `λ·DSSIM + (1−λ)·L1`, DSSIM = (1 − SSIM)/2.
pub fn l_3dgs(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<PairLoss> {
    pred.check_same_shape(target, "image loss")?;
    let lam = cfg.lambda_dssim;
    let n = pred.data.len() as f64;
    let mut l1 = 0.0;
    let mut d_pred = Image::new(pred.width, pred.height);
    for ((p, t), d) in pred.data.iter().zip(&target.data).zip(d_pred.data.iter_mut()) {
        let diff = p - t;
        l1 += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *d = (1.0 - lam) * sign / n;
    }
    l1 /= n;
    let mut d_target = d_pred.map(|v| -v);
    let mut value = (1.0 - lam) * l1;
    if lam > 0.0 {
        let (s, dx, dy) = ssim_grad(pred, target, cfg)?;
        value += lam * (1.0 - s) / 2.0;
        for (d, g) in d_pred.data.iter_mut().zip(&dx.data) {
            *d -= lam * 0.5 * g;
        }
        for (d, g) in d_target.data.iter_mut().zip(&dy.data) {
            *d -= lam * 0.5 * g;
        }
    }
    Ok(PairLoss {
        value,
        d_pred,
        d_target,
    })
}

/// Regression over both rendered images.
#[derive(Clone, Debug)]
pub struct RegLoss {
    pub value: f64,
    pub d_pred_in: Image,
    pub d_target_in: Image,
    pub d_pred_out: Image,
    pub d_target_out: Image,
}

pub fn l_reg(
    pred_in: &Image,
    target_in: &Image,
    pred_out: &Image,
    target_out: &Image,
    cfg: &LossConfig,
) -> Result<RegLoss> {
    let a = l_3dgs(pred_in, target_in, cfg)?;
    let b = l_3dgs(pred_out, target_out, cfg)?;
    Ok(RegLoss {
        value: a.value + b.value,
        d_pred_in: a.d_pred,
        d_target_in: a.d_target,
        d_pred_out: b.d_pred,
        d_target_out: b.d_target,
    })
}

/// Adaptive contrast coefficient `0.5 / mean(input luminance)` with a floor.
pub fn spa_coefficient(input: &Image, cfg: &LossConfig) -> f64 {
    0.5 / input.mean_luminance().max(cfg.spa_mean_floor)
}

fn pool_luminance(img: &Image, region: usize) -> (Vec<f64>, usize, usize) {
    let lum = img.luminance();
    let (rw, rh) = (img.width / region, img.height / region);
    let mut pooled = vec![0.0; rw * rh];
    let scale = 1.0 / (region * region) as f64;
    for ry in 0..rh {
        for rx in 0..rw {
            let mut acc = 0.0;
            for y in ry * region..(ry + 1) * region {
                for x in rx * region..(rx + 1) * region {
                    acc += lum[y * img.width + x];
                }
            }
            pooled[ry * rw + rx] = acc * scale;
        }
    }
    (pooled, rw, rh)
}

const NEIGHBORS: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

/// Spatial consistency between the rendered enhanced image and the input.
///
/// Both images are reduced to luminance and average-pooled over
/// `spa_region`² blocks. For each block and each of its existing 4-neighbors the
/// squared gap `(|Δpred| − k·|Δinput|)²` is summed; the total is divided by
/// the block count. `k = 0.5 / mean(input)`.
pub fn l_spa(pred_out: &Image, input: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    pred_out.check_same_shape(input, "spatial consistency")?;
    let r = cfg.spa_region;
    if pred_out.width < r || pred_out.height < r {
        return Err(Error::InvalidArgument(format!(
            "spatial consistency needs at least {r}x{r} pixels"
        )));
    }
    let k = spa_coefficient(input, cfg);
    let (p, rw, rh) = pool_luminance(pred_out, r);
    let (q, _, _) = pool_luminance(input, r);
    let regions = (rw * rh) as f64;
    let mut value = 0.0;
    let mut d_pool = vec![0.0; rw * rh];
    for ry in 0..rh {
        for rx in 0..rw {
            let i = ry * rw + rx;
            for (dx, dy) in NEIGHBORS {
                let nx = rx as isize + dx;
                let ny = ry as isize + dy;
                if nx < 0 || ny < 0 || nx >= rw as isize || ny >= rh as isize {
                    continue;
                }
                let j = ny as usize * rw + nx as usize;
                let dp = p[i] - p[j];
                let gap = dp.abs() - k * (q[i] - q[j]).abs();
                value += gap * gap;
                let s = if dp > 0.0 {
                    1.0
                } else if dp < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let g = 2.0 * gap * s / regions;
                d_pool[i] += g;
                d_pool[j] -= g;
            }
        }
    }
    let mut d_pred = Image::new(pred_out.width, pred_out.height);
    let scale = 1.0 / (r * r) as f64;
    for ry in 0..rh {
        for rx in 0..rw {
            let g = d_pool[ry * rw + rx] * scale;
            for y in ry * r..(ry + 1) * r {
                for x in rx * r..(rx + 1) * r {
                    let o = 3 * (y * pred_out.width + x);
                    for ch in 0..3 {
                        d_pred.data[o + ch] = g * LUMA[ch];
                    }
                }
            }
        }
    }
    Ok((value / regions, d_pred))
}

/// Curve loss value and its gradients w.r.t. the curve and the prior.
#[derive(Clone, Debug)]
pub struct CurveLoss {
    pub value: f64,
    pub d_curve: Vec<f64>,
    pub d_prior: Vec<f64>,
}

/// `ω·mean((L − cdf)²) + 0.5·mean((L − prior)²)`.
pub fn l_curve(curve: &[f64], target_cdf: &[f64], prior: &[f64], iteration: u64, cfg: &LossConfig) -> Result<CurveLoss> {
    if curve.len() != LUT_SIZE || target_cdf.len() != LUT_SIZE || prior.len() != LUT_SIZE {
        return Err(Error::InvalidArgument("curve loss expects 256-entry vectors".into()));
    }
    let omega = cfg.omega(iteration);
    let n = LUT_SIZE as f64;
    let mut value = 0.0;
    let mut d_curve = vec![0.0; LUT_SIZE];
    let mut d_prior = vec![0.0; LUT_SIZE];
    for i in 0..LUT_SIZE {
        let a = curve[i] - target_cdf[i];
        let b = curve[i] - prior[i];
        value += omega * a * a + 0.5 * b * b;
        d_curve[i] = (2.0 * omega * a + b) / n;
        d_prior[i] = -b / n;
    }
    Ok(CurveLoss {
        value: value / n,
        d_curve,
        d_prior,
    })
}

/// `(1/255)·Σ (L[i+1] − L[i])²`.
pub fn l_tv(curve: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut d = vec![0.0; curve.len()];
    let norm = 1.0 / (LUT_SIZE - 1) as f64;
    for i in 0..curve.len().saturating_sub(1) {
        let diff = curve[i + 1] - curve[i];
        value += diff * diff;
        d[i + 1] += 2.0 * diff * norm;
        d[i] -= 2.0 * diff * norm;
    }
    (value * norm, d)
}

/// All terms of one iteration's objective.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_reg: f64,
    pub l_spa: f64,
    pub l_curve: f64,
    pub l_tv: f64,
    pub l_total: f64,
    /// (group name, gradient L2 norm).
    pub grad_norms: Vec<(String, f64)>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_reg, self.l_spa, self.l_curve, self.l_tv, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_reg + L_spa + L_tv + w·L_curve`.
pub fn l_total(l_reg: f64, l_spa: f64, l_curve: f64, l_tv: f64, cfg: &LossConfig) -> LossReport {
    LossReport {
        l_reg,
        l_spa,
        l_curve,
        l_tv,
        l_total: l_reg + l_spa + l_tv + cfg.curve_weight * l_curve,
        grad_norms: Vec::new(),
    }
}
