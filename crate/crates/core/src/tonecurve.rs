//! 256-entry tone curves: LUT application, parametric shape priors,
//! histogram-equalization targets and the per-view enhancement pipeline
//! `C_out = L(C_in · M) · M⁻¹`.

use crate::colorspace::{self, ViewColorMatrix};
use crate::error::{Error, Result};
use crate::img::{Image, LUMA};
use crate::instrument;
use crate::scene::ViewRecord;

pub const LUT_SIZE: usize = 256;
pub const POWER_EPS: f64 = 1e-4;
/// Composed curve values are clamped to this range when looked up.
pub const CURVE_VALUE_RANGE: (f64, f64) = (0.0, 1.5);

#[inline]
pub fn lut_x(i: usize) -> f64 {
    i as f64 / (LUT_SIZE - 1) as f64
}

pub fn identity_ramp() -> Vec<f64> {
    (0..LUT_SIZE).map(lut_x).collect()
}

/// The curve shared by all views. Raw parameters, no monotonicity constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCurve {
    pub values: Vec<f64>,
}

impl GlobalCurve {
    pub fn identity() -> Self {
        Self {
            values: identity_ramp(),
        }
    }
}

impl Default for GlobalCurve {
    fn default() -> Self {
        Self::identity()
    }
}

/// Global curve plus a per-view bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposedCurve {
    pub values: Vec<f64>,
}

impl ComposedCurve {
    pub fn identity() -> Self {
        Self {
            values: identity_ramp(),
        }
    }

    pub fn constant(v: f64) -> Self {
        Self {
            values: vec![v; LUT_SIZE],
        }
    }

    pub fn compose(global: &GlobalCurve, bias: &[f64]) -> Self {
        Self {
            values: global.values.iter().zip(bias).map(|(g, b)| g + b).collect(),
        }
    }
}

/// How values outside [0, 1] are looked up.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LutDomain {
    /// Clamp to [0, 1]; zero gradient outside.
    #[default]
    Clamp,
    /// Extend the first/last segment linearly.
    Extrapolate,
}

/// Lookup with linear interpolation. Returns the value, the two entry indices
/// with their weights, and d(value)/dv.
#[inline]
fn lookup(values: &[f64], v: f64, domain: LutDomain) -> (f64, [(usize, f64); 2], f64) {
    let (lo, hi) = CURVE_VALUE_RANGE;
    let entry = |i: usize| values[i].clamp(lo, hi);
    let live = |i: usize| if values[i] >= lo && values[i] <= hi { 1.0 } else { 0.0 };
    let n = (LUT_SIZE - 1) as f64;
    let outside = !(0.0..=1.0).contains(&v);
    let t = match domain {
        LutDomain::Clamp => v.clamp(0.0, 1.0) * n,
        LutDomain::Extrapolate => v * n,
    };
    let i0 = (t.floor().max(0.0) as usize).min(LUT_SIZE - 2);
    let i1 = i0 + 1;
    let w = t - i0 as f64;
    let (v0, v1) = (entry(i0), entry(i1));
    let out = v0 * (1.0 - w) + v1 * w;
    let slope = match (domain, outside) {
        (LutDomain::Clamp, true) => 0.0,
        _ => (v1 - v0) * n,
    };
    (out, [(i0, (1.0 - w) * live(i0)), (i1, w * live(i1))], slope)
}

/// Applies the curve to every channel of `image`.
pub fn apply_curve(image: &Image, curve: &ComposedCurve) -> Image {
    apply_curve_with(image, curve, LutDomain::Clamp)
}

pub fn apply_curve_with(image: &Image, curve: &ComposedCurve, domain: LutDomain) -> Image {
    instrument::record(instrument::Probe::ToneCurve);
    image.map(|v| lookup(&curve.values, v, domain).0)
}

/// Backward of `apply_curve_with`: returns (dL/dcurve, dL/dimage).
pub fn apply_curve_backward(
    image: &Image,
    curve: &ComposedCurve,
    domain: LutDomain,
    upstream: &Image,
) -> (Vec<f64>, Image) {
    let mut d_curve = vec![0.0; LUT_SIZE];
    let mut d_image = Image::new(image.width, image.height);
    for ((v, g), dv) in image.data.iter().zip(&upstream.data).zip(d_image.data.iter_mut()) {
        let (_, taps, slope) = lookup(&curve.values, *v, domain);
        for (i, w) in taps {
            d_curve[i] += w * g;
        }
        *dv = slope * g;
    }
    (d_curve, d_image)
}

/// Per-view parameters of the power and S-curve shape priors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorParams {
    /// Power exponent.
    pub g: f64,
    /// S-curve pivot in (0, 1).
    pub a: f64,
    /// S-curve exponent.
    pub b: f64,
}

impl PriorParams {
    /// What a generator with a zero head emits.
    pub fn neutral() -> Self {
        Self {
            g: 1.0,
            a: 0.5,
            b: 0.5 * 8f64.sqrt(),
        }
    }
}

/// How the power curve and S-curve are combined into one prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PriorCombine {
    /// Entry-wise product `L_po(x) · L_s(x)`.
    #[default]
    Product,
    /// Composition `L_po(L_s(x))`.
    Compose,
}

#[inline]
fn power(x: f64, g: f64) -> (f64, f64) {
    let base = x + POWER_EPS;
    let y = base.powf(g);
    (y, y * base.ln())
}

/// `(x + 1e-4)^G` on the LUT grid.
pub fn eval_power(g: f64) -> Vec<f64> {
    (0..LUT_SIZE).map(|i| power(lut_x(i), g).0).collect()
}

/// S-curve value and (dy/dA, dy/dB) at `x`.
#[inline]
fn scurve(x: f64, a: f64, b: f64) -> (f64, f64, f64) {
    if x <= a {
        let u = 1.0 - x / a;
        if u <= 0.0 {
            return (a, 1.0, 0.0);
        }
        let ub = u.powf(b);
        let y = a - a * ub;
        let dy_da = 1.0 - ub - b * u.powf(b - 1.0) * x / a;
        let dy_db = -a * ub * u.ln();
        (y, dy_da, dy_db)
    } else {
        let v = (x - a) / (1.0 - a);
        let vb = v.powf(b);
        let y = a + (1.0 - a) * vb;
        let dy_da = 1.0 - vb + b * v.powf(b - 1.0) * (x - 1.0) / (1.0 - a);
        let dy_db = (1.0 - a) * vb * v.ln();
        (y, dy_da, dy_db)
    }
}

/// Piecewise S-curve pivoting at `A` with exponent `B`.
pub fn eval_scurve(a: f64, b: f64) -> Vec<f64> {
    (0..LUT_SIZE).map(|i| scurve(lut_x(i), a, b).0).collect()
}

pub fn prior_curve(p: &PriorParams) -> Vec<f64> {
    prior_curve_with(p, PriorCombine::Product)
}

pub fn prior_curve_with(p: &PriorParams, combine: PriorCombine) -> Vec<f64> {
    (0..LUT_SIZE).map(|i| prior_entry(lut_x(i), p, combine).0).collect()
}

/// Value and gradient w.r.t. (G, A, B) of one prior entry.
#[inline]
fn prior_entry(x: f64, p: &PriorParams, combine: PriorCombine) -> (f64, [f64; 3]) {
    let (s, ds_da, ds_db) = scurve(x, p.a, p.b);
    match combine {
        PriorCombine::Product => {
            let (po, dpo_dg) = power(x, p.g);
            (po * s, [dpo_dg * s, po * ds_da, po * ds_db])
        }
        PriorCombine::Compose => {
            let (po, dpo_dg) = power(s, p.g);
            let dpo_ds = p.g * (s + POWER_EPS).powf(p.g - 1.0);
            (po, [dpo_dg, dpo_ds * ds_da, dpo_ds * ds_db])
        }
    }
}

/// Gradient of `Σ upstream[i] · prior[i]` w.r.t. (G, A, B).
pub fn prior_curve_backward(p: &PriorParams, combine: PriorCombine, upstream: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (i, g) in upstream.iter().enumerate() {
        let (_, d) = prior_entry(lut_x(i), p, combine);
        for k in 0..3 {
            out[k] += g * d[k];
        }
    }
    out
}

/// Histogram-equalization transfer function of the image's luminance:
/// `target[i]` is the fraction of pixels whose quantized luminance is ≤ i.
pub fn he_cdf_target(image: &Image) -> Result<Vec<f64>> {
    if image.is_empty() {
        return Err(Error::InvalidArgument("histogram of an empty image".into()));
    }
    let mut hist = [0u64; LUT_SIZE];
    for p in image.data.chunks_exact(3) {
        let y = LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
        let bin = (y.clamp(0.0, 1.0) * (LUT_SIZE - 1) as f64).round() as usize;
        hist[bin] += 1;
    }
    let total = image.pixel_count() as f64;
    let mut acc = 0u64;
    Ok(hist
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / total
        })
        .collect())
}

/// Intermediates of one enhancement pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct EnhanceTape {
    pub input: Image,
    pub mapped: Image,
    pub curved: Image,
    pub matrix: ViewColorMatrix,
    pub curve: ComposedCurve,
    pub domain: LutDomain,
}

/// Full enhancement with intermediates.
pub fn enhance_forward(
    input: &Image,
    matrix: &ViewColorMatrix,
    curve: &ComposedCurve,
    domain: LutDomain,
) -> Result<(Image, EnhanceTape)> {
    let mapped = colorspace::map_forward(input, matrix);
    let curved = apply_curve_with(&mapped, curve, domain);
    let out = colorspace::map_inverse(&curved, matrix)?;
    Ok((
        out,
        EnhanceTape {
            input: input.clone(),
            mapped,
            curved,
            matrix: *matrix,
            curve: curve.clone(),
            domain,
        },
    ))
}

/// Gradients of the enhancement output.
#[derive(Clone, Debug)]
pub struct EnhanceGrad {
    pub d_curve: Vec<f64>,
    pub d_matrix: [f64; 9],
    pub d_input: Image,
}

pub fn enhance_backward(tape: &EnhanceTape, upstream: &Image) -> Result<EnhanceGrad> {
    let inv = colorspace::inverse_gradients(upstream, &tape.curved, &tape.matrix)?;
    let (d_curve, d_mapped) = apply_curve_backward(&tape.mapped, &tape.curve, tape.domain, &inv.d_input);
    let fwd = colorspace::forward_gradients(&d_mapped, &tape.input, &tape.matrix)?;
    let mut d_matrix = inv.d_matrix;
    for (d, f) in d_matrix.iter_mut().zip(fwd.d_matrix) {
        *d += f;
    }
    Ok(EnhanceGrad {
        d_curve,
        d_matrix,
        d_input: fwd.d_input,
    })
}

/// Pseudo-enhanced target for one view.
pub fn enhance_view(view: &ViewRecord, curve: &ComposedCurve) -> Result<Image> {
    Ok(enhance_forward(&view.input_image, &view.color_matrix, curve, LutDomain::Clamp)?.0)
}

/// Plain-text `index value` table, one line per LUT entry.
pub fn curve_table(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 24);
    for (i, v) in values.iter().enumerate() {
        s.push_str(&format!("{i} {v:.9}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn identity_and_constant_luts() {
        let im = random_image(4, 3, 1).map(|v| v * 1.4 - 0.2);
        let out = apply_curve(&im, &ComposedCurve::identity());
        assert!(out.max_abs_diff(&im.clamped()) < 1e-12);
        let out = apply_curve(&im, &ComposedCurve::constant(0.5));
        assert!(out.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn half_way_interpolation() {
        let mut c = ComposedCurve::identity();
        c.values[127] = 0.4;
        c.values[128] = 0.6;
        let out = apply_curve(&Image::filled(1, 1, [0.5; 3]), &c);
        assert!((out.data[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn curve_gradient_is_partition_of_unity() {
        let im = random_image(3, 3, 2);
        let up = Image::filled(3, 3, [1.0; 3]);
        let (d, _) = apply_curve_backward(&im, &ComposedCurve::identity(), LutDomain::Clamp, &up);
        assert!((d.iter().sum::<f64>() - 27.0).abs() < 1e-9);
    }

    #[test]
    fn clamped_input_has_zero_slope() {
        let im = Image::filled(1, 1, [-0.3, 1.2, 0.5]);
        let up = Image::filled(1, 1, [1.0; 3]);
        let (_, d) = apply_curve_backward(&im, &ComposedCurve::identity(), LutDomain::Clamp, &up);
        assert_eq!(d.data[0], 0.0);
        assert_eq!(d.data[1], 0.0);
        assert!((d.data[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extrapolation_extends_end_segments() {
        let im = Image::filled(1, 1, [-0.1, 1.1, 0.5]);
        let out = apply_curve_with(&im, &ComposedCurve::identity(), LutDomain::Extrapolate);
        assert!((out.data[0] + 0.1).abs() < 1e-12);
        assert!((out.data[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn power_examples() {
        let p = eval_power(1.0);
        assert!(p.iter().enumerate().all(|(i, v)| (v - lut_x(i)).abs() <= 1e-4 + 1e-15));
        let half = eval_power(0.5);
        // 0.25 is not on the 1/255 grid; check the scalar map directly.
        assert!((power(0.25, 0.5).0 - 0.5001).abs() < 1e-7);
        assert!((half[255] - 1.0001f64.sqrt()).abs() < 1e-15);
        let p = eval_power(2.7);
        assert!((p[0] - 1e-4f64.powf(2.7)).abs() < 1e-20);
    }

    #[test]
    fn scurve_examples() {
        let s = eval_scurve(0.37, 1.0);
        assert!(s.iter().enumerate().all(|(i, v)| (v - lut_x(i)).abs() < 1e-12));
        let (y, _, _) = scurve(0.25, 0.5, 2.0);
        assert!((y - 0.375).abs() < 1e-12);
        for &(a, b) in &[(0.3, 0.7), (0.5, 2.0), (0.8, 3.5)] {
            assert!((scurve(a, a, b).0 - a).abs() < 1e-15);
        }
    }

    #[test]
    fn prior_examples() {
        let p = prior_curve(&PriorParams { g: 1.0, a: 0.5, b: 1.0 });
        for (i, v) in p.iter().enumerate() {
            let x = lut_x(i);
            assert!((v - (x + 1e-4) * x).abs() < 1e-12);
        }
        let p = prior_curve(&PriorParams { g: 2.3, a: 0.4, b: 1.7 });
        assert_eq!(p[0], 0.0);
        assert!((p[255] - 1.0001f64.powf(2.3)).abs() < 1e-12);
    }

    #[test]
    fn prior_gradients_match_finite_differences() {
        let up: Vec<f64> = (0..LUT_SIZE).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        for combine in [PriorCombine::Product, PriorCombine::Compose] {
            for p in [
                PriorParams { g: 0.7, a: 0.3, b: 1.8 },
                PriorParams { g: 2.2, a: 0.6123, b: 0.7 },
            ] {
                let f = |q: &PriorParams| -> f64 {
                    prior_curve_with(q, combine).iter().zip(&up).map(|(a, b)| a * b).sum()
                };
                let g = prior_curve_backward(&p, combine, &up);
                let h = 1e-6;
                let fds = [
                    (f(&PriorParams { g: p.g + h, ..p }) - f(&PriorParams { g: p.g - h, ..p })) / (2.0 * h),
                    (f(&PriorParams { a: p.a + h, ..p }) - f(&PriorParams { a: p.a - h, ..p })) / (2.0 * h),
                    (f(&PriorParams { b: p.b + h, ..p }) - f(&PriorParams { b: p.b - h, ..p })) / (2.0 * h),
                ];
                for k in 0..3 {
                    let err = (fds[k] - g[k]).abs();
                    assert!(err < 1e-3 * fds[k].abs().max(1e-2), "{combine:?} {p:?} k={k}: {} vs {}", fds[k], g[k]);
                }
            }
        }
    }

    #[test]
    fn he_cdf_examples() {
        let black = Image::new(4, 4);
        assert!(he_cdf_target(&black).unwrap().iter().all(|&v| v == 1.0));

        let half = Image::from_fn(4, 2, |x, _| if x < 2 { [0.0; 3] } else { [1.0; 3] });
        let t = he_cdf_target(&half).unwrap();
        assert!(t[..255].iter().all(|&v| v == 0.5));
        assert_eq!(t[255], 1.0);

        let flat = Image::from_fn(16, 16, |x, y| [lut_x(y * 16 + x); 3]);
        let t = he_cdf_target(&flat).unwrap();
        for (i, v) in t.iter().enumerate() {
            assert!((v - (i + 1) as f64 / 256.0).abs() < 1e-12, "bin {i}");
        }
        assert!(he_cdf_target(&Image::new(0, 0)).is_err());
    }

    #[test]
    fn enhance_examples() {
        let cam = crate::scene::Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 4, 4, 0.9).unwrap();
        let im = random_image(4, 4, 5);
        let mut view = ViewRecord::new(0, im.clone(), cam).unwrap();
        let out = enhance_view(&view, &ComposedCurve::identity()).unwrap();
        assert!(out.max_abs_diff(&im) < 1e-6);
        let out = enhance_view(&view, &ComposedCurve::constant(0.5)).unwrap();
        assert!(out.data.iter().all(|v| (v - 0.5).abs() < 1e-12));

        view.input_image = Image::filled(4, 4, [0.2; 3]);
        view.color_matrix = ViewColorMatrix::diagonal([2.0; 3]);
        let (out, tape) = enhance_forward(&view.input_image, &view.color_matrix, &ComposedCurve::identity(), LutDomain::Clamp).unwrap();
        assert!(tape.mapped.data.iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(out.data.iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn enhance_backward_matches_finite_differences() {
        let im = random_image(3, 3, 11);
        let up = random_image(3, 3, 12).map(|v| v - 0.5);
        let mut m = ViewColorMatrix::identity();
        m.m = [1.1, 0.05, -0.02, 0.03, 0.9, 0.04, -0.01, 0.02, 1.05];
        let curve = ComposedCurve {
            values: (0..LUT_SIZE).map(|i| lut_x(i).powf(0.7) * 1.05).collect(),
        };
        let loss = |m: &ViewColorMatrix, c: &ComposedCurve| -> f64 {
            let (o, _) = enhance_forward(&im, m, c, LutDomain::Clamp).unwrap();
            o.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = enhance_forward(&im, &m, &curve, LutDomain::Clamp).unwrap();
        let g = enhance_backward(&tape, &up).unwrap();
        let h = 1e-7;
        for k in 0..9 {
            let mut p = m;
            let mut q = m;
            p.m[k] += h;
            q.m[k] -= h;
            let fd = (loss(&p, &curve) - loss(&q, &curve)) / (2.0 * h);
            assert!((fd - g.d_matrix[k]).abs() < 1e-3 * fd.abs().max(1e-3), "m{k}: {fd} vs {}", g.d_matrix[k]);
        }
        for k in [0usize, 40, 100, 200, 255] {
            let mut p = curve.clone();
            let mut q = curve.clone();
            p.values[k] += 1e-6;
            q.values[k] -= 1e-6;
            let fd = (loss(&m, &p) - loss(&m, &q)) / 2e-6;
            assert!((fd - g.d_curve[k]).abs() < 1e-6, "entry {k}: {fd} vs {}", g.d_curve[k]);
        }
    }

    proptest! {
        #[test]
        fn he_cdf_monotone(seed in 0u64..500, w in 1usize..12, h in 1usize..12) {
            let t = he_cdf_target(&random_image(w, h, seed)).unwrap();
            prop_assert!(t.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(t[255], 1.0);
        }

        #[test]
        fn scurve_continuous_at_pivot(a in 0.01f64..0.99, b in 0.5f64..4.0) {
            // Both branch formulas evaluated exactly at the pivot.
            let left = a - a * (1.0 - a / a).powf(b);
            let right = a + (1.0 - a) * ((a - a) / (1.0 - a)).powf(b);
            prop_assert!((left - right).abs() < 1e-9);
            prop_assert!((scurve(a, a, b).0 - left).abs() < 1e-9);
            let below = scurve(a - 1e-12, a, b).0;
            let above = scurve(a + 1e-12, a, b).0;
            prop_assert!(below <= a + 1e-15 && above >= a - 1e-15);
        }

        #[test]
        fn prior_in_range(g in 0.25f64..4.0, a in 0.01f64..0.99, b in 0.5f64..4.0) {
            let p = prior_curve(&PriorParams { g, a, b });
            let hi = (1.0 + 1e-4f64).powf(g);
            prop_assert!(p.iter().all(|&v| v >= 0.0 && v <= hi + 1e-12));
        }

        #[test]
        fn identity_enhancement_is_identity(seed in 0u64..500) {
            let im = random_image(5, 4, seed);
            let (out, _) = enhance_forward(&im, &ViewColorMatrix::identity(), &ComposedCurve::identity(), LutDomain::Clamp).unwrap();
            prop_assert!(out.max_abs_diff(&im) < 1e-6);
        }
    }
}
