//! Per-view learnable 3×3 color matrices.
//!
//! Pixels are row vectors: `[r', g', b'] = [r, g, b] · M`.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::instrument;

/// Smallest |det| a view matrix may have.
pub const DET_GUARD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewColorMatrix {
    /// Row-major entries a11..a33.
    pub m: [f64; 9],
}

impl ViewColorMatrix {
    pub fn identity() -> Self {
        Self {
            m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        let mut m = [0.0; 9];
        for r in 0..3 {
            m[3 * r..3 * r + 3].copy_from_slice(&rows[r]);
        }
        Self { m }
    }

    pub fn diagonal(d: [f64; 3]) -> Self {
        Self::from_rows([[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]])
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.m)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn is_invertible(&self) -> bool {
        self.determinant().abs() >= DET_GUARD
    }

    pub fn inverse(&self) -> Result<ViewColorMatrix> {
        let det = self.determinant();
        if !(det.abs() >= DET_GUARD) {
            return Err(Error::SingularMatrix { det });
        }
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or(Error::SingularMatrix { det })?;
        let mut m = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[3 * r + c] = inv[(r, c)];
            }
        }
        Ok(Self { m })
    }
}

#[inline]
pub(crate) fn row_times(p: &[f64], m: &[f64; 9]) -> [f64; 3] {
    [
        p[0] * m[0] + p[1] * m[3] + p[2] * m[6],
        p[0] * m[1] + p[1] * m[4] + p[2] * m[7],
        p[0] * m[2] + p[1] * m[5] + p[2] * m[8],
    ]
}

fn apply(image: &Image, m: &[f64; 9]) -> Image {
    let mut out = image.clone();
    for (o, p) in out.data.chunks_exact_mut(3).zip(image.data.chunks_exact(3)) {
        o.copy_from_slice(&row_times(p, m));
    }
    out
}

/// `F(x) = x · M` per pixel. Values may leave [0, 1].
pub fn map_forward(image: &Image, m: &ViewColorMatrix) -> Image {
    instrument::record(instrument::Probe::ColorMatrix);
    apply(image, &m.m)
}

/// `y · M⁻¹` per pixel.
pub fn map_inverse(image: &Image, m: &ViewColorMatrix) -> Result<Image> {
    instrument::record(instrument::Probe::ColorMatrix);
    let inv = m.inverse()?;
    Ok(apply(image, &inv.m))
}

/// Gradients of a row-vector map `y = x · M` given `dL/dy`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixGrad {
    pub d_matrix: [f64; 9],
    pub d_input: Image,
}

/// Adjoint of `map_forward`.
pub fn forward_gradients(upstream: &Image, input: &Image, m: &ViewColorMatrix) -> Result<MatrixGrad> {
    upstream.check_same_shape(input, "matrix gradient")?;
    Ok(linear_map_backward(upstream, input, &m.m))
}

/// Adjoint of `map_inverse`, using `d(M⁻¹) = −M⁻¹ dM M⁻¹`.
pub fn inverse_gradients(upstream: &Image, input: &Image, m: &ViewColorMatrix) -> Result<MatrixGrad> {
    upstream.check_same_shape(input, "matrix gradient")?;
    let inv = m.inverse()?;
    let g = linear_map_backward(upstream, input, &inv.m);
    Ok(MatrixGrad {
        d_matrix: inverse_matrix_backward(&inv.m, &g.d_matrix),
        d_input: g.d_input,
    })
}

/// Given `dL/dN` for `N = M⁻¹`, returns `dL/dM = −Nᵀ (dL/dN) Nᵀ`.
pub(crate) fn inverse_matrix_backward(inv: &[f64; 9], d_inv: &[f64; 9]) -> [f64; 9] {
    let n = Matrix3::from_row_slice(inv);
    let g = Matrix3::from_row_slice(d_inv);
    let d = -(n.transpose() * g * n.transpose());
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = d[(r, c)];
        }
    }
    out
}

pub(crate) fn linear_map_backward(upstream: &Image, input: &Image, m: &[f64; 9]) -> MatrixGrad {
    let mut d_matrix = [0.0; 9];
    let mut d_input = Image::new(input.width, input.height);
    for ((g, x), dx) in upstream
        .data
        .chunks_exact(3)
        .zip(input.data.chunks_exact(3))
        .zip(d_input.data.chunks_exact_mut(3))
    {
        for i in 0..3 {
            for j in 0..3 {
                d_matrix[3 * i + j] += x[i] * g[j];
            }
            dx[i] = m[3 * i] * g[0] + m[3 * i + 1] * g[1] + m[3 * i + 2] * g[2];
        }
    }
    MatrixGrad { d_matrix, d_input }
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

    fn well_conditioned(seed: u64) -> ViewColorMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = ViewColorMatrix::identity();
        for v in m.m.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
        m
    }

    #[test]
    fn identity_and_permutation() {
        let im = random_image(3, 2, 1);
        assert_eq!(map_forward(&im, &ViewColorMatrix::identity()), im);
        let swap = ViewColorMatrix::from_rows([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        let out = map_forward(&im, &swap);
        for (o, p) in out.data.chunks(3).zip(im.data.chunks(3)) {
            assert_eq!([o[0], o[1], o[2]], [p[2], p[1], p[0]]);
        }
    }

    #[test]
    fn averaging_matrix() {
        let im = Image::filled(1, 1, [0.3, 0.6, 0.9]);
        let m = ViewColorMatrix { m: [1.0 / 3.0; 9] };
        let out = map_forward(&im, &m);
        assert!(out.data.iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn inverse_round_trip() {
        let im = random_image(5, 4, 2);
        assert!(map_inverse(&im, &ViewColorMatrix::identity()).unwrap().max_abs_diff(&im) < 1e-15);
        let m = well_conditioned(3);
        let back = map_inverse(&map_forward(&im, &m), &m).unwrap();
        assert!(back.max_abs_diff(&im) < 1e-6);
        let half = map_inverse(&im, &ViewColorMatrix::diagonal([2.0; 3])).unwrap();
        assert!(half.max_abs_diff(&im.map(|v| v * 0.5)) < 1e-15);
    }

    #[test]
    fn singular_matrix_rejected() {
        let im = random_image(2, 2, 4);
        let m = ViewColorMatrix::diagonal([1.0, 1.0, 1e-4]);
        assert!(matches!(map_inverse(&im, &m), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let im = random_image(3, 3, 5);
        let g = forward_gradients(&Image::new(3, 3), &im, &well_conditioned(6)).unwrap();
        assert!(g.d_matrix.iter().all(|&v| v == 0.0));
        let g = inverse_gradients(&Image::new(3, 3), &im, &well_conditioned(6)).unwrap();
        assert!(g.d_matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_hand_gradient() {
        // d(g')/d m[0][1] = r, so dL/dm01 = r · upstream_g.
        let im = Image::filled(1, 1, [0.7, 0.2, 0.4]);
        let up = Image::filled(1, 1, [0.0, 1.5, 0.0]);
        let g = forward_gradients(&up, &im, &ViewColorMatrix::identity()).unwrap();
        assert!((g.d_matrix[1] - 0.7 * 1.5).abs() < 1e-15);
    }

    #[test]
    fn inverse_path_matches_finite_differences() {
        let im = random_image(2, 2, 7);
        let up = random_image(2, 2, 8).map(|v| v - 0.5);
        let m = well_conditioned(9);
        let loss = |m: &ViewColorMatrix| -> f64 {
            let y = map_inverse(&im, m).unwrap();
            y.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
        };
        let g = inverse_gradients(&up, &im, &m).unwrap();
        for k in 0..9 {
            let mut p = m;
            let mut q = m;
            p.m[k] += 1e-6;
            q.m[k] -= 1e-6;
            let fd = (loss(&p) - loss(&q)) / 2e-6;
            let err = (fd - g.d_matrix[k]).abs() / fd.abs().max(1e-8);
            assert!(err < 1e-3 || (fd - g.d_matrix[k]).abs() < 1e-8, "entry {k}: {fd} vs {}", g.d_matrix[k]);
        }
    }

    proptest! {
        #[test]
        fn forward_map_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let x = random_image(2, 2, seed);
            let y = random_image(2, 2, seed + 1);
            let m = well_conditioned(seed + 2);
            let mut combo = x.clone();
            for (c, (p, q)) in combo.data.iter_mut().zip(x.data.iter().zip(&y.data)) {
                *c = a * p + b * q;
            }
            let lhs = map_forward(&combo, &m);
            let fx = map_forward(&x, &m);
            let fy = map_forward(&y, &m);
            for i in 0..lhs.data.len() {
                prop_assert!((lhs.data[i] - (a * fx.data[i] + b * fy.data[i])).abs() < 1e-12);
            }
        }
    }
}
