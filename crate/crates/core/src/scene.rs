//! Explicit Gaussian scene, cameras and per-view training records.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::ViewColorMatrix;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::tonecurve::{PriorParams, LUT_SIZE};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn unit() -> Self {
        Self::new([0.0; 3], [1.0; 3])
    }

    pub fn diagonal(&self) -> f64 {
        (0..3)
            .map(|i| (self.max[i] - self.min[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn is_degenerate(&self) -> bool {
        (0..3).any(|i| !(self.max[i] > self.min[i]))
    }
}

/// Anisotropic Gaussians stored as flat per-field arrays.
///
/// Opacity and base color live behind a sigmoid so they stay inside (0, 1)
/// without projection. `color_gains`/`color_offsets` are the per-Gaussian
/// affine map producing the enhanced color used at test time.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    /// (w, x, y, z), renormalized after every optimizer step.
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
    pub color_gains: Vec<f64>,
    pub color_offsets: Vec<f64>,
}

/// One Gaussian's parameters, used when building clouds by hand.
#[derive(Clone, Copy, Debug)]
pub struct GaussianSpec {
    pub position: [f64; 3],
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl GaussianCloud {
    pub fn empty() -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            color_logits: Vec::new(),
            color_gains: Vec::new(),
            color_offsets: Vec::new(),
        }
    }

    pub fn from_specs(specs: &[GaussianSpec]) -> Self {
        let mut c = Self::empty();
        for s in specs {
            c.push(s);
        }
        c
    }

    pub fn push(&mut self, s: &GaussianSpec) {
        self.positions.extend_from_slice(&s.position);
        self.log_scales.extend(s.scale.iter().map(|v| v.ln()));
        let n = s.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.rotations.extend(s.rotation.iter().map(|v| v / n));
        self.opacity_logits.push(logit(s.opacity));
        self.color_logits.extend(s.color.iter().map(|&v| logit(v)));
        self.color_gains.extend_from_slice(&[1.0; 3]);
        self.color_offsets.extend_from_slice(&[0.0; 3]);
    }

    pub fn count(&self) -> usize {
        self.opacity_logits.len()
    }

    #[inline]
    pub fn position(&self, i: usize) -> [f64; 3] {
        vec3(&self.positions, i)
    }

    #[inline]
    pub fn scale(&self, i: usize) -> [f64; 3] {
        let l = vec3(&self.log_scales, i);
        [l[0].exp(), l[1].exp(), l[2].exp()]
    }

    #[inline]
    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    #[inline]
    pub fn base_color(&self, i: usize) -> [f64; 3] {
        let l = vec3(&self.color_logits, i);
        [sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2])]
    }

    #[inline]
    pub fn gain(&self, i: usize) -> [f64; 3] {
        vec3(&self.color_gains, i)
    }

    #[inline]
    pub fn offset(&self, i: usize) -> [f64; 3] {
        vec3(&self.color_offsets, i)
    }

    /// `a ⊙ c + b` for every Gaussian. No clamping.
    pub fn transformed_colors(&self) -> Vec<[f64; 3]> {
        (0..self.count())
            .map(|i| affine_color(self.gain(i), self.base_color(i), self.offset(i)))
            .collect()
    }

    pub fn base_colors(&self) -> Vec<[f64; 3]> {
        (0..self.count()).map(|i| self.base_color(i)).collect()
    }

    /// World-space covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        let r = rotation_matrix(self.rotation(i));
        let s = self.scale(i);
        let m = r * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
        m * m.transpose()
    }

    pub fn renormalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    /// Keeps the Gaussians listed in `rows` (in that order, repeats allowed).
    pub fn select(&self, rows: &[usize]) -> GaussianCloud {
        GaussianCloud {
            positions: gather(&self.positions, 3, rows),
            log_scales: gather(&self.log_scales, 3, rows),
            rotations: gather(&self.rotations, 4, rows),
            opacity_logits: gather(&self.opacity_logits, 1, rows),
            color_logits: gather(&self.color_logits, 3, rows),
            color_gains: gather(&self.color_gains, 3, rows),
            color_offsets: gather(&self.color_offsets, 3, rows),
        }
    }

    pub fn append(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
        self.color_logits.extend_from_slice(&other.color_logits);
        self.color_gains.extend_from_slice(&other.color_gains);
        self.color_offsets.extend_from_slice(&other.color_offsets);
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.positions,
            &self.log_scales,
            &self.rotations,
            &self.opacity_logits,
            &self.color_logits,
            &self.color_gains,
            &self.color_offsets,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Copies `stride`-sized rows of `src` in the order given by `rows`.
pub fn gather(src: &[f64], stride: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * stride);
    for &r in rows {
        out.extend_from_slice(&src[r * stride..(r + 1) * stride]);
    }
    out
}

#[inline]
fn vec3(v: &[f64], i: usize) -> [f64; 3] {
    [v[3 * i], v[3 * i + 1], v[3 * i + 2]]
}

#[inline]
pub fn affine_color(a: [f64; 3], c: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] * c[0] + b[0], a[1] * c[1] + b[1], a[2] * c[2] + b[2]]
}

/// Random initialization inside `bounds` (stands in for structure-from-motion points).
pub fn new_cloud_random(count: usize, bounds: Aabb, seed: u64) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::InvalidArgument("gaussian count must be at least 1".into()));
    }
    if bounds.is_degenerate() {
        return Err(Error::InvalidArgument("bounds are degenerate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = bounds.diagonal() / (count as f64).cbrt() * 0.5;
    let mut cloud = GaussianCloud::empty();
    for _ in 0..count {
        let position = [0, 1, 2].map(|k| rng.gen_range(bounds.min[k]..=bounds.max[k]));
        let color = [0, 1, 2].map(|_| rng.gen_range(0.2..=0.8));
        cloud.push(&GaussianSpec {
            position,
            scale: [std; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.1,
            color,
        });
    }
    Ok(cloud)
}

/// Rotation matrix of the normalized quaternion `q = (w, x, y, z)`.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion.
pub fn rotation_matrix_backward(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r: usize, c: usize| d_r[(r, c)];
    // Gradient w.r.t. the normalized quaternion.
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    // Through the normalization: (I - q̂q̂ᵀ)/n.
    let qh = [w, x, y, z];
    let gq = [dw, dx, dy, dz];
    let dot: f64 = (0..4).map(|k| qh[k] * gq[k]).sum();
    [0, 1, 2, 3].map(|k| (gq[k] - qh[k] * dot) / n)
}

/// Pinhole camera; `world_to_camera` maps world points into a frame with
/// x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with a horizontal field of view.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: usize,
        height: usize,
        fov_x: f64,
    ) -> Result<Self> {
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-9 {
            return Err(Error::InvalidArgument("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye_v);
        let mut w2c = Matrix4::identity();
        w2c.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        w2c.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
        Self::new(width, height, f, f, width as f64 / 2.0, height as f64 / 2.0, w2c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera has zero size".into()));
        }
        let r = self.rotation();
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("world_to_camera is not a rigid transform".into()));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Row-major flattening of the 4×4 world-to-camera matrix.
    pub fn flat_matrix(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = self.world_to_camera[(r, c)];
            }
        }
        out
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }
}

/// One training view with its learnable per-view color matrix and the
/// most recent generator outputs.
#[derive(Clone, Debug)]
pub struct ViewRecord {
    pub view_id: usize,
    pub input_image: Image,
    pub camera: Camera,
    pub color_matrix: ViewColorMatrix,
    pub cached_bias: Vec<f64>,
    pub cached_prior: PriorParams,
}

impl ViewRecord {
    pub fn new(view_id: usize, input_image: Image, camera: Camera) -> Result<Self> {
        if input_image.width != camera.width || input_image.height != camera.height {
            return Err(Error::InvalidArgument(format!(
                "view {view_id}: image is {}x{} but camera is {}x{}",
                input_image.width, input_image.height, camera.width, camera.height
            )));
        }
        Ok(Self {
            view_id,
            input_image,
            camera,
            color_matrix: ViewColorMatrix::identity(),
            cached_bias: vec![0.0; LUT_SIZE],
            cached_prior: PriorParams::neutral(),
        })
    }
}

/// Checks that view ids are unique.
pub fn check_unique_ids(views: &[ViewRecord]) -> Result<()> {
    let mut ids: Vec<usize> = views.iter().map(|v| v.view_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("duplicate view id".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> GaussianCloud {
        let mut cloud = GaussianCloud::from_specs(&[GaussianSpec {
            position: [0.0; 3],
            scale: [1.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.5,
            color: [0.5; 3],
        }]);
        cloud.color_gains = a.to_vec();
        cloud.color_offsets = b.to_vec();
        cloud.color_logits = c.iter().map(|&v| logit(v)).collect();
        cloud
    }

    #[test]
    fn random_cloud_identity_affine() {
        let c = new_cloud_random(1, Aabb::unit(), 7).unwrap();
        assert_eq!(c.gain(0), [1.0; 3]);
        assert_eq!(c.offset(0), [0.0; 3]);
        assert_eq!(c.transformed_colors(), c.base_colors());
    }

    #[test]
    fn random_cloud_deterministic_and_bounded() {
        let b = Aabb::unit();
        assert_eq!(new_cloud_random(50, b, 9).unwrap(), new_cloud_random(50, b, 9).unwrap());
        let c = new_cloud_random(100, b, 3).unwrap();
        assert!((0..100).all(|i| b.contains(c.position(i))));
        let op = c.opacity(0);
        assert!((op - 0.1).abs() < 1e-12);
        assert!((0..100).all(|i| c.base_color(i).iter().all(|&v| (0.2 - 1e-12..=0.8 + 1e-12).contains(&v))));
        let expected_std = b.diagonal() / 100f64.cbrt() * 0.5;
        assert!((c.scale(0)[0] - expected_std).abs() < 1e-12);
    }

    #[test]
    fn random_cloud_rejects_zero() {
        assert!(matches!(new_cloud_random(0, Aabb::unit(), 1), Err(Error::InvalidArgument(_))));
        let flat = Aabb::new([0.0; 3], [1.0, 0.0, 1.0]);
        assert!(new_cloud_random(3, flat, 1).is_err());
    }

    #[test]
    fn affine_examples() {
        let t = |c: &GaussianCloud| c.transformed_colors()[0];
        let r = t(&one([1.0; 3], [0.0; 3], [0.3, 0.5, 0.7]));
        for (x, e) in r.iter().zip([0.3, 0.5, 0.7]) {
            assert!((x - e).abs() < 1e-12);
        }
        let r = t(&one([2.0; 3], [0.1; 3], [0.2; 3]));
        assert!(r.iter().all(|x| (x - 0.5).abs() < 1e-12));
        let r = t(&one([0.0; 3], [0.4; 3], [0.9, 0.1, 0.3]));
        assert!(r.iter().all(|x| (x - 0.4).abs() < 1e-12));
    }

    #[test]
    fn quaternion_backward_matches_fd() {
        let q = [0.9, 0.2, -0.3, 0.4];
        let weights = Matrix3::new(0.3, -1.0, 0.5, 2.0, 0.1, -0.7, 0.4, 0.9, -0.2);
        let f = |q: [f64; 4]| rotation_matrix(q).component_mul(&weights).sum();
        let g = rotation_matrix_backward(q, &weights);
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let fd = (f(qp) - f(qm)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "component {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn look_at_is_rigid_and_centered() {
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 32, 32, 0.8).unwrap();
        assert!((cam.center() - Vector3::new(0.0, 0.0, -4.0)).norm() < 1e-12);
        let p = cam.world_to_camera * nalgebra::Vector4::new(0.0, 0.0, 0.0, 1.0);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && (p.z - 4.0).abs() < 1e-12);
    }

    #[test]
    fn view_record_checks_dimensions() {
        let cam = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 8, 8, 0.8).unwrap();
        assert!(ViewRecord::new(0, Image::new(8, 7), cam.clone()).is_err());
        assert!(ViewRecord::new(0, Image::new(8, 8), cam).is_ok());
    }

    proptest! {
        #[test]
        fn affine_is_linear_in_color(alpha in 0.0f64..1.0, c1 in 0.05f64..0.95, c2 in 0.05f64..0.95,
                                     a in -2.0f64..2.0, b in -1.0f64..1.0) {
            let f = |c: f64| affine_color([a; 3], [c; 3], [b; 3])[0];
            let lhs = f(alpha * c1 + (1.0 - alpha) * c2);
            let rhs = alpha * f(c1) + (1.0 - alpha) * f(c2);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn renormalization_preserves_rotation(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0,
                                              z in -1.0f64..1.0, s in 0.5f64..2.0) {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            prop_assume!(n > 0.1);
            let q = [w / n * s, x / n * s, y / n * s, z / n * s];
            let before = rotation_matrix(q);
            let mut cloud = GaussianCloud::from_specs(&[GaussianSpec {
                position: [0.0; 3], scale: [1.0; 3], rotation: [1.0, 0.0, 0.0, 0.0], opacity: 0.5, color: [0.5; 3],
            }]);
            cloud.rotations = q.to_vec();
            cloud.renormalize_rotations();
            let after = rotation_matrix(cloud.rotation(0));
            prop_assert!((before - after).abs().max() < 1e-12);
        }
    }
}
