//! Differentiable Gaussian splatting on the CPU.
//!
//! Forward: EWA projection of each 3D Gaussian, one global depth sort, then
//! front-to-back alpha compositing per pixel. Two images come out of the same
//! pass: one with the base colors `c` and one with the adjusted colors
//! `a ⊙ c + b`; both share opacities and geometry.
//!
//! Backward: per-pixel adjoints of the compositing sum, reduced per Gaussian in
//! row-major pixel order, then chained through the projection into the 3D
//! parameters.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::exec;
use crate::img::Image;
use crate::scene::{rotation_matrix, rotation_matrix_backward, Camera, GaussianCloud};

const TILE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    /// Added to the diagonal of every screen-space covariance (pixels²).
    pub blur_floor: f64,
    /// Camera-space depth at or below which Gaussians are culled.
    pub near: f64,
    /// Gaussians are evaluated only inside this Mahalanobis radius.
    pub truncation_sigma: f64,
    /// Compositing for a pixel stops once transmittance drops below this.
    pub min_transmittance: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            blur_floor: 0.3,
            near: 0.01,
            truncation_sigma: 3.0,
            min_transmittance: 1e-4,
            background: [0.0; 3],
        }
    }
}

/// A Gaussian after projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: [f64; 2],
    /// Symmetric 2×2 stored as (xx, xy, yy).
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub color_out: [f64; 3],
    pub opacity: f64,
    pub source_index: usize,
}

impl ProjectedGaussian {
    /// Inverse covariance (xx, xy, yy), or `None` if not positive definite.
    pub fn conic(&self) -> Option<[f64; 3]> {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        if !(det > 0.0 && a > 0.0) {
            return None;
        }
        Some([c / det, -b / det, a / det])
    }
}

/// Projects every Gaussian in front of the near plane.
pub fn project(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Vec<ProjectedGaussian> {
    let w = camera.rotation();
    let t = camera.translation();
    let colors_out = cloud.transformed_colors();
    let mut out = Vec::with_capacity(cloud.count());
    for i in 0..cloud.count() {
        let p = w * Vector3::from(cloud.position(i)) + t;
        if p.z <= cfg.near {
            continue;
        }
        let j = jacobian(camera, &p);
        let tm = j * w;
        let cov = tm * cloud.covariance(i) * tm.transpose();
        out.push(ProjectedGaussian {
            mean2d: [camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy],
            cov2d: [cov[(0, 0)] + cfg.blur_floor, 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)] + cfg.blur_floor],
            depth: p.z,
            color: cloud.base_color(i),
            color_out: colors_out[i],
            opacity: cloud.opacity(i),
            source_index: i,
        });
    }
    out
}

fn jacobian(camera: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    )
}

/// Everything the backward pass needs from a forward render.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub image_in: Image,
    pub image_out: Image,
    /// Alpha-weighted expected depth (0 where nothing was hit).
    pub depth_map: Vec<f64>,
    pub final_transmittance: Vec<f64>,
    pub projected: Vec<ProjectedGaussian>,
    conics: Vec<[f64; 3]>,
    /// Per-pixel contributor lists in depth order: (index into `projected`, alpha).
    offsets: Vec<usize>,
    contributors: Vec<(u32, f64)>,
    background: [f64; 3],
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image_in.width
    }

    pub fn height(&self) -> usize {
        self.image_in.height
    }

    /// Contributors of pixel `(x, y)` as (projected index, alpha).
    pub fn contributors(&self, x: usize, y: usize) -> &[(u32, f64)] {
        let p = y * self.width() + x;
        &self.contributors[self.offsets[p]..self.offsets[p + 1]]
    }
}

struct RowResult {
    rgb_in: Vec<f64>,
    rgb_out: Vec<f64>,
    depth: Vec<f64>,
    transmittance: Vec<f64>,
    counts: Vec<usize>,
    contributors: Vec<(u32, f64)>,
}

/// Canonical front-to-back order: depth, ties broken by source index.
pub fn depth_order(projected: &[ProjectedGaussian]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| {
        projected[a]
            .depth
            .total_cmp(&projected[b].depth)
            .then(projected[a].source_index.cmp(&projected[b].source_index))
    });
    order
}

/// Alpha-composites the projected Gaussians into both images.
pub fn render(projected: &[ProjectedGaussian], camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    let (width, height) = (camera.width, camera.height);
    let mut conics = Vec::with_capacity(projected.len());
    for g in projected {
        let c = g.conic().ok_or_else(|| {
            Error::Internal(format!("projected covariance of gaussian {} is not positive definite", g.source_index))
        })?;
        conics.push(c);
    }
    let order = depth_order(projected);

    // Bin into tiles by the truncation ellipse's bounding box; bins keep depth order.
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &gi in &order {
        let g = &projected[gi];
        // Exact bounding box of the truncation ellipse.
        let k = cfg.truncation_sigma;
        let rx = k * g.cov2d[0].sqrt();
        let ry = k * g.cov2d[2].sqrt();
        let (x0, x1) = (g.mean2d[0] - rx, g.mean2d[0] + rx);
        let (y0, y1) = (g.mean2d[1] - ry, g.mean2d[1] + ry);
        if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
            continue;
        }
        let tx0 = (x0.max(0.0) as usize) / TILE;
        let ty0 = (y0.max(0.0) as usize) / TILE;
        let tx1 = ((x1.min((width - 1) as f64)) as usize) / TILE;
        let ty1 = ((y1.min((height - 1) as f64)) as usize) / TILE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                bins[ty * tiles_x + tx].push(gi as u32);
            }
        }
    }

    let limit = cfg.truncation_sigma * cfg.truncation_sigma;
    let rows = exec::map_indexed(height, |y| {
        let mut row = RowResult {
            rgb_in: Vec::with_capacity(width * 3),
            rgb_out: Vec::with_capacity(width * 3),
            depth: Vec::with_capacity(width),
            transmittance: Vec::with_capacity(width),
            counts: Vec::with_capacity(width),
            contributors: Vec::new(),
        };
        for x in 0..width {
            let bin = &bins[(y / TILE) * tiles_x + x / TILE];
            let mut t = 1.0;
            let mut cin = [0.0; 3];
            let mut cout = [0.0; 3];
            let mut depth = 0.0;
            let before = row.contributors.len();
            for &gi in bin {
                let g = &projected[gi as usize];
                let dx = x as f64 - g.mean2d[0];
                let dy = y as f64 - g.mean2d[1];
                let [ca, cb, cc] = conics[gi as usize];
                let q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy;
                if q > limit {
                    continue;
                }
                let alpha = g.opacity * (-0.5 * q).exp();
                let w = alpha * t;
                for k in 0..3 {
                    cin[k] += w * g.color[k];
                    cout[k] += w * g.color_out[k];
                }
                depth += w * g.depth;
                row.contributors.push((gi, alpha));
                t *= 1.0 - alpha;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            for k in 0..3 {
                row.rgb_in.push(cin[k] + t * cfg.background[k]);
                row.rgb_out.push(cout[k] + t * cfg.background[k]);
            }
            row.depth.push(if t < 1.0 { depth / (1.0 - t) } else { 0.0 });
            row.transmittance.push(t);
            row.counts.push(row.contributors.len() - before);
        }
        row
    });

    let mut image_in = Vec::with_capacity(width * height * 3);
    let mut image_out = Vec::with_capacity(width * height * 3);
    let mut depth_map = Vec::with_capacity(width * height);
    let mut final_transmittance = Vec::with_capacity(width * height);
    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut contributors = Vec::new();
    offsets.push(0);
    for row in rows {
        image_in.extend(row.rgb_in);
        image_out.extend(row.rgb_out);
        depth_map.extend(row.depth);
        final_transmittance.extend(row.transmittance);
        for c in row.counts {
            let last = *offsets.last().unwrap();
            offsets.push(last + c);
        }
        contributors.extend(row.contributors);
    }

    Ok(RenderOutput {
        image_in: Image::from_data(width, height, image_in)?,
        image_out: Image::from_data(width, height, image_out)?,
        depth_map,
        final_transmittance,
        projected: projected.to_vec(),
        conics,
        offsets,
        contributors,
        background: cfg.background,
    })
}

/// Convenience: project and render.
pub fn render_cloud(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<RenderOutput> {
    render(&project(cloud, camera, cfg), camera, cfg)
}

/// Gradients w.r.t. the screen-space quantities of each projected Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProjectedGrad {
    pub mean2d: [f64; 2],
    /// Gradient w.r.t. the symmetric covariance as a full matrix (xx, xy=yx, yy).
    pub cov2d: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
    pub color_out: [f64; 3],
}

/// Adjoint of `render` w.r.t. the projected Gaussians.
pub fn render_backward_2d(output: &RenderOutput, grad_in: &Image, grad_out: &Image) -> Result<Vec<ProjectedGrad>> {
    let (width, height) = (output.width(), output.height());
    if grad_in.width != width || grad_in.height != height || !grad_in.same_shape(grad_out) {
        return Err(Error::InvalidArgument("upstream gradient does not match the rendered image".into()));
    }
    let projected = &output.projected;
    let bg = output.background;

    // Each row yields (gaussian, partial) records in pixel then depth order.
    let rows = exec::map_indexed(height, |y| {
        let mut records: Vec<(u32, [f64; 12])> = Vec::new();
        let mut ts: Vec<f64> = Vec::new();
        for x in 0..width {
            let list = output.contributors(x, y);
            if list.is_empty() {
                continue;
            }
            let p = y * width + x;
            let gi = &grad_in.data[3 * p..3 * p + 3];
            let go = &grad_out.data[3 * p..3 * p + 3];
            ts.clear();
            let mut t = 1.0;
            for &(_, alpha) in list {
                ts.push(t);
                t *= 1.0 - alpha;
            }
            let start = records.len();
            // Suffix colors (what lies behind contributor k), built back to front.
            let mut rest_in = bg;
            let mut rest_out = bg;
            for (k, &(idx, alpha)) in list.iter().enumerate().rev() {
                let g = &projected[idx as usize];
                let tk = ts[k];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    d_alpha += gi[ch] * (g.color[ch] - rest_in[ch]) + go[ch] * (g.color_out[ch] - rest_out[ch]);
                }
                d_alpha *= tk;
                let wc = tk * alpha;
                let dx = x as f64 - g.mean2d[0];
                let dy = y as f64 - g.mean2d[1];
                let [ca, cb, cc] = output.conics[idx as usize];
                let falloff = (-0.5 * (ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy)).exp();
                // alpha = opacity * exp(-q/2)
                let d_q = -0.5 * alpha * d_alpha;
                records.push((
                    idx,
                    [
                        -d_q * 2.0 * (ca * dx + cb * dy),
                        -d_q * 2.0 * (cb * dx + cc * dy),
                        d_q * dx * dx,
                        d_q * 2.0 * dx * dy,
                        d_q * dy * dy,
                        d_alpha * falloff,
                        wc * gi[0],
                        wc * gi[1],
                        wc * gi[2],
                        wc * go[0],
                        wc * go[1],
                        wc * go[2],
                    ],
                ));
                for ch in 0..3 {
                    rest_in[ch] = alpha * g.color[ch] + (1.0 - alpha) * rest_in[ch];
                    rest_out[ch] = alpha * g.color_out[ch] + (1.0 - alpha) * rest_out[ch];
                }
            }
            records[start..].reverse();
        }
        records
    });

    let mut conic_grads = vec![[0.0f64; 3]; projected.len()];
    let mut grads = vec![ProjectedGrad::default(); projected.len()];
    for (idx, r) in rows.into_iter().flatten() {
        let g = &mut grads[idx as usize];
        g.mean2d[0] += r[0];
        g.mean2d[1] += r[1];
        let cg = &mut conic_grads[idx as usize];
        cg[0] += r[2];
        cg[1] += r[3];
        cg[2] += r[4];
        g.opacity += r[5];
        for ch in 0..3 {
            g.color[ch] += r[6 + ch];
            g.color_out[ch] += r[9 + ch];
        }
    }

    // Conic (inverse covariance) gradient to covariance gradient: dCov = -A dA A.
    for (g, (cg, conic)) in grads.iter_mut().zip(conic_grads.iter().zip(&output.conics)) {
        let a = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
        // The off-diagonal conic entry appears twice in q, its gradient is split evenly.
        let d_a = Matrix2::new(cg[0], 0.5 * cg[1], 0.5 * cg[1], cg[2]);
        let d_cov = -(a * d_a * a);
        g.cov2d = [d_cov[(0, 0)], d_cov[(0, 1)], d_cov[(1, 1)]];
    }
    Ok(grads)
}

/// Gradients for every parameter of a `GaussianCloud`, same layout as the cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrad {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<f64>,
    pub color_gains: Vec<f64>,
    pub color_offsets: Vec<f64>,
    /// Norm of the screen-space mean gradient per Gaussian (refinement signal).
    pub mean2d_norm: Vec<f64>,
}

impl CloudGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![0.0; 3 * n],
            log_scales: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            opacity_logits: vec![0.0; n],
            color_logits: vec![0.0; 3 * n],
            color_gains: vec![0.0; 3 * n],
            color_offsets: vec![0.0; 3 * n],
            mean2d_norm: vec![0.0; n],
        }
    }
}

/// Chains screen-space gradients back into the cloud's parameters.
pub fn project_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    projected: &[ProjectedGaussian],
    grads: &[ProjectedGrad],
) -> CloudGrad {
    let mut out = CloudGrad::zeros(cloud.count());
    let w = camera.rotation();
    let t = camera.translation();
    for (pg, g) in projected.iter().zip(grads) {
        let i = pg.source_index;
        let p = w * Vector3::from(cloud.position(i)) + t;
        let (x, y, z) = (p.x, p.y, p.z);
        let (fx, fy) = (camera.fx, camera.fy);
        let j = jacobian(camera, &p);
        let tm = j * w;
        let rq = rotation_matrix(cloud.rotation(i));
        let s = cloud.scale(i);
        let m = rq * Matrix3::from_diagonal(&Vector3::new(s[0], s[1], s[2]));
        let sigma = m * m.transpose();

        let d_cov = Matrix2::new(g.cov2d[0], g.cov2d[1], g.cov2d[1], g.cov2d[2]);
        let d_sigma: Matrix3<f64> = tm.transpose() * d_cov * tm;
        let d_t = 2.0 * d_cov * tm * sigma;
        let d_j = d_t * w.transpose();

        let z2 = z * z;
        let z3 = z2 * z;
        let mut d_p = Vector3::new(
            g.mean2d[0] * fx / z - d_j[(0, 2)] * fx / z2,
            g.mean2d[1] * fy / z - d_j[(1, 2)] * fy / z2,
            0.0,
        );
        d_p.z = -g.mean2d[0] * fx * x / z2 - g.mean2d[1] * fy * y / z2 - d_j[(0, 0)] * fx / z2
            + d_j[(0, 2)] * 2.0 * fx * x / z3
            - d_j[(1, 1)] * fy / z2
            + d_j[(1, 2)] * 2.0 * fy * y / z3;
        let d_mu = w.transpose() * d_p;
        for k in 0..3 {
            out.positions[3 * i + k] += d_mu[k];
        }

        let d_m = 2.0 * d_sigma * m;
        let mut d_rq = Matrix3::zeros();
        for k in 0..3 {
            let mut ds = 0.0;
            for r in 0..3 {
                ds += rq[(r, k)] * d_m[(r, k)];
                d_rq[(r, k)] = d_m[(r, k)] * s[k];
            }
            out.log_scales[3 * i + k] += ds * s[k];
        }
        let dq = rotation_matrix_backward(cloud.rotation(i), &d_rq);
        for k in 0..4 {
            out.rotations[4 * i + k] += dq[k];
        }

        let o = pg.opacity;
        out.opacity_logits[i] += g.opacity * o * (1.0 - o);

        let a = cloud.gain(i);
        let c = cloud.base_color(i);
        for k in 0..3 {
            let d_c = g.color[k] + a[k] * g.color_out[k];
            out.color_logits[3 * i + k] += d_c * c[k] * (1.0 - c[k]);
            out.color_gains[3 * i + k] += c[k] * g.color_out[k];
            out.color_offsets[3 * i + k] += g.color_out[k];
        }
        out.mean2d_norm[i] += (g.mean2d[0] * g.mean2d[0] + g.mean2d[1] * g.mean2d[1]).sqrt();
    }
    out
}

/// Full backward pass from image gradients to cloud parameters.
pub fn render_backward(
    output: &RenderOutput,
    cloud: &GaussianCloud,
    camera: &Camera,
    grad_image_in: &Image,
    grad_image_out: &Image,
) -> Result<CloudGrad> {
    let grads = render_backward_2d(output, grad_image_in, grad_image_out)?;
    Ok(project_backward(cloud, camera, &output.projected, &grads))
}

/// Test-time render: adjusted colors only, clamped to [0, 1].
pub fn render_final(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<Image> {
    let mut projected = project(cloud, camera, cfg);
    for g in &mut projected {
        g.color = g.color_out;
    }
    let out = render(&projected, camera, cfg)?;
    Ok(out.image_out.clamped())
}

/// Base-color render without the adjustment, clamped to [0, 1].
pub fn render_base(cloud: &GaussianCloud, camera: &Camera, cfg: &RenderConfig) -> Result<Image> {
    Ok(render_cloud(cloud, camera, cfg)?.image_in.clamped())
}
