//! Synthetic datasets with per-view exposure degradation, and loading.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{self, Frame, Transforms};
use crate::error::{Error, Result};
use crate::exec;
use crate::img::Image;
use crate::render::{render_base, RenderConfig};
use crate::scene::{check_unique_ids, Aabb, Camera, GaussianCloud, GaussianSpec, ViewRecord};

pub const TRAIN_TRANSFORMS: &str = "transforms_train.json";
pub const TEST_TRANSFORMS: &str = "transforms_test.json";
pub const SIDECAR: &str = "degradation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Lowlight,
    Overexposure,
    Varying,
    /// Exposure 1, gamma 1: inputs equal the ground truth.
    Identity,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lowlight" => Ok(Preset::Lowlight),
            "overexposure" => Ok(Preset::Overexposure),
            "varying" => Ok(Preset::Varying),
            "identity" => Ok(Preset::Identity),
            _ => Err(Error::InvalidArgument(format!("unknown preset {s:?}"))),
        }
    }

    /// Uniform sampling ranges for (exposure, gamma).
    pub fn ranges(self) -> ((f64, f64), (f64, f64)) {
        match self {
            Preset::Lowlight => ((0.15, 0.25), (1.8, 2.4)),
            Preset::Overexposure => ((2.0, 3.0), (0.45, 0.6)),
            Preset::Varying => ((0.3, 1.4), (0.8, 1.25)),
            Preset::Identity => ((1.0, 1.0), (1.0, 1.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub exposure: f64,
    pub gamma: f64,
}

/// `clamp((s·p)^γ)` per channel on clamped inputs.
pub fn degrade(img: &Image, d: Degradation) -> Image {
    img.map(|p| (d.exposure * p.clamp(0.0, 1.0)).powf(d.gamma).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    /// Foreground Gaussians of the ground-truth scene (the backdrop is extra).
    pub gt_gaussians: usize,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub radius: f64,
    /// Half-width of the camera arc around the vertical axis, degrees.
    pub arc_degrees: f64,
    pub elevation_degrees: f64,
    pub look_at: [f64; 3],
    pub fov_x: f64,
    pub preset: Preset,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            gt_gaussians: 120,
            train_views: 16,
            test_views: 4,
            width: 64,
            height: 64,
            radius: 4.0,
            arc_degrees: 25.0,
            elevation_degrees: 8.0,
            look_at: [0.0, 0.0, 0.3],
            fov_x: 40f64.to_radians(),
            preset: Preset::Varying,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_views < 2 {
            return Err(Error::InvalidArgument("at least two training views are required".into()));
        }
        if self.width < 4 || self.height < 4 {
            return Err(Error::InvalidArgument("images must be at least 4x4".into()));
        }
        if !(self.radius > 0.0 && self.fov_x > 0.0 && self.fov_x < std::f64::consts::PI) {
            return Err(Error::InvalidArgument("radius and field of view must be positive".into()));
        }
        Ok(())
    }

    const WALL_Z: f64 = 1.8;

    /// Bounds that contain the ground-truth scene; used to initialize training.
    pub fn bounds(&self) -> Aabb {
        let (wx, wy) = self.wall_extent();
        Aabb::new([-wx, -wy, -1.2], [wx, wy, Self::WALL_Z + 0.2])
    }

    fn wall_extent(&self) -> (f64, f64) {
        // Widest ray of the outermost camera, intersected with the wall plane.
        let half = self.arc_degrees.to_radians() + 0.5 * self.fov_x;
        let depth = Self::WALL_Z + self.radius;
        let wx = (depth * half.tan()).max(1.0) + 0.5;
        let half_y = (0.5 * self.fov_x * self.height as f64 / self.width as f64) + self.elevation_degrees.to_radians();
        let wy = depth / half.cos() * half_y.tan() + 0.5;
        (wx, wy)
    }

    fn camera_at(&self, theta: f64) -> Result<Camera> {
        let e = self.elevation_degrees.to_radians();
        let eye = [
            self.radius * theta.sin() * e.cos(),
            self.radius * e.sin(),
            -self.radius * theta.cos() * e.cos(),
        ];
        Camera::look_at(eye, self.look_at, [0.0, 1.0, 0.0], self.width, self.height, self.fov_x)
    }

    /// Training cameras span the arc evenly; test cameras sit between them.
    pub fn cameras(&self) -> Result<(Vec<Camera>, Vec<Camera>)> {
        let arc = self.arc_degrees.to_radians();
        let n = self.train_views;
        let train = (0..n)
            .map(|i| self.camera_at(-arc + 2.0 * arc * i as f64 / (n - 1) as f64))
            .collect::<Result<Vec<_>>>()?;
        let m = self.test_views;
        let test = (0..m)
            .map(|j| self.camera_at(-0.9 * arc + 1.8 * arc * (j as f64 + 0.5) / m as f64))
            .collect::<Result<Vec<_>>>()?;
        Ok((train, test))
    }

    /// Near-grey colors whose luminance spans [0.03, 0.97] uniformly.
    fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
        let y: f64 = rng.gen_range(0.03..0.97);
        let chroma = 0.08 * y.min(1.0 - y) / 0.5;
        let mut c = [0.0; 3];
        for v in c.iter_mut() {
            *v = (y + rng.gen_range(-chroma..chroma)).clamp(0.02, 0.98);
        }
        c
    }

    /// Ground-truth scene: a backdrop wall plus a foreground cluster.
    pub fn ground_truth_scene(&self) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut cloud = GaussianCloud::empty();
        let (wx, wy) = self.wall_extent();
        let spacing = 0.5;
        let nx = (2.0 * wx / spacing).ceil() as usize + 1;
        let ny = (2.0 * wy / spacing).ceil() as usize + 1;
        for iy in 0..ny {
            for ix in 0..nx {
                let x = -wx + ix as f64 * spacing + rng.gen_range(-0.1..0.1);
                let y = -wy + iy as f64 * spacing + rng.gen_range(-0.1..0.1);
                cloud.push(&GaussianSpec {
                    position: [x, y, Self::WALL_Z + rng.gen_range(-0.05..0.05)],
                    scale: [0.4 * spacing, 0.4 * spacing, 0.05],
                    rotation: [1.0, 0.0, 0.0, rng.gen_range(-0.3..0.3)],
                    opacity: 0.98,
                    color: Self::color(&mut rng),
                });
            }
        }
        for _ in 0..self.gt_gaussians {
            let q = [
                rng.gen_range(0.2..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            cloud.push(&GaussianSpec {
                position: [rng.gen_range(-1.2..1.2), rng.gen_range(-0.9..0.9), rng.gen_range(-0.8..0.9)],
                scale: [rng.gen_range(0.06..0.3), rng.gen_range(0.06..0.3), rng.gen_range(0.06..0.3)],
                rotation: q,
                opacity: rng.gen_range(0.6..0.95),
                color: Self::color(&mut rng),
            });
        }
        cloud
    }

    pub fn degradations(&self) -> Vec<Degradation> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x5EED));
        let ((s0, s1), (g0, g1)) = self.preset.ranges();
        (0..self.train_views)
            .map(|_| {
                let exposure = if s1 > s0 { rng.gen_range(s0..s1) } else { s0 };
                let gamma = if g1 > g0 { rng.gen_range(g0..g1) } else { g0 };
                Degradation { exposure, gamma }
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarView {
    view_id: usize,
    file_path: String,
    exposure: f64,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    preset: Preset,
    seed: u64,
    views: Vec<SidecarView>,
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Renders the ground truth, degrades the training views and writes the dataset.
pub fn synth_dataset(spec: &DatasetSpec, out: &Path) -> Result<()> {
    spec.validate()?;
    let (train_cams, test_cams) = spec.cameras()?;
    let scene = spec.ground_truth_scene();
    let cfg = RenderConfig::default();
    let all: Vec<&Camera> = train_cams.iter().chain(&test_cams).collect();
    let renders = exec::map_indexed(all.len(), |i| render_base(&scene, all[i], &cfg));
    let renders = renders.into_iter().collect::<Result<Vec<_>>>()?;
    let degradations = spec.degradations();

    for sub in ["train", "train_gt", "test"] {
        mkdir(&out.join(sub))?;
    }
    let bounds = spec.bounds();
    let mut train_frames = Vec::new();
    let mut sidecar = Vec::new();
    for (i, cam) in train_cams.iter().enumerate() {
        let rel = format!("train/r_{i:03}.png");
        io::write_png(&out.join(&rel), &degrade(&renders[i], degradations[i]))?;
        io::write_png(&out.join(format!("train_gt/r_{i:03}.png")), &renders[i])?;
        train_frames.push(Frame {
            file_path: rel.clone(),
            transform_matrix: io::camera_to_c2w_gl(cam),
        });
        sidecar.push(SidecarView {
            view_id: i,
            file_path: rel,
            exposure: degradations[i].exposure,
            gamma: degradations[i].gamma,
        });
    }
    let mut test_frames = Vec::new();
    for (j, cam) in test_cams.iter().enumerate() {
        let rel = format!("test/r_{j:03}.png");
        io::write_png(&out.join(&rel), &renders[train_cams.len() + j])?;
        test_frames.push(Frame {
            file_path: rel,
            transform_matrix: io::camera_to_c2w_gl(cam),
        });
    }
    let transforms = |frames| Transforms {
        camera_angle_x: spec.fov_x,
        w: Some(spec.width),
        h: Some(spec.height),
        aabb: Some([bounds.min, bounds.max]),
        frames,
    };
    io::write_transforms(&out.join(TRAIN_TRANSFORMS), &transforms(train_frames))?;
    io::write_transforms(&out.join(TEST_TRANSFORMS), &transforms(test_frames))?;
    let side = Sidecar {
        preset: spec.preset,
        seed: spec.seed,
        views: sidecar,
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Internal(e.to_string()))?;
    let path = out.join(SIDECAR);
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    log::info!(
        "wrote {} training and {} test views to {}",
        train_cams.len(),
        test_cams.len(),
        out.display()
    );
    Ok(())
}

/// True degradation parameters from the sidecar; evaluation only.
pub fn read_degradations(root: &Path) -> Result<Vec<Degradation>> {
    let path = root.join(SIDECAR);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(side
        .views
        .into_iter()
        .map(|v| Degradation {
            exposure: v.exposure,
            gamma: v.gamma,
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: Vec<ViewRecord>,
    pub test_cameras: Vec<Camera>,
    pub test_images: Vec<Image>,
    pub bounds: Option<Aabb>,
}

fn load_frames(root: &Path, t: &Transforms, what: &str) -> Result<Vec<(Image, Camera)>> {
    let mut out = Vec::with_capacity(t.frames.len());
    let mut size = t.w.zip(t.h);
    for (i, frame) in t.frames.iter().enumerate() {
        let path = io::frame_image_path(root, frame);
        let img = io::read_png(&path).map_err(|e| Error::Data(format!("{what} view {i}: {e}")))?;
        match size {
            Some((w, h)) if (w, h) != (img.width, img.height) => {
                return Err(Error::Data(format!(
                    "{what} view {i}: image is {}x{}, expected {w}x{h}",
                    img.width, img.height
                )))
            }
            None => size = Some((img.width, img.height)),
            _ => {}
        }
        let cam = io::camera_from_c2w_gl(&frame.transform_matrix, img.width, img.height, t.camera_angle_x)?;
        out.push((img, cam));
    }
    Ok(out)
}

/// Loads training views (and test views when present) ordered by frame index.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let train_t = io::read_transforms(&root.join(TRAIN_TRANSFORMS))?;
    if train_t.frames.len() < 2 {
        return Err(Error::Data(format!("{}: at least two training views are required", root.display())));
    }
    let train = load_frames(root, &train_t, "training")?
        .into_iter()
        .enumerate()
        .map(|(i, (img, cam))| ViewRecord::new(i, img, cam))
        .collect::<Result<Vec<_>>>()?;
    check_unique_ids(&train)?;
    let (test_cameras, test_images) = if root.join(TEST_TRANSFORMS).exists() {
        let t = io::read_transforms(&root.join(TEST_TRANSFORMS))?;
        load_frames(root, &t, "test")?.into_iter().map(|(i, c)| (c, i)).unzip()
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        train,
        test_cameras,
        test_images,
        bounds: io::aabb_of(&train_t),
    })
}
