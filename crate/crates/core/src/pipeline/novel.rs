//! Test-time rendering from a checkpoint: adjusted Gaussian colors only.

use std::path::{Path, PathBuf};

use super::checkpoint::load_checkpoint;
use super::io;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::render::{render_final, RenderConfig};
use crate::scene::{Camera, GaussianCloud};

/// Renders every camera with `c_out` colors, clamped to [0, 1].
pub fn render_views(cloud: &GaussianCloud, cameras: &[Camera], cfg: &RenderConfig) -> Result<Vec<Image>> {
    if cloud.count() == 0 {
        return Err(Error::Data("checkpoint holds no Gaussians".into()));
    }
    if !cloud.is_finite() {
        return Err(Error::Data("checkpoint holds non-finite Gaussian parameters".into()));
    }
    cameras
        .iter()
        .enumerate()
        .map(|(i, cam)| {
            cam.validate().map_err(|e| Error::Data(format!("camera {i}: {e}")))?;
            render_final(cloud, cam, cfg)
        })
        .collect()
}

pub fn render_novel(ckpt: &Path, cameras: &[Camera]) -> Result<Vec<Image>> {
    let state = load_checkpoint(ckpt)?;
    render_views(&state.model.cloud, cameras, &state.render)
}

/// Renders the frames of a transforms file into `out`, named after each frame's image.
pub fn render_transforms(ckpt: &Path, transforms: &Path, out: &Path, pfm: bool) -> Result<Vec<PathBuf>> {
    let t = io::read_transforms(transforms)?;
    if t.frames.is_empty() {
        return Err(Error::Data(format!("{}: no frames", transforms.display())));
    }
    let cameras = io::cameras_from_transforms(&t, None)?;
    let images = render_novel(ckpt, &cameras)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (i, (frame, img)) in t.frames.iter().zip(&images).enumerate() {
        let stem = Path::new(&frame.file_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("view_{i:03}"));
        let png = out.join(format!("{stem}.png"));
        io::write_png(&png, img)?;
        if pfm {
            io::write_pfm(&out.join(format!("{stem}.pfm")), img)?;
        }
        written.push(png);
    }
    Ok(written)
}
