//! Images and camera files on disk.

use std::path::{Path, PathBuf};

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::scene::{Aabb, Camera};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG; values are clamped to [0, 1].
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Reads a PNG as RGB in [0, 1] (8-bit value / 255, no linearization).
pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::Data(format!("missing image {}", path.display())));
    }
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Image::from_data(w, h, data)
}

/// Writes a little-endian color PFM (rows stored bottom to top).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for v in img.get(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields.len() < 4 || fields[0] != "PF" {
        return Err(bad("not a color PFM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let need = w * h * 3 * 4;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    let mut img = Image::new(w, h);
    let mut k = pos;
    for y in (0..h).rev() {
        for x in 0..w {
            let mut rgb = [0.0; 3];
            for c in rgb.iter_mut() {
                let b = [bytes[k], bytes[k + 1], bytes[k + 2], bytes[k + 3]];
                *c = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
                k += 4;
            }
            img.set(x, y, rgb);
        }
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub file_path: String,
    /// Camera-to-world, OpenGL axes (x right, y up, z backward), row-major.
    pub transform_matrix: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transforms {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    /// Optional scene bounds used to initialize the Gaussians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<[[f64; 3]; 2]>,
    pub frames: Vec<Frame>,
}

const FLIP_YZ: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

/// Internal camera (world-to-camera, y down, z forward) to file frame matrix.
pub fn camera_to_c2w_gl(cam: &Camera) -> [[f64; 4]; 4] {
    let c2w = cam.world_to_camera.try_inverse().unwrap_or_else(Matrix4::identity);
    let mut out = [[0.0; 4]; 4];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = c2w[(r, c)] * FLIP_YZ[c];
        }
    }
    out
}

/// Builds a camera from a file frame matrix and the horizontal field of view.
pub fn camera_from_c2w_gl(m: &[[f64; 4]; 4], width: usize, height: usize, fov_x: f64) -> Result<Camera> {
    let mut c2w = Matrix4::zeros();
    for r in 0..4 {
        for c in 0..4 {
            c2w[(r, c)] = m[r][c] * FLIP_YZ[c];
        }
    }
    let w2c = c2w
        .try_inverse()
        .ok_or_else(|| Error::Data("singular camera transform".into()))?;
    let f = 0.5 * width as f64 / (0.5 * fov_x).tan();
    Camera::new(width, height, f, f, width as f64 / 2.0, height as f64 / 2.0, w2c)
        .map_err(|e| Error::Data(format!("invalid camera: {e}")))
}

pub fn write_transforms(path: &Path, t: &Transforms) -> Result<()> {
    let text = serde_json::to_string_pretty(t).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_transforms(path: &Path) -> Result<Transforms> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Data(format!("missing transforms file {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: malformed transforms: {e}", path.display())))
}

/// Resolves a frame's image path; a missing extension means PNG.
pub fn frame_image_path(root: &Path, frame: &Frame) -> PathBuf {
    let rel = frame.file_path.trim_start_matches("./");
    let p = root.join(rel);
    if p.extension().is_none() {
        p.with_extension("png")
    } else {
        p
    }
}

/// Cameras of a transforms file. Width and height come from the file or,
/// failing that, from `fallback`.
pub fn cameras_from_transforms(t: &Transforms, fallback: Option<(usize, usize)>) -> Result<Vec<Camera>> {
    let (w, h) = match (t.w, t.h, fallback) {
        (Some(w), Some(h), _) => (w, h),
        (_, _, Some(wh)) => wh,
        _ => return Err(Error::Data("transforms file lacks image size".into())),
    };
    t.frames
        .iter()
        .map(|f| camera_from_c2w_gl(&f.transform_matrix, w, h, t.camera_angle_x))
        .collect()
}

pub fn aabb_of(t: &Transforms) -> Option<Aabb> {
    t.aabb.map(|[min, max]| Aabb::new(min, max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::from_fn(5, 3, |x, y| [x as f64 / 4.0, y as f64 / 2.0, 0.123]);
        write_png(&p, &img).unwrap();
        let back = read_png(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        let img = Image::from_fn(4, 3, |x, y| [x as f64 * 0.25, y as f64 * 1.5, -0.5]);
        write_pfm(&p, &img).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), img);
    }

    #[test]
    fn missing_png_is_data_error() {
        let r = read_png(Path::new("/nonexistent/x.png"));
        assert!(matches!(r, Err(Error::Data(m)) if m.contains("x.png")));
    }

    #[test]
    fn camera_file_round_trip() {
        let cam = Camera::look_at([1.0, -0.5, -3.0], [0.0, 0.2, 0.5], [0.0, -1.0, 0.0], 32, 24, 0.8).unwrap();
        let m = camera_to_c2w_gl(&cam);
        let back = camera_from_c2w_gl(&m, 32, 24, 0.8).unwrap();
        assert!((back.world_to_camera - cam.world_to_camera).abs().max() < 1e-12);
        assert!((back.fx - cam.fx).abs() < 1e-12);
        // OpenGL cameras look down their -z axis.
        let forward = [-m[0][2], -m[1][2], -m[2][2]];
        let expect = (nalgebra::Vector3::new(0.0, 0.2, 0.5) - nalgebra::Vector3::new(1.0, -0.5, -3.0)).normalize();
        for k in 0..3 {
            assert!((forward[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn malformed_transforms() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        std::fs::write(&p, "{\"frames\": 3}").unwrap();
        assert!(matches!(read_transforms(&p), Err(Error::Data(_))));
        assert!(matches!(read_transforms(&dir.path().join("none.json")), Err(Error::Data(_))));
    }
}
