//! Module ablations trained from one seed and scored on held-out views.

use std::fmt::Write as _;
use std::path::Path;

use super::config::{RunConfig, Variant};
use super::dataset::Dataset;
use super::metrics::{measure, mean_row};
use super::novel::render_views;
use super::train::train;
use crate::error::{Error, Result};
use crate::scene::Aabb;

/// The four rows of the module ablation table.
pub const TABLE_VARIANTS: [Variant; 4] = [Variant::GlobalOnly, Variant::BiasOnly, Variant::GlobalBias, Variant::Full];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean held-out PSNR and SSIM of a trained cloud.
pub fn score(data: &Dataset, cloud: &crate::scene::GaussianCloud, cfg: &RunConfig) -> Result<(f64, f64)> {
    if data.test_cameras.is_empty() {
        return Err(Error::Data(format!("{}: no held-out views", data.root.display())));
    }
    let images = render_views(cloud, &data.test_cameras, &cfg.render)?;
    let rows = images
        .iter()
        .zip(&data.test_images)
        .enumerate()
        .map(|(i, (p, g))| measure(&i.to_string(), p, g, "normal"))
        .collect::<Result<Vec<_>>>()?;
    let m = mean_row(&rows);
    Ok((m.psnr, m.ssim))
}

pub fn dataset_bounds(data: &Dataset) -> Aabb {
    data.bounds.unwrap_or_else(|| {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for v in &data.train {
            let c = v.camera.center();
            for k in 0..3 {
                min[k] = min[k].min(c[k]);
                max[k] = max[k].max(c[k]);
            }
        }
        Aabb::new(min, max)
    })
}

/// Trains each variant with the shared config and seed; work goes under `work`.
pub fn run_ablation(data: &Dataset, cfg: &RunConfig, variants: &[Variant], work: &Path) -> Result<Vec<AblationRow>> {
    let bounds = dataset_bounds(data);
    variants
        .iter()
        .map(|&variant| {
            let run = RunConfig { variant, ..cfg.clone() };
            let dir = work.join(variant.label().replace('+', "_"));
            let summary = train(data.train.clone(), bounds, &run, &dir, None)?;
            let (psnr, ssim) = score(data, &summary.state.model.cloud, &run)?;
            log::info!("ablation {}: psnr {psnr:.3} ssim {ssim:.4}", variant.label());
            Ok(AblationRow { variant, psnr, ssim })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6},{:.6}", r.variant.label(), r.psnr, r.ssim);
    }
    s
}
