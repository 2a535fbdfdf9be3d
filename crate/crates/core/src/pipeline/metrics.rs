//! Image-quality metrics against ground truth.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::io;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::losses::{ssim, LossConfig};

/// `10·log10(1/MSE)`; identical images give `+inf`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    pred.check_same_shape(gt, "psnr")?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Which ground truth the row was measured against.
    pub reference: String,
}

pub fn measure(view: &str, pred: &Image, gt: &Image, reference: &str) -> Result<MetricsRow> {
    Ok(MetricsRow {
        view: view.to_string(),
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt, &LossConfig::default())?,
        reference: reference.to_string(),
    })
}

/// Mean over rows, labelled `mean`.
pub fn mean_row(rows: &[MetricsRow]) -> MetricsRow {
    let n = rows.len().max(1) as f64;
    MetricsRow {
        view: "mean".into(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        reference: rows.first().map(|r| r.reference.clone()).unwrap_or_default(),
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

/// CSV with one row per view followed by the mean row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("view,psnr,ssim,reference\n");
    for r in rows.iter().chain(std::iter::once(&mean_row(rows))) {
        let _ = writeln!(s, "{},{},{},{}", r.view, fmt_metric(r.psnr), fmt_metric(r.ssim), r.reference);
    }
    s
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Compares same-named PNGs in two directories.
pub fn eval_dirs(pred: &Path, gt: &Path, reference: &str) -> Result<Vec<MetricsRow>> {
    let gt_names = png_names(gt)?;
    let pred_names = png_names(pred)?;
    if gt_names.is_empty() {
        return Err(Error::Data(format!("{}: no PNG images", gt.display())));
    }
    if gt_names != pred_names {
        let missing: Vec<&String> = gt_names.iter().filter(|n| !pred_names.contains(n)).collect();
        let extra: Vec<&String> = pred_names.iter().filter(|n| !gt_names.contains(n)).collect();
        return Err(Error::Data(format!(
            "view sets differ: missing from predictions {missing:?}, unexpected {extra:?}"
        )));
    }
    gt_names
        .iter()
        .map(|n| {
            let (p, g) = (io::read_png(&pred.join(n))?, io::read_png(&gt.join(n))?);
            if !p.same_shape(&g) {
                return Err(Error::Data(format!("{n}: size differs from ground truth")));
            }
            measure(n.trim_end_matches(".png"), &p, &g, reference)
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<PathBuf> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
