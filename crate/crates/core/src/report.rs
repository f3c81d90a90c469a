//! Evaluation artifacts: confusion tables and heatmaps, reconstruction
//! grids, and capsule activation dumps. Images are binary PGM.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder};
use serde::Serialize;

use crate::capsule::RoutingConfig;
use crate::data::{DatasetSplit, SplitRole, SIDE};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{Element, Tensor};
use crate::train::EvalReport;

/// Pixel size of one confusion-matrix cell in the heatmap.
pub const CELL: usize = 16;

/// Clamp to `[0, 1]` and quantise to a byte.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", format!("{} bytes for {width}x{height}", pixels.len())));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(())
}

/// Read a grayscale image back as `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img: GrayImage = image::open(path)?.to_luma8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionArtifacts {
    pub table: PathBuf,
    pub heatmap: PathBuf,
}

/// Text table of the raw or row-normalised confusion matrix.
pub fn confusion_table(report: &EvalReport, normalized: bool) -> String {
    let k = report.confusion.len();
    let mut s = String::from("true\\pred");
    for p in 0..k {
        let _ = write!(s, "\t{p}");
    }
    s.push('\n');
    let norm = report.normalized_confusion();
    for t in 0..k {
        let _ = write!(s, "{t}");
        for p in 0..k {
            if normalized {
                let _ = write!(s, "\t{:.6}", norm[t][p]);
            } else {
                let _ = write!(s, "\t{}", report.confusion[t][p]);
            }
        }
        s.push('\n');
    }
    s
}

/// Heatmap bytes, `CELL` pixels per cell, brighter meaning more mass.
/// Raw counts are scaled by the largest cell.
pub fn confusion_heatmap(report: &EvalReport, normalized: bool) -> (usize, Vec<u8>) {
    let k = report.confusion.len();
    let values: Vec<Vec<f64>> = if normalized {
        report.normalized_confusion()
    } else {
        let max = report.confusion.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
        report.confusion.iter().map(|r| r.iter().map(|&c| c as f64 / max).collect()).collect()
    };
    let side = k * CELL;
    let mut px = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            px[y * side + x] = quantize(values[y / CELL][x / CELL]);
        }
    }
    (side, px)
}

/// Write `confusion[_normalized].{txt,pgm}` into `dir`.
pub fn render_confusion(report: &EvalReport, normalized: bool, dir: &Path) -> Result<ConfusionArtifacts> {
    if report.n_total == 0 || report.confusion.is_empty() {
        return Err(Error::contract("cannot render an empty report"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = if normalized { "confusion_normalized" } else { "confusion" };
    let table = dir.join(format!("{stem}.txt"));
    fs::write(&table, confusion_table(report, normalized)).map_err(|e| Error::io(&table, e))?;
    let heatmap = dir.join(format!("{stem}.pgm"));
    let (side, px) = confusion_heatmap(report, normalized);
    write_pgm(&heatmap, side, side, &px)?;
    Ok(ConfusionArtifacts { table, heatmap })
}

/// Tile rows of `[cols, 1, 32, 32]` images into one byte grid of
/// `(rows * 32) x (cols * 32)`; returns `(width, height, pixels)`.
pub fn tile_grid<T: Element>(rows: &[Tensor<T>]) -> Result<(usize, usize, Vec<u8>)> {
    let cols = rows.first().map(|r| r.shape()[0]).ok_or_else(|| Error::contract("grid needs at least one row"))?;
    for r in rows {
        let s = r.shape();
        if s.len() != 4 || s[0] != cols || s[1] != 1 || s[2] != SIDE || s[3] != SIDE {
            return Err(Error::shape("tile_grid", format!("row {s:?} must be [{cols}, 1, 32, 32]")));
        }
    }
    let (w, h) = (cols * SIDE, rows.len() * SIDE);
    let mut px = vec![0u8; w * h];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.data().chunks(SIDE * SIDE).enumerate() {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    px[(ri * SIDE + y) * w + ci * SIDE + x] = quantize(img[y * SIDE + x].as_f64());
                }
            }
        }
    }
    Ok((w, h, px))
}

/// The first `per_class` samples of every class present, ordered by class.
pub fn probe_indices(split: &DatasetSplit, per_class: usize) -> Vec<usize> {
    let classes = split.labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for c in 0..classes {
        out.extend(split.labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).take(per_class));
    }
    out
}

/// Reconstruction grid: an input row, then one row of decoder outputs per
/// model (e.g. per epoch checkpoint). Each row holds `per_class` samples of
/// every class.
pub fn render_reconstructions<T: Element>(
    models: &[Model<T>],
    split: &DatasetSplit,
    per_class: usize,
    routing: &RoutingConfig,
    path: &Path,
) -> Result<(usize, usize)> {
    if models.is_empty() || per_class == 0 {
        return Err(Error::contract("reconstructions need a model and per_class >= 1"));
    }
    let idx = probe_indices(split, per_class);
    if idx.is_empty() {
        return Err(Error::contract("probe split is empty"));
    }
    let probe = split.subset(&idx, SplitRole::Test).images.cast::<T>();
    let mut rows = vec![probe.clone()];
    for m in models {
        rows.push(m.predict(&probe, routing)?.1);
    }
    let (w, h, px) = tile_grid(&rows)?;
    write_pgm(path, w, h, &px)?;
    Ok((w, h))
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDump {
    pub name: String,
    pub pose_shape: Vec<usize>,
    pub activation_shape: Vec<usize>,
    pub poses: Vec<f64>,
    pub activations: Vec<f64>,
}

/// Per-layer poses and activations of a probe batch.
pub fn capsule_dump<T: Element>(model: &Model<T>, probe: &Tensor<T>, routing: &RoutingConfig) -> Result<Vec<LayerDump>> {
    Ok(model
        .capture(probe, routing)?
        .into_iter()
        .map(|c| LayerDump {
            name: c.name.to_string(),
            pose_shape: c.poses.shape().to_vec(),
            activation_shape: c.activations.shape().to_vec(),
            poses: c.poses.data().iter().map(|v| v.as_f64()).collect(),
            activations: c.activations.data().iter().map(|v| v.as_f64()).collect(),
        })
        .collect())
}

pub fn dump_capsule_activations<T: Element>(
    model: &Model<T>,
    probe: &Tensor<T>,
    routing: &RoutingConfig,
    path: &Path,
) -> Result<Vec<LayerDump>> {
    let layers = capsule_dump(model, probe, routing)?;
    let text = serde_json::to_string(&serde_json::json!({ "layers": &layers }))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(layers)
}

/// Files produced by [`write_bundle`].
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub raw: ConfusionArtifacts,
    pub normalized: ConfusionArtifacts,
    pub report_json: PathBuf,
    pub reconstructions: PathBuf,
    pub capsules: PathBuf,
}

/// Evaluation report, both confusion renderings, a one-sample-per-class
/// reconstruction grid and a capsule dump of the same probe.
pub fn write_bundle<T: Element>(
    dir: &Path,
    report: &EvalReport,
    model: &Model<T>,
    split: &DatasetSplit,
    routing: &RoutingConfig,
) -> Result<ReportBundle> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = render_confusion(report, false, dir)?;
    let normalized = render_confusion(report, true, dir)?;
    let report_json = dir.join("report.json");
    fs::write(&report_json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&report_json, e))?;
    let reconstructions = dir.join("reconstructions.pgm");
    render_reconstructions(std::slice::from_ref(model), split, 1, routing, &reconstructions)?;
    let capsules = dir.join("capsules.json");
    let probe = split.subset(&probe_indices(split, 1), SplitRole::Test).images.cast::<T>();
    dump_capsule_activations(model, &probe, routing, &capsules)?;
    Ok(ReportBundle {
        dir: dir.to_path_buf(),
        raw,
        normalized,
        report_json,
        reconstructions,
        capsules,
    })
}
