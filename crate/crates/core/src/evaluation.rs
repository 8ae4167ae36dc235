//! Accuracy metrics, window baselines and method comparison reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_resample, iou, to_global, BBox, ImageSize, PixelSource};
use crate::localizer::{Localizer, Prediction};

/// IoU thresholds 0.50, 0.55, …, 0.95 as `k / 20`.
pub fn thresholds() -> [f64; 10] {
    std::array::from_fn(|k| (10 + k) as f64 / 20.0)
}

fn check_ious(ious: &[f64]) -> Result<()> {
    if ious.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    Ok(())
}

pub fn accuracy_from_ious(ious: &[f64], tau: f64) -> Result<f64> {
    check_ious(ious)?;
    Ok(ious.iter().filter(|v| **v >= tau).count() as f64 / ious.len() as f64)
}

/// Mean over [`thresholds`] of the accuracy at each threshold.
pub fn mean_accuracy_from_ious(ious: &[f64]) -> Result<f64> {
    check_ious(ious)?;
    let hits: usize = thresholds()
        .iter()
        .map(|t| ious.iter().filter(|v| **v >= *t).count())
        .sum();
    Ok(hits as f64 / (10 * ious.len()) as f64)
}

pub fn pair_ious(preds: &[BBox], gts: &[BBox]) -> Result<Vec<f64>> {
    if preds.len() != gts.len() {
        return Err(Error::DimMismatch {
            expected: gts.len(),
            found: preds.len(),
        });
    }
    preds.iter().zip(gts).map(|(p, g)| iou(p, g)).collect()
}

/// Fraction of pairs with IoU at least `tau`.
pub fn accuracy_at(preds: &[BBox], gts: &[BBox], tau: f64) -> Result<f64> {
    accuracy_from_ious(&pair_ious(preds, gts)?, tau)
}

pub fn mean_accuracy(preds: &[BBox], gts: &[BBox]) -> Result<f64> {
    mean_accuracy_from_ious(&pair_ious(preds, gts)?)
}

/// Outcome of one method on one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub pred: BBox,
    pub gt: BBox,
    pub iou: f64,
    pub steps: usize,
    pub calls: usize,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, pred: BBox, gt: BBox, steps: usize, calls: usize) -> Result<Self> {
        Ok(SampleRecord {
            id: id.into(),
            iou: iou(&pred, &gt)?,
            pred,
            gt,
            steps,
            calls,
        })
    }
}

/// Metrics of one method over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub m_acc: f64,
    pub acc50: f64,
    pub acc75: f64,
    pub mean_steps: f64,
    pub mean_calls: f64,
    pub n: usize,
    pub records: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn new(method: impl Into<String>, records: Vec<SampleRecord>) -> Result<Self> {
        let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
        let n = records.len();
        Ok(EvalReport {
            method: method.into(),
            m_acc: mean_accuracy_from_ious(&ious)?,
            acc50: accuracy_from_ious(&ious, 0.5)?,
            acc75: accuracy_from_ious(&ious, 0.75)?,
            mean_steps: records.iter().map(|r| r.steps as f64).sum::<f64>() / n as f64,
            mean_calls: records.iter().map(|r| r.calls as f64).sum::<f64>() / n as f64,
            n,
            records,
        })
    }
}

/// Checks that all reports cover the same samples in the same order.
pub fn compare_report(reports: &[EvalReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::Empty("reports"));
    };
    for r in &reports[1..] {
        let same = r.records.len() == first.records.len()
            && r.records.iter().zip(&first.records).all(|(a, b)| a.id == b.id);
        if !same {
            return Err(Error::invalid(format!(
                "{} and {} were evaluated on different samples",
                first.method, r.method
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: &'a str,
    #[serde(rename = "mAcc")]
    m_acc: f64,
    acc50: f64,
    acc75: f64,
    mean_steps: f64,
    mean_calls: f64,
    n: usize,
}

/// CSV table with one row per method.
pub fn report_csv(reports: &[EvalReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            method: &r.method,
            m_acc: r.m_acc,
            acc50: r.acc50,
            acc75: r.acc75,
            mean_steps: r.mean_steps,
            mean_calls: r.mean_calls,
            n: r.n,
        })
        .map_err(|e| Error::invalid(format!("report: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("report: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `report.csv` and `report.json` under `dir`.
pub fn write_report(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    compare_report(reports)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("report.csv");
    std::fs::write(&csv, report_csv(reports)?).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("report.json");
    let text = serde_json::to_string_pretty(reports)?;
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

/// Sliding-window geometry in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub size: u32,
    pub stride: u32,
}

impl WindowConfig {
    pub fn new(size: u32, stride: u32) -> Result<Self> {
        if size == 0 || stride == 0 || stride > size {
            return Err(Error::Config(format!("window {size} with stride {stride}")));
        }
        Ok(WindowConfig { size, stride })
    }
}

fn axis_positions(len: u32, size: u32, stride: u32) -> Vec<u32> {
    if size >= len {
        return vec![0];
    }
    let mut pos: Vec<u32> = (0..).map(|k| k * stride).take_while(|p| p + size <= len).collect();
    if pos.last().is_some_and(|p| p + size < len) {
        pos.push(len - size);
    }
    pos
}

/// Windows in row-major order; the last window per axis sits flush with the
/// image edge.
pub fn enumerate_windows(img: ImageSize, cfg: WindowConfig) -> Vec<BBox> {
    let xs = axis_positions(img.width, cfg.size, cfg.stride);
    let ys = axis_positions(img.height, cfg.size, cfg.stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            out.push(BBox {
                x0: x as f64,
                y0: y as f64,
                x1: (x + cfg.size).min(img.width) as f64,
                y1: (y + cfg.size).min(img.height) as f64,
            });
        }
    }
    out
}

/// Closed-form window count.
pub fn window_count(img: ImageSize, cfg: WindowConfig) -> usize {
    let per_axis = |len: u32| -> usize {
        if cfg.size >= len {
            1
        } else {
            let k = ((len - cfg.size) / cfg.stride) as usize + 1;
            k + usize::from((len - cfg.size) % cfg.stride != 0)
        }
    };
    per_axis(img.width) * per_axis(img.height)
}

/// `n x n` tiles that partition the image.
pub fn tile_grid(img: ImageSize, n: usize) -> Result<Vec<BBox>> {
    if n == 0 {
        return Err(Error::invalid("tile count must be positive"));
    }
    let edge = |len: u32, i: usize| len as f64 * i as f64 / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(BBox::new(
                edge(img.width, c),
                edge(img.height, r),
                edge(img.width, c + 1),
                edge(img.height, r + 1),
            )?);
        }
    }
    Ok(out)
}

/// Best prediction over `regions` by confidence; ties keep the earliest.
pub fn best_over_regions<L, S>(model: &L, image: &S, expression: &str, regions: &[BBox]) -> Result<(BBox, Prediction, usize)>
where
    L: Localizer + ?Sized,
    S: PixelSource + ?Sized,
{
    let mut best: Option<(BBox, Prediction)> = None;
    for r in regions {
        let crop = crop_resample(image, r, model.input_size())?;
        let p = model.predict(&crop, expression, None)?;
        if best.as_ref().map_or(true, |(_, b)| p.confidence > b.confidence) {
            best = Some((to_global(&p.bbox, r), p));
        }
    }
    let (b, p) = best.ok_or(Error::Empty("windows"))?;
    Ok((b, p, regions.len()))
}

/// Runs the localizer on every window and keeps the most confident box.
pub fn sliding_window_localize<L, S>(model: &L, image: &S, expression: &str, cfg: WindowConfig) -> Result<(BBox, usize)>
where
    L: Localizer + ?Sized,
    S: PixelSource + ?Sized,
{
    let windows = enumerate_windows(image.size(), cfg);
    let (b, _, calls) = best_over_regions(model, image, expression, &windows)?;
    Ok((b, calls))
}

pub fn tile_grid_localize<L, S>(model: &L, image: &S, expression: &str, tiles_per_axis: usize) -> Result<(BBox, usize)>
where
    L: Localizer + ?Sized,
    S: PixelSource + ?Sized,
{
    let tiles = tile_grid(image.size(), tiles_per_axis)?;
    let (b, _, calls) = best_over_regions(model, image, expression, &tiles)?;
    Ok((b, calls))
}
