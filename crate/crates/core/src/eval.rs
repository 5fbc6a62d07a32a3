//! Rate-distortion evaluation: per-image sweeps over lambda, report files,
//! RD-point CSVs and SVG plots.
//!
//! Every evaluated point goes through the real bitstream. bpp is the payload
//! size in bits over the original pixel count, and PSNR is measured on the
//! 8-bit decoded image.

use std::collections::BTreeMap;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{rgb_to_tensor, tensor_to_rgb, ImageSet};
use crate::entropy::Bitstream;
use crate::error::{Error, Result};
use crate::metrics::{bdrate, psnr, RdCurve, RdPoint};
use crate::model::{ArchConfig, Codec};

/// Lambda sweep used when none is given.
pub const DEFAULT_LAMBDAS: [f64; 8] = [64.0, 128.0, 256.0, 512.0, 1024.0, 2048.0, 4096.0, 8192.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub file: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub lambda: f64,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Identifies the weights, usually the checkpoint path.
    pub checkpoint: String,
    pub codec: ArchConfig,
    pub rows: Vec<EvalRow>,
    /// One entry per lambda, in sweep order.
    pub aggregates: Vec<Aggregate>,
}

impl EvalReport {
    pub fn from_rows(checkpoint: String, codec: ArchConfig, rows: Vec<EvalRow>) -> Self {
        let mut order: Vec<f64> = Vec::new();
        let mut sums: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
        for r in &rows {
            let key = r.lambda.to_bits();
            let entry = sums.entry(key).or_insert_with(|| {
                order.push(r.lambda);
                (0.0, 0.0, 0)
            });
            entry.0 += r.bpp;
            entry.1 += r.psnr;
            entry.2 += 1;
        }
        let aggregates = order
            .into_iter()
            .map(|lambda| {
                let (b, p, n) = sums[&lambda.to_bits()];
                Aggregate {
                    lambda,
                    mean_bpp: b / n as f64,
                    mean_psnr: p / n as f64,
                }
            })
            .collect();
        Self {
            checkpoint,
            codec,
            rows,
            aggregates,
        }
    }

    /// One point per lambda at the mean bpp and PSNR.
    pub fn curve(&self) -> Result<RdCurve> {
        RdCurve::new(self.points())
    }

    pub fn points(&self) -> Vec<RdPoint> {
        self.aggregates
            .iter()
            .map(|a| RdPoint {
                bpp: a.mean_bpp,
                psnr: a.mean_psnr,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Encodes and decodes one 8-bit image. Returns `(bpp, psnr)`.
pub fn evaluate_image(codec: &Codec, img: &image::RgbImage, lambda: f64) -> Result<(f64, f64)> {
    let x = rgb_to_tensor(img)?;
    let stream = codec.compress(&x, lambda)?;
    let stream = Bitstream::from_bytes(&stream.to_bytes())?;
    let decoded = rgb_to_tensor(&tensor_to_rgb(&codec.decompress(&stream)?)?)?;
    let bpp = stream.payload_bits() as f64 / (img.width() as f64 * img.height() as f64);
    Ok((bpp, psnr(&x, &decoded)?))
}

/// Runs every image at every lambda.
pub fn evaluate(codec: &Codec, images: &ImageSet, lambdas: &[f64], checkpoint: &str) -> Result<EvalReport> {
    if lambdas.is_empty() || images.is_empty() {
        return Err(Error::Evaluation("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len() * images.len());
    for &lambda in lambdas {
        for (file, img) in images.iter() {
            let (bpp, psnr) = evaluate_image(codec, img, lambda)?;
            log::debug!("{file} lambda {lambda}: {bpp:.4} bpp {psnr:.3} dB");
            rows.push(EvalRow {
                file: file.to_string(),
                lambda,
                bpp,
                psnr,
            });
        }
    }
    Ok(EvalReport::from_rows(checkpoint.to_string(), codec.config().clone(), rows))
}

/// One RD point of a labelled series, as stored in the points CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub label: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
}

pub fn curve_rows(label: &str, report: &EvalReport) -> Vec<CurveRow> {
    report
        .aggregates
        .iter()
        .map(|a| CurveRow {
            label: label.to_string(),
            lambda: a.lambda,
            bpp: a.mean_bpp,
            psnr: a.mean_psnr,
        })
        .collect()
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Rows grouped by label, in first-appearance order.
pub fn group_series(rows: &[CurveRow]) -> Vec<(String, Vec<RdPoint>)> {
    let mut out: Vec<(String, Vec<RdPoint>)> = Vec::new();
    for r in rows {
        let point = RdPoint { bpp: r.bpp, psnr: r.psnr };
        match out.iter_mut().find(|(l, _)| *l == r.label) {
            Some((_, pts)) => pts.push(point),
            None => out.push((r.label.clone(), vec![point])),
        }
    }
    out
}

/// BD-rate of every series against the first. Series for which it cannot
/// be computed get the error message instead.
pub fn bdrates_against_first(series: &[(String, Vec<RdPoint>)]) -> Vec<(String, std::result::Result<f64, String>)> {
    let Some((_, anchor_pts)) = series.first() else {
        return Vec::new();
    };
    let anchor = RdCurve::new(anchor_pts.clone());
    series
        .iter()
        .skip(1)
        .map(|(label, pts)| {
            let value = match &anchor {
                Ok(a) => RdCurve::new(pts.clone()).and_then(|t| bdrate(a, &t)),
                Err(e) => Err(Error::Evaluation(e.to_string())),
            };
            (label.clone(), value.map_err(|e| e.to_string()))
        })
        .collect()
}

/// Writes `<prefix>.csv` and `<prefix>.svg` and returns the BD-rates of all
/// series against the first.
pub fn rdplot(rows: &[CurveRow], prefix: &Path) -> Result<Vec<(String, std::result::Result<f64, String>)>> {
    if rows.is_empty() {
        return Err(Error::Evaluation("no RD points to plot".into()));
    }
    write_curve_csv(&prefix.with_extension("csv"), rows)?;
    let series = group_series(rows);
    let bd = bdrates_against_first(&series);
    let anchor = &series[0].0;
    let notes: Vec<String> = bd
        .iter()
        .map(|(label, v)| match v {
            Ok(v) => format!("BD-rate {label} vs {anchor}: {v:.2}%"),
            Err(e) => format!("BD-rate {label} vs {anchor}: n/a ({e})"),
        })
        .collect();
    plot_svg(&prefix.with_extension("svg"), &series, &notes)?;
    Ok(bd)
}

fn plot_svg(path: &Path, series: &[(String, Vec<RdPoint>)], notes: &[String]) -> Result<()> {
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in all.filter(|p| p.bpp.is_finite() && p.psnr.is_finite()) {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    if !(x0.is_finite() && y0.is_finite()) {
        return Err(Error::Evaluation("no finite RD points to plot".into()));
    }
    let pad = |lo: f64, hi: f64| {
        let m = ((hi - lo) * 0.08).max(1e-3);
        (lo - m, hi + m)
    };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));

    let root = SVGBackend::new(path, (800, 600)).into_drawing_area();
    let draw = |e: String| Error::Evaluation(format!("plot {}: {e}", path.display()));
    root.fill(&WHITE).map_err(|e| draw(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .caption("Rate-distortion", ("sans-serif", 22))
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| draw(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("bpp")
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(|e| draw(e.to_string()))?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let colour = Palette99::pick(i).to_rgba();
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        let xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.bpp, p.psnr)).collect();
        chart
            .draw_series(LineSeries::new(xy.clone(), colour.stroke_width(2)))
            .map_err(|e| draw(e.to_string()))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour.stroke_width(2)));
        chart
            .draw_series(xy.into_iter().map(|p| Circle::new(p, 4, colour.filled())))
            .map_err(|e| draw(e.to_string()))?;
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::LowerRight)
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw(e.to_string()))?;
    for (i, note) in notes.iter().enumerate() {
        root.draw(&Text::new(note.clone(), (90, 60 + 18 * i as i32), ("sans-serif", 14)))
            .map_err(|e| draw(e.to_string()))?;
    }
    root.present().map_err(|e| draw(e.to_string()))?;
    Ok(())
}
