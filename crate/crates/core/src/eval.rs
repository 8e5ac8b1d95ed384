//! AUROC, score histograms, embedding export and evaluation reports.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FewShotSplit, Label};
use crate::density::{attach_percentiles, score_images, DensityModel, ScoreRecord, ScorerKind};
use crate::encoder::{checkpoint, embed_with_ids, Depth, Encoder};
use crate::error::{Error, Result};
use crate::image::Image;

pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const HIST_CSV_FILE: &str = "hist.csv";
pub const HIST_PNG_FILE: &str = "hist.png";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// 1-based ranks with ties sharing the mean of the ranks they span.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let mid = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mid;
        }
        i = j;
    }
    ranks
}

/// Probability that a random abnormal score exceeds a random normal score,
/// ties counted as one half (Mann–Whitney U over midranks).
pub fn auroc(abnormal: &[f64], normal: &[f64]) -> Result<f64> {
    if abnormal.is_empty() || normal.is_empty() {
        return Err(Error::Data(format!(
            "AUROC needs both classes, got {} abnormal and {} normal scores",
            abnormal.len(),
            normal.len()
        )));
    }
    if abnormal.iter().chain(normal).any(|s| s.is_nan()) {
        return Err(Error::Numerical("NaN anomaly score".into()));
    }
    let all: Vec<f64> = abnormal.iter().chain(normal).copied().collect();
    let ranks = midranks(&all);
    let (na, nn) = (abnormal.len() as f64, normal.len() as f64);
    let rank_sum: f64 = ranks[..abnormal.len()].iter().sum();
    let u = rank_sum - na * (na + 1.0) / 2.0;
    Ok(u / (na * nn))
}

/// Per-class counts over shared bin edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

impl Histogram {
    /// `bins` equal-width bins spanning all scores; a single bin if every
    /// score is equal. The last bin is closed on the right.
    pub fn new(scores: &[f64], labels: &[Label], bins: usize) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Contract("one label per score required".into()));
        }
        if !labels.contains(&Label::Normal) || !labels.contains(&Label::Abnormal) {
            return Err(Error::Data("histogram needs at least one score per class".into()));
        }
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bins = if hi > lo { bins.max(1) } else { 1 };
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut h = Self {
            edges,
            normal: vec![0; bins],
            abnormal: vec![0; bins],
        };
        for (s, l) in scores.iter().zip(labels) {
            let b = if width > 0.0 {
                (((s - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            match l {
                Label::Normal => h.normal[b] += 1,
                Label::Abnormal => h.abnormal[b] += 1,
            }
        }
        Ok(h)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("bin_lo,bin_hi,normal,abnormal\n");
        for i in 0..self.normal.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.normal[i],
                self.abnormal[i]
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Bar chart with normal counts in blue and abnormal counts in red, side
    /// by side within each bin.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        const W: u32 = 640;
        const H: u32 = 360;
        const MARGIN: u32 = 20;
        let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
        let bins = self.normal.len() as u32;
        let peak = self
            .normal
            .iter()
            .chain(&self.abnormal)
            .copied()
            .max()
            .unwrap_or(0)
            .max(1) as f64;
        let plot_w = W - 2 * MARGIN;
        let plot_h = H - 2 * MARGIN;
        let slot = (plot_w / bins.max(1)).max(2);
        let mut bar = |x0: u32, width: u32, count: usize, color: [u8; 3]| {
            let h = ((count as f64 / peak) * plot_h as f64).round() as u32;
            for x in x0..(x0 + width).min(W - MARGIN) {
                for y in (H - MARGIN - h)..(H - MARGIN) {
                    img.put_pixel(x, y, image::Rgb(color));
                }
            }
        };
        for i in 0..bins {
            let x0 = MARGIN + i * slot;
            let half = (slot / 2).max(1);
            bar(x0, half, self.normal[i as usize], [40, 90, 200]);
            bar(x0 + half, half, self.abnormal[i as usize], [210, 50, 40]);
        }
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, H - MARGIN, image::Rgb([0, 0, 0]));
        }
        img.save(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// Writes `hist.csv` and `hist.png` into `dir`.
pub fn export_score_distribution(
    records: &[ScoreRecord],
    labels: &[Label],
    bins: usize,
    dir: &Path,
) -> Result<Histogram> {
    let scores: Vec<f64> = records.iter().map(|r| r.raw_score).collect();
    let h = Histogram::new(&scores, labels, bins)?;
    h.write_csv(&dir.join(HIST_CSV_FILE))?;
    h.write_png(&dir.join(HIST_PNG_FILE))?;
    Ok(h)
}

/// Backbone embeddings with labels, one row per image:
/// `label,f0,...,f{D-1}` (label 0 normal, 1 abnormal).
pub fn export_embeddings<E: Encoder + ?Sized>(
    encoder: &E,
    images: &[Image],
    labels: &[Label],
    path: &Path,
) -> Result<usize> {
    if images.len() != labels.len() {
        return Err(Error::Contract("one label per image required".into()));
    }
    let ids = (0..images.len()).map(|i| i.to_string()).collect();
    let emb = embed_with_ids(encoder, images, Depth::Backbone, ids)?;
    let mut out = String::from("label");
    for j in 0..emb.dim() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (v, l) in emb.vectors.iter().zip(labels) {
        out.push_str(if *l == Label::Abnormal { "1" } else { "0" });
        for x in v {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(emb.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl ScoreStats {
    pub fn of(scores: &[f64]) -> Self {
        let n = scores.len();
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = scores.iter().sum::<f64>() / n.max(1) as f64;
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        let median = match n {
            0 => f64::NAN,
            _ if n % 2 == 1 => sorted[n / 2],
            _ => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
        };
        Self {
            count: n,
            mean,
            std: var.sqrt(),
            min: sorted.first().copied().unwrap_or(f64::NAN),
            median,
            max: sorted.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub normal_scores: ScoreStats,
    pub abnormal_scores: ScoreStats,
    pub scorer: ScorerKind,
    pub split_hash: String,
    pub encoder_config_hash: String,
    /// Free-form echo of the configuration that produced the run.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub scorer: ScorerKind,
    pub k_nn: usize,
    pub histogram_bins: usize,
    pub export_embeddings: bool,
    pub config_echo: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            scorer: ScorerKind::Gaussian,
            k_nn: 5,
            histogram_bins: 30,
            export_embeddings: true,
            config_echo: serde_json::Value::Null,
        }
    }
}

/// Checks that `model` was fit on embeddings of `encoder`.
pub fn check_compatible<E: Encoder + ?Sized>(encoder: &E, model: &DensityModel) -> Result<()> {
    let cfg = encoder.config();
    if model.dim() != cfg.feature_dim {
        return Err(Error::Data(format!(
            "density model has dimension {}, encoder produces {}",
            model.dim(),
            cfg.feature_dim
        )));
    }
    if let Some(h) = &model.encoder_config_hash {
        if *h != checkpoint::config_hash(cfg) {
            return Err(Error::Data(
                "density model was fit with a different encoder configuration".into(),
            ));
        }
    }
    Ok(())
}

/// Scores the split's test images and writes `report.json`, `scores.csv`,
/// `hist.csv`, `hist.png` and (optionally) `embeddings.csv` into `out`.
pub fn evaluate<E: Encoder + ?Sized>(
    encoder: &E,
    model: &DensityModel,
    split: &FewShotSplit,
    opts: &EvalOptions,
    out: &Path,
) -> Result<EvalReport> {
    check_compatible(encoder, model)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (images, ids, labels) = split.load_test()?;
    let mut records = score_images(model, encoder, &images, &ids, opts.scorer, opts.k_nn)?;
    attach_percentiles(&mut records);
    write_scores_csv(&records, &labels, &out.join(SCORES_FILE))?;
    let by_class = |want: Label| -> Vec<f64> {
        records
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == want)
            .map(|(r, _)| r.raw_score)
            .collect()
    };
    let (abn, nor) = (by_class(Label::Abnormal), by_class(Label::Normal));
    let report = EvalReport {
        auroc: auroc(&abn, &nor)?,
        n_normal: nor.len(),
        n_abnormal: abn.len(),
        normal_scores: ScoreStats::of(&nor),
        abnormal_scores: ScoreStats::of(&abn),
        scorer: opts.scorer,
        split_hash: split.hash()?,
        encoder_config_hash: checkpoint::config_hash(encoder.config()),
        config: opts.config_echo.clone(),
    };
    export_score_distribution(&records, &labels, opts.histogram_bins, out)?;
    if opts.export_embeddings {
        export_embeddings(encoder, &images, &labels, &out.join(EMBEDDINGS_FILE))?;
    }
    report.save(&out.join(REPORT_FILE))?;
    Ok(report)
}

pub fn write_scores_csv(records: &[ScoreRecord], labels: &[Label], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from("id,raw_score,percentile,label\n");
    for (i, r) in records.iter().enumerate() {
        let pct = r.percentile.map(|p| p.to_string()).unwrap_or_default();
        let label = labels.get(i).map(Label::as_str).unwrap_or("");
        out.push_str(&format!("{},{},{},{}\n", csv_field(&r.sample_id), r.raw_score, pct, label));
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests;
