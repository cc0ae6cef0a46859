//! Detection metrics and report generation.
//!
//! Provides tie-aware AUROC, a best-F1 threshold sweep for ACC/F1, scored
//! dataset reports (CSV plus a structured summary), score-density
//! histograms, and per-sample reconstruction galleries with radial power
//! profiles. The anomalous class is the positive class everywhere.

use std::path::Path;

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::ingest::{Label, TrafficSample};
use crate::spectral::{decouple_array, power_spectrum_profile, RadialProfile};
use crate::training::{score_dataset, Checkpoint, ScoreRow, TrainingGraph};

/// Human-readable statement of how the ACC/F1 threshold is chosen; recorded
/// in every summary so reported numbers are interpretable.
pub const THRESHOLD_POLICY: &str = "best F1 over midpoints of consecutive distinct scores plus \
     the minimum score; ties toward the larger threshold; score >= threshold predicts anomaly";

fn labeled_pairs(scores: &[f64], labels: &[Label]) -> Result<Vec<(f64, bool)>> {
    assert_eq!(scores.len(), labels.len(), "score/label lengths");
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .filter_map(|(s, l)| match l {
            Label::Normal => Some((*s, false)),
            Label::Anomalous => Some((*s, true)),
            Label::Unknown => None,
        })
        .collect();
    if let Some((bad, _)) = pairs.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Data(format!("scores must be finite, got {bad}")));
    }
    let n_anom = pairs.iter().filter(|(_, a)| *a).count();
    if n_anom == 0 || n_anom == pairs.len() {
        return Err(Error::Data(
            "metric needs both normal and anomalous samples".into(),
        ));
    }
    Ok(pairs)
}

/// Area under the ROC curve: the probability that a random anomalous score
/// exceeds a random normal score, counting ties as one half.
///
/// Computed by exact integer half-unit counting over tie groups, so the
/// result equals brute-force pair counting bit for bit. Unlabeled samples
/// are ignored.
pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let mut pairs = labeled_pairs(scores, labels)?;
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    let mut half_units: u64 = 0;
    let mut anoms_above: u64 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut tied_anom, mut tied_norm) = (0u64, 0u64);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                tied_anom += 1;
            } else {
                tied_norm += 1;
            }
            j += 1;
        }
        // each tied normal loses to the anomalies above and halves the ties
        half_units += tied_norm * (2 * anoms_above + tied_anom);
        anoms_above += tied_anom;
        i = j;
    }
    let n_anom = anoms_above;
    let n_norm = pairs.len() as u64 - n_anom;
    Ok(half_units as f64 / (2.0 * n_anom as f64 * n_norm as f64))
}

/// Confusion counts `(tp, fp, tn, fn)` when `score >= threshold` predicts
/// anomaly. Unlabeled samples are ignored.
pub fn confusion_at(scores: &[f64], labels: &[Label], threshold: f64) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut tn, mut fnn) = (0, 0, 0, 0);
    for (s, l) in scores.iter().zip(labels) {
        match (l, *s >= threshold) {
            (Label::Anomalous, true) => tp += 1,
            (Label::Anomalous, false) => fnn += 1,
            (Label::Normal, true) => fp += 1,
            (Label::Normal, false) => tn += 1,
            (Label::Unknown, _) => {}
        }
    }
    (tp, fp, tn, fnn)
}

fn f1_of(tp: usize, fp: usize, fnn: usize) -> f64 {
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Sweeps candidate thresholds (the minimum score and all midpoints of
/// consecutive distinct scores) and returns `(acc, f1, threshold)` at the
/// best F1, breaking ties toward the larger threshold.
pub fn acc_f1_at_best_threshold(scores: &[f64], labels: &[Label]) -> Result<(f64, f64, f64)> {
    let pairs = labeled_pairs(scores, labels)?;
    let mut distinct: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    let mut candidates = vec![distinct[0]];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));

    let class: Vec<Label> = pairs
        .iter()
        .map(|(_, a)| if *a { Label::Anomalous } else { Label::Normal })
        .collect();
    let vals: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();

    let mut best = (0.0, f64::NEG_INFINITY, 0.0); // (acc, f1, threshold)
    for t in candidates {
        let (tp, fp, tn, fnn) = confusion_at(&vals, &class, t);
        let f1 = f1_of(tp, fp, fnn);
        let acc = (tp + tn) as f64 / pairs.len() as f64;
        // ascending sweep, so >= keeps the larger threshold on equal F1
        if f1 >= best.1 {
            best = (acc, f1, t);
        }
    }
    Ok(best)
}

/// Metrics of one scored dataset at the chosen operating point.
#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub threshold: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

/// A scored dataset together with its metrics and run provenance.
#[derive(Debug, Clone)]
pub struct AnomalyReport {
    pub rows: Vec<ScoreRow>,
    pub metrics: Metrics,
    /// AUROC of the per-branch score columns, when present and finite.
    pub auc_low: Option<f64>,
    pub auc_high: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl AnomalyReport {
    /// Computes metrics over the fused scores of the labeled rows; rows
    /// labeled `unknown` are carried through to the CSV but excluded from
    /// metrics. Requires both classes among the labeled rows.
    pub fn new(rows: Vec<ScoreRow>, seed: u64, config_hash: impl Into<String>) -> Result<AnomalyReport> {
        let fused: Vec<f64> = rows.iter().map(|r| r.score_fused).collect();
        let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
        let auc = auroc(&fused, &labels)?;
        let (acc, f1, threshold) = acc_f1_at_best_threshold(&fused, &labels)?;
        let (tp, fp, tn, fnn) = confusion_at(&fused, &labels, threshold);
        let branch_auc = |pick: fn(&ScoreRow) -> f64| -> Option<f64> {
            let vals: Vec<f64> = rows.iter().map(pick).collect();
            if rows
                .iter()
                .any(|r| r.label != Label::Unknown && !pick(r).is_finite())
            {
                return None;
            }
            auroc(&vals, &labels).ok()
        };
        Ok(AnomalyReport {
            auc_low: branch_auc(|r| r.score_low),
            auc_high: branch_auc(|r| r.score_high),
            n_normal: labels.iter().filter(|l| **l == Label::Normal).count(),
            n_anomalous: labels.iter().filter(|l| **l == Label::Anomalous).count(),
            metrics: Metrics {
                auc,
                acc,
                f1,
                threshold,
                true_pos: tp,
                false_pos: fp,
                true_neg: tn,
                false_neg: fnn,
            },
            rows,
            seed,
            config_hash: config_hash.into(),
        })
    }

    /// Scores a dataset with a trained model and wraps it in a report.
    pub fn from_model(ckpt: &Checkpoint, samples: &[TrafficSample]) -> Result<AnomalyReport> {
        let rows = score_dataset(ckpt, samples)?;
        AnomalyReport::new(rows, ckpt.cfg.seed, ckpt.cfg.config_hash())
    }

    /// Writes one row per sample: `source_id,label,score_fused,score_low,score_high`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows_csv(&self.rows, path)
    }

    /// Writes the metrics, class counts, and provenance as TOML.
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            seed: u64,
            config_hash: &'a str,
            threshold_policy: &'static str,
            n_normal: usize,
            n_anomalous: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            auc_low: Option<f64>,
            #[serde(skip_serializing_if = "Option::is_none")]
            auc_high: Option<f64>,
            #[serde(flatten)]
            metrics: &'a Metrics,
        }
        let text = toml::to_string(&Summary {
            seed: self.seed,
            config_hash: &self.config_hash,
            threshold_policy: THRESHOLD_POLICY,
            n_normal: self.n_normal,
            n_anomalous: self.n_anomalous,
            auc_low: self.auc_low,
            auc_high: self.auc_high,
            metrics: &self.metrics,
        })
        .map_err(|e| Error::Data(format!("summary serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Writes score rows as CSV; `NaN` marks absent branch columns.
pub fn write_rows_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let map = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["source_id", "label", "score_fused", "score_low", "score_high"])
        .map_err(map)?;
    for r in rows {
        w.write_record([
            r.source_id.as_str(),
            r.label.as_str(),
            &format!("{}", r.score_fused),
            &format!("{}", r.score_low),
            &format!("{}", r.score_high),
        ])
        .map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`write_rows_csv`].
pub fn read_rows_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let map = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(map)?;
    let parse = |field: &str, name: &str| -> Result<f64> {
        field
            .parse::<f64>()
            .map_err(|_| Error::Data(format!("{}: bad {name} value '{field}'", path.display())))
    };
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(map)?;
        if rec.len() != 5 {
            return Err(Error::Data(format!(
                "{}: expected 5 columns, found {}",
                path.display(),
                rec.len()
            )));
        }
        rows.push(ScoreRow {
            source_id: rec[0].to_string(),
            label: Label::parse(&rec[1])?,
            score_fused: parse(&rec[2], "score_fused")?,
            score_low: parse(&rec[3], "score_low")?,
            score_high: parse(&rec[4], "score_high")?,
        });
    }
    Ok(rows)
}

/// One histogram bin of one branch/label combination.
#[derive(Debug, Clone)]
pub struct DensityRow {
    pub branch: &'static str,
    pub label: Label,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    /// Count normalized by the class total, so each histogram sums to one.
    pub frequency: f64,
}

/// Score histograms per branch and label over a shared per-branch range.
#[derive(Debug, Clone)]
pub struct DensityTable {
    pub n_bins: usize,
    pub rows: Vec<DensityRow>,
}

impl DensityTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let map = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
        w.write_record(["branch", "label", "bin_lo", "bin_hi", "count", "frequency"])
            .map_err(map)?;
        for r in &self.rows {
            w.write_record([
                r.branch,
                r.label.as_str(),
                &format!("{}", r.bin_lo),
                &format!("{}", r.bin_hi),
                &format!("{}", r.count),
                &format!("{}", r.frequency),
            ])
            .map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Shared mass between the normal and anomalous histograms of one
    /// branch: the sum over bins of the smaller frequency. `None` when
    /// either class has no histogram for that branch.
    pub fn overlap(&self, branch: &str) -> Option<f64> {
        let freqs = |label: Label| -> Option<Vec<f64>> {
            let v: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.branch == branch && r.label == label)
                .map(|r| r.frequency)
                .collect();
            (v.len() == self.n_bins).then_some(v)
        };
        let normal = freqs(Label::Normal)?;
        let anom = freqs(Label::Anomalous)?;
        Some(
            normal
                .iter()
                .zip(&anom)
                .map(|(a, b)| a.min(*b))
                .sum::<f64>(),
        )
    }
}

/// Histograms of the low/high/fused score columns split by label, each over
/// that branch's min-max score range. Branches whose column is entirely
/// absent (`NaN`) are skipped, as are labels with no samples.
pub fn score_density(report: &AnomalyReport, n_bins: usize) -> Result<DensityTable> {
    if report.rows.is_empty() {
        return Err(Error::Data("cannot histogram an empty report".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    type ScorePick = fn(&ScoreRow) -> f64;
    let branches: [(&'static str, ScorePick); 3] = [
        ("low", |r| r.score_low),
        ("high", |r| r.score_high),
        ("fused", |r| r.score_fused),
    ];
    let mut rows = Vec::new();
    for (name, pick) in branches {
        let vals: Vec<(f64, Label)> = report
            .rows
            .iter()
            .filter(|r| r.label != Label::Unknown)
            .map(|r| (pick(r), r.label))
            .filter(|(v, _)| v.is_finite())
            .collect();
        if vals.is_empty() {
            continue;
        }
        let min = vals.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let max = vals.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        let width = (max - min) / n_bins as f64;
        for label in [Label::Normal, Label::Anomalous] {
            let class: Vec<f64> = vals
                .iter()
                .filter(|(_, l)| *l == label)
                .map(|(v, _)| *v)
                .collect();
            if class.is_empty() {
                continue;
            }
            let mut counts = vec![0usize; n_bins];
            for v in &class {
                let idx = if max > min {
                    (((v - min) / (max - min)) * n_bins as f64).floor() as usize
                } else {
                    0
                };
                counts[idx.min(n_bins - 1)] += 1;
            }
            for (b, &count) in counts.iter().enumerate() {
                rows.push(DensityRow {
                    branch: name,
                    label,
                    bin_lo: min + b as f64 * width,
                    bin_hi: min + (b + 1) as f64 * width,
                    count,
                    frequency: count as f64 / class.len() as f64,
                });
            }
        }
    }
    Ok(DensityTable { n_bins, rows })
}

/// L2 distance between two radial power profiles over matching bins.
pub fn profile_l2_distance(a: &RadialProfile, b: &RadialProfile) -> f64 {
    assert_eq!(a.n_bins(), b.n_bins(), "profiles must share binning");
    a.mean_log_power
        .iter()
        .zip(&b.mean_log_power)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

enum DisplayMap {
    /// Values already in `[0, 1]`; clipped directly.
    Unit,
    /// Zero-centered values; offset to mid-gray before clipping.
    Centered,
}

fn write_gray(path: &Path, x: &Array3<f64>, map: DisplayMap) -> Result<()> {
    let (p, h, w) = x.dim();
    let img = image::GrayImage::from_fn((p * w) as u32, h as u32, |xx, yy| {
        let (pi, c) = ((xx as usize) / w, (xx as usize) % w);
        let v = x[(pi, yy as usize, c)];
        let shown = match map {
            DisplayMap::Unit => v,
            DisplayMap::Centered => 0.5 + v,
        };
        image::Luma([(shown.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: image write failed: {e}", path.display())))
}

/// Writes, per sample, grayscale images of the original, its two bands, and
/// every reconstruction the model produces, plus one radial-profile table
/// covering all of them. Dual models emit six images per sample;
/// single-branch variants emit four.
///
/// Returns the number of files written. Capped at 64 samples to keep
/// galleries reviewable.
pub fn reconstruction_report(
    ckpt: &Checkpoint,
    samples: &[TrafficSample],
    out_dir: &Path,
) -> Result<usize> {
    if samples.len() > 64 {
        return Err(Error::Config(format!(
            "reconstruction report is capped at 64 samples, got {}",
            samples.len()
        )));
    }
    ckpt.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let graph = TrainingGraph::new(&ckpt.cfg, ckpt.ablation)?;
    let n_bins = (ckpt.cfg.ae.h.min(ckpt.cfg.ae.w) / 2).max(2);
    let mut files = 0usize;

    for (i, s) in samples.iter().enumerate() {
        let x = s.to_f64();
        let bands = decouple_array(&x, ckpt.cfg.d)?;
        let rec = graph.sample_reconstructions(&ckpt.param_sets, &x)?;
        let base = format!("sample_{i:03}_{}", sanitize(&s.source_id));

        let mut images: Vec<(String, &Array3<f64>, DisplayMap)> = vec![
            (format!("{base}_original.png"), &x, DisplayMap::Unit),
            (format!("{base}_low_band.png"), &bands.low, DisplayMap::Unit),
            (format!("{base}_high_band.png"), &bands.high, DisplayMap::Centered),
        ];
        if let Some(r) = &rec.recon_low {
            images.push((format!("{base}_recon_low.png"), r, DisplayMap::Unit));
        }
        if let Some(r) = &rec.recon_high {
            images.push((format!("{base}_recon_high.png"), r, DisplayMap::Unit));
        }
        images.push((format!("{base}_recon_fused.png"), &rec.recon_fused, DisplayMap::Unit));

        let mut header = vec!["bin_index".to_string(), "radial_center".to_string()];
        let mut profiles: Vec<RadialProfile> = Vec::new();
        for (name, arr, map) in &images {
            write_gray(&out_dir.join(name), arr, match map {
                DisplayMap::Unit => DisplayMap::Unit,
                DisplayMap::Centered => DisplayMap::Centered,
            })?;
            files += 1;
            let column = name
                .trim_start_matches(&format!("{base}_"))
                .trim_end_matches(".png")
                .to_string();
            header.push(column);
            profiles.push(power_spectrum_profile(std::slice::from_ref(arr), n_bins)?);
        }

        let csv_path = out_dir.join(format!("{base}_profiles.csv"));
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| Error::Data(format!("{}: {e}", csv_path.display())))?;
        let map = |e: csv::Error| Error::Data(format!("{}: {e}", csv_path.display()));
        w.write_record(&header).map_err(map)?;
        for b in 0..n_bins {
            let mut rec_row = vec![format!("{b}"), format!("{}", profiles[0].bin_centers[b])];
            rec_row.extend(profiles.iter().map(|p| format!("{}", p.mean_log_power[b])));
            w.write_record(&rec_row).map_err(map)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        files += 1;
    }
    Ok(files)
}
