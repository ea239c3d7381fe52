//! Metrics and verification probes: UAR and confusion aggregation across
//! folds, discriminator calibration against the closed-form optimum, and
//! distribution gaps between real and generated features.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infogan::Discriminator;
use crate::numkit::{sigmoid, Matrix};

/// Unweighted average recall over the classes present in the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UarReport {
    pub uar: f64,
    /// `None` for classes with no ground-truth instance.
    pub recalls: Vec<Option<f64>>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn uar_from_confusion(confusion: Vec<Vec<usize>>) -> Result<UarReport> {
    let k = confusion.len();
    if confusion.iter().any(|row| row.len() != k) {
        return Err(Error::InvalidInput("confusion matrix must be square".into()));
    }
    let recalls: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::InvalidInput("UAR of an empty record set".into()));
    }
    Ok(UarReport {
        uar: present.iter().sum::<f64>() / present.len() as f64,
        recalls,
        confusion,
    })
}

pub fn uar_from_predictions(
    truth: &[usize],
    predicted: &[usize],
    num_classes: usize,
) -> Result<UarReport> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("uar", truth.len(), predicted.len()));
    }
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: t.max(p),
                classes: num_classes,
            });
        }
        confusion[t][p] += 1;
    }
    uar_from_confusion(confusion)
}

/// Metrics of one leave-one-speaker-out fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    /// Held-out speaker.
    pub fold: String,
    pub uar: f64,
    pub recalls: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    /// Named per-epoch series, e.g. `baseline_loss` or `d_loss`.
    pub traces: BTreeMap<String, Vec<f64>>,
}

impl FoldResult {
    pub fn new(fold: impl Into<String>, report: UarReport) -> Self {
        Self {
            fold: fold.into(),
            uar: report.uar,
            recalls: report.recalls,
            confusion: report.confusion,
            traces: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub folds: usize,
    pub mean_uar: f64,
    /// Sample standard deviation (n − 1); zero for a single fold.
    pub std_uar: f64,
    pub pooled_confusion: Vec<Vec<usize>>,
}

pub fn aggregate_folds(results: &[FoldResult]) -> Result<Aggregate> {
    let first = results
        .first()
        .ok_or_else(|| Error::InvalidInput("no fold results to aggregate".into()))?;
    let n = results.len() as f64;
    // sorted so that the sum does not depend on fold order
    let mut uars: Vec<f64> = results.iter().map(|r| r.uar).collect();
    uars.sort_by(f64::total_cmp);
    let mean = uars.iter().sum::<f64>() / n;
    let std = if results.len() < 2 {
        0.0
    } else {
        (uars.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let k = first.confusion.len();
    let mut pooled = vec![vec![0; k]; k];
    for r in results {
        if r.confusion.len() != k {
            return Err(Error::shape("aggregate_folds", k, r.confusion.len()));
        }
        for (prow, row) in pooled.iter_mut().zip(&r.confusion) {
            for (p, v) in prow.iter_mut().zip(row) {
                *p += v;
            }
        }
    }
    Ok(Aggregate {
        folds: results.len(),
        mean_uar: mean,
        std_uar: std,
        pooled_confusion: pooled,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1d {
    pub mean: f64,
    pub std: f64,
}

impl Gaussian1d {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }
}

/// Gaussian kernel density estimate with Silverman's rule-of-thumb bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl Kde {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::InvalidInput("kernel density needs >= 2 samples".into()));
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let quantile = |q: f64| samples[((n - 1.0) * q).round() as usize];
        let iqr = quantile(0.75) - quantile(0.25);
        let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
        let bandwidth = 0.9 * spread * n.powf(-0.2);
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidInput("samples have zero spread".into()));
        }
        Ok(Self { samples, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let k = Gaussian1d::new(0.0, self.bandwidth);
        self.samples.iter().map(|s| k.pdf(x - s)).sum::<f64>() / self.samples.len() as f64
    }
}

/// Density of the generated distribution for [`discriminator_calibration`].
#[derive(Clone, Debug, PartialEq)]
pub enum GeneratedDensity {
    ClosedForm(Gaussian1d),
    Estimated(Kde),
}

impl GeneratedDensity {
    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            Self::ClosedForm(g) => g.pdf(x),
            Self::Estimated(k) => k.pdf(x),
        }
    }
}

/// Evenly spaced grid over `[lo, hi]` with `points` entries.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// Mean over `grid` of `|σ(D(h)) − p_data(h) / (p_data(h) + p_g(h))|` for a
/// discriminator over one-dimensional features.
pub fn discriminator_calibration(
    disc: &Discriminator,
    p_data: &Gaussian1d,
    p_g: &GeneratedDensity,
    grid: &[f64],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty calibration grid".into()));
    }
    if disc.input_dim() != 1 {
        return Err(Error::shape("discriminator_calibration", 1, disc.input_dim()));
    }
    let h = Matrix::column(grid);
    let logits = disc.logits(&h)?;
    let mut total = 0.0;
    for (&x, &logit) in grid.iter().zip(&logits) {
        let pd = p_data.pdf(x);
        let pg = p_g.pdf(x);
        if !(pd + pg > 0.0) {
            return Err(Error::InvalidInput(format!(
                "grid point {x} lies outside the support of both densities"
            )));
        }
        total += (sigmoid(logit) - pd / (pd + pg)).abs();
    }
    Ok(total / grid.len() as f64)
}

/// Moment gaps between real and generated features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub mean_gap_norm: f64,
    /// Mean over dimensions of `|std_gen / std_real − 1|`.
    pub mean_std_ratio_dev: f64,
    pub per_dim_mean_gap: Vec<f64>,
    pub per_dim_std_ratio: Vec<f64>,
    /// Distance between the real and generated centroid of each class, when both exist.
    pub class_centroid_gaps: Vec<Option<f64>>,
    /// Smallest distance between two real class centroids.
    pub min_inter_class_distance: Option<f64>,
}

fn column_moments(m: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = m.rows() as f64;
    let mean: Vec<f64> = m.column_sums().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - mu).powi(2);
        }
    }
    (mean, var.iter().map(|v| (v / n).sqrt()).collect())
}

fn centroids(m: &Matrix, labels: &[usize], k: usize) -> Vec<Option<Vec<f64>>> {
    let mut sums = vec![vec![0.0; m.cols()]; k];
    let mut counts = vec![0usize; k];
    for (row, &l) in m.row_iter().zip(labels) {
        if l < k {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(row) {
                *s += x;
            }
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.iter().map(|v| v / c as f64).collect()))
        .collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn feature_distribution_report(
    real: &Matrix,
    real_labels: &[usize],
    generated: &Matrix,
    generated_labels: &[usize],
    num_classes: usize,
) -> Result<DistributionReport> {
    if real.rows() == 0 || generated.rows() == 0 {
        return Err(Error::InvalidInput("empty feature set".into()));
    }
    if real.cols() != generated.cols() {
        return Err(Error::shape(
            "feature_distribution_report",
            real.cols(),
            generated.cols(),
        ));
    }
    if real_labels.len() != real.rows() || generated_labels.len() != generated.rows() {
        return Err(Error::InvalidInput("one label per feature row required".into()));
    }
    let (real_mean, real_std) = column_moments(real);
    let (gen_mean, gen_std) = column_moments(generated);
    let per_dim_mean_gap: Vec<f64> = gen_mean.iter().zip(&real_mean).map(|(g, r)| g - r).collect();
    let per_dim_std_ratio: Vec<f64> = gen_std
        .iter()
        .zip(&real_std)
        .map(|(&g, &r)| if r == 0.0 && g == 0.0 { 1.0 } else { g / r })
        .collect();
    let real_c = centroids(real, real_labels, num_classes);
    let gen_c = centroids(generated, generated_labels, num_classes);
    let class_centroid_gaps = real_c
        .iter()
        .zip(&gen_c)
        .map(|(r, g)| match (r, g) {
            (Some(r), Some(g)) => Some(distance(r, g)),
            _ => None,
        })
        .collect();
    let present: Vec<&Vec<f64>> = real_c.iter().flatten().collect();
    let mut min_inter: Option<f64> = None;
    for a in 0..present.len() {
        for b in a + 1..present.len() {
            let d = distance(present[a], present[b]);
            min_inter = Some(min_inter.map_or(d, |m| m.min(d)));
        }
    }
    Ok(DistributionReport {
        mean_gap_norm: per_dim_mean_gap.iter().map(|g| g * g).sum::<f64>().sqrt(),
        mean_std_ratio_dev: per_dim_std_ratio.iter().map(|r| (r - 1.0).abs()).sum::<f64>()
            / per_dim_std_ratio.len().max(1) as f64,
        per_dim_mean_gap,
        per_dim_std_ratio,
        class_centroid_gaps,
        min_inter_class_distance: min_inter,
    })
}

/// Aligned-column text table of fold UARs followed by the aggregate.
pub fn render_fold_table(results: &[FoldResult], aggregate: &Aggregate) -> String {
    let width = results
        .iter()
        .map(|r| r.fold.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}", "fold", "uar");
    for r in results {
        let _ = writeln!(out, "{:<width$}  {:>8.4}", r.fold, r.uar);
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>8.4} ± {:.4} over {} folds",
        "mean",
        aggregate.mean_uar,
        aggregate.std_uar,
        aggregate.folds
    );
    out
}

pub fn write_confusion_csv(confusion: &[Vec<usize>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let k = confusion.len();
    let mut header = vec!["true\\pred".to_string()];
    header.extend((0..k).map(|c| c.to_string()));
    w.write_record(&header)?;
    for (c, row) in confusion.iter().enumerate() {
        let mut rec = vec![c.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
