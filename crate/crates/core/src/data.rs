//! Synthetic domain-shift generators, CSV datasets, and the two-domain
//! mini-batch sampler.
//!
//! Target labels are firewalled: they exist in memory for the evaluator, but
//! the training path receives features only (see [`DomainDataset::features`]
//! vs [`DomainDataset::labels`]; every label access is counted so tests can
//! assert that training never reads them).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

/// A dataset of raw inputs with optional class labels and a domain tag.
///
/// The label-read counter is shared by clones and derived views (subsets,
/// re-featured copies), so it tracks label consumption across an entire run.
#[derive(Debug, Clone)]
pub struct DomainDataset {
    x: Matrix,
    y: Option<Vec<usize>>,
    domain: DomainTag,
    label_reads: Arc<AtomicU64>,
}

impl DomainDataset {
    pub fn new(x: Matrix, y: Option<Vec<usize>>, domain: DomainTag) -> Result<Self> {
        if let Some(labels) = &y {
            if labels.len() != x.rows() {
                return Err(Error::DimensionMismatch {
                    op: "domain_dataset",
                    left: format!("{} rows", x.rows()),
                    right: format!("{} labels", labels.len()),
                });
            }
        }
        Ok(DomainDataset {
            x,
            y,
            domain,
            label_reads: Arc::new(AtomicU64::new(0)),
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn features(&self) -> &Matrix {
        &self.x
    }

    pub fn has_labels(&self) -> bool {
        self.y.is_some()
    }

    /// Label access; every call is counted (see module docs).
    pub fn labels(&self) -> Option<&[usize]> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.y.as_deref()
    }

    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Label-stripped copy for training paths (fresh counter; there is
    /// nothing left to read).
    pub fn without_labels(&self) -> DomainDataset {
        DomainDataset {
            x: self.x.clone(),
            y: None,
            domain: self.domain,
            label_reads: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Check all labels lie in `[0, classes)`. Counts as a label read.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        match self.labels() {
            None => Ok(()),
            Some(labels) => {
                for &y in labels {
                    if y >= classes {
                        return Err(Error::LabelOutOfRange { label: y, classes });
                    }
                }
                Ok(())
            }
        }
    }

    /// Copies the given rows into a new dataset (counter shared).
    pub fn subset(&self, indices: &[usize]) -> DomainDataset {
        let x = self.x.gather_rows(indices);
        let y = self
            .y
            .as_ref()
            .map(|labels| indices.iter().map(|&i| labels[i]).collect());
        DomainDataset {
            x,
            y,
            domain: self.domain,
            label_reads: Arc::clone(&self.label_reads),
        }
    }

    /// Deterministic split into `(held_out, rest)` with
    /// `held_out.len() = round(fraction * n)`, at least 1 each.
    pub fn split(&self, fraction: f64, rng: &mut SeededRng) -> Result<(DomainDataset, DomainDataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "split fraction must lie in (0, 1), got {fraction}"
            )));
        }
        if self.len() < 2 {
            return Err(Error::InsufficientSamples {
                need: 2,
                got: self.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let k = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        Ok((self.subset(&idx[..k]), self.subset(&idx[k..])))
    }

    /// Replaces the feature matrix (used to standardize inputs).
    pub fn with_features(&self, x: Matrix) -> Result<DomainDataset> {
        if x.rows() != self.len() {
            return Err(Error::DimensionMismatch {
                op: "with_features",
                left: format!("{} rows", x.rows()),
                right: format!("{} rows", self.len()),
            });
        }
        Ok(DomainDataset {
            x,
            y: self.y.clone(),
            domain: self.domain,
            label_reads: Arc::clone(&self.label_reads),
        })
    }
}

/// Per-feature affine transform fitted on source data only; the target
/// domain is transformed with the source statistics to avoid leakage.
#[derive(Debug, Clone)]
pub struct Standardizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput("standardizer fit on an empty matrix"));
        }
        let means = x.col_mean()?.data().to_vec();
        let mut vars = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (v, (&xv, &m)) in vars.iter_mut().zip(x.row(r).iter().zip(&means)) {
                let d = xv - m;
                *v += d * d;
            }
        }
        let n = x.rows() as f64;
        let stds = vars
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < 1e-12 {
                    1.0 // constant feature: leave it centered but unscaled
                } else {
                    s
                }
            })
            .collect();
        Ok(Standardizer { means, stds })
    }

    pub fn from_parts(means: Vec<f64>, stds: Vec<f64>) -> Result<Self> {
        if means.len() != stds.len() {
            return Err(Error::DimensionMismatch {
                op: "standardizer",
                left: format!("{} means", means.len()),
                right: format!("{} stds", stds.len()),
            });
        }
        if stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("stds must be positive".into()));
        }
        Ok(Standardizer { means, stds })
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.means.len() {
            return Err(Error::DimensionMismatch {
                op: "standardize",
                left: x.shape(),
                right: format!("{} features", self.means.len()),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (v, (&m, &s)) in out.row_mut(r).iter_mut().zip(self.means.iter().zip(&self.stds)) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

fn rotate_deg(x: f64, y: f64, deg: f64) -> (f64, f64) {
    let rad = deg.to_radians();
    let (s, c) = rad.sin_cos();
    (x * c - y * s, x * s + y * c)
}

/// Two interleaving half-circles with Gaussian noise; the target domain is
/// the same generator rotated by `rotation_deg` about the origin. Target
/// labels are generated (for evaluation) but must not reach training code.
pub fn gen_two_moons_shift(
    n_per_domain: usize,
    rotation_deg: f64,
    noise_sigma: f64,
    rng: &mut SeededRng,
) -> Result<(DomainDataset, DomainDataset)> {
    if n_per_domain < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 samples per domain, got {n_per_domain}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let mut make = |rotation: f64, domain: DomainTag| -> Result<DomainDataset> {
        let n0 = n_per_domain.div_ceil(2);
        let mut rows = Vec::with_capacity(n_per_domain);
        let mut labels = Vec::with_capacity(n_per_domain);
        for j in 0..n_per_domain {
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let (mut px, mut py) = if j < n0 {
                (theta.cos(), theta.sin())
            } else {
                (1.0 - theta.cos(), 0.5 - theta.sin())
            };
            if noise_sigma > 0.0 {
                px += rng.normal(0.0, noise_sigma);
                py += rng.normal(0.0, noise_sigma);
            }
            let (px, py) = rotate_deg(px, py, rotation);
            rows.push(vec![px, py]);
            labels.push(usize::from(j >= n0));
        }
        DomainDataset::new(Matrix::from_rows(&rows)?, Some(labels), domain)
    };
    let source = make(0.0, DomainTag::Source)?;
    let target = make(rotation_deg, DomainTag::Target)?;
    Ok((source, target))
}

/// Standard deviation of each Gaussian blob in [`gen_blob_shift`].
pub const BLOB_SIGMA: f64 = 0.6;
/// Radius of the circle the blob means sit on.
pub const BLOB_RADIUS: f64 = 4.0;

/// `K` Gaussian blobs on a circle; the target domain translates every blob
/// mean by `mean_shift` (a 2-vector) and redraws the noise.
pub fn gen_blob_shift(
    classes: usize,
    n_per_domain: usize,
    mean_shift: &[f64],
    rng: &mut SeededRng,
) -> Result<(DomainDataset, DomainDataset)> {
    if classes < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n_per_domain < classes {
        return Err(Error::InvalidParameter(format!(
            "need at least {classes} samples per domain, got {n_per_domain}"
        )));
    }
    if mean_shift.len() != 2 {
        return Err(Error::InvalidParameter(format!(
            "mean shift must be a 2-vector, got {} entries",
            mean_shift.len()
        )));
    }
    let means: Vec<(f64, f64)> = (0..classes)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            (BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin())
        })
        .collect();
    let mut make = |shift: &[f64], domain: DomainTag| -> Result<DomainDataset> {
        let mut rows = Vec::with_capacity(n_per_domain);
        let mut labels = Vec::with_capacity(n_per_domain);
        for j in 0..n_per_domain {
            let k = j % classes;
            let (mx, my) = means[k];
            rows.push(vec![
                mx + shift[0] + rng.normal(0.0, BLOB_SIGMA),
                my + shift[1] + rng.normal(0.0, BLOB_SIGMA),
            ]);
            labels.push(k);
        }
        DomainDataset::new(Matrix::from_rows(&rows)?, Some(labels), domain)
    };
    let source = make(&[0.0, 0.0], DomainTag::Source)?;
    let target = make(mean_shift, DomainTag::Target)?;
    Ok((source, target))
}

/// Loads a numeric CSV. An optional header line is auto-detected by a
/// non-numeric first row; with `has_labels`, the last column holds
/// nonnegative integer class labels.
pub fn load_csv(path: &Path, has_labels: bool, domain: DomainTag) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_csv(&text, has_labels, domain, &path.display().to_string())
}

fn parse_csv(text: &str, has_labels: bool, domain: DomainTag, path: &str) -> Result<DomainDataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut width: Option<usize> = None;
    let mut first_data_row = true;
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            cells.iter().map(|c| c.parse::<f64>()).collect();
        let parsed = match parsed {
            Ok(vals) => vals,
            Err(_) if first_data_row => continue, // header line
            Err(_) => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no + 1,
                    msg: "non-numeric cell".into(),
                })
            }
        };
        if parsed.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_string(),
                line: line_no + 1,
                msg: "non-finite value".into(),
            });
        }
        first_data_row = false;
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no + 1,
                    msg: format!("ragged row: expected {w} cells, got {}", parsed.len()),
                })
            }
            _ => {}
        }
        if has_labels {
            if parsed.len() < 2 {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no + 1,
                    msg: "labeled rows need at least one feature and a label".into(),
                });
            }
            let raw = parsed[parsed.len() - 1];
            if raw < 0.0 || raw.fract() != 0.0 || raw > u32::MAX as f64 {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: line_no + 1,
                    msg: format!("label must be a nonnegative integer, got {raw}"),
                });
            }
            labels.push(raw as usize);
            rows.push(parsed[..parsed.len() - 1].to_vec());
        } else {
            rows.push(parsed);
        }
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_string(),
            line: 0,
            msg: "no data rows".into(),
        });
    }
    DomainDataset::new(
        Matrix::from_rows(&rows)?,
        if has_labels { Some(labels) } else { None },
        domain,
    )
}

/// Writes a dataset as CSV with a header line. Feature values are printed in
/// shortest round-trip form, so load -> save -> load is bit-exact.
pub fn save_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    let labels = ds.y.as_deref();
    if labels.is_some() {
        let _ = writeln!(out, "{},label", header.join(","));
    } else {
        let _ = writeln!(out, "{}", header.join(","));
    }
    for r in 0..ds.len() {
        let cells: Vec<String> = ds.x.row(r).iter().map(f64::to_string).collect();
        match labels {
            Some(ls) => {
                let _ = writeln!(out, "{},{}", cells.join(","), ls[r]);
            }
            None => {
                let _ = writeln!(out, "{}", cells.join(","));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// One training batch: half source (with labels), half target (features
/// only, by construction).
#[derive(Debug, Clone)]
pub struct Batch {
    pub x_s: Matrix,
    pub y_s: Vec<usize>,
    pub x_t: Matrix,
}

/// Draws half/half two-domain batches without replacement within an epoch,
/// reshuffling per epoch. Epoch remainders smaller than a half-batch are
/// dropped.
#[derive(Debug)]
pub struct BatchSampler {
    half: usize,
    src_order: Vec<usize>,
    tgt_order: Vec<usize>,
    src_pos: usize,
    tgt_pos: usize,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(batch_size: usize, n_source: usize, n_target: usize, mut rng: SeededRng) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "batch size must be even and positive, got {batch_size}"
            )));
        }
        let half = batch_size / 2;
        if half > n_source || half > n_target {
            return Err(Error::InvalidParameter(format!(
                "half batch {half} exceeds a domain size ({n_source} source / {n_target} target)"
            )));
        }
        let mut src_order: Vec<usize> = (0..n_source).collect();
        let mut tgt_order: Vec<usize> = (0..n_target).collect();
        rng.shuffle(&mut src_order);
        rng.shuffle(&mut tgt_order);
        Ok(BatchSampler {
            half,
            src_order,
            tgt_order,
            src_pos: 0,
            tgt_pos: 0,
            rng,
        })
    }

    pub fn half_batch(&self) -> usize {
        self.half
    }

    /// Next half/half batch. `target_features` intentionally carries no
    /// labels; source labels are read from the dataset.
    pub fn next_batch(&mut self, source: &DomainDataset, target_features: &Matrix) -> Result<Batch> {
        if source.len() != self.src_order.len() || target_features.rows() != self.tgt_order.len() {
            return Err(Error::DimensionMismatch {
                op: "next_batch",
                left: format!("sampler sized {}/{}", self.src_order.len(), self.tgt_order.len()),
                right: format!("data sized {}/{}", source.len(), target_features.rows()),
            });
        }
        let y_all = source
            .labels()
            .ok_or(Error::MissingLabels("source batch needs labels"))?;

        if self.src_pos + self.half > self.src_order.len() {
            self.rng.shuffle(&mut self.src_order);
            self.src_pos = 0;
        }
        if self.tgt_pos + self.half > self.tgt_order.len() {
            self.rng.shuffle(&mut self.tgt_order);
            self.tgt_pos = 0;
        }
        let src_idx = &self.src_order[self.src_pos..self.src_pos + self.half];
        let tgt_idx = &self.tgt_order[self.tgt_pos..self.tgt_pos + self.half];
        self.src_pos += self.half;
        self.tgt_pos += self.half;

        let x_s = source.features().gather_rows(src_idx);
        let y_s = src_idx.iter().map(|&i| y_all[i]).collect();
        let x_t = target_features.gather_rows(tgt_idx);
        Ok(Batch { x_s, y_s, x_t })
    }
}
