//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, covering the objective weights, schedules, architecture widths,
//! dataset choice, and seed of one run.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::FisherForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferKind {
    None,
    Mmd,
    Coral,
    Adversarial,
}

impl TransferKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransferKind::None => "none",
            TransferKind::Mmd => "mmd",
            TransferKind::Coral => "coral",
            TransferKind::Adversarial => "adversarial",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TransferKind::None),
            "mmd" => Ok(TransferKind::Mmd),
            "coral" => Ok(TransferKind::Coral),
            "adversarial" => Ok(TransferKind::Adversarial),
            other => Err(Error::Config(format!("unknown transfer criterion '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherKind {
    None,
    TraceRatio,
    TraceDifference,
}

impl FisherKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FisherKind::None => "none",
            FisherKind::TraceRatio => "trace_ratio",
            FisherKind::TraceDifference => "trace_difference",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FisherKind::None),
            "trace_ratio" => Ok(FisherKind::TraceRatio),
            "trace_difference" => Ok(FisherKind::TraceDifference),
            other => Err(Error::Config(format!("unknown fisher form '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Moons,
    Blobs,
    Csv,
}

impl DatasetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetKind::Moons => "moons",
            DatasetKind::Blobs => "blobs",
            DatasetKind::Csv => "csv",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(DatasetKind::Moons),
            "blobs" => Ok(DatasetKind::Blobs),
            "csv" => Ok(DatasetKind::Csv),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

/// Everything one training run needs: objective weights, schedule constants,
/// architecture widths, dataset choice, and the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub transfer: TransferKind,
    pub fisher: FisherKind,
    /// Fisher loss weight.
    pub lambda0: f64,
    /// Between-class penalty of the trace-difference form.
    pub lambda_b: f64,
    /// Entropy regularization weight.
    pub lambda1: f64,
    /// Transfer loss weight; for the adversarial criterion this is the upper
    /// bound `u` of the logistic ramp.
    pub lambda2: f64,
    pub adv_gamma: f64,
    /// Apply the entropy term to both domains instead of target only.
    pub entropy_both: bool,
    pub mmd_unbiased: bool,

    pub classes: usize,
    pub feature_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub disc_hidden: Vec<usize>,

    pub lr0: f64,
    pub lr_omega: f64,
    pub lr_rho: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning-rate multiplier for the bottleneck layer, the label
    /// predictor, the centers, and the discriminator.
    pub lr_boost: f64,

    pub batch_size: usize,
    pub max_batches: usize,
    pub eval_every: usize,
    /// Early-stopping patience in mini-batches.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,

    pub dataset: DatasetKind,
    pub n_per_domain: usize,
    pub rotation_deg: f64,
    pub noise_sigma: f64,
    pub blob_shift: Vec<f64>,
    /// Fraction of the source data kept for training (data-efficiency runs).
    pub source_fraction: f64,
    pub source_csv: String,
    pub target_csv: String,
    pub target_labeled: bool,

    /// Restrict the lambda values to the published hyperparameter grids.
    pub strict_grid: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            transfer: TransferKind::None,
            fisher: FisherKind::None,
            lambda0: 1e-3,
            lambda_b: 1.0,
            lambda1: 0.0,
            lambda2: 1.0,
            adv_gamma: 10.0,
            entropy_both: false,
            mmd_unbiased: false,
            classes: 2,
            feature_hidden: vec![16, 16],
            feature_dim: 8,
            disc_hidden: vec![8],
            lr0: 0.001,
            lr_omega: 10.0,
            lr_rho: 0.75,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_boost: 10.0,
            batch_size: 36,
            max_batches: 1000,
            eval_every: 100,
            patience: 2500,
            val_fraction: 0.2,
            seed: 0,
            dataset: DatasetKind::Moons,
            n_per_domain: 500,
            rotation_deg: 30.0,
            noise_sigma: 0.1,
            blob_shift: vec![1.5, 1.5],
            source_fraction: 1.0,
            source_csv: String::new(),
            target_csv: String::new(),
            target_labeled: true,
            strict_grid: false,
        }
    }
}

fn parse_usize_list(v: &str) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer list entry '{s}'")))
        })
        .collect()
}

fn parse_f64_list(v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number list entry '{s}'")))
        })
        .collect()
}

fn fmt_usize_list(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_f64_list(v: &[f64]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_str_cfg(&text)
    }

    pub fn from_str_cfg(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", line_no + 1))
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", line_no + 1)))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{v}' for {key}")))
        };
        let int = |v: &str| -> Result<usize> {
            v.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad integer '{v}' for {key}")))
        };
        let boolean = |v: &str| -> Result<bool> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::Config(format!("bad bool '{v}' for {key}"))),
            }
        };
        match key {
            "transfer" => self.transfer = TransferKind::parse(value)?,
            "fisher" => self.fisher = FisherKind::parse(value)?,
            "lambda0" => self.lambda0 = num(value)?,
            "lambda_b" => self.lambda_b = num(value)?,
            "lambda1" => self.lambda1 = num(value)?,
            "lambda2" => self.lambda2 = num(value)?,
            "adv_gamma" => self.adv_gamma = num(value)?,
            "entropy_domain" => {
                self.entropy_both = match value {
                    "target" => false,
                    "both" => true,
                    other => {
                        return Err(Error::Config(format!(
                            "entropy_domain must be 'target' or 'both', got '{other}'"
                        )))
                    }
                }
            }
            "mmd_unbiased" => self.mmd_unbiased = boolean(value)?,
            "classes" => self.classes = int(value)?,
            "feature_hidden" => self.feature_hidden = parse_usize_list(value)?,
            "feature_dim" => self.feature_dim = int(value)?,
            "disc_hidden" => self.disc_hidden = parse_usize_list(value)?,
            "lr0" => self.lr0 = num(value)?,
            "lr_omega" => self.lr_omega = num(value)?,
            "lr_rho" => self.lr_rho = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "lr_boost" => self.lr_boost = num(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "max_batches" => self.max_batches = int(value)?,
            "eval_every" => self.eval_every = int(value)?,
            "patience" => self.patience = int(value)?,
            "val_fraction" => self.val_fraction = num(value)?,
            "seed" => {
                self.seed = value
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed '{value}'")))?
            }
            "dataset" => self.dataset = DatasetKind::parse(value)?,
            "n_per_domain" => self.n_per_domain = int(value)?,
            "rotation_deg" => self.rotation_deg = num(value)?,
            "noise_sigma" => self.noise_sigma = num(value)?,
            "blob_shift" => self.blob_shift = parse_f64_list(value)?,
            "source_fraction" => self.source_fraction = num(value)?,
            "source_csv" => self.source_csv = value.to_string(),
            "target_csv" => self.target_csv = value.to_string(),
            "target_labeled" => self.target_labeled = boolean(value)?,
            "strict_grid" => self.strict_grid = boolean(value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// The resolved configuration as parseable `key = value` text.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "transfer = {}", self.transfer.as_str());
        let _ = writeln!(s, "fisher = {}", self.fisher.as_str());
        let _ = writeln!(s, "lambda0 = {}", self.lambda0);
        let _ = writeln!(s, "lambda_b = {}", self.lambda_b);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "adv_gamma = {}", self.adv_gamma);
        let _ = writeln!(
            s,
            "entropy_domain = {}",
            if self.entropy_both { "both" } else { "target" }
        );
        let _ = writeln!(s, "mmd_unbiased = {}", self.mmd_unbiased);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "feature_hidden = {}", fmt_usize_list(&self.feature_hidden));
        let _ = writeln!(s, "feature_dim = {}", self.feature_dim);
        let _ = writeln!(s, "disc_hidden = {}", fmt_usize_list(&self.disc_hidden));
        let _ = writeln!(s, "lr0 = {}", self.lr0);
        let _ = writeln!(s, "lr_omega = {}", self.lr_omega);
        let _ = writeln!(s, "lr_rho = {}", self.lr_rho);
        let _ = writeln!(s, "momentum = {}", self.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "lr_boost = {}", self.lr_boost);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "max_batches = {}", self.max_batches);
        let _ = writeln!(s, "eval_every = {}", self.eval_every);
        let _ = writeln!(s, "patience = {}", self.patience);
        let _ = writeln!(s, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "dataset = {}", self.dataset.as_str());
        let _ = writeln!(s, "n_per_domain = {}", self.n_per_domain);
        let _ = writeln!(s, "rotation_deg = {}", self.rotation_deg);
        let _ = writeln!(s, "noise_sigma = {}", self.noise_sigma);
        let _ = writeln!(s, "blob_shift = {}", fmt_f64_list(&self.blob_shift));
        let _ = writeln!(s, "source_fraction = {}", self.source_fraction);
        let _ = writeln!(s, "source_csv = {}", self.source_csv);
        let _ = writeln!(s, "target_csv = {}", self.target_csv);
        let _ = writeln!(s, "target_labeled = {}", self.target_labeled);
        let _ = writeln!(s, "strict_grid = {}", self.strict_grid);
        s
    }

    /// Fisher form with its weight folded out; `None` when disabled.
    pub fn fisher_form(&self) -> Option<FisherForm> {
        match self.fisher {
            FisherKind::None => None,
            FisherKind::TraceRatio => Some(FisherForm::TraceRatio),
            FisherKind::TraceDifference => Some(FisherForm::TraceDifference {
                lambda_b: self.lambda_b,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda_b", self.lambda_b),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if v < 0.0 || !v.is_finite() {
                return err(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.lr0 > 0.0) {
            return err(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.lr_omega < 0.0 || self.lr_rho < 0.0 {
            return err("lr_omega and lr_rho must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be >= 0".into());
        }
        if !(self.lr_boost > 0.0) {
            return err("lr_boost must be > 0".into());
        }
        if !(self.adv_gamma > 0.0) {
            return err("adv_gamma must be > 0".into());
        }
        if self.classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be >= 1".into());
        }
        if self.feature_hidden.contains(&0) || self.disc_hidden.contains(&0) {
            return err("hidden widths must be >= 1".into());
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return err(format!(
                "batch_size must be even and positive, got {}",
                self.batch_size
            ));
        }
        if self.eval_every == 0 {
            return err("eval_every must be >= 1".into());
        }
        if self.patience == 0 {
            return err("patience must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if !(self.source_fraction > 0.0 && self.source_fraction <= 1.0) {
            return err(format!(
                "source_fraction must lie in (0, 1], got {}",
                self.source_fraction
            ));
        }
        match self.dataset {
            DatasetKind::Moons => {
                if self.classes != 2 {
                    return err("the moons dataset has exactly 2 classes".into());
                }
                if self.n_per_domain < 2 {
                    return err("n_per_domain must be >= 2".into());
                }
                if self.noise_sigma < 0.0 {
                    return err("noise_sigma must be >= 0".into());
                }
            }
            DatasetKind::Blobs => {
                if self.n_per_domain < self.classes {
                    return err("n_per_domain must cover every class".into());
                }
                if self.blob_shift.len() != 2 {
                    return err(format!(
                        "blob_shift must be a 2-vector, got {} entries",
                        self.blob_shift.len()
                    ));
                }
            }
            DatasetKind::Csv => {
                if self.source_csv.is_empty() || self.target_csv.is_empty() {
                    return err("csv dataset needs source_csv and target_csv paths".into());
                }
            }
        }
        if self.strict_grid {
            self.validate_grid()?;
        }
        Ok(())
    }

    /// Published grids: lambda0 in {1e-3, 1e-4} (trace difference) or
    /// {0.1, 1} (trace ratio); lambda_b in {0, 0.5, 1, 5, 10}; lambda1 in
    /// {0, 0.1}; lambda2 in {0.1, 1, 10}.
    fn validate_grid(&self) -> Result<()> {
        let in_grid = |v: f64, grid: &[f64]| grid.contains(&v);
        match self.fisher {
            FisherKind::TraceDifference => {
                if !in_grid(self.lambda0, &[1e-3, 1e-4]) {
                    return Err(Error::Config(format!(
                        "strict grid: lambda0 must be 1e-3 or 1e-4 for trace_difference, got {}",
                        self.lambda0
                    )));
                }
                if !in_grid(self.lambda_b, &[0.0, 0.5, 1.0, 5.0, 10.0]) {
                    return Err(Error::Config(format!(
                        "strict grid: lambda_b must be in {{0, 0.5, 1, 5, 10}}, got {}",
                        self.lambda_b
                    )));
                }
            }
            FisherKind::TraceRatio => {
                if !in_grid(self.lambda0, &[0.1, 1.0]) {
                    return Err(Error::Config(format!(
                        "strict grid: lambda0 must be 0.1 or 1 for trace_ratio, got {}",
                        self.lambda0
                    )));
                }
            }
            FisherKind::None => {}
        }
        if !in_grid(self.lambda1, &[0.0, 0.1]) {
            return Err(Error::Config(format!(
                "strict grid: lambda1 must be 0 or 0.1, got {}",
                self.lambda1
            )));
        }
        if self.transfer != TransferKind::None && !in_grid(self.lambda2, &[0.1, 1.0, 10.0]) {
            return Err(Error::Config(format!(
                "strict grid: lambda2 must be in {{0.1, 1, 10}}, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    #[test]
    fn parse_round_trip_through_echo() {
        let text = "
            # smoke config
            transfer = adversarial
            fisher = trace_difference
            lambda0 = 0.001   # fisher weight
            lambda_b = 5
            lambda1 = 0.1
            lambda2 = 1
            dataset = blobs
            classes = 5
            blob_shift = 1.5,-0.5
            seed = 9
        ";
        let cfg = ExperimentConfig::from_str_cfg(text).unwrap();
        assert_eq!(cfg.transfer, TransferKind::Adversarial);
        assert_eq!(cfg.fisher, FisherKind::TraceDifference);
        assert_eq!(cfg.lambda_b, 5.0);
        assert_eq!(cfg.classes, 5);
        assert_eq!(cfg.blob_shift, vec![1.5, -0.5]);
        cfg.validate().unwrap();

        let echoed = ExperimentConfig::from_str_cfg(&cfg.echo()).unwrap();
        assert_eq!(echoed, cfg);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(
            ExperimentConfig::from_str_cfg("lambda9 = 2"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.lambda0 = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.batch_size = 35;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetKind::Moons;
        cfg.classes = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.dataset = DatasetKind::Csv;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn strict_grid_enforces_published_values() {
        let mut cfg = ExperimentConfig::default();
        cfg.strict_grid = true;
        cfg.fisher = FisherKind::TraceDifference;
        cfg.lambda0 = 1e-3;
        cfg.lambda_b = 0.5;
        cfg.lambda1 = 0.1;
        cfg.transfer = TransferKind::Mmd;
        cfg.lambda2 = 10.0;
        cfg.validate().unwrap();

        cfg.lambda0 = 0.05;
        assert!(cfg.validate().is_err());

        cfg.lambda0 = 1e-4;
        cfg.lambda2 = 0.7;
        assert!(cfg.validate().is_err());
    }
}
