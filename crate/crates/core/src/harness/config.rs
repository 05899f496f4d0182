//! Training configuration: defaults, flat key-value config files, and
//! key=value overrides (CLI flags win over file values).

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::detector::{DetectorConfig, HeadLossMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the RoI-level comparison loss. Zero disables the branch
    /// entirely (no augmentation draws), which reduces training to baseline.
    pub lambda_roi: f64,
    /// Weight of the class-level comparison loss. Zero disables the branch
    /// and memory-bank maintenance.
    pub lambda_cls: f64,
    pub tau_roi: f64,
    pub tau_cls: f64,
    /// Memory bank capacity per class.
    pub q: usize,
    /// Box-augmentation jitter divisor (offsets are side / k0).
    pub k0: f64,
    /// RoI sample cap per image.
    pub k: usize,
    /// Per-class confidence gates for bank insertion; a single value
    /// broadcasts to every class.
    pub tau_c: Vec<f64>,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub head_loss_mode: HeadLossMode,
    pub seed: u64,
    pub batch_size: usize,
    /// Bank entries sampled per class for the class-level comparison.
    pub per_class: usize,
    /// Augmented copies per GT box for the RoI-level comparison.
    pub aug_per_gt: usize,
    /// Normalize the inner positive sum (conventional SupCon form).
    pub normalize_positives: bool,
    /// Compare against the whole bank instead of a balanced sample.
    pub cic_full_bank: bool,
    /// Epochs between validation evaluations (0 = never).
    pub eval_every: usize,
    /// Hard-disable the comparison subsystem (baseline-only build).
    pub baseline_only: bool,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_roi: 1.0,
            lambda_cls: 0.1,
            tau_roi: 6.0,
            tau_cls: 6.0,
            q: 80,
            k0: 8.0,
            k: 256,
            tau_c: vec![0.7],
            warmup_epochs: 1,
            epochs: 24,
            lr: 0.005,
            momentum: 0.9,
            lr_decay_epochs: vec![8, 14],
            lr_decay_factor: 0.1,
            head_loss_mode: HeadLossMode::CrossEntropy,
            seed: 0,
            batch_size: 2,
            per_class: 16,
            aug_per_gt: 1,
            normalize_positives: false,
            cic_full_bank: false,
            eval_every: 1,
            baseline_only: false,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_roi > 0.0) || !(self.tau_cls > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs && self.epochs > 0 && self.warmup_epochs != 0 {
            // warm-up == epochs is allowed (pure-baseline run); beyond is not
            if self.warmup_epochs > self.epochs {
                return Err(Error::Config(format!(
                    "warmup_epochs {} exceeds epochs {}",
                    self.warmup_epochs, self.epochs
                )));
            }
        }
        if self.lambda_roi < 0.0 || self.lambda_cls < 0.0 {
            return Err(Error::Config("lambdas must be nonnegative".into()));
        }
        if self.q == 0 {
            return Err(Error::Config("bank capacity q must be >= 1".into()));
        }
        if self.batch_size == 0 || self.k == 0 {
            return Err(Error::Config("batch_size and k must be >= 1".into()));
        }
        if self.tau_c.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
            return Err(Error::Config("tau_c entries must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Thresholds broadcast to `num_classes` entries.
    pub fn tau_c_for(&self, num_classes: usize) -> Result<Vec<f64>> {
        if self.tau_c.len() == 1 {
            Ok(vec![self.tau_c[0]; num_classes])
        } else if self.tau_c.len() == num_classes {
            Ok(self.tau_c.clone())
        } else {
            Err(Error::Config(format!(
                "tau_c has {} entries for {} classes",
                self.tau_c.len(),
                num_classes
            )))
        }
    }

    /// Learning rate for an epoch under the step-decay schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_decay_epochs
            .iter()
            .filter(|&&e| epoch >= e)
            .count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad float for {key}: '{v}'")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad integer for {key}: '{v}'")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::Config(format!("bad bool for {key}: '{v}'"))),
            }
        };
        let parse_f64_list = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad float list for {key}: '{v}'")))
                })
                .collect()
        };
        let parse_usize_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad integer list for {key}: '{v}'")))
                })
                .collect()
        };
        match key {
            "lambda_roi" => self.lambda_roi = parse_f64(v)?,
            "lambda_cls" => self.lambda_cls = parse_f64(v)?,
            "tau" => {
                let t = parse_f64(v)?;
                self.tau_roi = t;
                self.tau_cls = t;
            }
            "tau_roi" => self.tau_roi = parse_f64(v)?,
            "tau_cls" => self.tau_cls = parse_f64(v)?,
            "q" | "Q" => self.q = parse_usize(v)?,
            "k0" => self.k0 = parse_f64(v)?,
            "k" => self.k = parse_usize(v)?,
            "tau_c" => self.tau_c = parse_f64_list(v)?,
            "warmup_epochs" => self.warmup_epochs = parse_usize(v)?,
            "epochs" => self.epochs = parse_usize(v)?,
            "lr" => self.lr = parse_f64(v)?,
            "momentum" => self.momentum = parse_f64(v)?,
            "lr_decay_epochs" => self.lr_decay_epochs = parse_usize_list(v)?,
            "lr_decay_factor" => self.lr_decay_factor = parse_f64(v)?,
            "head_loss_mode" => self.head_loss_mode = v.parse()?,
            "seed" => {
                self.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed: '{v}'")))?
            }
            "batch_size" => self.batch_size = parse_usize(v)?,
            "per_class" => self.per_class = parse_usize(v)?,
            "aug_per_gt" => self.aug_per_gt = parse_usize(v)?,
            "normalize_positives" => self.normalize_positives = parse_bool(v)?,
            "cic_full_bank" => self.cic_full_bank = parse_bool(v)?,
            "eval_every" => self.eval_every = parse_usize(v)?,
            "baseline_only" => self.baseline_only = parse_bool(v)?,
            // detector knobs
            "head_hidden" => self.detector.head_hidden = parse_usize(v)?,
            "class_embed_dim" => self.detector.class_embed_dim = parse_usize(v)?,
            "roi_channels" => self.detector.roi_channels = parse_usize(v)?,
            "roi_pool" => self.detector.roi_pool = parse_usize(v)?,
            "anchor_scales" => self.detector.anchor_scales = parse_f64_list(v)?,
            "backbone_widths" => {
                let w = parse_usize_list(v)?;
                if w.len() != 4 {
                    return Err(Error::Config("backbone_widths needs 4 entries".into()));
                }
                self.detector.backbone_widths = [w[0], w[1], w[2], w[3]];
            }
            "rpn_channels" => self.detector.rpn_channels = parse_usize(v)?,
            "rpn_pre_nms_topn" => self.detector.rpn_pre_nms_topn = parse_usize(v)?,
            "rpn_post_nms_topn_train" => self.detector.rpn_post_nms_topn_train = parse_usize(v)?,
            "rpn_post_nms_topn_test" => self.detector.rpn_post_nms_topn_test = parse_usize(v)?,
            "rpn_nms_iou" => self.detector.rpn_nms_iou = parse_f64(v)?,
            "rpn_batch" => self.detector.rpn_batch = parse_usize(v)?,
            "box_fg_iou" => self.detector.box_fg_iou = parse_f64(v)?,
            "fg_fraction" => self.detector.fg_fraction = parse_f64(v)?,
            "focal_gamma" => self.detector.focal_gamma = parse_f64(v)?,
            "focal_alpha" => self.detector.focal_alpha = parse_f64(v)?,
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Parse a flat `key = value` file ('#' comments, blank lines ignored)
    /// on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Apply `key=value` override strings (e.g. from CLI flags).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let Some((key, value)) = o.split_once('=') else {
                return Err(Error::Config(format!(
                    "override '{o}' is not of the form key=value"
                )));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_contract() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_roi, 1.0);
        assert_eq!(c.lambda_cls, 0.1);
        assert_eq!(c.tau_roi, 6.0);
        assert_eq!(c.q, 80);
        assert_eq!(c.k0, 8.0);
        assert_eq!(c.k, 256);
        assert_eq!(c.epochs, 24);
        assert_eq!(c.lr, 0.005);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.lr_decay_epochs, vec![8, 14]);
        assert_eq!(c.warmup_epochs, 1);
        c.validate().unwrap();
    }

    #[test]
    fn lr_schedule_decays_at_8_and_14() {
        let c = TrainConfig::default();
        for e in 0..8 {
            assert_eq!(c.lr_at_epoch(e), 0.005);
        }
        for e in 8..14 {
            assert!((c.lr_at_epoch(e) - 0.0005).abs() < 1e-15);
        }
        for e in 14..24 {
            assert!((c.lr_at_epoch(e) - 0.00005).abs() < 1e-15);
        }
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.txt");
        std::fs::write(
            &p,
            "# comment\nepochs = 6\ntau = 4\nlr_decay_epochs = 3,5\ntau_c = 0.6,0.7,0.8,0.9\n",
        )
        .unwrap();
        let mut c = TrainConfig::default();
        c.apply_file(&p).unwrap();
        assert_eq!(c.epochs, 6);
        assert_eq!(c.tau_roi, 4.0);
        assert_eq!(c.tau_cls, 4.0);
        assert_eq!(c.lr_decay_epochs, vec![3, 5]);
        assert_eq!(c.tau_c.len(), 4);
        c.apply_overrides(&["tau_cls=8".into(), "q=16".into()]).unwrap();
        assert_eq!(c.tau_cls, 8.0);
        assert_eq!(c.tau_roi, 4.0);
        assert_eq!(c.q, 16);
        assert!(c.apply_overrides(&["nonsense=1".into()]).is_err());
        assert!(c.apply_overrides(&["epochs".into()]).is_err());
    }

    #[test]
    fn tau_c_broadcast() {
        let c = TrainConfig::default();
        assert_eq!(c.tau_c_for(4).unwrap(), vec![0.7; 4]);
        let mut c2 = c.clone();
        c2.tau_c = vec![0.5, 0.6];
        assert!(c2.tau_c_for(4).is_err());
        assert_eq!(c2.tau_c_for(2).unwrap(), vec![0.5, 0.6]);
    }
}
