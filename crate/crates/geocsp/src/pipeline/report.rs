//! Run reports: a flat key-value record of what a pipeline stage produced.
//!
//! The serialized report is a pure function of (config, seed): wall-clock
//! stage timings are kept in memory and written to a separate `.timings`
//! sidecar so report files from identical runs are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::supervised::AccuracyReport;

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    /// Labeled-percentage cell this report belongs to, when fine-tuning ran.
    pub lambda: Option<f64>,
    pub pretrain_epoch_losses: Vec<f64>,
    pub finetune_epoch_losses: Vec<f64>,
    pub head_epoch_losses: Vec<f64>,
    pub accuracy: Option<AccuracyReport>,
    /// Informational wall-clock seconds per stage; excluded from the
    /// deterministic serialization.
    pub stage_seconds: Vec<(String, f64)>,
}

impl RunReport {
    pub fn new(variant: String, seed: u64, config_hash: String) -> Self {
        RunReport {
            variant,
            seed,
            config_hash,
            lambda: None,
            pretrain_epoch_losses: Vec::new(),
            finetune_epoch_losses: Vec::new(),
            head_epoch_losses: Vec::new(),
            accuracy: None,
            stage_seconds: Vec::new(),
        }
    }

    /// Deterministic serialization: sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("variant".into(), self.variant.clone()),
            ("seed".into(), self.seed.to_string()),
            ("config_hash".into(), self.config_hash.clone()),
        ];
        if let Some(lambda) = self.lambda {
            pairs.push(("lambda".into(), lambda.to_string()));
        }
        for (prefix, losses) in [
            ("pretrain.epoch_loss", &self.pretrain_epoch_losses),
            ("finetune.epoch_loss", &self.finetune_epoch_losses),
            ("head.epoch_loss", &self.head_epoch_losses),
        ] {
            for (i, loss) in losses.iter().enumerate() {
                pairs.push((format!("{prefix}.{i:04}"), loss.to_string()));
            }
        }
        if let Some(acc) = &self.accuracy {
            pairs.push(("image_only_top1".into(), acc.image_only.to_string()));
            pairs.push(("location_only_top1".into(), acc.location_only.to_string()));
            pairs.push(("combined_top1".into(), acc.combined.to_string()));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Write the deterministic report, plus a `.timings` sidecar when any
    /// stage timings were recorded.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        if !self.stage_seconds.is_empty() {
            let mut sidecar = String::new();
            for (stage, secs) in &self.stage_seconds {
                writeln!(sidecar, "{stage} = {secs:.3}").unwrap();
            }
            let mut timing_path = path.as_os_str().to_owned();
            timing_path.push(".timings");
            std::fs::write(timing_path, sidecar)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialization_is_sorted_and_omits_timings() {
        let mut report = RunReport::new("mc-bld".into(), 7, "abc".into());
        report.lambda = Some(5.0);
        report.pretrain_epoch_losses = vec![1.5, 1.25];
        report.accuracy = Some(AccuracyReport {
            image_only: 0.5,
            location_only: 0.25,
            combined: 0.625,
        });
        report.stage_seconds.push(("pretrain".into(), 12.7));
        let text = report.to_text();
        assert!(!text.contains("12.7"));
        let lines: Vec<&str> = text.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        assert!(text.contains("combined_top1 = 0.625"));
        assert!(text.contains("pretrain.epoch_loss.0001 = 1.25"));
    }

    #[test]
    fn save_writes_report_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.txt");
        let mut report = RunReport::new("mse".into(), 1, "h".into());
        report.stage_seconds.push(("finetune".into(), 0.5));
        report.save(&path).unwrap();
        assert!(path.exists());
        assert!(dir.path().join("report.txt.timings").exists());
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(!body.contains("0.5"));
    }
}
