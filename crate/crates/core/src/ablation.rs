//! Component ablation and pseudo-label threshold sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{train, TrainConfig, TrainData, TrainSummary, BURN_IN_CHECKPOINT_FILE};

/// Published mAP for each ablation row, kept alongside the desk-scale numbers.
pub const REFERENCE_MAP: [(&str, f64); 6] = [
    ("source_only", 35.6),
    ("backbone_align", 42.5),
    ("cpa", 43.7),
    ("das", 41.8),
    ("combined", 48.7),
    ("full", 52.8),
];

pub const DEFAULT_THRESHOLDS: [f64; 4] = [0.2, 0.3, 0.5, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub backbone_align: bool,
    pub cpa: bool,
    pub das: bool,
    pub self_training: bool,
    /// Target-domain mAP in `[0, 1]`.
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    /// Published value in mAP points, for comparison only.
    pub reference_map: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub threshold: f64,
    pub map: f64,
    /// Mean pseudo-labels per target image over the last epoch.
    pub pseudo_labels: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// mAP of the combined burn-in model every sweep entry starts from.
    pub burn_in_map: f64,
    pub sweep: Vec<SweepRow>,
    pub categories: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,backbone_align,cpa,das,self_training,map,reference_map");
        for c in &self.categories {
            out.push_str(&format!(",ap_{c}"));
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(
                out,
                "{},{},{},{},{},{:.6},{}",
                r.name,
                r.backbone_align,
                r.cpa,
                r.das,
                r.self_training,
                r.map,
                r.reference_map.map(|v| format!("{v:.1}")).unwrap_or_default()
            );
            for ap in &r.per_class_ap {
                out.push(',');
                if let Some(ap) = ap {
                    let _ = write!(out, "{ap:.6}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("threshold,map,pseudo_labels\n");
        for s in &self.sweep {
            let _ = writeln!(out, "{},{:.6},{:.4}", s.threshold, s.map, s.pseudo_labels);
        }
        out
    }

    /// Plain-text table in mAP points.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>8} {:>10}", "configuration", "mAP", "published");
        for r in &self.rows {
            let reference = r.reference_map.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:<16} {:>8.2} {:>10}", r.name, 100.0 * r.map, reference);
        }
        if !self.sweep.is_empty() {
            let _ = writeln!(out, "\npseudo-label threshold sweep (burn-in model {:.2})", 100.0 * self.burn_in_map);
            for s in &self.sweep {
                let _ = writeln!(
                    out,
                    "  {:<5} {:>8.2}  ({:.2} labels/image)",
                    s.threshold,
                    100.0 * s.map,
                    s.pseudo_labels
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// Empty to skip the sweep.
    pub thresholds: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }
}

/// Burn-in-only variants in row order: `(name, backbone_align, cpa, das)`.
const BURN_IN_ROWS: [(&str, bool, bool, bool); 5] = [
    ("source_only", false, false, false),
    ("backbone_align", true, false, false),
    ("cpa", false, true, false),
    ("das", false, false, true),
    ("combined", true, true, true),
];

fn reference(name: &str) -> Option<f64> {
    REFERENCE_MAP.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
}

fn last_losses_pseudo(summary: &TrainSummary) -> f64 {
    summary.metrics.last().map_or(0.0, |m| m.losses.pseudo_labels)
}

fn final_ap(summary: &TrainSummary) -> Vec<Option<f64>> {
    summary
        .metrics
        .last()
        .map(|m| m.teacher_per_class_ap.clone().unwrap_or_else(|| m.per_class_ap.clone()))
        .unwrap_or_default()
}

/// Trains every row with the same seed and data. Each run gets its own
/// directory under `out_dir`. The full model and every sweep entry resume
/// from the combined burn-in checkpoint, so they differ from it only in the
/// mutual-learning stage. Writes `ablation.csv`, `threshold_sweep.csv`,
/// `ablation.json` and `summary.txt`.
pub fn run_ablation(config: &AblationConfig, data: &TrainData, out_dir: &Path) -> Result<AblationReport> {
    config.train.validate()?;
    for &t in &config.thresholds {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::InvalidConfig(format!("sweep threshold {t} outside (0, 1)")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    let mut combined_ckpt: Option<PathBuf> = None;
    let mut burn_in_map = 0.0;
    for (name, backbone_align, cpa, das) in BURN_IN_ROWS {
        let cfg = TrainConfig {
            backbone_align,
            cpa,
            das,
            mutual_epochs: 0,
            ..config.train.clone()
        };
        log::info!("ablation row {name}");
        let summary = train(&cfg, data, &out_dir.join(name), None)?;
        if name == "combined" {
            combined_ckpt = summary.burn_in_checkpoint.clone().or(Some(summary.checkpoint.clone()));
            burn_in_map = summary.final_map;
        }
        rows.push(AblationRow {
            name: name.to_string(),
            backbone_align,
            cpa,
            das,
            self_training: false,
            map: summary.final_map,
            per_class_ap: final_ap(&summary),
            reference_map: reference(name),
        });
    }
    let start = combined_ckpt.expect("combined row always runs");
    let mutual = |threshold: f64, dir: &str| -> Result<TrainSummary> {
        let cfg = TrainConfig {
            pseudo_threshold: threshold,
            ..config.train.clone()
        };
        log::info!("mutual learning from {} at threshold {threshold}", start.display());
        train(&cfg, data, &out_dir.join(dir), Some(&start))
    };
    let full = mutual(config.train.pseudo_threshold, "full")?;
    rows.push(AblationRow {
        name: "full".into(),
        backbone_align: true,
        cpa: true,
        das: true,
        self_training: true,
        map: full.final_map,
        per_class_ap: final_ap(&full),
        reference_map: reference("full"),
    });
    let mut sweep = Vec::new();
    for &t in &config.thresholds {
        let s = if t == config.train.pseudo_threshold {
            full.clone()
        } else {
            mutual(t, &format!("threshold_{t}"))?
        };
        sweep.push(SweepRow {
            threshold: t,
            map: s.final_map,
            pseudo_labels: last_losses_pseudo(&s),
        });
    }
    let report = AblationReport {
        rows,
        burn_in_map,
        sweep,
        categories: data.target_val.categories.clone(),
    };
    let write = |file: &str, text: &str| -> Result<()> {
        let p = out_dir.join(file);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("ablation.csv", &report.to_csv())?;
    write("threshold_sweep.csv", &report.sweep_csv())?;
    write("ablation.json", &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    write("summary.txt", &report.summary())?;
    Ok(report)
}

/// Path of the combined burn-in checkpoint inside an ablation directory.
pub fn combined_burn_in_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("combined").join(BURN_IN_CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> AblationReport {
        AblationReport {
            rows: vec![AblationRow {
                name: "source_only".into(),
                backbone_align: false,
                cpa: false,
                das: false,
                self_training: false,
                map: 0.25,
                per_class_ap: vec![Some(0.5), None],
                reference_map: Some(35.6),
            }],
            burn_in_map: 0.3,
            sweep: vec![SweepRow {
                threshold: 0.2,
                map: 0.31,
                pseudo_labels: 2.0,
            }],
            categories: vec!["circle".into(), "square".into()],
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "name,backbone_align,cpa,das,self_training,map,reference_map,ap_circle,ap_square");
        assert_eq!(lines[1], "source_only,false,false,false,false,0.250000,35.6,0.500000,");
        assert_eq!(report().sweep_csv(), "threshold,map,pseudo_labels\n0.2,0.310000,2.0000\n");
    }

    #[test]
    fn summary_lists_every_row() {
        let s = report().summary();
        assert!(s.contains("source_only") && s.contains("25.00") && s.contains("35.6"));
        assert!(s.contains("31.00"));
    }
}
