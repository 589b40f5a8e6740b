use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentKind, ExperimentOutput, ExperimentSpec};
use super::train::{Regime, TrainedModel};
use crate::error::{Error, Result};
use crate::evaluation::{
    bonferroni, mean_sd, volume_change_stats, wilcoxon_signed_rank, DscKind, DscRecord, PerLabelDsc,
    VolumeChangeRecord,
};
use crate::nnet::save_checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalCohort {
    New,
    Original,
}

impl EvalCohort {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalCohort::New => "new",
            EvalCohort::Original => "original",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub fold: usize,
    pub regime: Regime,
    pub cohort: EvalCohort,
    pub subject_id: String,
    pub kind: DscKind,
    pub mean_dsc: f64,
    pub per_label: PerLabelDsc,
}

impl SubjectResult {
    pub fn new(fold: usize, regime: Regime, cohort: EvalCohort, rec: DscRecord) -> Self {
        SubjectResult {
            fold,
            regime,
            cohort,
            subject_id: rec.subject_id,
            kind: rec.kind,
            mean_dsc: rec.mean_dsc,
            per_label: rec.per_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMean {
    pub fold: usize,
    pub regime: Regime,
    pub cohort: EvalCohort,
    pub mean: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub regime: Regime,
    pub cohort: EvalCohort,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatRow {
    pub panel: String,
    pub cohort: EvalCohort,
    pub comparison: String,
    pub n_pairs: usize,
    /// Absent when every paired difference is zero.
    #[serde(rename = "W")]
    pub w_plus: Option<f64>,
    pub p: Option<f64>,
    pub threshold: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub fold: usize,
    pub regime: Regime,
    pub subject_id: String,
    pub pre_volume_cm3: f64,
    pub post_volume_cm3: f64,
    pub percent_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSummary {
    pub regime: Regime,
    pub mean_percent_change: f64,
    pub mean_abs_percent_change: f64,
    pub rmse_cm3: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Fold index, or `pretrain`.
    pub fold: String,
    pub regime: Regime,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedEpoch {
    pub fold: usize,
    pub regime: Regime,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub folds: usize,
    pub alpha: f64,
    pub volume_label: u32,
    pub pretrain_selected_epoch: usize,
    pub selected_epochs: Vec<SelectedEpoch>,
    pub subjects: Vec<SubjectResult>,
    pub fold_means: Vec<FoldMean>,
    pub summary: Vec<SummaryRow>,
    pub stats: Vec<StatRow>,
    pub volumes: Vec<VolumeRow>,
    pub volume_summary: Vec<VolumeSummary>,
    pub training_log: Vec<LogRow>,
}

impl ExperimentReport {
    pub fn values(&self, regime: Regime, cohort: EvalCohort) -> Vec<f64> {
        self.subjects
            .iter()
            .filter(|s| s.regime == regime && s.cohort == cohort)
            .map(|s| s.mean_dsc)
            .collect()
    }

    pub fn summary_for(&self, regime: Regime, cohort: EvalCohort) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.regime == regime && r.cohort == cohort)
    }

    pub fn fold_mean(&self, fold: usize, regime: Regime, cohort: EvalCohort) -> Option<f64> {
        self.fold_means
            .iter()
            .find(|r| r.fold == fold && r.regime == regime && r.cohort == cohort)
            .map(|r| r.mean)
    }

    pub fn volume_summary_for(&self, regime: Regime) -> Option<&VolumeSummary> {
        self.volume_summary.iter().find(|r| r.regime == regime)
    }

    /// Figure-style panel letter for a cohort.
    pub fn panel(&self, cohort: EvalCohort) -> &'static str {
        match (cohort, self.kind) {
            (EvalCohort::New, ExperimentKind::Pediatric) => "A",
            (EvalCohort::New, ExperimentKind::Contrast) => "B",
            (EvalCohort::Original, _) => "C",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

const PAIRS: [(Regime, Regime); 3] = [
    (Regime::Baseline, Regime::NewOnly),
    (Regime::Baseline, Regime::Augmented),
    (Regime::NewOnly, Regime::Augmented),
];

pub(super) fn aggregate(
    spec: &ExperimentSpec,
    pretrain_selected_epoch: usize,
    fold_models: &[(usize, TrainedModel)],
    mut subjects: Vec<SubjectResult>,
    volumes: Vec<VolumeRow>,
    training_log: Vec<LogRow>,
) -> Result<ExperimentReport> {
    subjects.sort_by(|a, b| {
        (a.regime, a.cohort, a.fold, &a.subject_id).cmp(&(b.regime, b.cohort, b.fold, &b.subject_id))
    });
    let folds = spec.transfer.folds;
    let mut fold_means = Vec::new();
    let mut summary = Vec::new();
    for regime in Regime::ALL {
        for cohort in [EvalCohort::New, EvalCohort::Original] {
            let all: Vec<&SubjectResult> =
                subjects.iter().filter(|s| s.regime == regime && s.cohort == cohort).collect();
            for fold in 0..folds {
                let v: Vec<f64> = all.iter().filter(|s| s.fold == fold).map(|s| s.mean_dsc).collect();
                fold_means.push(FoldMean {
                    fold,
                    regime,
                    cohort,
                    mean: mean_sd(&v).0,
                    n: v.len(),
                });
            }
            let v: Vec<f64> = all.iter().map(|s| s.mean_dsc).collect();
            let (mean, sd) = mean_sd(&v);
            summary.push(SummaryRow {
                regime,
                cohort,
                mean,
                sd,
                n: v.len(),
            });
        }
    }

    let mut stats = Vec::new();
    for cohort in [EvalCohort::New, EvalCohort::Original] {
        let m = match cohort {
            EvalCohort::New => spec.comparisons.new_panel,
            EvalCohort::Original => spec.comparisons.original_panel,
        };
        let threshold = bonferroni(spec.alpha, m)?;
        let panel = match (cohort, spec.kind) {
            (EvalCohort::New, ExperimentKind::Pediatric) => "A",
            (EvalCohort::New, ExperimentKind::Contrast) => "B",
            (EvalCohort::Original, _) => "C",
        };
        for (a, b) in PAIRS {
            let x: Vec<f64> = subjects
                .iter()
                .filter(|s| s.regime == a && s.cohort == cohort)
                .map(|s| s.mean_dsc)
                .collect();
            let y: Vec<f64> = subjects
                .iter()
                .filter(|s| s.regime == b && s.cohort == cohort)
                .map(|s| s.mean_dsc)
                .collect();
            let comparison = format!("{} vs {}", a.as_str(), b.as_str());
            let row = match wilcoxon_signed_rank(&x, &y) {
                Ok(r) => {
                    let r = r.with_comparisons(spec.alpha, m)?;
                    StatRow {
                        panel: panel.into(),
                        cohort,
                        comparison,
                        n_pairs: r.n_pairs,
                        w_plus: Some(r.w_plus),
                        p: Some(r.p_two_sided),
                        threshold,
                        significant: r.significant,
                    }
                }
                Err(Error::Invalid(_)) => StatRow {
                    panel: panel.into(),
                    cohort,
                    comparison,
                    n_pairs: 0,
                    w_plus: None,
                    p: None,
                    threshold,
                    significant: false,
                },
                Err(e) => return Err(e),
            };
            stats.push(row);
        }
    }

    let mut volume_summary = Vec::new();
    if !volumes.is_empty() {
        for regime in Regime::ALL {
            let recs: Vec<VolumeChangeRecord> = volumes
                .iter()
                .filter(|v| v.regime == regime)
                .map(|v| VolumeChangeRecord::new(&v.subject_id, v.pre_volume_cm3, v.post_volume_cm3))
                .collect::<Result<_>>()?;
            let usable: Vec<VolumeChangeRecord> =
                recs.into_iter().filter(|r| r.percent_change.is_some()).collect();
            if usable.is_empty() {
                continue;
            }
            let s = volume_change_stats(&usable)?;
            volume_summary.push(VolumeSummary {
                regime,
                mean_percent_change: s.mean_percent_change,
                mean_abs_percent_change: s.mean_abs_percent_change,
                rmse_cm3: s.rmse_cm3,
                n: usable.len(),
            });
        }
    }

    Ok(ExperimentReport {
        name: spec.name.clone(),
        kind: spec.kind,
        seed: spec.seed,
        folds,
        alpha: spec.alpha,
        volume_label: spec.volume_label,
        pretrain_selected_epoch,
        selected_epochs: fold_models
            .iter()
            .map(|(fold, m)| SelectedEpoch {
                fold: *fold,
                regime: m.regime,
                epoch: m.selected_epoch,
            })
            .collect(),
        subjects,
        fold_means,
        summary,
        stats,
        volumes,
        volume_summary,
        training_log,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_file(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// report.json, the CSV tables, the training log and one checkpoint per model.
pub fn write_experiment_outputs(out: &ExperimentOutput, dir: &Path) -> Result<()> {
    let r = &out.report;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    fs::write(&json, r.to_json()?).map_err(|e| Error::io(&json, e))?;

    let p = dir.join("metrics.csv");
    let mut w = csv_file(&p)?;
    w.write_record(["regime", "cohort", "fold", "subject_id", "kind", "label_id", "dsc"])?;
    for s in &r.subjects {
        for (id, d) in &s.per_label {
            w.write_record([
                s.regime.as_str(),
                s.cohort.as_str(),
                &s.fold.to_string(),
                &s.subject_id,
                s.kind.as_str(),
                &id.to_string(),
                &fmt_opt(*d),
            ])?;
        }
    }
    finish(w, &p)?;

    let p = dir.join("subjects.csv");
    let mut w = csv_file(&p)?;
    w.write_record(["regime", "cohort", "fold", "subject_id", "kind", "mean_dsc"])?;
    for s in &r.subjects {
        w.write_record([
            s.regime.as_str(),
            s.cohort.as_str(),
            &s.fold.to_string(),
            &s.subject_id,
            s.kind.as_str(),
            &s.mean_dsc.to_string(),
        ])?;
    }
    finish(w, &p)?;

    let p = dir.join("summary.csv");
    let mut w = csv_file(&p)?;
    w.write_record(["regime", "cohort", "mean", "sd", "n"])?;
    for s in &r.summary {
        w.write_record([
            s.regime.as_str(),
            s.cohort.as_str(),
            &s.mean.to_string(),
            &s.sd.to_string(),
            &s.n.to_string(),
        ])?;
    }
    finish(w, &p)?;

    let p = dir.join("fold_means.csv");
    let mut w = csv_file(&p)?;
    w.write_record(["fold", "regime", "cohort", "mean", "n"])?;
    for s in &r.fold_means {
        w.write_record([
            &s.fold.to_string(),
            s.regime.as_str(),
            s.cohort.as_str(),
            &s.mean.to_string(),
            &s.n.to_string(),
        ])?;
    }
    finish(w, &p)?;

    let p = dir.join("stats.csv");
    let mut w = csv_file(&p)?;
    w.write_record(["panel", "comparison", "W", "p", "threshold", "significant"])?;
    for s in &r.stats {
        w.write_record([
            &s.panel,
            &s.comparison,
            &fmt_opt(s.w_plus),
            &fmt_opt(s.p),
            &s.threshold.to_string(),
            &s.significant.to_string(),
        ])?;
    }
    finish(w, &p)?;

    if !r.volumes.is_empty() {
        let p = dir.join("volumes.csv");
        let mut w = csv_file(&p)?;
        w.write_record(["fold", "regime", "subject_id", "pre_volume_cm3", "post_volume_cm3", "percent_change"])?;
        for v in &r.volumes {
            w.write_record([
                &v.fold.to_string(),
                v.regime.as_str(),
                &v.subject_id,
                &v.pre_volume_cm3.to_string(),
                &v.post_volume_cm3.to_string(),
                &fmt_opt(v.percent_change),
            ])?;
        }
        finish(w, &p)?;
    }

    let p = dir.join("training_log.csv");
    let mut w = csv_file(&p)?;
    w.write_record(["fold", "regime", "epoch", "train_loss", "val_dsc"])?;
    for l in &r.training_log {
        w.write_record([
            &l.fold,
            l.regime.as_str(),
            &l.epoch.to_string(),
            &l.train_loss.to_string(),
            &l.val_dsc.to_string(),
        ])?;
    }
    finish(w, &p)?;

    let ck = dir.join("checkpoints");
    fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    save_checkpoint(&out.baseline.to_checkpoint(), ck.join("pretrain_baseline.tbnn"))?;
    for (fold, m) in &out.fold_models {
        save_checkpoint(&m.to_checkpoint(), ck.join(format!("fold{fold}_{}.tbnn", m.regime.as_str())))?;
    }
    Ok(())
}

fn check_non_empty(r: &ExperimentReport) -> Result<()> {
    if r.folds == 0 || r.subjects.is_empty() {
        return Err(Error::Invalid("report has no folds or subject results".into()));
    }
    Ok(())
}

fn stars(r: &ExperimentReport, cohort: EvalCohort, regime: Regime) -> String {
    // One star per significant comparison against the baseline.
    r.stats
        .iter()
        .filter(|s| s.cohort == cohort && s.significant && s.comparison.ends_with(regime.as_str()))
        .filter(|s| s.comparison.starts_with("baseline"))
        .map(|_| "*")
        .collect()
}

/// Tables of mean ± sd per regime and cohort, the pairwise tests and, for
/// contrast runs, the volume-change summary.
pub fn render_markdown(r: &ExperimentReport) -> Result<String> {
    check_non_empty(r)?;
    let metric = match r.kind {
        ExperimentKind::Pediatric => "pDSC",
        ExperimentKind::Contrast => "rDSC",
    };
    let mut s = String::new();
    let _ = writeln!(s, "# {} ({} folds, seed {})\n", r.name, r.folds, r.seed);
    let _ = writeln!(s, "| regime | {} new cohort ({metric}) | {} original cohort (DSC) |", r.panel(EvalCohort::New), r.panel(EvalCohort::Original));
    let _ = writeln!(s, "|---|---|---|");
    for regime in Regime::ALL {
        let cell = |c: EvalCohort| {
            r.summary_for(regime, c)
                .map(|row| format!("{:.3} ± {:.3}{}", row.mean, row.sd, stars(r, c, regime)))
                .unwrap_or_default()
        };
        let _ = writeln!(s, "| {} | {} | {} |", regime.as_str(), cell(EvalCohort::New), cell(EvalCohort::Original));
    }
    let _ = writeln!(s, "\n| panel | comparison | W | p | threshold | significant |");
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for st in &r.stats {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {:.4} | {} |",
            st.panel,
            st.comparison,
            st.w_plus.map(|w| format!("{w}")).unwrap_or_else(|| "-".into()),
            st.p.map(|p| format!("{p:.4}")).unwrap_or_else(|| "-".into()),
            st.threshold,
            if st.significant { "*" } else { "" }
        );
    }
    if !r.volume_summary.is_empty() {
        let _ = writeln!(s, "\n| regime | mean % change (label {}) | mean abs % change | RMSE (cm³) | n |", r.volume_label);
        let _ = writeln!(s, "|---|---|---|---|---|");
        for v in &r.volume_summary {
            let _ = writeln!(
                s,
                "| {} | {:.2} | {:.2} | {:.4} | {} |",
                v.regime.as_str(),
                v.mean_percent_change,
                v.mean_abs_percent_change,
                v.rmse_cm3,
                v.n
            );
        }
    }
    Ok(s)
}

/// Plot data: one whisker file per panel (regime, mean, sd, n) and, for
/// contrast runs, the pre/post volume scatter. Returns the files written.
pub fn write_panel_csvs(r: &ExperimentReport, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    check_non_empty(r)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for cohort in [EvalCohort::New, EvalCohort::Original] {
        let p = dir.join(format!("panel_{}.csv", r.panel(cohort)));
        let mut w = csv_file(&p)?;
        w.write_record(["regime", "index", "mean", "sd", "n"])?;
        for (i, regime) in Regime::ALL.into_iter().enumerate() {
            if let Some(row) = r.summary_for(regime, cohort) {
                w.write_record([
                    regime.as_str(),
                    &i.to_string(),
                    &row.mean.to_string(),
                    &row.sd.to_string(),
                    &row.n.to_string(),
                ])?;
            }
        }
        finish(w, &p)?;
        written.push(p);
    }
    if !r.volumes.is_empty() {
        let p = dir.join("volume_scatter.csv");
        let mut w = csv_file(&p)?;
        w.write_record(["regime", "subject_id", "fold", "pre_volume_cm3", "post_volume_cm3"])?;
        for v in &r.volumes {
            w.write_record([
                v.regime.as_str(),
                &v.subject_id,
                &v.fold.to_string(),
                &v.pre_volume_cm3.to_string(),
                &v.post_volume_cm3.to_string(),
            ])?;
        }
        finish(w, &p)?;
        written.push(p);
    }
    Ok(written)
}
