use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::report::{
    aggregate, EvalCohort, ExperimentReport, LogRow, SubjectResult, VolumeRow,
};
use super::split::split_ids;
use super::train::{
    derive_seed, pretrain, segment_volume, transfer_learn, CohortSubject, MixMode, Regime,
    TrainConfig, TrainedModel,
};
use crate::error::{Error, Result};
use crate::evaluation::{dsc_record, region_volume, reproducibility_dsc, DscKind, VolumeChangeRecord};
use crate::nnet::NetworkConfig;
use crate::phantom::{self, generate_cohort, CohortSpec, HC_ANALOG};
use crate::tiling::{plan_tiles, TilePlan};
use crate::volio::{load_manifest, read_label_map, read_volume, LabelEntry, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// New cohort has its own truth; scored by DSC against it.
    Pediatric,
    /// New cohort is pre/post-contrast pairs; scored by agreement between
    /// the two segmentations.
    Contrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortSource {
    /// A manifest on disk (relative paths resolve against the spec file).
    Manifest(PathBuf),
    /// Phantoms generated in memory.
    Generate(CohortSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelComparisons {
    /// Bonferroni family size for the new-cohort panel.
    pub new_panel: usize,
    /// Bonferroni family size for the original-cohort panel.
    pub original_panel: usize,
}

impl Default for PanelComparisons {
    fn default() -> Self {
        PanelComparisons {
            new_panel: 3,
            original_panel: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub tiles_per_axis: [usize; 3],
    pub tile_shape: [usize; 3],
}

fn default_alpha() -> f64 {
    0.05
}
fn default_volume_label() -> u32 {
    HC_ANALOG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub pretrain_cohort: CohortSource,
    pub original_cohort: CohortSource,
    pub new_cohort: CohortSource,
    pub tiles: TileLayout,
    pub network: NetworkConfig,
    pub pretrain: TrainConfig,
    pub transfer: TrainConfig,
    #[serde(default)]
    pub comparisons: PanelComparisons,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Structure whose pre/post volumes are compared in contrast experiments.
    #[serde(default = "default_volume_label")]
    pub volume_label: u32,
    /// Label vocabulary; inferred when absent.
    #[serde(default)]
    pub labels: Option<Vec<LabelEntry>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.pretrain.validate()?;
        self.transfer.validate()?;
        if self.comparisons.new_panel == 0 || self.comparisons.original_panel == 0 {
            return Err(Error::Invalid("comparison counts must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invalid(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    fn resolve_paths(mut self, base: &Path) -> Self {
        for src in [&mut self.pretrain_cohort, &mut self.original_cohort, &mut self.new_cohort] {
            if let CohortSource::Manifest(p) = src {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let Some(out) = &mut self.output_dir {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        self
    }
}

/// Reads and validates an experiment spec; relative paths are taken from the
/// spec file's directory.
pub fn load_experiment_spec(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec = ExperimentSpec::from_json(&text)?;
    Ok(spec.resolve_paths(path.parent().unwrap_or(Path::new("."))))
}

fn load_cohort(src: &CohortSource) -> Result<(Vec<CohortSubject>, bool)> {
    match src {
        CohortSource::Generate(spec) => {
            let (subjects, _) = generate_cohort(spec, None)?;
            Ok((subjects.into_iter().map(CohortSubject::from).collect(), true))
        }
        CohortSource::Manifest(path) => {
            let manifest = load_manifest(path)?;
            let subjects = manifest
                .subjects
                .iter()
                .map(|rec| {
                    let label_path = rec.label_path.as_ref().ok_or_else(|| {
                        Error::Manifest(format!("subject {} has no label file", rec.subject_id))
                    })?;
                    Ok(CohortSubject {
                        id: rec.subject_id.clone(),
                        image: read_volume(&rec.image_path)?,
                        post_image: rec.paired_image_path.as_ref().map(read_volume).transpose()?,
                        truth: read_label_map(label_path)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((subjects, false))
        }
    }
}

/// Everything a run produced: the report plus the trained models.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub baseline: TrainedModel,
    /// (fold, model) for every transfer-learned model, new_only before augmented.
    pub fold_models: Vec<(usize, TrainedModel)>,
}

struct Cohorts {
    pretrain: Vec<CohortSubject>,
    original: Vec<CohortSubject>,
    new: Vec<CohortSubject>,
    vocabulary: Vec<LabelEntry>,
    plan: TilePlan,
}

fn prepare_cohorts(spec: &ExperimentSpec) -> Result<Cohorts> {
    let (mut pre, gen_a) = load_cohort(&spec.pretrain_cohort)?;
    let (mut orig, gen_b) = load_cohort(&spec.original_cohort)?;
    let (mut new, gen_c) = load_cohort(&spec.new_cohort)?;
    for (name, c) in [("pretrain", &pre), ("original", &orig), ("new", &new)] {
        if c.is_empty() {
            return Err(Error::Invalid(format!("{name} cohort is empty")));
        }
    }
    if spec.kind == ExperimentKind::Contrast {
        if let Some(s) = new.iter().find(|s| s.post_image.is_none()) {
            return Err(Error::Manifest(format!("subject {} lacks a post-contrast image", s.id)));
        }
    }
    let vocabulary = match &spec.labels {
        Some(v) => v.clone(),
        None if gen_a && gen_b && gen_c => phantom::vocabulary(),
        None => {
            let ids: BTreeSet<u32> = pre
                .iter()
                .chain(&orig)
                .chain(&new)
                .flat_map(|s| s.truth.labels().iter().copied())
                .collect();
            ids.into_iter().map(|id| LabelEntry::new(id, format!("label_{id}"))).collect()
        }
    };
    if vocabulary.len() != spec.network.num_classes {
        return Err(Error::Invalid(format!(
            "network has {} classes but the vocabulary has {} labels",
            spec.network.num_classes,
            vocabulary.len()
        )));
    }
    if !vocabulary.iter().any(|e| e.id == spec.volume_label) && spec.kind == ExperimentKind::Contrast {
        return Err(Error::Invalid(format!("volume label {} not in vocabulary", spec.volume_label)));
    }
    let dims = pre[0].image.dims();
    for s in pre.iter_mut().chain(orig.iter_mut()).chain(new.iter_mut()) {
        if s.image.dims() != dims {
            return Err(Error::Shape(format!(
                "subject {} has dims {:?}, expected {dims:?}",
                s.id,
                s.image.dims()
            )));
        }
        let bg = s.truth.background_id();
        s.truth = s.truth.clone().with_vocabulary(vocabulary.clone())?.with_background(bg);
    }
    let plan = plan_tiles(dims, spec.tiles.tiles_per_axis, spec.tiles.tile_shape)?;
    Ok(Cohorts {
        pretrain: pre,
        original: orig,
        new,
        vocabulary,
        plan,
    })
}

fn pick(subjects: &[CohortSubject], ids: &[String]) -> Vec<CohortSubject> {
    ids.iter()
        .map(|id| subjects.iter().find(|s| &s.id == id).expect("split ids come from the cohort").clone())
        .collect()
}

fn ids_of(subjects: &[CohortSubject]) -> Result<Vec<String>> {
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let unique: BTreeSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Manifest("duplicate subject ids in cohort".into()));
    }
    Ok(ids)
}

const SEED_PRETRAIN: u64 = 10;
const SEED_TRANSFER: u64 = 20;
const SEED_SPLIT_NEW: u64 = 30;
const SEED_SPLIT_ORIGINAL: u64 = 31;
const SEED_SPLIT_PRETRAIN: u64 = 32;

fn log_rows(fold: &str, m: &TrainedModel) -> Vec<LogRow> {
    m.validation_curve
        .iter()
        .zip(&m.train_loss)
        .enumerate()
        .map(|(e, (&v, &l))| LogRow {
            fold: fold.to_string(),
            regime: m.regime,
            epoch: e + 1,
            train_loss: l,
            val_dsc: v,
        })
        .collect()
}

/// Contrast training targets: the post-contrast image labelled with the
/// baseline's segmentation of the pre-contrast image.
fn pseudo_labelled(base: &TrainedModel, subjects: &[CohortSubject]) -> Result<Vec<CohortSubject>> {
    subjects
        .iter()
        .map(|s| {
            let labels: LabelMap = segment_volume(base, &s.image)?;
            let post = s.post_image.clone().expect("checked when loading");
            Ok(s.with_target(post, labels))
        })
        .collect()
}

struct FoldOutcome {
    results: Vec<SubjectResult>,
    volumes: Vec<VolumeRow>,
    log: Vec<LogRow>,
    models: Vec<TrainedModel>,
}

struct FoldSets {
    new_train: Vec<CohortSubject>,
    new_val: Vec<CohortSubject>,
    new_test: Vec<CohortSubject>,
    orig_train: Vec<CohortSubject>,
    orig_test: Vec<CohortSubject>,
}

fn fold_sets(spec: &ExperimentSpec, c: &Cohorts, base: &TrainedModel, fold: usize) -> Result<FoldSets> {
    let tcfg = &spec.transfer;
    let new_split = split_ids(
        &ids_of(&c.new)?,
        fold,
        tcfg.folds,
        tcfg.split,
        derive_seed(spec.seed, &[SEED_SPLIT_NEW]),
    )?;
    let orig_split = split_ids(
        &ids_of(&c.original)?,
        fold,
        tcfg.folds,
        tcfg.split,
        derive_seed(spec.seed, &[SEED_SPLIT_ORIGINAL]),
    )?;
    let mut new_train = pick(&c.new, &new_split.train_ids);
    let mut new_val = pick(&c.new, &new_split.validation_ids);
    if spec.kind == ExperimentKind::Contrast {
        new_train = pseudo_labelled(base, &new_train)?;
        new_val = pseudo_labelled(base, &new_val)?;
    }
    Ok(FoldSets {
        new_train,
        new_val,
        new_test: pick(&c.new, &new_split.test_ids),
        orig_train: pick(&c.original, &orig_split.train_ids),
        orig_test: pick(&c.original, &orig_split.test_ids),
    })
}

fn transfer_on(spec: &ExperimentSpec, sets: &FoldSets, base: &TrainedModel, fold: usize, mode: MixMode) -> Result<TrainedModel> {
    let cfg = TrainConfig {
        seed: derive_seed(spec.seed, &[SEED_TRANSFER, fold as u64]),
        mix_mode: mode,
        ..spec.transfer
    };
    transfer_learn(base, &sets.new_train, &sets.new_val, Some(&sets.orig_train), &cfg)
}

fn run_fold(spec: &ExperimentSpec, c: &Cohorts, base: &TrainedModel, fold: usize) -> Result<FoldOutcome> {
    let sets = fold_sets(spec, c, base, fold)?;
    let models = [MixMode::NewOnly, MixMode::Augmented]
        .into_iter()
        .map(|mode| transfer_on(spec, &sets, base, fold, mode))
        .collect::<Result<Vec<_>>>()?;
    let FoldSets { new_test, orig_test, .. } = sets;

    let mut results = Vec::new();
    let mut volumes = Vec::new();
    for regime in Regime::ALL {
        let model = match regime {
            Regime::Baseline => base,
            Regime::NewOnly => &models[0],
            Regime::Augmented => &models[1],
        };
        for s in &new_test {
            let seg = segment_volume(model, &s.image)?;
            let rec = match spec.kind {
                ExperimentKind::Pediatric => dsc_record(&s.id, &seg, &s.truth, DscKind::Performance)?,
                ExperimentKind::Contrast => {
                    let post = s.post_image.as_ref().expect("checked when loading");
                    let seg_post = segment_volume(model, post)?;
                    let pre_v = region_volume(&seg, spec.volume_label)?;
                    let post_v = region_volume(&seg_post, spec.volume_label)?;
                    let vc = VolumeChangeRecord::new(&s.id, pre_v, post_v)?;
                    volumes.push(VolumeRow {
                        fold,
                        regime,
                        subject_id: s.id.clone(),
                        pre_volume_cm3: vc.pre_volume_cm3,
                        post_volume_cm3: vc.post_volume_cm3,
                        percent_change: vc.percent_change,
                    });
                    reproducibility_dsc(&s.id, &seg, &seg_post)?
                }
            };
            results.push(SubjectResult::new(fold, regime, EvalCohort::New, rec));
        }
        for s in &orig_test {
            let seg = segment_volume(model, &s.image)?;
            let rec = dsc_record(&s.id, &seg, &s.truth, DscKind::Performance)?;
            results.push(SubjectResult::new(fold, regime, EvalCohort::Original, rec));
        }
    }
    let fold_tag = fold.to_string();
    let log = models.iter().flat_map(|m| log_rows(&fold_tag, m)).collect();
    Ok(FoldOutcome {
        results,
        volumes,
        log,
        models,
    })
}

fn pretrain_on(spec: &ExperimentSpec, c: &Cohorts) -> Result<TrainedModel> {
    let pre_split = split_ids(
        &ids_of(&c.pretrain)?,
        0,
        spec.pretrain.folds,
        spec.pretrain.split,
        derive_seed(spec.seed, &[SEED_SPLIT_PRETRAIN]),
    )?;
    let pcfg = TrainConfig {
        seed: derive_seed(spec.seed, &[SEED_PRETRAIN]),
        ..spec.pretrain
    };
    pretrain(
        &pick(&c.pretrain, &pre_split.train_ids),
        &pick(&c.pretrain, &pre_split.validation_ids),
        &c.plan,
        &c.vocabulary,
        &spec.network,
        &pcfg,
    )
}

/// Only the pretraining stage of an experiment.
pub fn pretrain_from_spec(spec: &ExperimentSpec) -> Result<TrainedModel> {
    spec.validate()?;
    let c = prepare_cohorts(spec)?;
    pretrain_on(spec, &c)
}

/// Only one transfer run of an experiment, starting from `base`.
pub fn transfer_from_spec(spec: &ExperimentSpec, base: &TrainedModel, fold: usize, mode: MixMode) -> Result<TrainedModel> {
    spec.validate()?;
    if fold >= spec.transfer.folds {
        return Err(Error::Invalid(format!("fold {fold} out of range (folds = {})", spec.transfer.folds)));
    }
    let c = prepare_cohorts(spec)?;
    if base.plan != c.plan {
        return Err(Error::Shape(format!(
            "model tile plan is for {:?} volumes, cohort volumes are {:?}",
            base.plan.volume_dims, c.plan.volume_dims
        )));
    }
    let sets = fold_sets(spec, &c, base, fold)?;
    transfer_on(spec, &sets, base, fold, mode)
}

/// Pretrain once on the pretraining cohort, then for every fold transfer
/// with and without mixing, evaluate all three regimes on both cohorts'
/// test subjects and aggregate.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    spec.validate()?;
    let c = prepare_cohorts(spec)?;

    let base = pretrain_on(spec, &c)?;

    let folds = spec.transfer.folds;
    let run = |f: usize| run_fold(spec, &c, &base, f);
    #[cfg(feature = "parallel")]
    let outcomes: Vec<FoldOutcome> = {
        use rayon::prelude::*;
        (0..folds).into_par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<FoldOutcome> = (0..folds).map(run).collect::<Result<_>>()?;

    let mut results = Vec::new();
    let mut volumes = Vec::new();
    let mut log = log_rows("pretrain", &base);
    let mut fold_models = Vec::new();
    for (f, o) in outcomes.into_iter().enumerate() {
        results.extend(o.results);
        volumes.extend(o.volumes);
        log.extend(o.log);
        fold_models.extend(o.models.into_iter().map(|m| (f, m)));
    }
    let report = aggregate(spec, base.selected_epoch, &fold_models, results, volumes, log)?;
    Ok(ExperimentOutput {
        report,
        baseline: base,
        fold_models,
    })
}
