use std::borrow::Cow;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SplitFractions;
use crate::error::{Error, Result};
use crate::evaluation::{dsc_record, DscKind, DscRecord};
use crate::nnet::{
    init_params, predict_classes, train_step, zscore, AdamConfig, AdamState, Checkpoint, DiceOptions,
    ModelParams, NetworkConfig, DEFAULT_LR,
};
use crate::phantom::PhantomSubject;
use crate::tiling::{crop, fuse_votes, TilePlan};
use crate::volio::{LabelEntry, LabelMap, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    NewOnly,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    NewOnly,
    Augmented,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Baseline, Regime::NewOnly, Regime::Augmented];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::NewOnly => "new_only",
            Regime::Augmented => "augmented",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl From<MixMode> for Regime {
    fn from(m: MixMode) -> Self {
        match m {
            MixMode::NewOnly => Regime::NewOnly,
            MixMode::Augmented => Regime::Augmented,
        }
    }
}

fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_folds() -> usize {
    5
}
fn default_mix() -> MixMode {
    MixMode::NewOnly
}
fn default_fraction() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default = "default_mix")]
    pub mix_mode: MixMode,
    #[serde(default)]
    pub seed: u64,
    /// Share of the original cohort's training split mixed in (augmented mode).
    #[serde(default = "default_fraction")]
    pub original_fraction: f64,
    /// Count class 0 in the soft-Dice mean.
    #[serde(default)]
    pub dice_include_background: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            lr: default_lr(),
            folds: default_folds(),
            split: SplitFractions::default(),
            mix_mode: default_mix(),
            seed: 0,
            original_fraction: default_fraction(),
            dice_include_background: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.folds == 0 {
            return Err(Error::Invalid("folds must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {}", self.lr)));
        }
        if !(self.original_fraction > 0.0 && self.original_fraction <= 1.0) {
            return Err(Error::Invalid(format!(
                "original_fraction {} outside (0, 1]",
                self.original_fraction
            )));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// splitmix64 over a base seed and a path of stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = base;
    for &t in tags {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        s = z ^ (z >> 31);
    }
    s
}

/// One subject: its image, an optional post-contrast image, and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortSubject {
    pub id: String,
    pub image: Volume3D,
    pub post_image: Option<Volume3D>,
    pub truth: LabelMap,
}

impl From<PhantomSubject> for CohortSubject {
    fn from(s: PhantomSubject) -> Self {
        CohortSubject {
            id: s.id,
            image: s.image,
            post_image: s.post_image,
            truth: s.truth,
        }
    }
}

impl CohortSubject {
    /// The same subject seen through `image` with `truth` as labels.
    pub fn with_target(&self, image: Volume3D, truth: LabelMap) -> CohortSubject {
        CohortSubject {
            id: self.id.clone(),
            image,
            post_image: None,
            truth,
        }
    }
}

/// Anything that labels one tile crop of a volume.
pub trait TileSegmenter: Sync {
    fn plan(&self) -> &TilePlan;
    fn vocabulary(&self) -> &[LabelEntry];
    /// Whole-volume preprocessing applied before tiling.
    fn prepare_volume<'a>(&self, data: &'a [f32]) -> Cow<'a, [f32]> {
        Cow::Borrowed(data)
    }
    /// Label ids for the crop of tile `tile`, x-fastest order.
    fn segment_tile(&self, tile: usize, crop: &[f32]) -> Result<Vec<u32>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub plan: TilePlan,
    /// Class index `c` predicts `vocabulary[c].id`.
    pub vocabulary: Vec<LabelEntry>,
    /// One network per plan tile.
    pub models: Vec<ModelParams<f32>>,
    /// 1-based; 0 when no epoch was run.
    pub selected_epoch: usize,
    pub validation_curve: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub regime: Regime,
}

impl TrainedModel {
    pub fn config(&self) -> &NetworkConfig {
        self.models[0].config()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config().clone(),
            plan: self.plan.clone(),
            vocabulary: self.vocabulary.clone(),
            regime: self.regime.as_str().to_string(),
            selected_epoch: self.selected_epoch as u32,
            validation_curve: self.validation_curve.clone(),
            models: self.models.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.validate()?;
        let regime = Regime::parse(&ck.regime)
            .ok_or_else(|| Error::Checkpoint(format!("unknown regime {:?}", ck.regime)))?;
        Ok(TrainedModel {
            plan: ck.plan,
            vocabulary: ck.vocabulary,
            models: ck.models,
            selected_epoch: ck.selected_epoch as usize,
            validation_curve: ck.validation_curve,
            train_loss: Vec::new(),
            regime,
        })
    }
}

impl TileSegmenter for TrainedModel {
    fn plan(&self) -> &TilePlan {
        &self.plan
    }

    fn vocabulary(&self) -> &[LabelEntry] {
        &self.vocabulary
    }

    fn prepare_volume<'a>(&self, data: &'a [f32]) -> Cow<'a, [f32]> {
        preprocess(self.config(), data)
    }

    fn segment_tile(&self, tile: usize, crop: &[f32]) -> Result<Vec<u32>> {
        let classes = predict_classes(crop, self.plan.tile_shape, &self.models[tile])?;
        Ok(classes.into_iter().map(|c| self.vocabulary[c].id).collect())
    }
}

fn preprocess<'a>(config: &NetworkConfig, data: &'a [f32]) -> Cow<'a, [f32]> {
    if config.normalize_input {
        Cow::Owned(zscore(data))
    } else {
        Cow::Borrowed(data)
    }
}

fn map_tiles<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Tile-wise segmentation fused by majority vote.
pub fn segment_volume<S: TileSegmenter + ?Sized>(segmenter: &S, image: &Volume3D) -> Result<LabelMap> {
    let plan = segmenter.plan();
    if image.dims() != plan.volume_dims {
        return Err(Error::Shape(format!(
            "image dims {:?} do not match the tile plan's {:?}",
            image.dims(),
            plan.volume_dims
        )));
    }
    let data = segmenter.prepare_volume(image.data());
    let tiles = map_tiles(plan.len(), |t| {
        let c = crop(&data, image.dims(), plan.origins[t], plan.tile_shape);
        segmenter.segment_tile(t, &c)
    })?;
    let raw: Vec<([usize; 3], &[u32])> =
        plan.origins.iter().copied().zip(tiles.iter().map(Vec::as_slice)).collect();
    let fused = fuse_votes(plan.volume_dims, plan.tile_shape, &raw)?;
    LabelMap::new(plan.volume_dims, image.voxel_size(), fused, segmenter.vocabulary().to_vec())
}

/// Per-subject DSC of the fused segmentation against each subject's truth.
pub fn evaluate_model<S: TileSegmenter + ?Sized>(
    segmenter: &S,
    subjects: &[CohortSubject],
) -> Result<Vec<DscRecord>> {
    subjects
        .iter()
        .map(|s| {
            let seg = segment_volume(segmenter, &s.image)?;
            dsc_record(&s.id, &seg, &s.truth, DscKind::Performance)
        })
        .collect()
}

fn mean_validation_dsc<S: TileSegmenter + ?Sized>(s: &S, val: &[CohortSubject]) -> Result<f64> {
    if val.is_empty() {
        return Ok(0.0);
    }
    let recs = evaluate_model(s, val)?;
    Ok(recs.iter().map(|r| r.mean_dsc).sum::<f64>() / recs.len() as f64)
}

struct TileSample {
    data: Vec<f32>,
    classes: Vec<usize>,
}

struct PreparedSubject {
    id: String,
    tiles: Vec<TileSample>,
}

fn prepare(
    subjects: &[CohortSubject],
    plan: &TilePlan,
    vocabulary: &[LabelEntry],
    net: &NetworkConfig,
) -> Result<Vec<PreparedSubject>> {
    let class_of: HashMap<u32, usize> = vocabulary.iter().enumerate().map(|(c, e)| (e.id, c)).collect();
    subjects
        .iter()
        .map(|s| {
            if s.image.dims() != plan.volume_dims || s.truth.dims() != plan.volume_dims {
                return Err(Error::Shape(format!(
                    "subject {} has dims {:?}, plan expects {:?}",
                    s.id,
                    s.image.dims(),
                    plan.volume_dims
                )));
            }
            let classes: Vec<usize> = s
                .truth
                .labels()
                .iter()
                .map(|l| {
                    class_of.get(l).copied().ok_or_else(|| {
                        Error::Labels(format!("subject {}: label {l} is not in the model vocabulary", s.id))
                    })
                })
                .collect::<Result<_>>()?;
            let data = preprocess(net, s.image.data());
            let tiles = plan
                .origins
                .iter()
                .map(|&o| TileSample {
                    data: crop(&data, plan.volume_dims, o, plan.tile_shape),
                    classes: crop(&classes, plan.volume_dims, o, plan.tile_shape),
                })
                .collect();
            Ok(PreparedSubject { id: s.id.clone(), tiles })
        })
        .collect()
}

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Epochs outer, tiles inner. After each epoch the fused validation DSC is
/// recorded and the weights are kept if it is strictly the best so far.
fn train_tiles(
    start: Vec<ModelParams<f32>>,
    plan: &TilePlan,
    vocabulary: &[LabelEntry],
    train: &[CohortSubject],
    validation: &[CohortSubject],
    config: &TrainConfig,
    regime: Regime,
) -> Result<TrainedModel> {
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let prepared = prepare(train, plan, vocabulary, start[0].config())?;
    let mut current = start;
    let mut states: Vec<AdamState<f32>> = current.iter().map(|p| AdamState::new(p, config.adam())).collect();
    let mut best = TrainedModel {
        plan: plan.clone(),
        vocabulary: vocabulary.to_vec(),
        models: current.clone(),
        selected_epoch: 0,
        validation_curve: Vec::with_capacity(config.epochs),
        train_loss: Vec::with_capacity(config.epochs),
        regime,
    };
    let mut best_score = f64::NEG_INFINITY;
    let dice = DiceOptions {
        include_background: config.dice_include_background,
        ..DiceOptions::default()
    };

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            &[STREAM_SHUFFLE, epoch as u64],
        )));
        let mut work: Vec<(ModelParams<f32>, AdamState<f32>)> =
            current.drain(..).zip(states.drain(..)).collect();
        let run = |t: usize, params: &mut ModelParams<f32>, state: &mut AdamState<f32>| -> Result<f64> {
            let mut sum = 0.0;
            for &s in &order {
                let sample = &prepared[s].tiles[t];
                let loss = train_step(params, state, &sample.data, plan.tile_shape, &sample.classes, dice)
                    .map_err(|e| match e {
                        Error::NonFinite(m) => Error::NonFinite(format!(
                            "epoch {}, subject {}, tile {t}: {m}",
                            epoch + 1,
                            prepared[s].id
                        )),
                        other => other,
                    })?;
                sum += loss;
            }
            Ok(sum)
        };
        #[cfg(feature = "parallel")]
        let losses: Vec<f64> = {
            use rayon::prelude::*;
            work.par_iter_mut()
                .enumerate()
                .map(|(t, (p, s))| run(t, p, s))
                .collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let losses: Vec<f64> = work
            .iter_mut()
            .enumerate()
            .map(|(t, (p, s))| run(t, p, s))
            .collect::<Result<_>>()?;
        for (p, s) in work {
            current.push(p);
            states.push(s);
        }
        let mean_loss = losses.iter().sum::<f64>() / (losses.len() * prepared.len()) as f64;

        let snapshot = TrainedModel {
            models: current.clone(),
            ..best.clone()
        };
        let score = mean_validation_dsc(&snapshot, validation)?;
        best.validation_curve.push(score);
        best.train_loss.push(mean_loss);
        if score > best_score {
            best_score = score;
            best.models = snapshot.models;
            best.selected_epoch = epoch + 1;
        }
    }
    Ok(best)
}

/// Train one network per tile from scratch. With zero epochs the seeded
/// initial weights are returned as-is.
pub fn pretrain(
    train: &[CohortSubject],
    validation: &[CohortSubject],
    plan: &TilePlan,
    vocabulary: &[LabelEntry],
    net: &NetworkConfig,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    net.validate()?;
    if net.num_classes != vocabulary.len() {
        return Err(Error::Invalid(format!(
            "{} classes for a vocabulary of {}",
            net.num_classes,
            vocabulary.len()
        )));
    }
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let init = (0..plan.len())
        .map(|t| init_params(net, derive_seed(config.seed, &[STREAM_INIT, t as u64])))
        .collect::<Result<Vec<_>>>()?;
    train_tiles(init, plan, vocabulary, train, validation, config, Regime::Baseline)
}

/// Continue training `base` on the new cohort, alone or mixed with the
/// original cohort's training subjects, selecting on the new cohort's
/// validation subjects.
pub fn transfer_learn(
    base: &TrainedModel,
    new_train: &[CohortSubject],
    new_validation: &[CohortSubject],
    original_train: Option<&[CohortSubject]>,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if base.models.len() != base.plan.len() {
        return Err(Error::Invalid(format!(
            "base model has {} tiles, plan has {}",
            base.models.len(),
            base.plan.len()
        )));
    }
    let mut train: Vec<CohortSubject> = new_train.to_vec();
    if config.mix_mode == MixMode::Augmented {
        let original = original_train
            .filter(|o| !o.is_empty())
            .ok_or_else(|| Error::Invalid("augmented transfer needs original-cohort subjects".into()))?;
        let keep = ((original.len() as f64 * config.original_fraction).round() as usize).max(1);
        let mut idx: Vec<usize> = (0..original.len()).collect();
        if keep < original.len() {
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[3])));
            idx.truncate(keep);
            idx.sort_unstable();
        }
        train.extend(idx.into_iter().map(|i| original[i].clone()));
    }
    if config.epochs == 0 {
        return Ok(TrainedModel {
            selected_epoch: 0,
            validation_curve: Vec::new(),
            train_loss: Vec::new(),
            regime: config.mix_mode.into(),
            ..base.clone()
        });
    }
    train_tiles(
        base.models.clone(),
        &base.plan,
        &base.vocabulary,
        &train,
        new_validation,
        config,
        config.mix_mode.into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_subject, vocabulary, PhantomSpec};
    use crate::tiling::plan_tiles;

    struct Oracle<'a> {
        plan: TilePlan,
        truth: &'a LabelMap,
        vocab: Vec<LabelEntry>,
    }

    impl TileSegmenter for Oracle<'_> {
        fn plan(&self) -> &TilePlan {
            &self.plan
        }
        fn vocabulary(&self) -> &[LabelEntry] {
            &self.vocab
        }
        fn segment_tile(&self, tile: usize, _crop: &[f32]) -> Result<Vec<u32>> {
            Ok(crop(self.truth.labels(), self.plan.volume_dims, self.plan.origins[tile], self.plan.tile_shape))
        }
    }

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: [16, 16, 16],
            scale: 1.0,
            ..PhantomSpec::adult().with_seed(seed)
        }
    }

    fn subjects(n: u64) -> Vec<CohortSubject> {
        (0..n)
            .map(|i| CohortSubject::from(generate_subject(&small_spec(i)).unwrap()))
            .collect()
    }

    fn small_net() -> NetworkConfig {
        NetworkConfig {
            hidden_channels: 4,
            hidden_layers: 1,
            ..NetworkConfig::new(5)
        }
    }

    #[test]
    fn oracle_scores_one_and_background_scores_zero() {
        let subs = subjects(2);
        let plan = plan_tiles([16; 3], [2, 2, 2], [10; 3]).unwrap();
        for s in &subs {
            let oracle = Oracle {
                plan: plan.clone(),
                truth: &s.truth,
                vocab: vocabulary(),
            };
            let rec = evaluate_model(&oracle, std::slice::from_ref(s)).unwrap();
            assert_eq!(rec[0].mean_dsc, 1.0);
            let empty = s.truth.relabel(vec![0; 4096]).unwrap();
            let bg = Oracle {
                plan: plan.clone(),
                truth: &empty,
                vocab: vocabulary(),
            };
            let rec = evaluate_model(&bg, std::slice::from_ref(s)).unwrap();
            assert!(rec[0].per_label.iter().filter(|(&k, _)| k != 0).all(|(_, d)| *d == Some(0.0)));
        }
    }

    #[test]
    fn zero_epochs_returns_initial_or_base_weights() {
        let subs = subjects(2);
        let plan = plan_tiles([16; 3], [2, 2, 2], [10; 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let base = pretrain(&subs[..1], &subs[1..], &plan, &vocabulary(), &small_net(), &cfg).unwrap();
        assert_eq!(base.regime, Regime::Baseline);
        assert_eq!(base.selected_epoch, 0);
        assert!(base.validation_curve.is_empty());
        let init: ModelParams<f32> = init_params(&small_net(), derive_seed(0, &[STREAM_INIT, 3])).unwrap();
        assert_eq!(base.models[3], init);

        let tl = transfer_learn(&base, &subs[..1], &subs[1..], None, &cfg).unwrap();
        assert_eq!(tl.models, base.models);
        let aug = TrainConfig {
            mix_mode: MixMode::Augmented,
            ..cfg
        };
        assert!(transfer_learn(&base, &subs[..1], &subs[1..], Some(&[]), &aug).is_err());
        assert!(transfer_learn(&base, &subs[..1], &subs[1..], None, &aug).is_err());
    }

    #[test]
    fn short_training_selects_best_epoch() {
        let subs = subjects(3);
        let plan = plan_tiles([16; 3], [2, 2, 2], [10; 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e-2,
            ..TrainConfig::default()
        };
        let m = pretrain(&subs[..2], &subs[2..], &plan, &vocabulary(), &small_net(), &cfg).unwrap();
        assert_eq!(m.validation_curve.len(), 3);
        assert_eq!(m.train_loss.len(), 3);
        let best = m
            .validation_curve
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i + 1, v) } else { acc });
        assert_eq!(m.selected_epoch, best.0);
        assert!(m.train_loss[2] < m.train_loss[0]);
        // Reproducible, including the checkpoint round trip.
        let again = pretrain(&subs[..2], &subs[2..], &plan, &vocabulary(), &small_net(), &cfg).unwrap();
        assert_eq!(m, again);
        let back = TrainedModel::from_checkpoint(m.to_checkpoint()).unwrap();
        assert_eq!(back.models, m.models);
        assert_eq!(back.selected_epoch, m.selected_epoch);
    }

    #[test]
    fn segment_rejects_wrong_dims() {
        let subs = subjects(1);
        let plan = plan_tiles([16; 3], [2, 2, 2], [10; 3]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let m = pretrain(&subs, &[], &plan, &vocabulary(), &small_net(), &cfg).unwrap();
        let other = Volume3D::filled([8, 8, 8], [1.0; 3], 0.0).unwrap();
        let err = segment_volume(&m, &other).unwrap_err().to_string();
        assert!(err.contains("[16, 16, 16]"), "{err}");
    }

    #[test]
    fn seeds_are_distinct_streams() {
        assert_ne!(derive_seed(1, &[1]), derive_seed(1, &[2]));
        assert_ne!(derive_seed(1, &[1, 2]), derive_seed(1, &[2, 1]));
        assert_eq!(derive_seed(7, &[3, 4]), derive_seed(7, &[3, 4]));
    }
}
