//! Evaluation protocols: generalized few-shot (base + novel on every test
//! image), the 1-way few-shot episodic mode, and the fusion ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::dataset::{sample_support_indices, support_set_from, Sample, SplitData};
use crate::error::{Error, Result};
use crate::image::{FeatureMap, LabelMask, IGNORE};
use crate::metrics::{miou, ClassIou, ConfusionMatrix, RoleFilter};
use crate::prototype::{
    form_novel_prototype, register_with_features, ClassEntry, Classifier, Fusion, GammaNet, Role, BACKGROUND,
};
use crate::scalar::{DType, Scalar};
use crate::train::{train_until, InferenceFusion, TrainConfig, TrainState, TrainingKind, Variant};

/// Frozen parameters used for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub backbone: Backbone<S>,
    pub classifier: Classifier<S>,
    pub gamma: Option<GammaNet<S>>,
    /// Mean γ over the end of training, for models trained with fusion.
    pub converged_gamma: Option<f64>,
}

impl<S: Scalar> Model<S> {
    pub fn from_state(state: &TrainState<S>) -> Self {
        Self {
            backbone: state.backbone.clone(),
            classifier: state.classifier.clone(),
            gamma: state.gamma.clone(),
            converged_gamma: state.converged_gamma(),
        }
    }
}

impl Model<f64> {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self::from_state(&ck.to_state())
    }
}

/// Resolved treatment of base prototypes during registration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionChoice {
    ImprintOnly,
    Adaptive,
    Fixed(f64),
}

impl FusionChoice {
    pub fn as_fusion<'a, S: Scalar>(&self, model: &'a Model<S>) -> Result<Fusion<'a, S>> {
        Ok(match *self {
            FusionChoice::ImprintOnly => Fusion::ImprintOnly,
            FusionChoice::Adaptive => Fusion::Adaptive(
                model
                    .gamma
                    .as_ref()
                    .ok_or_else(|| Error::Config("adaptive fusion needs a model with a gamma network".into()))?,
            ),
            FusionChoice::Fixed(g) => {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Range(format!("gamma {g} outside [0, 1]")));
                }
                Fusion::Fixed(S::of(g))
            }
        })
    }
}

/// Picks the fusion for `variant`. `own` is the converged γ of the model
/// being evaluated, `reference` that of a fully trained model on the same
/// fold (needed by the test-time-only variant).
pub fn resolve_fusion(variant: Variant, own: Option<f64>, reference: Option<f64>, amp_gamma: f64) -> Result<FusionChoice> {
    let need = |g: Option<f64>, what: &str| g.ok_or_else(|| Error::Config(format!("{variant} needs the converged gamma of {what}")));
    Ok(match variant.fusion() {
        InferenceFusion::ImprintOnly => FusionChoice::ImprintOnly,
        InferenceFusion::Adaptive => FusionChoice::Adaptive,
        InferenceFusion::Constant => FusionChoice::Fixed(amp_gamma),
        InferenceFusion::Converged => match variant {
            Variant::CaplTe => FusionChoice::Fixed(need(reference, "a capl model")?),
            _ => FusionChoice::Fixed(need(own, "this model")?),
        },
    })
}

/// Backbone features of the test set and support pool.
pub struct FeatureCache<S> {
    pub test: Vec<FeatureMap<S>>,
    pub pool: Vec<FeatureMap<S>>,
}

fn features_of<S: Scalar>(backbone: &Backbone<S>, samples: &[Sample<S>]) -> Result<Vec<FeatureMap<S>>> {
    samples.par_iter().map(|s| backbone.extract_features(&s.image)).collect()
}

impl<S: Scalar> FeatureCache<S> {
    pub fn build(backbone: &Backbone<S>, data: &SplitData<S>) -> Result<Self> {
        Ok(Self {
            test: features_of(backbone, &data.test)?,
            pool: features_of(backbone, &data.support_pool)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    /// `None` for a base-only evaluation.
    pub seed: Option<u64>,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub total: f64,
    pub per_class: Vec<ClassIou>,
    /// γ applied to each enriched base class.
    pub gammas: BTreeMap<u8, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub total: f64,
    pub per_class: Vec<ClassIou>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub shots: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedReport>,
    pub mean: MeanReport,
}

pub const DEFAULT_SEEDS: [u64; 5] = [123, 321, 456, 654, 999];

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores `classifier` on every cached test image. With `base_only`, truth
/// pixels of unregistered classes are ignored.
pub fn evaluate_classifier<S: Scalar>(
    classifier: &Classifier<S>,
    features: &[FeatureMap<S>],
    truths: &[&LabelMask],
    base_only: bool,
) -> Result<ConfusionMatrix> {
    let registered: BTreeSet<u8> = classifier.ids().into_iter().collect();
    let parts: Vec<ConfusionMatrix> = features
        .par_iter()
        .zip(truths.par_iter())
        .map(|(f, t)| {
            let mut cm = ConfusionMatrix::for_classifier(classifier);
            let pred = classifier.predict(f)?;
            if base_only {
                cm.accumulate(&pred, &t.restricted_to(&registered))?;
            } else {
                cm.accumulate(&pred, t)?;
            }
            Ok(cm)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionMatrix::for_classifier(classifier);
    for p in &parts {
        total.merge(p)?;
    }
    Ok(total)
}

fn seed_report(cm: &ConfusionMatrix, seed: Option<u64>, gammas: BTreeMap<u8, f64>) -> Result<SeedReport> {
    Ok(SeedReport {
        seed,
        base: miou(cm, RoleFilter::Base).ok(),
        novel: miou(cm, RoleFilter::Novel).ok(),
        total: miou(cm, RoleFilter::All)?,
        per_class: cm.class_iou(),
        gammas,
    })
}

fn attach_seed(seed: u64) -> impl FnOnce(Error) -> Error {
    move |e| Error::Seed {
        seed,
        source: Box::new(e),
    }
}

/// Generalized few-shot evaluation: per seed, sample `shots` supports per
/// novel class, register, and classify every test image over base + novel
/// classes. `shots == 0` evaluates the base classifier alone.
pub fn run_gfs_protocol<S: Scalar>(
    model: &Model<S>,
    data: &SplitData<S>,
    cache: &FeatureCache<S>,
    shots: usize,
    seeds: &[u64],
    fusion: FusionChoice,
) -> Result<MetricsReport> {
    if data.test.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let truths: Vec<&LabelMask> = data.test.iter().map(|s| &s.mask).collect();
    let mut per_seed = Vec::new();
    if shots == 0 {
        let cm = evaluate_classifier(&model.classifier, &cache.test, &truths, true)?;
        per_seed.push(seed_report(&cm, None, BTreeMap::new())?);
    } else {
        if seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let fusion_mode = fusion.as_fusion(model)?;
        let novel = data.novel_ids();
        for &seed in seeds {
            let run = || -> Result<SeedReport> {
                let picks = sample_support_indices(&data.support_pool, &novel, shots, seed)?;
                let supports = support_set_from(&data.support_pool, &picks)?;
                let feats: Vec<FeatureMap<S>> = picks.iter().map(|&(_, i)| cache.pool[i].clone()).collect();
                let (clf, enriched) = register_with_features(&model.classifier, fusion_mode, &supports, &feats, 1)?;
                let cm = evaluate_classifier(&clf, &cache.test, &truths, false)?;
                let gammas = enriched.iter().map(|e| (e.class, e.gamma.f64())).collect();
                seed_report(&cm, Some(seed), gammas)
            };
            per_seed.push(run().map_err(attach_seed(seed))?);
        }
    }
    let ids: Vec<(u8, Role)> = per_seed[0].per_class.iter().map(|c| (c.id, c.role)).collect();
    let per_class = ids
        .iter()
        .map(|&(id, role)| ClassIou {
            id,
            role,
            iou: mean_opt(per_seed.iter().map(|r| r.per_class.iter().find(|c| c.id == id).and_then(|c| c.iou))),
        })
        .collect();
    let mean = MeanReport {
        base: mean_opt(per_seed.iter().map(|r| r.base)),
        novel: mean_opt(per_seed.iter().map(|r| r.novel)),
        total: per_seed.iter().map(|r| r.total).sum::<f64>() / per_seed.len() as f64,
        per_class,
    };
    Ok(MetricsReport {
        shots,
        seeds: if shots == 0 { Vec::new() } else { seeds.to_vec() },
        per_seed,
        mean,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsReport {
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Mean over novel classes of the foreground IoU accumulated across
    /// that class's episodes.
    pub class_miou: f64,
    pub per_class: Vec<ClassIou>,
}

/// 1-way episodic evaluation: each episode draws a novel class, `shots`
/// support scenes from the pool and one test scene containing the class,
/// builds a background/foreground classifier from the supports and
/// segments the query.
pub fn run_fs_protocol<S: Scalar>(
    model: &Model<S>,
    data: &SplitData<S>,
    cache: &FeatureCache<S>,
    shots: usize,
    episodes: usize,
    seed: u64,
) -> Result<FsReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes must be at least 1".into()));
    }
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let novel: Vec<u8> = data.novel_ids().into_iter().collect();
    if novel.is_empty() {
        return Err(Error::Data("dataset has no novel classes".into()));
    }
    let holding = |samples: &[Sample<S>], c: u8| -> Vec<usize> {
        (0..samples.len()).filter(|&i| samples[i].mask.contains(c)).collect()
    };
    let pools: BTreeMap<u8, (Vec<usize>, Vec<usize>)> = novel
        .iter()
        .map(|&c| (c, (holding(&data.support_pool, c), holding(&data.test, c))))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<u8, [u64; 3]> = BTreeMap::new();
    let c_dim = model.classifier.dim();
    for _ in 0..episodes {
        let c = novel[rng.gen_range(0..novel.len())];
        let (sup_pool, queries) = &pools[&c];
        if queries.is_empty() {
            return Err(Error::Data(format!("no test scene contains class {c}")));
        }
        if sup_pool.len() < shots {
            return Err(Error::Data(format!(
                "support pool has {} images with class {c}, need {shots}",
                sup_pool.len()
            )));
        }
        let picks: Vec<usize> = rand::seq::index::sample(&mut rng, sup_pool.len(), shots)
            .into_iter()
            .map(|j| sup_pool[j])
            .collect();
        let q = queries[rng.gen_range(0..queries.len())];

        let shots_fg: Vec<(&FeatureMap<S>, Vec<bool>)> = picks
            .iter()
            .map(|&i| (&cache.pool[i], data.support_pool[i].mask.binary(c)))
            .collect();
        let fg = form_novel_prototype(&shots_fg)?;
        let mut bg = vec![S::zero(); c_dim];
        let mut n_bg = 0usize;
        for &i in &picks {
            let f = &cache.pool[i];
            for (p, &l) in data.support_pool[i].mask.labels().iter().enumerate() {
                if l != c && l != IGNORE {
                    for (acc, &v) in bg.iter_mut().zip(f.pixel(p)) {
                        *acc += v;
                    }
                    n_bg += 1;
                }
            }
        }
        if n_bg == 0 {
            return Err(Error::EmptyMask(format!("supports of class {c} have no background pixels")));
        }
        let inv = S::one() / S::of(n_bg as f64);
        bg.iter_mut().for_each(|v| *v *= inv);
        let clf = Classifier::new(
            model.classifier.alpha(),
            vec![
                ClassEntry {
                    id: BACKGROUND,
                    role: Role::Base,
                    prototype: bg,
                },
                ClassEntry {
                    id: 1,
                    role: Role::Novel,
                    prototype: fg,
                },
            ],
        )?;
        let pred = clf.predict(&cache.test[q])?;
        let acc = counts.entry(c).or_default();
        for (&p, &t) in pred.labels().iter().zip(data.test[q].mask.labels()) {
            if t == IGNORE {
                continue;
            }
            match (t == c, p == 1) {
                (true, true) => acc[0] += 1,
                (false, true) => acc[1] += 1,
                (true, false) => acc[2] += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: Vec<ClassIou> = counts
        .iter()
        .map(|(&id, &[tp, fp, fn_])| ClassIou {
            id,
            role: Role::Novel,
            iou: (tp + fp + fn_ > 0).then(|| tp as f64 / (tp + fp + fn_) as f64),
        })
        .collect();
    let class_miou = mean_opt(per_class.iter().map(|c| c.iou))
        .ok_or_else(|| Error::Degenerate("no episode produced a scored class".into()))?;
    Ok(FsReport {
        shots,
        episodes,
        seed,
        class_miou,
        per_class,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    /// Shot counts; 0 requests a base-only evaluation.
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub amp_gamma: f64,
    pub train: TrainConfig,
    /// Directory for per-fold checkpoints reused across runs.
    pub cache_dir: Option<PathBuf>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            shots: vec![1, 5, 10],
            seeds: DEFAULT_SEEDS.to_vec(),
            amp_gamma: crate::train::DEFAULT_AMP_GAMMA,
            train: TrainConfig::default(),
            cache_dir: None,
        }
    }
}

/// One line of the ablation table, averaged over folds. `seed == None`
/// marks the mean over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub shots: usize,
    pub seed: Option<u64>,
    pub base: Option<f64>,
    pub novel: Option<f64>,
    pub total: f64,
}

pub const ABLATION_CSV_HEADER: &str = "variant,shots,seed,base,novel,total";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into());
        out.push_str(&format!(
            "{},{},{},{},{},{:.6}\n",
            r.variant,
            r.shots,
            seed,
            opt(r.base),
            opt(r.novel),
            r.total
        ));
    }
    out
}

fn required_kinds(variants: &[Variant]) -> BTreeSet<TrainingKind> {
    let mut kinds: BTreeSet<TrainingKind> = variants.iter().map(|v| v.training()).collect();
    if variants.contains(&Variant::CaplTe) {
        kinds.insert(TrainingKind::Full);
    }
    kinds
}

/// Mean-row lookup in an ablation table.
pub fn mean_total(rows: &[AblationRow], variant: Variant, shots: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.variant == variant && r.shots == shots && r.seed.is_none())
        .map(|r| r.total)
}

/// Expected ordering of mean total mIoU: capl above both single-sided
/// variants, which sit above the baseline. Pairs that invert by more than
/// `tie` are returned as `(expected higher, expected lower, shots)`.
pub fn ordering_inversions(rows: &[AblationRow], tie: f64) -> Vec<(Variant, Variant, usize)> {
    const PAIRS: [(Variant, Variant); 4] = [
        (Variant::Capl, Variant::CaplTr),
        (Variant::Capl, Variant::CaplTe),
        (Variant::CaplTr, Variant::Baseline),
        (Variant::CaplTe, Variant::Baseline),
    ];
    let shots: BTreeSet<usize> = rows.iter().map(|r| r.shots).filter(|&k| k > 0).collect();
    let mut out = Vec::new();
    for k in shots {
        for (hi, lo) in PAIRS {
            if let (Some(a), Some(b)) = (mean_total(rows, hi, k), mean_total(rows, lo, k)) {
                if a + tie < b {
                    out.push((hi, lo, k));
                }
            }
        }
    }
    out
}

/// Cache file for one fold and training kind; the name carries a hash of
/// the training config and dataset identity so stale entries are not
/// picked up.
pub fn cache_path(dir: &std::path::Path, data: &SplitData<f64>, kind: TrainingKind, train: &TrainConfig) -> PathBuf {
    let key = serde_json::to_string(train).expect("config serializes");
    let tag = crc32fast::hash(format!("{key}|{}|{}|{}", data.seed, data.train.len(), data.test.len()).as_bytes());
    dir.join(format!("fold{}_{}_{tag:08x}.ckpt", data.split_index, kind.name()))
}

/// Trains `kind` on `data`, or loads it from the cache when present.
pub fn trained_state(
    data: &SplitData<f64>,
    kind: TrainingKind,
    train: &TrainConfig,
    cache_dir: Option<&std::path::Path>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainState<f64>> {
    let path = cache_dir.map(|d| cache_path(d, data, kind, train));
    if let Some(p) = &path {
        if p.exists() {
            let ck = Checkpoint::load(p)?;
            if ck.kind == kind && ck.step == train.steps {
                log(&format!("fold {} {}: cached {}", data.split_index, kind.name(), p.display()));
                return Ok(ck.to_state());
            }
        }
    }
    let base: Vec<u8> = data.base_ids().into_iter().collect();
    let mut state = TrainState::init(train, kind, &base)?;
    train_until(&mut state, train, &data.train, train.steps, |_| {})?;
    log(&format!("fold {} {}: trained {} steps", data.split_index, kind.name(), state.step));
    if let Some(p) = &path {
        Checkpoint::from_state(&state, &data.classes).save(p, DType::F64)?;
    }
    Ok(state)
}

/// Trains (or reuses) every needed model per fold, runs the generalized
/// protocol for each variant and shot count, and averages over folds.
pub fn run_ablation(folds: &[SplitData<f64>], config: &AblationConfig, log: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    if folds.is_empty() || config.variants.is_empty() || config.shots.is_empty() {
        return Err(Error::Config("ablation needs folds, variants and shot counts".into()));
    }
    // (variant, shots, seed) -> per-fold reports
    let mut cells: BTreeMap<(Variant, usize, Option<u64>), Vec<SeedReport>> = BTreeMap::new();
    for data in folds {
        let mut models: BTreeMap<TrainingKind, (Model<f64>, FeatureCache<f64>)> = BTreeMap::new();
        for kind in required_kinds(&config.variants) {
            let state = trained_state(data, kind, &config.train, config.cache_dir.as_deref(), log)?;
            let model = Model::from_state(&state);
            let cache = FeatureCache::build(&model.backbone, data)?;
            models.insert(kind, (model, cache));
        }
        let reference = models.get(&TrainingKind::Full).and_then(|(m, _)| m.converged_gamma);
        for &variant in &config.variants {
            let (model, cache) = &models[&variant.training()];
            let fusion = resolve_fusion(variant, model.converged_gamma, reference, config.amp_gamma)?;
            for &shots in &config.shots {
                let report = run_gfs_protocol(model, data, cache, shots, &config.seeds, fusion)?;
                for r in report.per_seed {
                    cells.entry((variant, shots, r.seed)).or_default().push(r);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for &variant in &config.variants {
        for &shots in &config.shots {
            let mut per_seed = Vec::new();
            for ((v, s, seed), reports) in &cells {
                if *v != variant || *s != shots {
                    continue;
                }
                per_seed.push(AblationRow {
                    variant,
                    shots,
                    seed: *seed,
                    base: mean_opt(reports.iter().map(|r| r.base)),
                    novel: mean_opt(reports.iter().map(|r| r.novel)),
                    total: reports.iter().map(|r| r.total).sum::<f64>() / reports.len() as f64,
                });
            }
            // keep the configured seed order
            per_seed.sort_by_key(|r| r.seed.map(|s| config.seeds.iter().position(|&x| x == s)));
            let mean = AblationRow {
                variant,
                shots,
                seed: None,
                base: mean_opt(per_seed.iter().map(|r| r.base)),
                novel: mean_opt(per_seed.iter().map(|r| r.novel)),
                total: per_seed.iter().map(|r| r.total).sum::<f64>() / per_seed.len() as f64,
            };
            if shots == 0 {
                rows.push(mean);
            } else {
                rows.extend(per_seed);
                rows.push(mean);
            }
        }
    }
    Ok(rows)
}
