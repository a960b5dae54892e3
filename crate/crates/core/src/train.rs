//! Base-class training with fake support/query rehearsal of novel-class
//! registration.
//!
//! Each step splits the batch into a fake-support half and a fake-query
//! half, picks some base classes present in the fake support to play
//! "fake novel" (row replaced by the support mean) and the rest to play
//! "fake context" (row fused with the support mean through the γ network),
//! and optimizes the average of the plain loss and the loss under the
//! updated classifier.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LayerVars};
use crate::dataset::Sample;
use crate::error::{shape_err, Error, Result};
use crate::image::{FeatureMap, Image, LabelMask, IGNORE};
use crate::prototype::{fuse_on, ClassEntry, Classifier, GammaNet, GammaVars, Role, BACKGROUND};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub layers: usize,
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 2000,
            lr: 0.005,
            momentum: 0.9,
            poly_power: 0.9,
            seed: 0,
            embed_dim: 16,
            layers: 3,
            alpha: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(Error::Config(format!("batch size must be >= 4, got {}", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::Config(format!("invalid poly power {}", self.poly_power)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Poly schedule `lr·(1 − t/T)^power`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return self.lr;
        }
        let frac = 1.0 - step as f64 / self.steps as f64;
        self.lr * frac.max(0.0).powf(self.poly_power)
    }
}

/// What the training loop optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingKind {
    /// Cross-entropy under the trained classifier only.
    Plain,
    /// Dual loss with fake-novel replacement but no fake-context fusion.
    FakeNovel,
    /// Dual loss with both branches and a learned γ network.
    Full,
}

impl TrainingKind {
    pub fn name(self) -> &'static str {
        match self {
            TrainingKind::Plain => "baseline",
            TrainingKind::FakeNovel => "capl_tr",
            TrainingKind::Full => "capl",
        }
    }
}

/// How base prototypes are treated when novel classes are registered.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceFusion {
    ImprintOnly,
    Adaptive,
    /// γ fixed to the mean recorded while training a full model.
    Converged,
    /// γ fixed to a hand-picked constant shared by all classes.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    CaplTr,
    CaplTe,
    Capl,
    AmpGamma,
    ConvgGamma,
}

/// γ used by the fixed-constant variant when none is supplied.
pub const DEFAULT_AMP_GAMMA: f64 = 0.5;

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::AmpGamma,
        Variant::CaplTe,
        Variant::ConvgGamma,
        Variant::CaplTr,
        Variant::Capl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::CaplTr => "capl_tr",
            Variant::CaplTe => "capl_te",
            Variant::Capl => "capl",
            Variant::AmpGamma => "amp_gamma",
            Variant::ConvgGamma => "convg_gamma",
        }
    }

    pub fn training(self) -> TrainingKind {
        match self {
            Variant::Baseline | Variant::CaplTe => TrainingKind::Plain,
            Variant::CaplTr => TrainingKind::FakeNovel,
            Variant::Capl | Variant::AmpGamma | Variant::ConvgGamma => TrainingKind::Full,
        }
    }

    pub fn fusion(self) -> InferenceFusion {
        match self {
            Variant::Baseline | Variant::CaplTr => InferenceFusion::ImprintOnly,
            Variant::Capl => InferenceFusion::Adaptive,
            Variant::CaplTe | Variant::ConvgGamma => InferenceFusion::Converged,
            Variant::AmpGamma => InferenceFusion::Constant,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        make_variant(s)
    }
}

pub fn make_variant(kind: &str) -> Result<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == kind)
        .ok_or_else(|| Error::Config(format!("unknown variant {kind:?}")))
}

/// Positions within a batch of the fake-support and fake-query halves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainBatch {
    pub fake_support: Vec<usize>,
    pub fake_query: Vec<usize>,
}

pub fn partition_batch(batch_size: usize, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
    if batch_size < 4 {
        return Err(Error::Config(format!("batch size must be >= 4, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..batch_size).collect();
    order.shuffle(rng);
    let mut fake_support = order[..batch_size / 2].to_vec();
    let mut fake_query = order[batch_size / 2..].to_vec();
    fake_support.sort_unstable();
    fake_query.sort_unstable();
    Ok(TrainBatch { fake_support, fake_query })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FakeSplit {
    pub fake_novel: BTreeSet<u8>,
    pub fake_context: BTreeSet<u8>,
}

impl FakeSplit {
    pub fn is_empty(&self) -> bool {
        self.fake_novel.is_empty() && self.fake_context.is_empty()
    }
}

/// Splits the non-background classes present in the fake-support masks:
/// `⌊n/2⌋` become fake novel, the rest fake context.
pub fn select_fake_classes(support_masks: &[&LabelMask], rng: &mut ChaCha8Rng) -> FakeSplit {
    let present: BTreeSet<u8> = support_masks.iter().flat_map(|m| m.classes()).collect();
    let mut candidates: Vec<u8> = present.into_iter().filter(|&c| c != BACKGROUND).collect();
    candidates.shuffle(rng);
    let n_novel = candidates.len() / 2;
    FakeSplit {
        fake_novel: candidates[..n_novel].iter().copied().collect(),
        fake_context: candidates[n_novel..].iter().copied().collect(),
    }
}

/// Pixel-weighted mean of `class` over several `(pixels, c)` feature
/// variables, or `None` when the class has no pixels.
fn context_mean_on<S: Scalar>(
    tape: &mut Tape<S>,
    features: &[Var],
    masks: &[&LabelMask],
    class: u8,
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (&f, m) in features.iter().zip(masks) {
        let bits = m.binary(class);
        let n = bits.iter().filter(|&&b| b).count();
        if n == 0 {
            continue;
        }
        let s = tape.masked_sum(f, bits)?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
        count += n;
    }
    match acc {
        None => Ok(None),
        Some(a) => Ok(Some(tape.scale(a, S::one() / S::of(count as f64))?)),
    }
}

/// Builds the updated classifier matrix on the tape. Rows of classes
/// outside the split are the original rows; the returned vector holds the
/// γ of every fused class.
pub fn updated_matrix_on<S: Scalar>(
    tape: &mut Tape<S>,
    matrix: Var,
    ids: &[u8],
    support_features: &[Var],
    support_masks: &[&LabelMask],
    split: &FakeSplit,
    gamma: Option<GammaVars>,
) -> Result<(Var, Vec<Var>)> {
    if split.is_empty() {
        return Ok((matrix, Vec::new()));
    }
    let mut rows = Vec::with_capacity(ids.len());
    let mut gammas = Vec::new();
    for (j, &id) in ids.iter().enumerate() {
        let row = tape.row(matrix, j)?;
        let novel = split.fake_novel.contains(&id);
        let context = split.fake_context.contains(&id);
        if !novel && !context {
            rows.push(row);
            continue;
        }
        let p_feat = context_mean_on(tape, support_features, support_masks, id)?
            .ok_or_else(|| Error::EmptyMask(format!("fake class {id} has no fake-support pixels")))?;
        if novel {
            rows.push(p_feat);
        } else {
            let gv = gamma.ok_or_else(|| Error::Config("fake-context fusion needs a gamma network".into()))?;
            let g = GammaNet::forward_on(tape, gv, row, p_feat)?;
            gammas.push(g);
            rows.push(fuse_on(tape, row, p_feat, g)?);
        }
    }
    Ok((tape.stack_rows(&rows)?, gammas))
}

/// `α`-scaled cosine logits of normalized pixel rows against a matrix.
fn cosine_logits_on<S: Scalar>(tape: &mut Tape<S>, normalized: Var, matrix: Var, alpha: S) -> Result<Var> {
    let wn = tape.l2_normalize(matrix)?;
    let dots = tape.matmul_nt(normalized, wn)?;
    tape.scale(dots, alpha)
}

fn targets_for<S: Scalar>(classifier: &Classifier<S>, mask: &LabelMask) -> Result<Vec<Option<usize>>> {
    mask.labels()
        .iter()
        .map(|&l| {
            if l == IGNORE {
                Ok(None)
            } else {
                classifier
                    .index_of(l)
                    .map(Some)
                    .ok_or_else(|| Error::Data(format!("label {l} is not a trained class")))
            }
        })
        .collect()
}

/// Parameters of one step, recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<LayerVars>,
    pub classifier: Var,
    pub gamma: Option<GammaVars>,
}

impl ParamVars {
    /// Every trainable leaf in a fixed order: backbone kernels and biases,
    /// the classifier matrix, then γ network tensors.
    pub fn all(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.layers.iter().flat_map(|l| [l.kernel, l.bias]).collect();
        v.push(self.classifier);
        if let Some(g) = self.gamma {
            v.extend([g.w1, g.b1, g.w2, g.b2]);
        }
        v
    }
}

pub struct LossTerms {
    pub loss: Var,
    pub l_cls: Var,
    pub l_update: Option<Var>,
    pub gammas: Vec<Var>,
}

/// Forward of one batch: features, plain loss, updated classifier and
/// dual loss, all on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn loss_on<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamVars,
    classifier: &Classifier<S>,
    kind: TrainingKind,
    images: &[&Image<S>],
    masks: &[&LabelMask],
    batch: &TrainBatch,
    split: &FakeSplit,
) -> Result<LossTerms> {
    if images.len() != masks.len() {
        return Err(shape_err!("{} images for {} masks", images.len(), masks.len()));
    }
    let c = classifier.dim();
    let mut raw = Vec::with_capacity(images.len());
    let mut normalized = Vec::with_capacity(images.len());
    let mut targets: Vec<Vec<Option<usize>>> = Vec::with_capacity(images.len());
    for (img, mask) in images.iter().zip(masks) {
        let x = tape.constant(img.to_tensor());
        let f = Backbone::forward_on(tape, &params.layers, x)?;
        let f = tape.reshape(f, vec![img.height() * img.width(), c])?;
        raw.push(f);
        normalized.push(tape.l2_normalize(f)?);
        targets.push(targets_for(classifier, mask)?);
    }
    let alpha = classifier.alpha();
    let all = tape.concat(&normalized)?;
    let logits = cosine_logits_on(tape, all, params.classifier, alpha)?;
    let l_cls = tape.softmax_cross_entropy(logits, targets.concat())?;
    if kind == TrainingKind::Plain {
        return Ok(LossTerms {
            loss: l_cls,
            l_cls,
            l_update: None,
            gammas: Vec::new(),
        });
    }

    let split = match kind {
        TrainingKind::FakeNovel => FakeSplit {
            fake_novel: split.fake_novel.clone(),
            fake_context: BTreeSet::new(),
        },
        _ => split.clone(),
    };
    let sup_feats: Vec<Var> = batch.fake_support.iter().map(|&i| raw[i]).collect();
    let sup_masks: Vec<&LabelMask> = batch.fake_support.iter().map(|&i| masks[i]).collect();
    let ids = classifier.ids();
    let (updated, gammas) = updated_matrix_on(
        tape,
        params.classifier,
        &ids,
        &sup_feats,
        &sup_masks,
        &split,
        params.gamma,
    )?;
    let query: Vec<Var> = batch.fake_query.iter().map(|&i| normalized[i]).collect();
    let query_targets: Vec<Option<usize>> = batch.fake_query.iter().flat_map(|&i| targets[i].iter().copied()).collect();
    let q = tape.concat(&query)?;
    let q_logits = cosine_logits_on(tape, q, updated, alpha)?;
    let l_update = tape.softmax_cross_entropy(q_logits, query_targets)?;
    let sum = tape.add(l_cls, l_update)?;
    let loss = tape.scale(sum, S::of(0.5))?;
    Ok(LossTerms {
        loss,
        l_cls,
        l_update: Some(l_update),
        gammas,
    })
}

/// Non-differentiable form of the updated classifier for inspection.
pub fn build_updated_classifier<S: Scalar>(
    classifier: &Classifier<S>,
    net: Option<&GammaNet<S>>,
    support_features: &[FeatureMap<S>],
    support_masks: &[&LabelMask],
    split: &FakeSplit,
) -> Result<Classifier<S>> {
    let mut tape = Tape::new();
    let w = tape.constant(classifier.matrix());
    let feats: Vec<Var> = support_features
        .iter()
        .map(|f| {
            let v = tape.constant(f.tensor().clone());
            tape.reshape(v, vec![f.pixels(), f.channels()])
        })
        .collect::<Result<_>>()?;
    let gv = net.map(|n| n.record(&mut tape, false));
    let (m, _) = updated_matrix_on(&mut tape, w, &classifier.ids(), &feats, support_masks, split, gv)?;
    let m = tape.value(m);
    let entries = classifier
        .entries()
        .iter()
        .enumerate()
        .map(|(j, e)| ClassEntry {
            id: e.id,
            role: e.role,
            prototype: m.row(j).to_vec(),
        })
        .collect();
    Classifier::new(classifier.alpha(), entries)
}

/// `(L_cls + L_update) / 2`, with `L_cls` over every feature map under
/// `classifier` and `L_update` over the `query` maps under `updated`.
pub fn dual_loss<S: Scalar>(
    classifier: &Classifier<S>,
    updated: &Classifier<S>,
    features: &[FeatureMap<S>],
    masks: &[&LabelMask],
    query: &[usize],
) -> Result<S> {
    if classifier.ids() != updated.ids() {
        return Err(Error::Config("classifiers disagree on class order".into()));
    }
    let mut tape = Tape::new();
    let mut normalized = Vec::new();
    let mut targets = Vec::new();
    for (f, m) in features.iter().zip(masks) {
        let v = tape.constant(f.tensor().clone());
        let v = tape.reshape(v, vec![f.pixels(), f.channels()])?;
        normalized.push(tape.l2_normalize(v)?);
        targets.push(targets_for(classifier, m)?);
    }
    let w = tape.constant(classifier.matrix());
    let wu = tape.constant(updated.matrix());
    let all = tape.concat(&normalized)?;
    let logits = cosine_logits_on(&mut tape, all, w, classifier.alpha())?;
    let l_cls = tape.softmax_cross_entropy(logits, targets.concat())?;
    let q: Vec<Var> = query.iter().map(|&i| normalized[i]).collect();
    let q = tape.concat(&q)?;
    let q_logits = cosine_logits_on(&mut tape, q, wu, updated.alpha())?;
    let qt: Vec<Option<usize>> = query.iter().flat_map(|&i| targets[i].iter().copied()).collect();
    let l_update = tape.softmax_cross_entropy(q_logits, qt)?;
    Ok((tape.value(l_cls).item() + tape.value(l_update).item()) * S::of(0.5))
}

/// Everything the optimizer carries between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S> {
    pub kind: TrainingKind,
    pub backbone: Backbone<S>,
    pub classifier: Classifier<S>,
    pub gamma: Option<GammaNet<S>>,
    /// Momentum buffers aligned with [`TrainState::params`].
    pub velocity: Vec<Tensor<S>>,
    pub step: usize,
    /// Mean γ of each completed step; NaN when no class was fused.
    pub gamma_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub l_cls: f64,
    pub l_update: Option<f64>,
    pub loss: f64,
    pub mean_gamma: Option<f64>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<S: Scalar> TrainState<S> {
    /// Fresh parameters for `base_ids` (background included).
    pub fn init(config: &TrainConfig, kind: TrainingKind, base_ids: &[u8]) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(config.embed_dim, config.layers, mix(config.seed, 1))?;
        let classifier = Classifier::init_base(base_ids, config.embed_dim, S::of(config.alpha), mix(config.seed, 2))?;
        let gamma = (kind == TrainingKind::Full).then(|| GammaNet::init(config.embed_dim, mix(config.seed, 3)));
        let mut state = Self {
            kind,
            backbone,
            classifier,
            gamma,
            velocity: Vec::new(),
            step: 0,
            gamma_trace: Vec::new(),
        };
        state.velocity = state.params().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Ok(state)
    }

    /// Trainable tensors in the order used by the optimizer.
    pub fn params(&self) -> Vec<Tensor<S>> {
        let mut out: Vec<Tensor<S>> = self
            .backbone
            .layers()
            .iter()
            .flat_map(|l| [l.kernel.clone(), l.bias.clone()])
            .collect();
        out.push(self.classifier.matrix());
        if let Some(g) = &self.gamma {
            out.extend(g.tensors().into_iter().map(|(_, t)| t.clone()));
        }
        out
    }

    fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        let mut it = params.into_iter();
        for l in self.backbone.layers_mut() {
            l.kernel = it.next().expect("kernel");
            l.bias = it.next().expect("bias");
        }
        let m = it.next().expect("classifier");
        for (j, id) in self.classifier.ids().into_iter().enumerate() {
            self.classifier.set_prototype(id, m.row(j).to_vec())?;
        }
        if let Some(g) = &mut self.gamma {
            g.w1 = it.next().expect("w1");
            g.b1 = it.next().expect("b1");
            g.w2 = it.next().expect("w2");
            g.b2 = it.next().expect("b2");
        }
        Ok(())
    }

    /// Records the parameters as trainable leaves.
    pub fn record(&self, tape: &mut Tape<S>) -> ParamVars {
        let layers = self.backbone.record(tape, true);
        let classifier = tape.leaf(self.classifier.matrix().with_grad());
        let gamma = self.gamma.as_ref().map(|g| g.record(tape, true));
        ParamVars {
            layers,
            classifier,
            gamma,
        }
    }

    /// Mean γ over the last tenth of the recorded steps that fused a class.
    pub fn converged_gamma(&self) -> Option<f64> {
        let n = self.gamma_trace.len();
        let window = n.div_ceil(10).max(1);
        let tail: Vec<f64> = self.gamma_trace[n.saturating_sub(window)..]
            .iter()
            .copied()
            .filter(|g| g.is_finite())
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// The batch and class draws of step `step`; a pure function of the seed
/// and step so that interrupted runs resume exactly.
pub fn step_draw(seed: u64, step: usize, data: &[Sample<impl Scalar>], batch_size: usize) -> Result<(Vec<usize>, TrainBatch, FakeSplit)> {
    if data.len() < batch_size {
        return Err(Error::Config(format!(
            "{} training samples cannot fill a batch of {batch_size}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5EED_0000 + step as u64));
    let picks = rand::seq::index::sample(&mut rng, data.len(), batch_size).into_vec();
    let batch = partition_batch(batch_size, &mut rng)?;
    let sup: Vec<&LabelMask> = batch.fake_support.iter().map(|&i| &data[picks[i]].mask).collect();
    let split = select_fake_classes(&sup, &mut rng);
    Ok((picks, batch, split))
}

/// One SGD-with-momentum update from the dual loss of the step's batch.
pub fn train_step<S: Scalar>(state: &mut TrainState<S>, config: &TrainConfig, data: &[Sample<S>]) -> Result<StepStats> {
    let (picks, batch, split) = step_draw(config.seed, state.step, data, config.batch_size)?;
    let images: Vec<&Image<S>> = picks.iter().map(|&i| &data[i].image).collect();
    let masks: Vec<&LabelMask> = picks.iter().map(|&i| &data[i].mask).collect();

    let mut tape = Tape::new();
    let vars = state.record(&mut tape);
    let terms = loss_on(&mut tape, &vars, &state.classifier, state.kind, &images, &masks, &batch, &split)?;
    let loss = tape.value(terms.loss).item().f64();
    let l_cls = tape.value(terms.l_cls).item().f64();
    let l_update = terms.l_update.map(|v| tape.value(v).item().f64());
    let mean_gamma = (!terms.gammas.is_empty()).then(|| {
        terms.gammas.iter().map(|&g| tape.value(g).item().f64()).sum::<f64>() / terms.gammas.len() as f64
    });
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss {loss} at step {}", state.step)));
    }
    let grads = tape.backward(terms.loss)?;

    let lr = S::of(config.lr_at(state.step));
    let mu = S::of(config.momentum);
    let mut params = state.params();
    for ((p, v), var) in params.iter_mut().zip(state.velocity.iter_mut()).zip(vars.all()) {
        let g = grads.data(var);
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
        if !p.is_finite() {
            return Err(Error::Numerical(format!("non-finite parameter after step {}", state.step)));
        }
    }
    state.set_params(params)?;
    let stats = StepStats {
        step: state.step,
        l_cls,
        l_update,
        loss,
        mean_gamma,
    };
    state.gamma_trace.push(mean_gamma.unwrap_or(f64::NAN));
    state.step += 1;
    Ok(stats)
}

/// Checks that training masks only use trained ids.
pub fn check_training_data<S: Scalar>(classifier: &Classifier<S>, data: &[Sample<S>]) -> Result<()> {
    for (i, s) in data.iter().enumerate() {
        for c in s.mask.classes() {
            if classifier.role_of(c) != Some(Role::Base) {
                return Err(Error::Data(format!("training sample {i} contains non-base class {c}")));
            }
        }
    }
    Ok(())
}

/// Runs steps until `until` (at most `config.steps`), calling `on_step`
/// after each one.
pub fn train_until<S: Scalar>(
    state: &mut TrainState<S>,
    config: &TrainConfig,
    data: &[Sample<S>],
    until: usize,
    mut on_step: impl FnMut(&StepStats),
) -> Result<()> {
    check_training_data(&state.classifier, data)?;
    let end = until.min(config.steps);
    while state.step < end {
        let stats = train_step(state, config, data)?;
        on_step(&stats);
    }
    Ok(())
}

pub fn train<S: Scalar>(
    config: &TrainConfig,
    kind: TrainingKind,
    base_ids: &[u8],
    data: &[Sample<S>],
    on_step: impl FnMut(&StepStats),
) -> Result<TrainState<S>> {
    let mut state = TrainState::init(config, kind, base_ids)?;
    train_until(&mut state, config, data, config.steps, on_step)?;
    Ok(state)
}

/// Finite-difference check of the full dual loss with respect to every
/// trainable parameter on a toy batch (`B = 4`, 8×8 images, `c = 8`).
/// `analytic_scale != 1` simulates a broken backward pass.
pub fn check_dual_loss_gradients(seed: u64, step: f64, tol: f64, analytic_scale: f64) -> Result<crate::gradcheck::GradCheckReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (side, batch) = (8usize, 4usize);
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for i in 0..batch {
        let data: Vec<f64> = (0..side * side * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        images.push(Image::new(side, side, data)?);
        let labels: Vec<u8> = (0..side * side)
            .map(|p| {
                let (y, x) = (p / side, p % side);
                if (y + x + i) % 11 == 0 {
                    IGNORE
                } else {
                    (((y / 4) * 2 + x / 4 + i) % 4) as u8
                }
            })
            .collect();
        masks.push(LabelMask::new(side, side, labels)?);
    }
    let config = TrainConfig {
        embed_dim: 8,
        layers: 2,
        seed,
        ..TrainConfig::default()
    };
    let state = TrainState::<f64>::init(&config, TrainingKind::Full, &[0, 1, 2, 3])?;
    let batch_split = TrainBatch {
        fake_support: vec![0, 1],
        fake_query: vec![2, 3],
    };
    let split = FakeSplit {
        fake_novel: [1].into_iter().collect(),
        fake_context: [2, 3].into_iter().collect(),
    };
    let params = state.params();
    let n_layers = state.backbone.layers().len();
    let classifier = state.classifier.clone();
    let image_refs: Vec<&Image<f64>> = images.iter().collect();
    let mask_refs: Vec<&LabelMask> = masks.iter().collect();
    let f = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let layers = (0..n_layers)
            .map(|i| LayerVars {
                kernel: v[2 * i],
                bias: v[2 * i + 1],
            })
            .collect();
        let g = 2 * n_layers + 1;
        let vars = ParamVars {
            layers,
            classifier: v[2 * n_layers],
            gamma: Some(GammaVars {
                w1: v[g],
                b1: v[g + 1],
                w2: v[g + 2],
                b2: v[g + 3],
            }),
        };
        let terms = loss_on(
            tape,
            &vars,
            &classifier,
            TrainingKind::Full,
            &image_refs,
            &mask_refs,
            &batch_split,
            &split,
        )?;
        Ok(terms.loss)
    };
    crate::gradcheck::check_with_hook(&f, &params, step, tol, analytic_scale)
}

pub const LOSS_CSV_HEADER: &str = "step,l_cls,l_update,loss,mean_gamma";

pub fn loss_csv_row(s: &StepStats) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    format!("{},{},{},{},{}", s.step, s.l_cls, opt(s.l_update), s.loss, opt(s.mean_gamma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes_follow_floor_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = partition_batch(5, &mut rng).unwrap();
        assert_eq!((b.fake_support.len(), b.fake_query.len()), (2, 3));
        let b = partition_batch(4, &mut rng).unwrap();
        assert_eq!((b.fake_support.len(), b.fake_query.len()), (2, 2));
        assert!(matches!(partition_batch(3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn partition_is_deterministic() {
        let a = partition_batch(8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = partition_batch(8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.fake_support.iter().chain(&a.fake_query).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn fake_class_counts() {
        let mut labels = vec![0u8; 64];
        for (i, c) in [1u8, 2, 3, 4, 5].iter().enumerate() {
            labels[i] = *c;
        }
        labels[10] = IGNORE;
        let m = LabelMask::new(8, 8, labels).unwrap();
        let s = select_fake_classes(&[&m], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((s.fake_novel.len(), s.fake_context.len()), (2, 3));
        assert!(s.fake_novel.is_disjoint(&s.fake_context));
        assert!(!s.fake_novel.contains(&0) && !s.fake_context.contains(&0));

        let bg = LabelMask::filled(8, 8, 0);
        assert!(select_fake_classes(&[&bg], &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
        let mut one = LabelMask::filled(8, 8, 0);
        one.labels_mut()[3] = 4;
        let s = select_fake_classes(&[&one], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((s.fake_novel.len(), s.fake_context.len()), (0, 1));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            steps: 10,
            lr: 0.1,
            poly_power: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(7), 0.1);
        let cfg = TrainConfig { poly_power: 1.0, ..cfg };
        assert!((cfg.lr_at(5) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn variant_table() {
        assert_eq!(make_variant("capl_te").unwrap().training(), TrainingKind::Plain);
        assert_eq!(make_variant("convg_gamma").unwrap().training(), TrainingKind::Full);
        assert_eq!(make_variant("capl_tr").unwrap().fusion(), InferenceFusion::ImprintOnly);
        assert!(matches!(make_variant("nope"), Err(Error::Config(_))));
        for v in Variant::ALL {
            assert_eq!(make_variant(v.name()).unwrap(), v);
        }
    }

    #[test]
    fn converged_gamma_uses_last_tenth() {
        let mut s = TrainState::<f64>::init(
            &TrainConfig {
                embed_dim: 4,
                layers: 1,
                ..TrainConfig::default()
            },
            TrainingKind::Full,
            &[0, 1],
        )
        .unwrap();
        assert_eq!(s.converged_gamma(), None);
        s.gamma_trace = (0..20).map(|i| i as f64).collect();
        assert_eq!(s.converged_gamma(), Some(18.5));
        s.gamma_trace[19] = f64::NAN;
        assert_eq!(s.converged_gamma(), Some(18.0));
    }

    #[test]
    fn dual_loss_gradients_match_finite_differences() {
        let r = check_dual_loss_gradients(3, 1e-6, 1e-4, 1.0).unwrap();
        assert!(r.passed, "max rel error {}", r.max_rel_error);
        assert!(r.checked > 900);
        let broken = check_dual_loss_gradients(3, 1e-6, 1e-4, 1.01).unwrap();
        assert!(!broken.passed);
    }
}
