//! Prototype mathematics: masked average pooling, multi-shot novel
//! prototypes, support-context accumulation for base classes, the γ network,
//! adaptive fusion, novel-class registration and the cosine classifier.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{shape_err, Error, Result};
use crate::image::{FeatureMap, Image, LabelMask, IGNORE};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Logit scale of the cosine classifier.
pub const DEFAULT_ALPHA: f64 = 10.0;

pub const BACKGROUND: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry<S> {
    pub id: u8,
    pub role: Role,
    pub prototype: Vec<S>,
}

/// Cosine classifier. Entries are kept sorted by class id, which is also
/// the tie-break order of [`Classifier::classify`].
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    entries: Vec<ClassEntry<S>>,
    alpha: S,
    dim: usize,
}

impl<S: Scalar> Classifier<S> {
    pub fn new(alpha: S, mut entries: Vec<ClassEntry<S>>) -> Result<Self> {
        if !(alpha > S::zero()) {
            return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
        }
        entries.sort_by_key(|e| e.id);
        if entries.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Config("duplicate class id in classifier".into()));
        }
        if entries.iter().any(|e| e.id == IGNORE) {
            return Err(Error::Config(format!("class id {IGNORE} is reserved for ignore")));
        }
        match entries.iter().find(|e| e.id == BACKGROUND) {
            Some(e) if e.role == Role::Base => {}
            _ => return Err(Error::Config("background class 0 must be registered as base".into())),
        }
        let dim = entries[0].prototype.len();
        if dim == 0 || entries.iter().any(|e| e.prototype.len() != dim) {
            return Err(shape_err!("classifier prototypes must share one non-zero length"));
        }
        Ok(Self { entries, alpha, dim })
    }

    /// Base-only classifier from `(m, c)` rows, uniformly initialized in
    /// `[-1, 1]`.
    pub fn init_base(ids: &[u8], dim: usize, alpha: S, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = ids
            .iter()
            .map(|&id| ClassEntry {
                id,
                role: Role::Base,
                prototype: (0..dim).map(|_| S::of(rng.gen_range(-1.0..1.0))).collect(),
            })
            .collect();
        Self::new(alpha, entries)
    }

    pub fn alpha(&self) -> S {
        self.alpha
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry<S>] {
        &self.entries
    }

    pub fn ids(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<u8> {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.id).collect()
    }

    pub fn index_of(&self, id: u8) -> Option<usize> {
        self.entries.binary_search_by_key(&id, |e| e.id).ok()
    }

    pub fn role_of(&self, id: u8) -> Option<Role> {
        self.index_of(id).map(|i| self.entries[i].role)
    }

    pub fn prototype(&self, id: u8) -> Option<&[S]> {
        self.index_of(id).map(|i| self.entries[i].prototype.as_slice())
    }

    pub fn set_prototype(&mut self, id: u8, p: Vec<S>) -> Result<()> {
        if p.len() != self.dim {
            return Err(shape_err!("prototype of length {} for a {}-dim classifier", p.len(), self.dim));
        }
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::Config(format!("class {id} is not registered")))?;
        self.entries[i].prototype = p;
        Ok(())
    }

    pub fn insert(&mut self, entry: ClassEntry<S>) -> Result<()> {
        if entry.prototype.len() != self.dim {
            return Err(shape_err!("prototype of length {} for a {}-dim classifier", entry.prototype.len(), self.dim));
        }
        match self.entries.binary_search_by_key(&entry.id, |e| e.id) {
            Ok(_) => Err(Error::Config(format!("class {} is already registered", entry.id))),
            Err(pos) => {
                self.entries.insert(pos, entry);
                Ok(())
            }
        }
    }

    /// Prototypes stacked as an `(m, c)` tensor in entry order.
    pub fn matrix(&self) -> Tensor<S> {
        let data = self.entries.iter().flat_map(|e| e.prototype.iter().copied()).collect();
        Tensor::new(vec![self.entries.len(), self.dim], data).expect("rows share dim")
    }

    /// `α·cos(F(x, y), p_i)` for every pixel and class, and the argmax label
    /// map (ties go to the lower class id).
    pub fn classify(&self, features: &FeatureMap<S>) -> Result<(LabelMask, Tensor<S>)> {
        if features.channels() != self.dim {
            return Err(shape_err!(
                "features have {} channels, classifier expects {}",
                features.channels(),
                self.dim
            ));
        }
        let protos: Vec<Vec<S>> = self.entries.iter().map(|e| tensor::l2_normalize(&e.prototype)).collect();
        let m = protos.len();
        let mut logits = Vec::with_capacity(features.pixels() * m);
        let mut labels = Vec::with_capacity(features.pixels());
        for p in 0..features.pixels() {
            let f = tensor::l2_normalize(features.pixel(p));
            let (mut best, mut best_z) = (0, S::neg_infinity());
            for (i, q) in protos.iter().enumerate() {
                let cos = tensor::dot(&f, q).max(-S::one()).min(S::one());
                let z = self.alpha * cos;
                if z > best_z {
                    best = i;
                    best_z = z;
                }
                logits.push(z);
            }
            labels.push(self.entries[best].id);
        }
        let logits = Tensor::new(vec![features.height(), features.width(), m], logits)?;
        Ok((LabelMask::new(features.height(), features.width(), labels)?, logits))
    }

    pub fn predict(&self, features: &FeatureMap<S>) -> Result<LabelMask> {
        self.classify(features).map(|(m, _)| m)
    }

    pub fn cast<T: Scalar>(&self) -> Classifier<T> {
        Classifier {
            entries: self
                .entries
                .iter()
                .map(|e| ClassEntry {
                    id: e.id,
                    role: e.role,
                    prototype: e.prototype.iter().map(|v| T::of(v.f64())).collect(),
                })
                .collect(),
            alpha: T::of(self.alpha.f64()),
            dim: self.dim,
        }
    }
}

/// Masked average pooling: `Σ m∘F / Σ m`.
pub fn pool_prototype<S: Scalar>(features: &FeatureMap<S>, mask: &[bool]) -> Result<Vec<S>> {
    let (sum, count) = masked_sum(features, mask)?;
    if count == 0 {
        return Err(Error::EmptyMask("mask selects no pixels".into()));
    }
    let n = S::of(count as f64);
    Ok(sum.into_iter().map(|v| v / n).collect())
}

fn masked_sum<S: Scalar>(features: &FeatureMap<S>, mask: &[bool]) -> Result<(Vec<S>, usize)> {
    if mask.len() != features.pixels() {
        return Err(shape_err!("mask has {} pixels, features {}", mask.len(), features.pixels()));
    }
    let mut sum = vec![S::zero(); features.channels()];
    let mut count = 0;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (acc, &v) in sum.iter_mut().zip(features.pixel(p)) {
            *acc += v;
        }
        count += 1;
    }
    Ok((sum, count))
}

/// Mean over shots of per-shot pooled prototypes. Shots whose mask is empty
/// are skipped; all-empty is an error.
pub fn form_novel_prototype<S: Scalar>(shots: &[(&FeatureMap<S>, Vec<bool>)]) -> Result<Vec<S>> {
    let mut acc: Option<Vec<S>> = None;
    let mut used = 0usize;
    for (f, m) in shots {
        let p = match pool_prototype(f, m) {
            Ok(p) => p,
            Err(Error::EmptyMask(_)) => continue,
            Err(e) => return Err(e),
        };
        match acc.as_mut() {
            None => acc = Some(p),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&p) {
                    *x += *y;
                }
            }
        }
        used += 1;
    }
    let acc = acc.ok_or_else(|| Error::EmptyMask("every shot has an empty mask".into()))?;
    let k = S::of(used as f64);
    Ok(acc.into_iter().map(|v| v / k).collect())
}

/// Pixel-weighted mean of `class` features over every support sample.
/// Returns the zero vector and count 0 when the class never appears.
pub fn accumulate_context_prototype<S: Scalar>(
    features: &[FeatureMap<S>],
    masks: &[LabelMask],
    class: u8,
) -> Result<(Vec<S>, usize)> {
    if features.len() != masks.len() {
        return Err(shape_err!("{} feature maps for {} masks", features.len(), masks.len()));
    }
    let dim = features.first().map(|f| f.channels()).unwrap_or(0);
    let mut sum = vec![S::zero(); dim];
    let mut count = 0;
    // one running sum across all samples, pixels in row-major order
    for (f, m) in features.iter().zip(masks) {
        if m.labels().len() != f.pixels() || f.channels() != dim {
            return Err(shape_err!("support feature map does not match its mask or the other maps"));
        }
        for (p, _) in m.labels().iter().enumerate().filter(|(_, &l)| l == class) {
            for (acc, &v) in sum.iter_mut().zip(f.pixel(p)) {
                *acc += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Ok((vec![S::zero(); dim], 0));
    }
    let n = S::of(count as f64);
    Ok((sum.into_iter().map(|v| v / n).collect(), count))
}

/// `γ·p_cls + (1 − γ)·p_feat`.
pub fn fuse_prototype<S: Scalar>(p_cls: &[S], p_feat: &[S], gamma: S) -> Result<Vec<S>> {
    if !(gamma >= S::zero() && gamma <= S::one()) {
        return Err(Error::Range(format!("gamma {gamma} outside [0, 1]")));
    }
    if p_cls.len() != p_feat.len() {
        return Err(shape_err!("fusing prototypes of length {} and {}", p_cls.len(), p_feat.len()));
    }
    let rest = S::one() - gamma;
    Ok(p_cls.iter().zip(p_feat).map(|(&a, &b)| gamma * a + rest * b).collect())
}

/// Two-layer MLP producing the fusion weight:
/// `sigmoid(W2ᵀ·relu(W1ᵀ·[p_cls; p_feat] + b1) + b2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaNet<S> {
    /// `(2c, c)`
    pub w1: Tensor<S>,
    /// `(c)`
    pub b1: Tensor<S>,
    /// `(c, 1)`
    pub w2: Tensor<S>,
    /// `(1)`
    pub b2: Tensor<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct GammaVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl<S: Scalar> GammaNet<S> {
    pub fn zeros(c: usize) -> Self {
        Self {
            w1: Tensor::zeros(vec![2 * c, c]),
            b1: Tensor::zeros(vec![c]),
            w2: Tensor::zeros(vec![c, 1]),
            b2: Tensor::zeros(vec![1]),
        }
    }

    /// Uniform `[-s, s]`, `s = sqrt(1 / fan_in)` per layer.
    pub fn init(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |shape: Vec<usize>, fan_in: usize| {
            let s = (1.0 / fan_in as f64).sqrt();
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| S::of(rng.gen_range(-s..=s))).collect()).expect("sized")
        };
        Self {
            w1: fill(vec![2 * c, c], 2 * c),
            b1: fill(vec![c], 2 * c),
            w2: fill(vec![c, 1], c),
            b2: fill(vec![1], c),
        }
    }

    pub fn from_parts(w1: Tensor<S>, b1: Tensor<S>, w2: Tensor<S>, b2: Tensor<S>) -> Result<Self> {
        let c = b1.len();
        if w1.shape() != [2 * c, c] || b1.shape() != [c] || w2.shape() != [c, 1] || b2.shape() != [1] {
            return Err(shape_err!(
                "gamma net shapes w1 {:?} b1 {:?} w2 {:?} b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            ));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn dim(&self) -> usize {
        self.b1.len()
    }

    pub fn forward(&self, p_cls: &[S], p_feat: &[S]) -> Result<S> {
        let c = self.dim();
        if p_cls.len() != c || p_feat.len() != c {
            return Err(shape_err!(
                "gamma net expects two {c}-vectors, got {} and {}",
                p_cls.len(),
                p_feat.len()
            ));
        }
        let mut hidden = self.b1.data().to_vec();
        for (i, &x) in p_cls.iter().chain(p_feat).enumerate() {
            for (acc, &w) in hidden.iter_mut().zip(self.w1.row(i)) {
                *acc += x * w;
            }
        }
        let mut z = self.b2.item();
        for (h, &w) in hidden.iter().zip(self.w2.data()) {
            if *h > S::zero() {
                z += *h * w;
            }
        }
        Ok(tensor::sigmoid(z))
    }

    pub fn record(&self, tape: &mut Tape<S>, trainable: bool) -> GammaVars {
        let mut leaf = |t: &Tensor<S>| {
            let mut t = t.clone();
            t.requires_grad = trainable;
            tape.leaf(t)
        };
        GammaVars {
            w1: leaf(&self.w1),
            b1: leaf(&self.b1),
            w2: leaf(&self.w2),
            b2: leaf(&self.b2),
        }
    }

    /// Differentiable γ as a one-element tensor.
    pub fn forward_on(tape: &mut Tape<S>, vars: GammaVars, p_cls: Var, p_feat: Var) -> Result<Var> {
        let x = tape.concat(&[p_cls, p_feat])?;
        let h = tape.linear(x, vars.w1, vars.b1)?;
        let h = tape.relu(h)?;
        let z = tape.linear(h, vars.w2, vars.b2)?;
        tape.sigmoid(z)
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<S>); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn cast<T: Scalar>(&self) -> GammaNet<T> {
        GammaNet {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

/// `γ·a + (1 − γ)·b` on the tape, with `γ` a one-element tensor.
pub fn fuse_on<S: Scalar>(tape: &mut Tape<S>, p_cls: Var, p_feat: Var, gamma: Var) -> Result<Var> {
    let rest = tape.affine(gamma, -S::one(), S::one())?;
    let a = tape.mul_scalar(p_cls, gamma)?;
    let b = tape.mul_scalar(p_feat, rest)?;
    tape.add(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSample<S> {
    pub image: Image<S>,
    pub mask: LabelMask,
    /// The novel class this shot was drawn for.
    pub class: u8,
}

/// `K` labeled shots for each of `N` novel classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet<S> {
    samples: Vec<SupportSample<S>>,
}

impl<S: Scalar> SupportSet<S> {
    pub fn new(samples: Vec<SupportSample<S>>) -> Result<Self> {
        let mut per_class: BTreeMap<u8, usize> = BTreeMap::new();
        for s in &samples {
            *per_class.entry(s.class).or_default() += 1;
            if s.mask.height() != s.image.height() || s.mask.width() != s.image.width() {
                return Err(shape_err!("support mask and image sizes differ"));
            }
        }
        let mut counts = per_class.values();
        if let Some(&k) = counts.next() {
            if counts.any(|&n| n != k) {
                return Err(Error::Config(format!("novel classes have unequal shot counts: {per_class:?}")));
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[SupportSample<S>] {
        &self.samples
    }

    pub fn classes(&self) -> BTreeSet<u8> {
        self.samples.iter().map(|s| s.class).collect()
    }

    pub fn shots(&self) -> usize {
        let n = self.classes().len();
        if n == 0 {
            0
        } else {
            self.samples.len() / n
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn masks(&self) -> Vec<LabelMask> {
        self.samples.iter().map(|s| s.mask.clone()).collect()
    }
}

/// How base prototypes react to support context at registration time.
#[derive(Clone, Copy, Debug)]
pub enum Fusion<'a, S> {
    /// Novel rows are imprinted; base rows are left alone.
    ImprintOnly,
    /// γ from the learned network, per class.
    Adaptive(&'a GammaNet<S>),
    /// One shared γ for every enriched class.
    Fixed(S),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Enrichment<S> {
    pub class: u8,
    pub gamma: S,
    pub pixels: usize,
}

/// Appends novel prototypes and enriches base prototypes of classes seen
/// in the supports using the learned γ network.
pub fn register_novel_classes<S: Scalar>(
    classifier: &Classifier<S>,
    net: &GammaNet<S>,
    backbone: &Backbone<S>,
    supports: &SupportSet<S>,
    min_pixels: usize,
) -> Result<Classifier<S>> {
    let features = support_features(backbone, supports)?;
    register_with_features(classifier, Fusion::Adaptive(net), supports, &features, min_pixels).map(|(c, _)| c)
}

pub fn support_features<S: Scalar>(backbone: &Backbone<S>, supports: &SupportSet<S>) -> Result<Vec<FeatureMap<S>>> {
    supports
        .samples()
        .iter()
        .map(|s| backbone.extract_features(&s.image))
        .collect()
}

/// Registration from precomputed support features (aligned with
/// `supports.samples()`). Returns the new classifier and the base classes
/// that were enriched.
pub fn register_with_features<S: Scalar>(
    classifier: &Classifier<S>,
    fusion: Fusion<'_, S>,
    supports: &SupportSet<S>,
    features: &[FeatureMap<S>],
    min_pixels: usize,
) -> Result<(Classifier<S>, Vec<Enrichment<S>>)> {
    if features.len() != supports.samples().len() {
        return Err(shape_err!("{} feature maps for {} support samples", features.len(), supports.samples().len()));
    }
    let novel = supports.classes();
    for &u in &novel {
        if classifier.index_of(u).is_some() {
            return Err(Error::Config(format!("novel class {u} is already registered")));
        }
    }
    for s in supports.samples() {
        if let Some(bad) = s
            .mask
            .labels()
            .iter()
            .find(|&&l| l != IGNORE && !novel.contains(&l) && classifier.index_of(l).is_none())
        {
            return Err(Error::Data(format!("support mask contains unregistered class {bad}")));
        }
    }

    let mut out = classifier.clone();
    let mut enriched = Vec::new();
    let masks = supports.masks();
    if !matches!(fusion, Fusion::ImprintOnly) {
        for entry in classifier.entries().iter().filter(|e| e.role == Role::Base) {
            let (p_feat, pixels) = accumulate_context_prototype(features, &masks, entry.id)?;
            if pixels == 0 || pixels < min_pixels {
                continue;
            }
            let gamma = match fusion {
                Fusion::Adaptive(net) => net.forward(&entry.prototype, &p_feat)?,
                Fusion::Fixed(g) => g,
                Fusion::ImprintOnly => unreachable!(),
            };
            out.set_prototype(entry.id, fuse_prototype(&entry.prototype, &p_feat, gamma)?)?;
            enriched.push(Enrichment {
                class: entry.id,
                gamma,
                pixels,
            });
        }
    }
    for &u in &novel {
        let shots: Vec<(&FeatureMap<S>, Vec<bool>)> = supports
            .samples()
            .iter()
            .zip(features)
            .filter(|(s, _)| s.class == u)
            .map(|(s, f)| (f, s.mask.binary(u)))
            .collect();
        let prototype = form_novel_prototype(&shots)
            .map_err(|_| Error::EmptyMask(format!("novel class {u} has no pixels in any of its shots")))?;
        out.insert(ClassEntry {
            id: u,
            role: Role::Novel,
            prototype,
        })?;
    }
    Ok((out, enriched))
}
