//! ContextShapes: procedurally rendered scenes of colored rectangles, disks
//! and triangles, with per-fold base/novel class splits and a controllable
//! co-occurrence between each novel class and a base-class partner.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassInfo, FileEntry, Manifest, Sample, SplitData, Splits};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::image::{Image, LabelMask, IGNORE};
use crate::pnm;
use crate::prototype::{Role, BACKGROUND};
use crate::scalar::Scalar;

/// `class` brings `partner` into the scene with probability `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoocRule {
    pub class: u8,
    pub partner: u8,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Foreground base classes per fold (background is extra).
    pub num_base_classes: usize,
    /// Novel classes per fold; the foreground classes split evenly into
    /// `(base + novel) / novel` folds.
    pub num_novel_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Explicit rules; when absent every class `k` is paired with the class
    /// one fold further along, with probability `p_cooc`.
    pub cooccurrence: Option<Vec<CoocRule>>,
    pub p_cooc: f64,
    /// Half-width of the uniform per-pixel color noise.
    pub noise: f64,
    pub train_scenes: usize,
    pub support_per_class: usize,
    pub test_scenes: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            num_base_classes: 6,
            num_novel_classes: 2,
            min_shapes: 2,
            max_shapes: 6,
            cooccurrence: None,
            p_cooc: 0.8,
            noise: 0.08,
            train_scenes: 400,
            support_per_class: 40,
            test_scenes: 200,
            seed: 2021,
        }
    }
}

const MIN_VISIBLE_PIXELS: usize = 8;
const MAX_RETRIES: usize = 200;
const NAMES: [&str; 9] = [
    "background",
    "red",
    "orange",
    "yellow",
    "green",
    "cyan",
    "blue",
    "violet",
    "magenta",
];

impl SceneConfig {
    pub fn foreground_classes(&self) -> usize {
        self.num_base_classes + self.num_novel_classes
    }

    pub fn folds(&self) -> usize {
        self.foreground_classes() / self.num_novel_classes.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fg = self.foreground_classes();
        if self.num_base_classes < 1 || self.num_novel_classes < 1 {
            return Err(Error::Config("need at least one base and one novel class".into()));
        }
        if fg > 200 {
            return Err(Error::Config(format!("{fg} foreground classes exceed the 8-bit label space")));
        }
        if fg % self.num_novel_classes != 0 {
            return Err(Error::Config(format!(
                "{fg} foreground classes do not divide into folds of {} novel classes",
                self.num_novel_classes
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scenes must be at least 8x8".into()));
        }
        if self.min_shapes < 1 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "shape range {}..={} is empty",
                self.min_shapes, self.max_shapes
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 0.5]", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.p_cooc) {
            return Err(Error::Config(format!("p_cooc {} outside [0, 1]", self.p_cooc)));
        }
        for r in self.rules() {
            if !(0.0..=1.0).contains(&r.p) {
                return Err(Error::Config(format!("co-occurrence p {} outside [0, 1]", r.p)));
            }
            let valid = |c: u8| c >= 1 && (c as usize) <= fg;
            if !valid(r.class) || !valid(r.partner) || r.class == r.partner {
                return Err(Error::Config(format!("invalid co-occurrence rule {r:?}")));
            }
        }
        Ok(())
    }

    pub fn rules(&self) -> Vec<CoocRule> {
        if let Some(r) = &self.cooccurrence {
            return r.clone();
        }
        let fg = self.foreground_classes();
        let n = self.num_novel_classes.max(1);
        (1..=fg)
            .map(|k| CoocRule {
                class: k as u8,
                partner: (((k - 1 + n) % fg) + 1) as u8,
                p: self.p_cooc,
            })
            .collect()
    }

    pub fn novel_classes(&self, split: usize) -> Result<BTreeSet<u8>> {
        if split >= self.folds() {
            return Err(Error::Config(format!("split {split} out of range 0..{}", self.folds())));
        }
        let n = self.num_novel_classes;
        Ok((split * n + 1..=split * n + n).map(|c| c as u8).collect())
    }

    pub fn base_classes(&self, split: usize) -> Result<BTreeSet<u8>> {
        let novel = self.novel_classes(split)?;
        Ok((0..=self.foreground_classes() as u8).filter(|c| !novel.contains(c)).collect())
    }

    /// Rules that apply in `split`: those of its novel classes. Their
    /// partners must be base classes of the split.
    pub fn rules_for(&self, split: usize) -> Result<Vec<CoocRule>> {
        let novel = self.novel_classes(split)?;
        let rules: Vec<CoocRule> = self.rules().into_iter().filter(|r| novel.contains(&r.class)).collect();
        if let Some(r) = rules.iter().find(|r| novel.contains(&r.partner)) {
            return Err(Error::Config(format!(
                "split {split}: partner {} of novel class {} is not a base class",
                r.partner, r.class
            )));
        }
        Ok(rules)
    }

    pub fn class_name(id: u8) -> String {
        NAMES
            .get(id as usize)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("class{id}"))
    }
}

/// Base color of a class: background is gray, foreground classes sit on an
/// evenly spaced hue wheel.
pub fn class_color(id: u8, foreground: usize) -> [f64; 3] {
    if id == BACKGROUND {
        return [0.4, 0.4, 0.4];
    }
    let hue = (id as f64 - 1.0) / foreground.max(1) as f64 * 6.0;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

#[derive(Clone, Copy, Debug)]
enum Geometry {
    Rect { cy: f64, cx: f64, ry: f64, rx: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Geometry {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Geometry::Rect { cy, cx, ry, rx } => (y - cy).abs() <= ry && (x - cx).abs() <= rx,
            Geometry::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Geometry::Triangle { pts } => {
                let side = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Geometry::Rect { cy, cx, .. } | Geometry::Disk { cy, cx, .. } => (cy, cx),
            Geometry::Triangle { pts } => (
                (pts[0].0 + pts[1].0 + pts[2].0) / 3.0,
                (pts[0].1 + pts[1].1 + pts[2].1) / 3.0,
            ),
        }
    }
}

struct Shape {
    class: u8,
    geom: Geometry,
    shade: f64,
}

fn random_geometry(rng: &mut ChaCha8Rng, h: usize, w: usize, near: Option<(f64, f64)>) -> Geometry {
    let side = h.min(w) as f64;
    let r = rng.gen_range(0.12 * side..=0.25 * side).max(2.0);
    let (cy, cx) = match near {
        Some((y, x)) => {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = rng.gen_range(0.8 * r..1.6 * r);
            (
                (y + d * a.sin()).clamp(0.0, h as f64 - 1.0),
                (x + d * a.cos()).clamp(0.0, w as f64 - 1.0),
            )
        }
        None => (rng.gen_range(r * 0.5..h as f64 - r * 0.5), rng.gen_range(r * 0.5..w as f64 - r * 0.5)),
    };
    match rng.gen_range(0..3) {
        0 => Geometry::Rect {
            cy,
            cx,
            ry: r * rng.gen_range(0.6..1.0),
            rx: r * rng.gen_range(0.6..1.0),
        },
        1 => Geometry::Disk { cy, cx, r },
        _ => {
            let t0: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let mut pts = [(0.0, 0.0); 3];
            for (i, p) in pts.iter_mut().enumerate() {
                let t = t0 + i as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.3..0.3);
                let rr = r * rng.gen_range(1.0..1.4);
                *p = (cy + rr * t.sin(), cx + rr * t.cos());
            }
            Geometry::Triangle { pts }
        }
    }
}

/// Picks the scene's classes in paint order. Rule partners are kept out of
/// the random draw whenever their rule class is present, and are painted
/// immediately beneath it.
fn plan_classes(
    config: &SceneConfig,
    foreground: &[u8],
    required: Option<u8>,
    rules: &[CoocRule],
    rng: &mut ChaCha8Rng,
) -> Vec<(u8, Option<usize>)> {
    let n = rng.gen_range(config.min_shapes..=config.max_shapes);
    let mut primary: Vec<u8> = (0..n).map(|_| *foreground.choose(rng).expect("non-empty")).collect();
    if let Some(c) = required {
        let slot = rng.gen_range(0..n);
        primary[slot] = c;
    }
    let firing: Vec<&CoocRule> = rules
        .iter()
        .filter(|r| primary.contains(&r.class) && foreground.contains(&r.partner))
        .collect();
    let banned: BTreeSet<u8> = firing.iter().map(|r| r.partner).collect();
    let pool: Vec<u8> = foreground.iter().copied().filter(|c| !banned.contains(c)).collect();
    for c in primary.iter_mut() {
        if banned.contains(c) {
            // a rule class that is also someone's partner stays put
            if !firing.iter().any(|r| r.class == *c) {
                *c = *pool.choose(rng).unwrap_or(c);
            }
        }
    }
    primary.shuffle(rng);
    let mut order: Vec<(u8, Option<usize>)> = Vec::new();
    let mut added = BTreeSet::new();
    for c in primary {
        if let Some(rule) = firing.iter().find(|r| r.class == c && !added.contains(&r.class)) {
            added.insert(rule.class);
            if rng.gen_bool(rule.p) {
                order.push((rule.partner, Some(order.len() + 1)));
            }
        }
        order.push((c, None));
    }
    order
}

/// Renders one scene. `allowed` may include background; an allowed set of
/// only background yields a plain textured image.
pub fn generate_scene<S: Scalar>(
    config: &SceneConfig,
    allowed: &BTreeSet<u8>,
    required: Option<u8>,
    rules: &[CoocRule],
    rng: &mut ChaCha8Rng,
) -> Result<(Image<S>, LabelMask)> {
    if allowed.is_empty() {
        return Err(Error::Config("allowed class set is empty".into()));
    }
    let (h, w) = (config.height, config.width);
    let foreground: Vec<u8> = allowed.iter().copied().filter(|&c| c != BACKGROUND).collect();
    if let Some(c) = required {
        if !foreground.contains(&c) {
            return Err(Error::Config(format!("required class {c} is not allowed")));
        }
    }
    let fg_total = config.foreground_classes();

    for _ in 0..MAX_RETRIES {
        let mut shapes: Vec<Shape> = Vec::new();
        if !foreground.is_empty() {
            let plan = plan_classes(config, &foreground, required, rules, rng);
            let mut geoms: Vec<Option<Geometry>> = vec![None; plan.len()];
            // anchors first so that partners can be placed against them
            for (i, (_, anchor)) in plan.iter().enumerate() {
                if anchor.is_none() {
                    geoms[i] = Some(random_geometry(rng, h, w, None));
                }
            }
            for (i, (_, anchor)) in plan.iter().enumerate() {
                if let Some(a) = anchor {
                    let near = geoms[*a].expect("anchor placed").center();
                    geoms[i] = Some(random_geometry(rng, h, w, Some(near)));
                }
            }
            for ((class, _), g) in plan.iter().zip(geoms) {
                shapes.push(Shape {
                    class: *class,
                    geom: g.expect("placed"),
                    shade: rng.gen_range(-0.08..0.08),
                });
            }
        }

        // paint index per pixel: 0 is background, i + 1 is shapes[i]
        let mut paint = vec![0usize; h * w];
        for (i, s) in shapes.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if s.geom.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        paint[y * w + x] = i + 1;
                    }
                }
            }
        }
        let class_at = |idx: usize| if idx == 0 { BACKGROUND } else { shapes[idx - 1].class };
        let mut labels = vec![BACKGROUND; h * w];
        let mut visible = vec![0usize; shapes.len() + 1];
        for y in 0..h {
            for x in 0..w {
                let p = paint[y * w + x];
                let mut edge = false;
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = paint[ny as usize * w + nx as usize];
                    if q < p && class_at(q) != class_at(p) {
                        edge = true;
                    }
                }
                labels[y * w + x] = if edge { IGNORE } else { class_at(p) };
                if !edge {
                    visible[p] += 1;
                }
            }
        }
        if visible[1..].iter().any(|&v| v < MIN_VISIBLE_PIXELS) {
            continue;
        }

        let mut data = Vec::with_capacity(h * w * 3);
        for &p in &paint {
            let (base, shade) = if p == 0 {
                (class_color(BACKGROUND, fg_total), 0.0)
            } else {
                let s = &shapes[p - 1];
                (class_color(s.class, fg_total), s.shade)
            };
            for ch in base {
                let noise = if config.noise > 0.0 {
                    rng.gen_range(-config.noise..=config.noise)
                } else {
                    0.0
                };
                let v = (ch + shade + noise).clamp(0.0, 1.0);
                // quantized so that the on-disk round trip is lossless
                data.push(S::of((v * 255.0).round() / 255.0));
            }
        }
        return Ok((Image::new(h, w, data)?, LabelMask::new(h, w, labels)?));
    }
    Err(Error::Generation(format!(
        "no valid placement after {MAX_RETRIES} attempts for a {h}x{w} scene"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Train,
    Support,
    Test,
}

impl Partition {
    fn tag(self) -> u64 {
        match self {
            Partition::Train => 1,
            Partition::Support => 2,
            Partition::Test => 3,
        }
    }

    pub fn dir(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Support => "support",
            Partition::Test => "test",
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per `(seed, split, partition, index)`.
pub fn scene_rng(seed: u64, split: usize, part: Partition, index: usize) -> ChaCha8Rng {
    let s = splitmix(splitmix(splitmix(seed) ^ split as u64) ^ part.tag()) ^ index as u64;
    ChaCha8Rng::seed_from_u64(splitmix(s))
}

struct SceneSpec {
    part: Partition,
    index: usize,
    required: Option<u8>,
}

fn scene_specs(config: &SceneConfig, novel: &BTreeSet<u8>) -> Vec<SceneSpec> {
    let mut specs: Vec<SceneSpec> = (0..config.train_scenes)
        .map(|index| SceneSpec {
            part: Partition::Train,
            index,
            required: None,
        })
        .collect();
    let mut index = 0;
    for &u in novel {
        for _ in 0..config.support_per_class {
            specs.push(SceneSpec {
                part: Partition::Support,
                index,
                required: Some(u),
            });
            index += 1;
        }
    }
    specs.extend((0..config.test_scenes).map(|index| SceneSpec {
        part: Partition::Test,
        index,
        required: None,
    }));
    specs
}

/// Generates every scene of one fold in memory.
pub fn generate_split<S: Scalar>(config: &SceneConfig, split: usize) -> Result<SplitData<S>> {
    config.validate()?;
    let novel = config.novel_classes(split)?;
    let base = config.base_classes(split)?;
    let all: BTreeSet<u8> = (0..=config.foreground_classes() as u8).collect();
    let rules = config.rules_for(split)?;
    let specs = scene_specs(config, &novel);
    let scenes: Vec<Sample<S>> = specs
        .par_iter()
        .map(|s| {
            let mut rng = scene_rng(config.seed, split, s.part, s.index);
            let allowed = if s.part == Partition::Train { &base } else { &all };
            generate_scene(config, allowed, s.required, &rules, &mut rng).map(|(image, mask)| Sample { image, mask })
        })
        .collect::<Result<_>>()?;
    let mut data = SplitData {
        split_index: split,
        seed: config.seed,
        classes: class_table(config, &novel),
        train: Vec::new(),
        support_pool: Vec::new(),
        test: Vec::new(),
    };
    for (spec, sample) in specs.iter().zip(scenes) {
        match spec.part {
            Partition::Train => data.train.push(sample),
            Partition::Support => data.support_pool.push(sample),
            Partition::Test => data.test.push(sample),
        }
    }
    Ok(data)
}

fn class_table(config: &SceneConfig, novel: &BTreeSet<u8>) -> Vec<ClassInfo> {
    (0..=config.foreground_classes() as u8)
        .map(|id| ClassInfo {
            id,
            name: SceneConfig::class_name(id),
            role: if novel.contains(&id) { Role::Novel } else { Role::Base },
        })
        .collect()
}

/// Writes one fold to `out_dir` (images, masks and `manifest.json`).
pub fn build_dataset(config: &SceneConfig, split: usize, out_dir: &Path) -> Result<Manifest> {
    let data: SplitData<f64> = generate_split(config, split)?;
    let write_part = |part: Partition, samples: &[Sample<f64>]| -> Result<Vec<FileEntry>> {
        samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let stem = format!("{}/{:04}", part.dir(), i);
                let entry = FileEntry {
                    image: format!("{stem}.ppm"),
                    mask: format!("{stem}.pgm"),
                };
                pnm::write_ppm(&out_dir.join(&entry.image), &s.image)?;
                pnm::write_pgm(&out_dir.join(&entry.mask), &s.mask)?;
                Ok(entry)
            })
            .collect()
    };
    let manifest = Manifest {
        classes: data.classes.clone(),
        splits: Splits {
            train: write_part(Partition::Train, &data.train)?,
            support_pool: write_part(Partition::Support, &data.support_pool)?,
            test: write_part(Partition::Test, &data.test)?,
        },
        split_index: split,
        seed: config.seed,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            train_scenes: 6,
            support_per_class: 3,
            test_scenes: 4,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn background_only_scene() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let allowed = [BACKGROUND].into_iter().collect();
        let (img, mask): (Image<f64>, _) = generate_scene(&cfg, &allowed, None, &[], &mut rng).unwrap();
        assert!(mask.labels().iter().all(|&l| l == BACKGROUND));
        assert!(img.data().iter().all(|&v| (v - 0.4).abs() <= cfg.noise + 1.0 / 255.0));
    }

    #[test]
    fn scene_is_deterministic_per_rng() {
        let cfg = small();
        let allowed: BTreeSet<u8> = (0..=8).collect();
        let a: (Image<f64>, _) = generate_scene(&cfg, &allowed, None, &cfg.rules(), &mut scene_rng(3, 0, Partition::Test, 5)).unwrap();
        let b: (Image<f64>, _) = generate_scene(&cfg, &allowed, None, &cfg.rules(), &mut scene_rng(3, 0, Partition::Test, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fold_partition_rule() {
        let cfg = SceneConfig::default();
        assert_eq!(cfg.folds(), 4);
        assert_eq!(cfg.novel_classes(0).unwrap().into_iter().collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(
            cfg.base_classes(0).unwrap().into_iter().collect::<Vec<_>>(),
            vec![0, 3, 4, 5, 6, 7, 8]
        );
        assert!(cfg.novel_classes(4).is_err());
        for split in 0..4 {
            let rules = cfg.rules_for(split).unwrap();
            assert_eq!(rules.len(), 2);
        }
    }

    #[test]
    fn config_validation() {
        let bad = SceneConfig {
            num_novel_classes: 4,
            ..SceneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SceneConfig {
            p_cooc: 1.5,
            ..SceneConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SceneConfig {
            cooccurrence: Some(vec![CoocRule { class: 1, partner: 42, p: 0.5 }]),
            ..SceneConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tiny_canvas_fails_generation() {
        let cfg = SceneConfig {
            height: 8,
            width: 8,
            min_shapes: 6,
            ..small()
        };
        let allowed: BTreeSet<u8> = (0..=8).collect();
        let r: Result<(Image<f64>, _)> = generate_scene(&cfg, &allowed, None, &[], &mut scene_rng(0, 0, Partition::Test, 0));
        assert!(matches!(r, Err(Error::Generation(_))));
    }

    #[test]
    fn hue_wheel_colors_are_distinct() {
        let cs: Vec<[f64; 3]> = (0..=8).map(|c| class_color(c, 8)).collect();
        for i in 0..cs.len() {
            for j in i + 1..cs.len() {
                let d: f64 = (0..3).map(|k| (cs[i][k] - cs[j][k]).abs()).sum();
                assert!(d > 0.2, "classes {i} and {j} too close");
            }
        }
    }
}
