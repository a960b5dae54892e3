//! On-disk dataset layout, loading, and support-set sampling.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, LabelMask};
use crate::pnm;
use crate::prototype::{Role, SupportSample, SupportSet};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassInfo {
    pub id: u8,
    pub name: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<FileEntry>,
    pub support_pool: Vec<FileEntry>,
    pub test: Vec<FileEntry>,
}

/// Contents of `manifest.json`. File paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub classes: Vec<ClassInfo>,
    pub splits: Splits,
    pub split_index: usize,
    pub seed: u64,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn ids_with(classes: &[ClassInfo], role: Role) -> BTreeSet<u8> {
    classes.iter().filter(|c| c.role == role).map(|c| c.id).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S> {
    pub image: Image<S>,
    pub mask: LabelMask,
}

/// One fold held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData<S> {
    pub split_index: usize,
    pub seed: u64,
    pub classes: Vec<ClassInfo>,
    pub train: Vec<Sample<S>>,
    pub support_pool: Vec<Sample<S>>,
    pub test: Vec<Sample<S>>,
}

impl<S: Scalar> SplitData<S> {
    /// Loads the fold described by `manifest_path`, checking that training
    /// masks only use base classes.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let root: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let load = |entries: &[FileEntry]| -> Result<Vec<Sample<S>>> {
            entries
                .iter()
                .map(|e| {
                    let image = pnm::read_ppm(&root.join(&e.image))?;
                    let mask = pnm::read_pgm(&root.join(&e.mask))?;
                    if image.height() != mask.height() || image.width() != mask.width() {
                        return Err(Error::Data(format!("{}: image and mask sizes differ", e.image)));
                    }
                    Ok(Sample { image, mask })
                })
                .collect()
        };
        let data = Self {
            split_index: manifest.split_index,
            seed: manifest.seed,
            train: load(&manifest.splits.train)?,
            support_pool: load(&manifest.splits.support_pool)?,
            test: load(&manifest.splits.test)?,
            classes: manifest.classes,
        };
        let novel = data.novel_ids();
        for (i, s) in data.train.iter().enumerate() {
            if let Some(c) = s.mask.classes().intersection(&novel).next() {
                return Err(Error::Data(format!("training mask {i} contains novel class {c}")));
            }
        }
        Ok(data)
    }

    pub fn base_ids(&self) -> BTreeSet<u8> {
        ids_with(&self.classes, Role::Base)
    }

    pub fn novel_ids(&self) -> BTreeSet<u8> {
        ids_with(&self.classes, Role::Novel)
    }

    /// Draws `k` distinct pool images per novel class, each containing that
    /// class.
    pub fn sample_support_set(&self, k: usize, seed: u64) -> Result<SupportSet<S>> {
        sample_support_set(&self.support_pool, &self.novel_ids(), k, seed)
    }

    pub fn cast<T: Scalar>(&self) -> SplitData<T> {
        let cast = |v: &[Sample<S>]| {
            v.iter()
                .map(|s| Sample {
                    image: s.image.cast(),
                    mask: s.mask.clone(),
                })
                .collect()
        };
        SplitData {
            split_index: self.split_index,
            seed: self.seed,
            classes: self.classes.clone(),
            train: cast(&self.train),
            support_pool: cast(&self.support_pool),
            test: cast(&self.test),
        }
    }
}

/// `(class, pool index)` pairs: `k` distinct pool images per novel class,
/// each containing that class, in class order.
pub fn sample_support_indices<S: Scalar>(
    pool: &[Sample<S>],
    novel: &BTreeSet<u8>,
    k: usize,
    seed: u64,
) -> Result<Vec<(u8, usize)>> {
    if k == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(novel.len() * k);
    for &u in novel {
        let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].mask.contains(u)).collect();
        if eligible.len() < k {
            return Err(Error::Data(format!(
                "support pool has {} images with class {u}, need {k}",
                eligible.len()
            )));
        }
        for j in rand::seq::index::sample(&mut rng, eligible.len(), k).into_vec() {
            out.push((u, eligible[j]));
        }
    }
    Ok(out)
}

pub fn support_set_from<S: Scalar>(pool: &[Sample<S>], picks: &[(u8, usize)]) -> Result<SupportSet<S>> {
    SupportSet::new(
        picks
            .iter()
            .map(|&(class, i)| SupportSample {
                image: pool[i].image.clone(),
                mask: pool[i].mask.clone(),
                class,
            })
            .collect(),
    )
}

pub fn sample_support_set<S: Scalar>(
    pool: &[Sample<S>],
    novel: &BTreeSet<u8>,
    k: usize,
    seed: u64,
) -> Result<SupportSet<S>> {
    support_set_from(pool, &sample_support_indices(pool, novel, k, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Vec<Sample<f64>> {
        let img = Image::new(8, 8, vec![0.5; 192]).unwrap();
        [1u8, 1, 2, 0, 2, 1]
            .iter()
            .map(|&c| {
                let mut mask = LabelMask::filled(8, 8, 0);
                mask.labels_mut()[0] = c;
                Sample { image: img.clone(), mask }
            })
            .collect()
    }

    #[test]
    fn support_sampling_is_seeded_and_eligible() {
        let novel: BTreeSet<u8> = [1, 2].into_iter().collect();
        let a = sample_support_set(&pool(), &novel, 2, 7).unwrap();
        let b = sample_support_set(&pool(), &novel, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shots(), 2);
        for s in a.samples() {
            assert!(s.mask.contains(s.class));
        }
    }

    #[test]
    fn undersized_pool_is_a_data_error() {
        let novel: BTreeSet<u8> = [2].into_iter().collect();
        assert!(matches!(sample_support_set(&pool(), &novel, 3, 0), Err(Error::Data(_))));
        assert!(matches!(sample_support_set(&pool(), &novel, 0, 0), Err(Error::Config(_))));
    }
}
