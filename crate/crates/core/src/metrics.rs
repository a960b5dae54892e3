//! Confusion matrices and mean intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::{LabelMask, IGNORE};
use crate::prototype::{Classifier, Role};
use crate::scalar::Scalar;

/// Which classes enter a mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoleFilter {
    Base,
    Novel,
    All,
}

impl RoleFilter {
    fn admits(self, role: Role) -> bool {
        match self {
            RoleFilter::All => true,
            RoleFilter::Base => role == Role::Base,
            RoleFilter::Novel => role == Role::Novel,
        }
    }
}

/// `counts[t * n + p]` counts pixels of true class `t` predicted as `p`,
/// both indexed by position in `classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: Vec<(u8, Role)>,
    index: Vec<Option<usize>>,
    counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub id: u8,
    pub role: Role,
    /// Absent when the class has no predicted or true pixels.
    pub iou: Option<f64>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[(u8, Role)]) -> Result<Self> {
        let mut index = vec![None; 256];
        for (i, &(id, _)) in classes.iter().enumerate() {
            if id == IGNORE || index[id as usize].is_some() {
                return Err(Error::Config(format!("invalid or duplicate class id {id}")));
            }
            index[id as usize] = Some(i);
        }
        let n = classes.len();
        Ok(Self {
            classes: classes.to_vec(),
            index,
            counts: vec![0; n * n],
        })
    }

    pub fn for_classifier<S: Scalar>(classifier: &Classifier<S>) -> Self {
        let classes: Vec<(u8, Role)> = classifier.entries().iter().map(|e| (e.id, e.role)).collect();
        Self::new(&classes).expect("classifier ids are unique")
    }

    pub fn classes(&self) -> &[(u8, Role)] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Count for (true id, predicted id); 0 for unknown ids.
    pub fn get(&self, truth: u8, pred: u8) -> u64 {
        match (self.index[truth as usize], self.index[pred as usize]) {
            (Some(t), Some(p)) => self.counts[t * self.len() + p],
            _ => 0,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose truth is not the ignore label.
    pub fn accumulate(&mut self, pred: &LabelMask, truth: &LabelMask) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(shape_err!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            ));
        }
        let n = self.len();
        for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
            if t == IGNORE {
                continue;
            }
            let ti = self.index[t as usize].ok_or_else(|| Error::Data(format!("truth contains unregistered class {t}")))?;
            let pi = self.index[p as usize].ok_or_else(|| Error::Data(format!("prediction contains unregistered class {p}")))?;
            self.counts[ti * n + pi] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::Config("cannot merge confusion matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn class_iou(&self) -> Vec<ClassIou> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let tp = self.counts[i * n + i];
                let row: u64 = self.counts[i * n..(i + 1) * n].iter().sum();
                let col: u64 = (0..n).map(|t| self.counts[t * n + i]).sum();
                let union = row + col - tp;
                ClassIou {
                    id: self.classes[i].0,
                    role: self.classes[i].1,
                    iou: (union > 0).then(|| tp as f64 / union as f64),
                }
            })
            .collect()
    }
}

/// Mean IoU over classes passing `filter`, skipping zero-union classes.
pub fn miou(cm: &ConfusionMatrix, filter: RoleFilter) -> Result<f64> {
    let vals: Vec<f64> = cm
        .class_iou()
        .into_iter()
        .filter(|c| filter.admits(c.role))
        .filter_map(|c| c.iou)
        .collect();
    if vals.is_empty() {
        return Err(Error::Degenerate(format!("no scored classes pass the {filter:?} filter")));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> ConfusionMatrix {
        ConfusionMatrix::new(&[(0, Role::Base), (1, Role::Novel)]).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let mut cm = two();
        let m = LabelMask::new(8, 8, (0..64).map(|i| (i % 2) as u8).collect()).unwrap();
        cm.accumulate(&m, &m).unwrap();
        assert_eq!(cm.get(0, 0) + cm.get(1, 1), 64);
        for f in [RoleFilter::Base, RoleFilter::Novel, RoleFilter::All] {
            assert_eq!(miou(&cm, f).unwrap(), 1.0);
        }
    }

    #[test]
    fn all_background_on_half_half() {
        let mut cm = two();
        let truth = LabelMask::new(8, 8, (0..64).map(|i| (i < 32) as u8).collect()).unwrap();
        cm.accumulate(&LabelMask::filled(8, 8, 0), &truth).unwrap();
        assert_eq!(miou(&cm, RoleFilter::All).unwrap(), 0.25);
    }

    #[test]
    fn ignore_and_unregistered() {
        let mut cm = two();
        cm.accumulate(&LabelMask::filled(8, 8, 1), &LabelMask::filled(8, 8, IGNORE)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.accumulate(&LabelMask::filled(8, 8, 0), &LabelMask::filled(8, 8, 7)).is_err());
        let base_only = ConfusionMatrix::new(&[(0, Role::Base)]).unwrap();
        assert!(matches!(miou(&base_only, RoleFilter::Novel), Err(Error::Degenerate(_))));
    }
}
