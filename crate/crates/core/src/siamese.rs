//! Shared-weight feature branch, feature distance, contrastive loss and the
//! threshold rule that turns distances into pairing decisions.

use crate::error::{Error, Result};
use crate::nn::{Network, Trace};
use crate::tensor::{Scalar, Tensor};

/// 1 = same category, 0 = different.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairLabel(u8);

impl PairLabel {
    pub const MATCH: PairLabel = PairLabel(1);
    pub const NON_MATCH: PairLabel = PairLabel(0);

    pub fn new(y: u8) -> Result<Self> {
        match y {
            0 | 1 => Ok(PairLabel(y)),
            _ => Err(Error::Config(format!("pair label must be 0 or 1, got {y}"))),
        }
    }

    pub fn from_bool(same: bool) -> Self {
        PairLabel(same as u8)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_match(self) -> bool {
        self.0 == 1
    }
}

/// Hinge threshold of the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Margin(f64);

impl Margin {
    pub fn new(m: f64) -> Result<Self> {
        if m > 0.0 && m.is_finite() {
            Ok(Margin(m))
        } else {
            Err(Error::Config(format!("margin must be positive, got {m}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Margin {
    fn default() -> Self {
        Margin(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector<T> {
    pub values: Tensor<T>,
}

/// Runs the branch CNN. Both images of a pair go through the same `branch`.
pub fn extract_features<T: Scalar>(image: &Tensor<T>, branch: &Network<T>) -> Result<(FeatureVector<T>, Trace<T>)> {
    let (out, trace) = branch.forward(image)?;
    let n = out.len();
    Ok((
        FeatureVector {
            values: out.reshape(&[n])?,
        },
        trace,
    ))
}

pub fn euclidean_distance<T: Scalar>(a: &FeatureVector<T>, b: &FeatureVector<T>) -> Result<T> {
    if a.values.len() != b.values.len() {
        return Err(Error::dim(format!(
            "feature dimensions differ: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    Ok(a.values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<T>()
        .sqrt())
}

/// `(dd/da, dd/db) * upstream`. At `d = 0` both gradients are zero.
pub fn distance_backward<T: Scalar>(
    a: &FeatureVector<T>,
    b: &FeatureVector<T>,
    d: T,
    upstream: T,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.values.len() != b.values.len() {
        return Err(Error::dim(format!(
            "feature dimensions differ: {} vs {}",
            a.values.len(),
            b.values.len()
        )));
    }
    let n = a.values.len();
    if d <= T::zero() {
        return Ok((Tensor::zeros(&[n]), Tensor::zeros(&[n])));
    }
    let scale = upstream / d;
    let da: Vec<T> = a
        .values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(&x, &y)| (x - y) * scale)
        .collect();
    let db = da.iter().map(|&v| -v).collect();
    Ok((Tensor::new(&[n], da)?, Tensor::new(&[n], db)?))
}

/// `L = 1/(2N) * sum(y d^2 + (1 - y) max(margin - d, 0)^2)` and `dL/dd`.
pub fn contrastive_loss<T: Scalar>(d: &[T], y: &[PairLabel], margin: Margin) -> Result<(T, Vec<T>)> {
    if d.is_empty() {
        return Err(Error::EmptyBatch("contrastive loss needs at least one pair"));
    }
    if d.len() != y.len() {
        return Err(Error::dim(format!(
            "{} distances but {} labels",
            d.len(),
            y.len()
        )));
    }
    let n = T::from_usize(d.len()).expect("batch size fits scalar");
    let m = T::from_f64_lossy(margin.value());
    let two = T::one() + T::one();
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(d.len());
    for (&di, &yi) in d.iter().zip(y) {
        if yi.is_match() {
            total += di * di;
            grad.push(di / n);
        } else {
            let gap = (m - di).max(T::zero());
            total += gap * gap;
            grad.push(-gap / n);
        }
    }
    Ok((total / (two * n), grad))
}

/// `1` iff `d < threshold`.
pub fn decide_pairing<T: Scalar>(d: T, threshold: T) -> PairLabel {
    PairLabel::from_bool(d < threshold)
}

/// Fraction of pairs whose decision at `threshold` matches the label.
pub fn pairing_accuracy(distances: &[f64], labels: &[PairLabel], threshold: f64) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    let correct = distances
        .iter()
        .zip(labels)
        .filter(|(&d, &y)| decide_pairing(d, threshold) == y)
        .count();
    correct as f64 / distances.len() as f64
}

/// Picks the accuracy-maximizing threshold among: half the smallest
/// distance, midpoints of consecutive distinct distances, and the largest
/// distance plus one. Ties go to the smallest candidate.
pub fn choose_threshold(distances: &[f64], labels: &[PairLabel]) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::EmptyBatch("threshold selection needs at least one pair"));
    }
    if distances.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} distances but {} labels",
            distances.len(),
            labels.len()
        )));
    }
    if distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite distance".into()));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]));

    // Threshold below everything: all pairs declared non-matching.
    let total_pos = labels.iter().filter(|y| y.is_match()).count();
    let mut correct = labels.len() - total_pos;
    let mut best = (correct, distances[order[0]] * 0.5);

    // Sweep upward; after consuming every pair with distance <= d_k they all
    // flip to "match".
    let mut k = 0;
    while k < order.len() {
        let dk = distances[order[k]];
        while k < order.len() && distances[order[k]] == dk {
            if labels[order[k]].is_match() {
                correct += 1;
            } else {
                correct -= 1;
            }
            k += 1;
        }
        let candidate = if k < order.len() {
            0.5 * (dk + distances[order[k]])
        } else {
            dk + 1.0
        };
        if correct > best.0 {
            best = (correct, candidate);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Vec<PairLabel> {
        v.iter().map(|&y| PairLabel::new(y).unwrap()).collect()
    }

    #[test]
    fn distance_examples() {
        let a = FeatureVector { values: Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap() };
        let b = FeatureVector { values: Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap() };
        assert_eq!(euclidean_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        let (da, db) = distance_backward(&a, &a, 0.0, 1.0).unwrap();
        assert!(da.data().iter().chain(db.data()).all(|&v| v == 0.0));
        let c = FeatureVector { values: Tensor::<f64>::zeros(&[3]) };
        assert!(matches!(euclidean_distance(&a, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn loss_hand_cases() {
        let m = Margin::new(1.0).unwrap();
        assert_eq!(contrastive_loss(&[0.0], &labels(&[1]), m).unwrap().0, 0.0);
        assert_eq!(contrastive_loss(&[1.3], &labels(&[0]), m).unwrap().0, 0.0);
        assert_eq!(contrastive_loss(&[2.0], &labels(&[1]), m).unwrap().0, 2.0);
        assert_eq!(contrastive_loss(&[0.5], &labels(&[0]), m).unwrap().0, 0.125);
    }

    #[test]
    fn loss_gradient_is_flat_beyond_margin() {
        let m = Margin::new(1.0).unwrap();
        let (_, g) = contrastive_loss::<f64>(&[1.0, 2.5, 0.25], &labels(&[0, 0, 0]), m).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[2] + 0.75 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_and_bad_margin() {
        assert!(matches!(
            contrastive_loss::<f64>(&[], &[], Margin::default()),
            Err(Error::EmptyBatch(_))
        ));
        assert!(Margin::new(0.0).is_err());
        assert!(PairLabel::new(2).is_err());
        assert!(matches!(choose_threshold(&[], &[]), Err(Error::EmptyBatch(_))));
    }

    #[test]
    fn decision_is_strict() {
        assert_eq!(decide_pairing(0.0, 0.3), PairLabel::MATCH);
        assert_eq!(decide_pairing(0.3, 0.3), PairLabel::NON_MATCH);
    }

    #[test]
    fn separable_threshold_is_midpoint() {
        let t = choose_threshold(&[0.1, 0.2], &labels(&[1, 0])).unwrap();
        assert!((t - 0.15).abs() < 1e-15);
    }

    #[test]
    fn all_positive_threshold_sits_above_max() {
        let d = [0.3, 0.1, 0.7];
        let y = labels(&[1, 1, 1]);
        let t = choose_threshold(&d, &y).unwrap();
        assert!(t > 0.7);
        assert_eq!(pairing_accuracy(&d, &y, t), 1.0);
    }

    #[test]
    fn all_negative_threshold_sits_below_min() {
        let d = [0.3, 0.1, 0.7];
        let y = labels(&[0, 0, 0]);
        let t = choose_threshold(&d, &y).unwrap();
        assert!(t <= 0.1);
        assert_eq!(pairing_accuracy(&d, &y, t), 1.0);
    }
}
