//! Differencing two captured forwards, head by head.

use super::{summarize_head, AggKind, BucketThresholds, KSummary};
use crate::math::Matrix;
use crate::model::{ForwardResult, HeadId};
use crate::Scalar;

/// A forward together with the k summaries of all its heads (same order as
/// `result.maps`).
#[derive(Debug, Clone)]
pub struct CapturedState<T> {
    pub result: ForwardResult<T>,
    pub summaries: Vec<KSummary>,
}

impl<T: Scalar> CapturedState<T> {
    pub fn new(result: ForwardResult<T>, agg: AggKind, thresholds: &BucketThresholds) -> Self {
        let summaries = result
            .maps
            .iter()
            .map(|m| summarize_head(m, agg, thresholds))
            .collect();
        Self { result, summaries }
    }

    pub fn agg(&self) -> Option<AggKind> {
        self.summaries.first().map(|s| s.agg)
    }

    pub fn summary(&self, head: &HeadId) -> Option<&KSummary> {
        self.result
            .maps
            .iter()
            .position(|m| m.head() == *head)
            .map(|i| &self.summaries[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadDelta<T> {
    pub head: HeadId,
    /// Current aggregate k minus the reference's.
    pub k_delta: f64,
    /// Current cells minus reference cells.
    pub cells: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceDiff<T> {
    pub heads: Vec<HeadDelta<T>>,
    /// Heads whose maps differ in shape (or are missing from the reference).
    pub excluded: Vec<HeadId>,
}

/// `current − reference` for every head present in both with equal map
/// dimensions. The reference is re-summarized if it used another
/// aggregation, so k deltas always compare like with like.
pub fn diff_snapshots<T: Scalar>(
    current: &CapturedState<T>,
    reference: &CapturedState<T>,
    thresholds: &BucketThresholds,
) -> InstanceDiff<T> {
    let mut heads = Vec::with_capacity(current.result.maps.len());
    let mut excluded = Vec::new();
    for (map, summary) in current.result.maps.iter().zip(&current.summaries) {
        let head = map.head();
        let Some(i) = reference.result.maps.iter().position(|m| m.head() == head) else {
            excluded.push(head);
            continue;
        };
        let ref_map = &reference.result.maps[i];
        if ref_map.shape() != map.shape() {
            excluded.push(head);
            continue;
        }
        let ref_k = if reference.summaries[i].agg == summary.agg {
            reference.summaries[i].aggregate
        } else {
            summarize_head(ref_map, summary.agg, thresholds).aggregate
        };
        let cells = map
            .cells()
            .sub(ref_map.cells())
            .expect("shapes checked above");
        heads.push(HeadDelta {
            head,
            k_delta: summary.aggregate - ref_k,
            cells,
        });
    }
    InstanceDiff { heads, excluded }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::AttentionMap;
    use crate::model::{AnswerDistribution, HeadKind};

    fn state(rows: &[Vec<f64>], head: HeadId, agg: AggKind) -> CapturedState<f64> {
        let labels = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
        let m = Matrix::from_rows(rows).unwrap();
        let map = AttentionMap::new(head, m, labels(rows.len()), labels(rows[0].len())).unwrap();
        let result = ForwardResult {
            logits: vec![0.0],
            answer: AnswerDistribution::from_scores(vec![1.0]),
            maps: vec![map],
            words: labels(rows.len()),
            objects: labels(rows[0].len()),
        };
        CapturedState::new(result, agg, &BucketThresholds::default())
    }

    #[test]
    fn self_diff_is_zero_and_antisymmetric() {
        let h = HeadId::new(HeadKind::Lang, 0, 0);
        let t = BucketThresholds::default();
        let a = state(&[vec![1.0, 0.0], vec![0.5, 0.5]], h, AggKind::Max);
        let b = state(&[vec![0.0, 1.0], vec![0.25, 0.75]], h, AggKind::Max);
        let d = diff_snapshots(&a, &a, &t);
        assert!(d.heads[0].cells.data().iter().all(|v| *v == 0.0));
        assert_eq!(d.heads[0].k_delta, 0.0);
        let ab = diff_snapshots(&a, &b, &t);
        let ba = diff_snapshots(&b, &a, &t);
        assert_eq!(ab.heads[0].cells.get(0, 0), 1.0);
        assert_eq!(ab.heads[0].cells.get(0, 1), -1.0);
        for (x, y) in ab.heads[0].cells.data().iter().zip(ba.heads[0].cells.data()) {
            assert_eq!(*x, -*y);
        }
        assert_eq!(ab.heads[0].k_delta, -ba.heads[0].k_delta);
    }

    #[test]
    fn mismatched_dims_are_excluded() {
        let h = HeadId::new(HeadKind::Lang, 0, 0);
        let a = state(&[vec![1.0, 0.0]], h, AggKind::Max);
        let b = state(&[vec![1.0, 0.0, 0.0]], h, AggKind::Max);
        let d = diff_snapshots(&a, &b, &BucketThresholds::default());
        assert!(d.heads.is_empty());
        assert_eq!(d.excluded, vec![h]);
    }

    #[test]
    fn reference_is_resummarized_under_current_agg() {
        let h = HeadId::new(HeadKind::Lang, 0, 0);
        let rows = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let a = state(&rows, h, AggKind::Min);
        let b = state(&rows, h, AggKind::Max);
        let d = diff_snapshots(&a, &b, &BucketThresholds::default());
        assert_eq!(d.heads[0].k_delta, 0.0);
    }
}
