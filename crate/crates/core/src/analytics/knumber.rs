//! k-numbers: how many of a row's largest cells it takes to reach a share of
//! its attention mass, normalized by the row length.
//!
//! A value near `1/cols` marks a peaky row focused on one token; a value
//! near the energy level marks near-uniform attention. A head is summarized
//! by merging its per-row values with min, median or max, then discretized
//! into four buckets.

use serde::{Deserialize, Serialize};

use super::{AggKind, AttentionMap};
use crate::{Error, Result, Scalar};

/// Share of attention mass the k largest cells must cover.
pub const DEFAULT_ENERGY: f64 = 0.9;

/// Relative slack when comparing a cumulative sum against the energy
/// target, so `ceil(energy · n)` cells of a uniform row count as reaching it
/// despite rounding in `1/n`.
const CUMSUM_SLACK: f64 = 1e-9;

/// Accepted `|Σ row − 1|` for a row passed to [`k_number_row`].
pub const K_ROW_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KNumber {
    /// Number of cells needed.
    pub tokens: usize,
    /// `tokens / row length`, in `(0, 1]`.
    pub norm: f64,
}

/// Smallest count of largest cells whose sum reaches `energy` of the row.
///
/// Errors when the row is empty, has negative or non-finite cells, or does
/// not sum to one within `1e-4`, or when `energy ∉ (0, 1)`.
pub fn k_number_row<T: Scalar>(row: &[T], energy: f64) -> Result<KNumber> {
    if row.is_empty() {
        return Err(Error::invalid("k-number of an empty row"));
    }
    if !(energy > 0.0 && energy < 1.0) {
        return Err(Error::invalid(format!("energy {energy} outside (0, 1)")));
    }
    let mut cells: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
    if cells.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::invalid("row has negative or non-finite cells"));
    }
    cells.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = cells.iter().sum();
    if (total - 1.0).abs() > K_ROW_TOLERANCE {
        return Err(Error::invalid(format!("row sums to {total}, not 1")));
    }
    Ok(k_number_sorted(&cells, energy))
}

/// Scan over cells sorted descending. The total is summed in sorted order so
/// the result does not depend on the input permutation.
fn k_number_sorted(desc: &[f64], energy: f64) -> KNumber {
    let total: f64 = desc.iter().sum();
    let target = energy * total - CUMSUM_SLACK * total;
    let mut cum = 0.0;
    let mut tokens = desc.len();
    for (i, v) in desc.iter().enumerate() {
        cum += v;
        if cum >= target {
            tokens = i + 1;
            break;
        }
    }
    KNumber {
        tokens,
        norm: tokens as f64 / desc.len() as f64,
    }
}

/// Upper bounds of buckets 0, 1 and 2 on the normalized k; bucket 3 is
/// everything from the last bound to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketThresholds(pub [f64; 3]);

impl Default for BucketThresholds {
    fn default() -> Self {
        Self([0.12, 0.30, 0.60])
    }
}

impl BucketThresholds {
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.0;
        if 0.0 < a && a < b && b < c && c <= 1.0 {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "bucket thresholds {:?} must be increasing within (0, 1]",
                self.0
            )))
        }
    }
}

/// Bucket `0..=3` of a normalized k; bucket `b` covers
/// `[bound[b-1], bound[b])`.
pub fn bucketize(k_norm: f64, thresholds: &BucketThresholds) -> Result<u8> {
    if !(k_norm > 0.0 && k_norm <= 1.0) {
        return Err(Error::invalid(format!("k-number {k_norm} outside (0, 1]")));
    }
    Ok(thresholds.0.iter().take_while(|&&t| k_norm >= t).count() as u8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub per_row_k: Vec<f64>,
    pub aggregate: f64,
    pub agg: AggKind,
    pub bucket: u8,
}

/// k-numbers of every row of `map` at [`DEFAULT_ENERGY`], merged by `agg`.
pub fn summarize_head<T: Scalar>(
    map: &AttentionMap<T>,
    agg: AggKind,
    thresholds: &BucketThresholds,
) -> KSummary {
    let per_row_k: Vec<f64> = map
        .cells()
        .row_iter()
        .map(|row| {
            let mut cells: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            cells.sort_by(|a, b| b.total_cmp(a));
            k_number_sorted(&cells, DEFAULT_ENERGY).norm
        })
        .collect();
    // maps are validated non-empty and k_norm ∈ (0, 1]
    let aggregate = agg.apply(&per_row_k).unwrap_or(1.0);
    let bucket = bucketize(aggregate, thresholds).unwrap_or(3);
    KSummary {
        per_row_k,
        aggregate,
        agg,
        bucket,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Matrix;
    use crate::model::{HeadId, HeadKind};
    use proptest::prelude::*;

    /// Independent oracle: repeatedly extract the largest remaining cell
    /// (no sorting) until the extracted mass reaches the target.
    fn oracle(row: &[f64], energy: f64) -> usize {
        let total: f64 = row.iter().sum();
        let target = energy * total - 1e-9 * total;
        let mut taken = vec![false; row.len()];
        let mut mass = 0.0;
        for k in 1..=row.len() {
            let mut best = None;
            for (i, &v) in row.iter().enumerate() {
                if !taken[i] && best.is_none_or(|b: usize| v > row[b]) {
                    best = Some(i);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            mass += row[b];
            if mass >= target {
                return k;
            }
        }
        row.len()
    }

    fn map_from(rows: &[Vec<f64>]) -> AttentionMap<f64> {
        let m = Matrix::from_rows(rows).unwrap();
        let labels = |n| (0..n).map(|i: usize| i.to_string()).collect();
        AttentionMap::new(HeadId::new(HeadKind::Vis, 0, 0), m, labels(rows.len()), labels(rows[0].len()))
            .unwrap()
    }

    #[test]
    fn k_number_examples() {
        let mut one_hot = vec![0.0f32; 36];
        one_hot[17] = 1.0;
        let k = k_number_row(&one_hot, DEFAULT_ENERGY).unwrap();
        assert_eq!(k.tokens, 1);
        assert!((k.norm - 0.0278).abs() < 1e-4);

        let uniform = vec![0.1f32; 10];
        let k = k_number_row(&uniform, DEFAULT_ENERGY).unwrap();
        assert_eq!((k.tokens, k.norm), (9, 0.9));

        let k = k_number_row(&[0.5f64, 0.3, 0.15, 0.05], DEFAULT_ENERGY).unwrap();
        assert_eq!((k.tokens, k.norm), (3, 0.75));
        assert_eq!(oracle(&[0.5, 0.3, 0.15, 0.05], 0.9), 3);
    }

    #[test]
    fn k_number_errors() {
        assert!(k_number_row::<f32>(&[], 0.9).is_err());
        assert!(k_number_row(&[0.5f32, 0.2], 0.9).is_err());
        assert!(k_number_row(&[0.5f32, 0.5], 1.0).is_err());
        assert!(k_number_row(&[0.5f32, 0.5], 0.0).is_err());
        assert!(k_number_row(&[1.5f32, -0.5], 0.9).is_err());
    }

    #[test]
    fn uniform_rows_hit_ceil_exactly() {
        for n in 2..=64usize {
            let row = vec![1.0f32 / n as f32; n];
            let k = k_number_row(&row, DEFAULT_ENERGY).unwrap();
            let expect = (9 * n).div_ceil(10);
            assert_eq!(k.tokens, expect, "n = {n}");
        }
    }

    #[test]
    fn summarize_examples() {
        let t = BucketThresholds::default();
        let one_hot: Vec<Vec<f64>> = (0..5)
            .map(|r| (0..36).map(|c| if c == r { 1.0 } else { 0.0 }).collect())
            .collect();
        let map = map_from(&one_hot);
        for agg in [AggKind::Min, AggKind::Median, AggKind::Max] {
            let s = summarize_head(&map, agg, &t);
            assert!((s.aggregate - 1.0 / 36.0).abs() < 1e-12);
            assert_eq!(s.bucket, 0);
        }

        // row k = 1/10 (one-hot) and 9/10 (uniform)
        let mut peaky = vec![0.0; 10];
        peaky[3] = 1.0;
        let map = map_from(&[peaky, vec![0.1; 10]]);
        assert_eq!(summarize_head(&map, AggKind::Min, &t).aggregate, 0.1);
        assert_eq!(summarize_head(&map, AggKind::Max, &t).aggregate, 0.9);

        // rows with k = 0.2, 0.4, 0.6, 0.8 over 5 columns; lower median is 0.4
        let rows: Vec<Vec<f64>> = (1..=4)
            .map(|k| {
                let mut r = vec![0.0; 5];
                for c in r.iter_mut().take(k) {
                    *c = 1.0 / k as f64;
                }
                r
            })
            .collect();
        let s = summarize_head(&map_from(&rows), AggKind::Median, &t);
        assert_eq!(s.per_row_k, vec![0.2, 0.4, 0.6, 0.8]);
        assert_eq!(s.aggregate, 0.4);
    }

    #[test]
    fn bucket_examples() {
        let t = BucketThresholds::default();
        assert_eq!(bucketize(1.0 / 36.0, &t).unwrap(), 0);
        assert_eq!(bucketize(0.9, &t).unwrap(), 3);
        assert_eq!(bucketize(0.30, &t).unwrap(), 2);
        assert_eq!(bucketize(0.12, &t).unwrap(), 1);
        assert_eq!(bucketize(1.0, &t).unwrap(), 3);
        assert!(bucketize(0.0, &t).is_err());
        assert!(bucketize(1.2, &t).is_err());
        assert!(BucketThresholds([0.3, 0.2, 0.5]).validate().is_err());
    }

    fn stochastic_row() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..=64).prop_filter_map("zero row", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-6).then(|| raw.iter().map(|v| v / s).collect())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_extraction_oracle(row in stochastic_row()) {
            let k = k_number_row(&row, DEFAULT_ENERGY).unwrap();
            prop_assert_eq!(k.tokens, oracle(&row, DEFAULT_ENERGY));
            prop_assert!(k.tokens >= 1 && k.tokens <= row.len());
            prop_assert!(k.norm > 0.0 && k.norm <= 1.0);
        }

        #[test]
        fn monotone_in_energy(row in stochastic_row(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let klo = k_number_row(&row, lo).unwrap().tokens;
            let khi = k_number_row(&row, hi).unwrap().tokens;
            prop_assert!(klo <= khi);
        }

        #[test]
        fn permutation_invariant(row in stochastic_row(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut shuffled = row.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                k_number_row(&row, DEFAULT_ENERGY).unwrap(),
                k_number_row(&shuffled, DEFAULT_ENERGY).unwrap()
            );
        }
    }
}
