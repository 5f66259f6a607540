//! Attention summaries and the interactions built on them.
//!
//! * [`knumber`] – per-row k-numbers, head aggregates and bucketing;
//! * [`filter`] – keeping the heads in which a clicked token is attended;
//! * [`diff`] – differencing two captured forwards;
//! * [`stats`] – per-head k distributions over a whole corpus, with an
//!   on-disk cache.

pub mod diff;
pub mod filter;
pub mod knumber;
pub mod stats;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::math::Matrix;
use crate::model::HeadId;
use crate::{Error, Result, Scalar};

pub use diff::{diff_snapshots, CapturedState, HeadDelta, InstanceDiff};
pub use filter::{filter_heads, FilterMatch, Selection, TokenRef};
pub use knumber::{
    bucketize, k_number_row, summarize_head, BucketThresholds, KNumber, KSummary, DEFAULT_ENERGY,
};
pub use stats::{build_dataset_stats, head_dataset_stats, DatasetStats, HeadDatasetStats};

/// Row sums of a valid attention map must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// How per-row values are merged into one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggKind {
    Min,
    #[default]
    Median,
    Max,
}

impl AggKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AggKind::Min => "min",
            AggKind::Median => "median",
            AggKind::Max => "max",
        }
    }

    /// Min, max, or the lower-middle element for even counts. `None` on an
    /// empty slice.
    pub fn apply(self, values: &[f64]) -> Option<f64> {
        if values.is_empty() {
            return None;
        }
        match self {
            AggKind::Min => values.iter().copied().reduce(f64::min),
            AggKind::Max => values.iter().copied().reduce(f64::max),
            AggKind::Median => {
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                Some(sorted[(sorted.len() - 1) / 2])
            }
        }
    }
}

impl fmt::Display for AggKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "min" => Ok(AggKind::Min),
            "median" => Ok(AggKind::Median),
            "max" => Ok(AggKind::Max),
            _ => Err(Error::invalid(format!(
                "unknown aggregation `{s}`, expected min, median or max"
            ))),
        }
    }
}

/// Row-stochastic query→key attention of one head on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    head: HeadId,
    cells: Matrix<T>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
}

impl<T: Scalar> AttentionMap<T> {
    pub fn new(
        head: HeadId,
        cells: Matrix<T>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
    ) -> Result<Self> {
        if cells.rows() != row_labels.len() || cells.cols() != col_labels.len() {
            return Err(Error::invalid(format!(
                "map {head} is {}x{} but has {} row and {} column labels",
                cells.rows(),
                cells.cols(),
                row_labels.len(),
                col_labels.len()
            )));
        }
        if cells.is_empty() {
            return Err(Error::invalid(format!("map {head} is empty")));
        }
        let map = Self {
            head,
            cells,
            row_labels,
            col_labels,
        };
        if map.cells.data().iter().any(|v| v.is_nan() || *v < T::zero()) {
            return Err(Error::invalid(format!("map {head} has negative or NaN cells")));
        }
        let err = map.max_row_sum_error();
        if err > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "map {head} is not row-stochastic (row sum off by {err:e})"
            )));
        }
        Ok(map)
    }

    pub fn head(&self) -> HeadId {
        self.head
    }

    pub fn cells(&self) -> &Matrix<T> {
        &self.cells
    }

    pub fn rows(&self) -> usize {
        self.cells.rows()
    }

    pub fn cols(&self) -> usize {
        self.cells.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.cells.shape()
    }

    pub fn row(&self, r: usize) -> &[T] {
        self.cells.row(r)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.cells.get(r, c)
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    /// Largest `|Σ row − 1|` over all rows, accumulated in `f64`.
    pub fn max_row_sum_error(&self) -> f64 {
        self.cells
            .row_iter()
            .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}
