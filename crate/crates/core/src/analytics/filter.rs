//! Keeping only the heads in which a selected token is attended.
//!
//! A selection is made on a reference map: a cell picks a (row token,
//! column token) pair, a row or column picks one token. Tokens are addressed
//! by modality and position, which every map of one forward shares, so the
//! same word or object can be located in any other head:
//!
//! * cell: the head must hold both tokens on opposite axes; the value is the
//!   cell joining them (transposed for the reverse cross-modal direction);
//! * row / column: the value merges the token's vector by min, median or
//!   max. Words are rows in `lang`/`ll`/`vl` heads and columns in `lv`;
//!   objects are rows in `vis`/`vv`/`lv` and columns in `vl`.

use serde::{Deserialize, Serialize};

use super::AggKind;
use crate::model::{ForwardResult, HeadId, Modality};
use crate::{Error, Result, Scalar};

/// Default match threshold for [`filter_heads`].
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Selection {
    Cell { row: usize, col: usize },
    Row { index: usize },
    Col { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRef {
    pub modality: Modality,
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterMatch {
    pub head: HeadId,
    pub value: f64,
}

fn token<T: Scalar>(result: &ForwardResult<T>, modality: Modality, index: usize) -> Result<TokenRef> {
    let labels = result.labels(modality);
    let label = labels.get(index).ok_or_else(|| {
        Error::invalid(format!(
            "{modality:?} index {index} not in instance ({} tokens)",
            labels.len()
        ))
    })?;
    Ok(TokenRef {
        modality,
        index,
        label: label.clone(),
    })
}

/// Resolves a selection on `reference` to one or two tokens.
pub fn resolve_selection<T: Scalar>(
    result: &ForwardResult<T>,
    reference: HeadId,
    selection: Selection,
) -> Result<Vec<TokenRef>> {
    if result.map(&reference).is_none() {
        return Err(Error::invalid(format!("head {reference} not in this forward")));
    }
    let rows = reference.kind.query_modality();
    let cols = reference.kind.key_modality();
    Ok(match selection {
        Selection::Cell { row, col } => vec![token(result, rows, row)?, token(result, cols, col)?],
        Selection::Row { index } => vec![token(result, rows, index)?],
        Selection::Col { index } => vec![token(result, cols, index)?],
    })
}

/// Heads where the selected element's attention is at least `threshold`,
/// sorted by value descending (ties keep head order).
pub fn filter_heads<T: Scalar>(
    result: &ForwardResult<T>,
    reference: HeadId,
    selection: Selection,
    threshold: f64,
    agg: AggKind,
) -> Result<Vec<FilterMatch>> {
    let tokens = resolve_selection(result, reference, selection)?;
    let mut matches = Vec::new();
    for map in &result.maps {
        let kind = map.head().kind;
        let (qm, km) = (kind.query_modality(), kind.key_modality());
        let value = match tokens.as_slice() {
            [a, b] => {
                if qm == a.modality && km == b.modality {
                    Some(map.get(a.index, b.index).as_f64())
                } else if qm == b.modality && km == a.modality {
                    Some(map.get(b.index, a.index).as_f64())
                } else {
                    None
                }
            }
            [t] => {
                let vector: Option<Vec<f64>> = if qm == t.modality {
                    Some(map.row(t.index).iter().map(|v| v.as_f64()).collect())
                } else if km == t.modality {
                    Some((0..map.rows()).map(|r| map.get(r, t.index).as_f64()).collect())
                } else {
                    None
                };
                vector.and_then(|v| agg.apply(&v))
            }
            _ => None,
        };
        if let Some(value) = value {
            if value >= threshold {
                matches.push(FilterMatch {
                    head: map.head(),
                    value,
                });
            }
        }
    }
    matches.sort_by(|a, b| b.value.total_cmp(&a.value));
    Ok(matches)
}

/// Whether a token of `modality` appears on some axis of heads of `kind`.
pub fn head_contains(head: HeadId, modality: Modality) -> bool {
    head.kind.query_modality() == modality || head.kind.key_modality() == modality
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::AttentionMap;
    use crate::math::Matrix;
    use crate::model::{AnswerDistribution, HeadKind};

    const WORDS: [&str; 4] = ["[CLS]", "knife", "fruit", "[SEP]"];
    const OBJECTS: [&str; 3] = ["fruit", "knife", "table"];

    fn uniform(rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::filled(rows, cols, 1.0 / cols as f64)
    }

    fn map(head: HeadId, cells: Matrix<f64>) -> AttentionMap<f64> {
        let labels = |m: Modality| match m {
            Modality::Word => WORDS.iter().map(|s| s.to_string()).collect(),
            Modality::Object => OBJECTS.iter().map(|s| s.to_string()).collect(),
        };
        AttentionMap::new(
            head,
            cells,
            labels(head.kind.query_modality()),
            labels(head.kind.key_modality()),
        )
        .unwrap()
    }

    /// lang_0_0 (4x4), lv_0_0 (3x4), vl_0_0 (4x3). vl_0_0 has
    /// cell(word "knife", object "fruit") = 0.95.
    fn instance() -> ForwardResult<f64> {
        let lang = HeadId::new(HeadKind::Lang, 0, 0);
        let lv = HeadId::new(HeadKind::Lv, 0, 0);
        let vl = HeadId::new(HeadKind::Vl, 0, 0);
        let mut vl_cells = uniform(4, 3);
        vl_cells.row_mut(1).copy_from_slice(&[0.95, 0.03, 0.02]);
        let mut lv_cells = uniform(3, 4);
        lv_cells.row_mut(2).copy_from_slice(&[0.0, 0.0, 0.0, 1.0]);
        ForwardResult {
            logits: vec![0.0],
            answer: AnswerDistribution::from_scores(vec![1.0]),
            maps: vec![
                map(lang, uniform(4, 4)),
                map(lv, lv_cells),
                map(vl, vl_cells),
            ],
            words: WORDS.iter().map(|s| s.to_string()).collect(),
            objects: OBJECTS.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Exhaustive scan: for every head, every cell pairing word 1 with
    /// object 0 in either orientation.
    fn brute_force_cell(r: &ForwardResult<f64>, threshold: f64) -> Vec<HeadId> {
        let mut out = Vec::new();
        for m in &r.maps {
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let pair = (
                        (m.head().kind.query_modality(), i),
                        (m.head().kind.key_modality(), j),
                    );
                    let hit = pair == ((Modality::Word, 1), (Modality::Object, 0))
                        || pair == ((Modality::Object, 0), (Modality::Word, 1));
                    if hit && m.get(i, j) >= threshold {
                        out.push(m.head());
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cell_selection_finds_the_one_head() {
        let r = instance();
        let vl = HeadId::new(HeadKind::Vl, 0, 0);
        let got = filter_heads(&r, vl, Selection::Cell { row: 1, col: 0 }, 0.5, AggKind::Max).unwrap();
        assert_eq!(got.iter().map(|m| m.head).collect::<Vec<_>>(), brute_force_cell(&r, 0.5));
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].head, vl);
        assert_eq!(got[0].value, 0.95);

        // same pair selected from the transposed lv map
        let lv = HeadId::new(HeadKind::Lv, 0, 0);
        let got = filter_heads(&r, lv, Selection::Cell { row: 0, col: 1 }, 0.5, AggKind::Max).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].head, vl);
    }

    #[test]
    fn zero_threshold_keeps_every_head_with_the_token() {
        let r = instance();
        let lang = HeadId::new(HeadKind::Lang, 0, 0);
        let got = filter_heads(&r, lang, Selection::Row { index: 1 }, 0.0, AggKind::Min).unwrap();
        assert_eq!(got.len(), 3);
        // an object token is absent from language heads
        let lv = HeadId::new(HeadKind::Lv, 0, 0);
        let got = filter_heads(&r, lv, Selection::Row { index: 0 }, 0.0, AggKind::Min).unwrap();
        let heads: Vec<_> = got.iter().map(|m| m.head.kind).collect();
        assert!(!heads.contains(&HeadKind::Lang));
        assert_eq!(got.len(), 2);
    }

    #[test]
    fn saturated_cell_at_threshold_one() {
        let r = instance();
        let lv = HeadId::new(HeadKind::Lv, 0, 0);
        let got = filter_heads(&r, lv, Selection::Cell { row: 2, col: 3 }, 1.0, AggKind::Max).unwrap();
        assert_eq!(got, vec![FilterMatch { head: lv, value: 1.0 }]);
    }

    #[test]
    fn row_and_column_vectors_follow_the_axis_rule() {
        let r = instance();
        let vl = HeadId::new(HeadKind::Vl, 0, 0);
        // word "knife": row of vl (max 0.95), column of lv (max 1/4), row of lang (1/4)
        let got = filter_heads(&r, vl, Selection::Row { index: 1 }, 0.0, AggKind::Max).unwrap();
        let lookup = |k| got.iter().find(|m| m.head.kind == k).unwrap().value;
        assert_eq!(lookup(HeadKind::Vl), 0.95);
        assert_eq!(lookup(HeadKind::Lv), 0.25);
        assert_eq!(got[0].head, vl);
    }

    #[test]
    fn out_of_range_token_is_invalid() {
        let r = instance();
        let lv = HeadId::new(HeadKind::Lv, 0, 0);
        assert!(filter_heads(&r, lv, Selection::Row { index: 3 }, 0.5, AggKind::Max).is_err());
        let missing = HeadId::new(HeadKind::Vv, 0, 0);
        assert!(filter_heads(&r, missing, Selection::Row { index: 0 }, 0.5, AggKind::Max).is_err());
    }

    #[test]
    fn higher_threshold_gives_subset() {
        let r = instance();
        let vl = HeadId::new(HeadKind::Vl, 0, 0);
        for agg in [AggKind::Min, AggKind::Median, AggKind::Max] {
            let mut prev: Option<Vec<HeadId>> = None;
            for t in [0.0, 0.1, 0.3, 0.5, 0.9, 1.0] {
                let cur: Vec<HeadId> = filter_heads(&r, vl, Selection::Col { index: 0 }, t, agg)
                    .unwrap()
                    .into_iter()
                    .map(|m| m.head)
                    .collect();
                if let Some(p) = &prev {
                    assert!(cur.iter().all(|h| p.contains(h)));
                }
                prev = Some(cur);
            }
        }
    }
}
