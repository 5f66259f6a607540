//! Straight-line `f64` re-implementation of the two-stream forward pass,
//! written against the weight names only. Nested `Vec`s, explicit loops, no
//! shared code with the engine.

#![allow(dead_code)]

use std::collections::BTreeSet;

use vlscope_core::model::{VisualFeatureSet, WeightSet};

type Mat = Vec<Vec<f64>>;

pub struct RefOutput {
    pub logits: Vec<f64>,
    /// `(name like "lv_0_1", rows)` in capture order.
    pub maps: Vec<(String, Mat)>,
}

fn tensor(ws: &WeightSet, name: &str) -> Vec<f64> {
    ws.get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .data
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// `[out, in]` weight as rows.
fn weight(ws: &WeightSet, name: &str) -> Mat {
    let t = ws.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let (rows, cols) = (t.shape[0], t.shape[1]);
    (0..rows)
        .map(|r| (0..cols).map(|c| t.data[r * cols + c] as f64).collect())
        .collect()
}

fn linear(ws: &WeightSet, prefix: &str, x: &Mat) -> Mat {
    let w = weight(ws, &format!("{prefix}.weight"));
    let b = tensor(ws, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            w.iter()
                .zip(&b)
                .map(|(wr, bias)| {
                    let mut s = 0.0;
                    for i in 0..row.len() {
                        s += row[i] * wr[i];
                    }
                    s + bias
                })
                .collect()
        })
        .collect()
}

fn layer_norm(ws: &WeightSet, prefix: &str, x: &Mat) -> Mat {
    let g = tensor(ws, &format!("{prefix}.gain"));
    let b = tensor(ws, &format!("{prefix}.bias"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let denom = (var + 1e-12).sqrt();
            (0..row.len())
                .map(|i| (row[i] - mean) / denom * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let inner = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + inner.tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn attention_block(
    ws: &WeightSet,
    prefix: &str,
    name: &str,
    layer: usize,
    heads: usize,
    x: &Mat,
    ctx: &Mat,
    prune: &BTreeSet<String>,
    maps: &mut Vec<(String, Mat)>,
) -> Mat {
    let q = linear(ws, &format!("{prefix}.q"), x);
    let k = linear(ws, &format!("{prefix}.k"), ctx);
    let v = linear(ws, &format!("{prefix}.v"), ctx);
    let d = q[0].len();
    let dh = d / heads;
    let mut concat = vec![vec![0.0; d]; x.len()];
    for h in 0..heads {
        let head_name = format!("{name}_{layer}_{h}");
        let lo = h * dh;
        let mut a = vec![vec![0.0; ctx.len()]; x.len()];
        for i in 0..x.len() {
            if prune.contains(&head_name) {
                a[i].fill(1.0 / ctx.len() as f64);
            } else {
                let mut scores: Vec<f64> = (0..ctx.len())
                    .map(|j| (lo..lo + dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - m).exp();
                    z += *s;
                }
                for j in 0..ctx.len() {
                    a[i][j] = scores[j] / z;
                }
            }
            for c in lo..lo + dh {
                concat[i][c] = (0..ctx.len()).map(|j| a[i][j] * v[j][c]).sum();
            }
        }
        maps.push((head_name, a));
    }
    let o = linear(ws, &format!("{prefix}.o"), &concat);
    layer_norm(ws, &format!("{prefix}.norm"), &add(x, &o))
}

fn feed_forward(ws: &WeightSet, prefix: &str, x: &Mat) -> Mat {
    let mut hidden = linear(ws, &format!("{prefix}.up"), x);
    for row in hidden.iter_mut() {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    }
    let down = linear(ws, &format!("{prefix}.down"), &hidden);
    layer_norm(ws, &format!("{prefix}.norm"), &add(x, &down))
}

pub fn forward(ws: &WeightSet, ids: &[u32], vf: &VisualFeatureSet, prune: &BTreeSet<String>) -> RefOutput {
    let cfg = *ws.config();
    let d = cfg.d;
    let word = tensor(ws, "embed.word.weight");
    let pos = tensor(ws, "embed.position.weight");
    let lang0: Mat = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| (0..d).map(|c| word[id as usize * d + c] + pos[p * d + c]).collect())
        .collect();
    let mut lang = layer_norm(ws, "embed.word_norm", &lang0);

    let raw: Mat = vf
        .objects
        .iter()
        .map(|o| o.appearance.iter().chain(o.bbox.iter()).map(|&v| v as f64).collect())
        .collect();
    let mut vis = layer_norm(ws, "embed.visual_norm", &linear(ws, "embed.visual", &raw));

    let mut maps = Vec::new();
    for i in 0..cfg.n_lang {
        let x = attention_block(ws, &format!("lang.{i}.attn"), "lang", i, cfg.heads, &lang, &lang, prune, &mut maps);
        lang = feed_forward(ws, &format!("lang.{i}.ffn"), &x);
    }
    for i in 0..cfg.n_vis {
        let x = attention_block(ws, &format!("vis.{i}.attn"), "vis", i, cfg.heads, &vis, &vis, prune, &mut maps);
        vis = feed_forward(ws, &format!("vis.{i}.ffn"), &x);
    }
    for i in 0..cfg.n_cross {
        let p = |b: &str| format!("cross.{i}.{b}");
        // both cross-attention blocks read the layer input
        let v_cross = attention_block(ws, &p("lv"), "lv", i, cfg.heads, &vis, &lang, prune, &mut maps);
        let l_cross = attention_block(ws, &p("vl"), "vl", i, cfg.heads, &lang, &vis, prune, &mut maps);
        let l_self = attention_block(ws, &p("ll"), "ll", i, cfg.heads, &l_cross, &l_cross, prune, &mut maps);
        let v_self = attention_block(ws, &p("vv"), "vv", i, cfg.heads, &v_cross, &v_cross, prune, &mut maps);
        lang = feed_forward(ws, &p("ffn_lang"), &l_self);
        vis = feed_forward(ws, &p("ffn_vis"), &v_self);
    }

    let cls = vec![lang[0].clone()];
    let mut hidden = linear(ws, "answer.dense", &cls);
    for v in hidden[0].iter_mut() {
        *v = gelu(*v);
    }
    let hidden = layer_norm(ws, "answer.norm", &hidden);
    let logits = linear(ws, "answer.out", &hidden).remove(0);
    RefOutput { logits, maps }
}
