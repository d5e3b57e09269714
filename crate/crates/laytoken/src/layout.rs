//! Layout tokens and their position-id schemes.
//!
//! A segment's bounding box is compressed into a single d-vector by letting
//! one learnable query cross-attend over four per-coordinate features — one
//! key/value item per coordinate, so the attention has something to select
//! over. The companion position schemes decide what position id that vector
//! occupies: its own fresh id, or the id of the first text token of its
//! segment (which costs nothing).

use crate::doc::BBox;
use crate::error::{Error, Result};
use crate::nn::layers::{softmax_backward, softmax_inplace, Linear};
use crate::nn::tensor::Param;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

/// Frequency pairs per coordinate in the sinusoidal featurization.
pub const COORD_FREQ_PAIRS: usize = 16;
/// Feature width per coordinate (sin and cos per frequency).
pub const COORD_FEATURES: usize = 2 * COORD_FREQ_PAIRS;

/// Geometric frequency ladder from 1 to 64 cycles across the page: dense
/// coverage of the scales between whole-page proximity and neighboring
/// table cells, so nearby boxes stay correlated across many features while
/// boxes a cell apart decorrelate.
fn coord_frequency(k: usize) -> f64 {
    TAU * 64.0f64.powf(k as f64 / (COORD_FREQ_PAIRS as f64 - 1.0))
}

/// Sinusoidal features of one normalized coordinate.
fn featurize(coord: f64, out: &mut [f64]) {
    for k in 0..COORD_FREQ_PAIRS {
        let (sin, cos) = (coord_frequency(k) * coord).sin_cos();
        out[2 * k] = sin;
        out[2 * k + 1] = cos;
    }
}

/// Learnable-query cross-attention from a box to one layout token.
#[derive(Debug, Clone)]
pub struct LayoutTokenizer {
    /// The learnable query vector.
    pub query: Param,
    /// Shared projection from coordinate features to model width.
    pub coord_proj: Linear,
    /// One learned embedding per coordinate role (x1/y1/x2/y2); breaks the
    /// symmetry between corners.
    pub coord_type_emb: Param,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

#[derive(Debug, Clone)]
pub struct LayTokCache {
    feats: Vec<f64>,  // 4 x COORD_FEATURES
    items: Vec<f64>,  // 4 x d
    k: Vec<f64>,      // 4 x d
    v: Vec<f64>,      // 4 x d
    q: Vec<f64>,      // d
    att: [f64; 4],
    pooled: Vec<f64>, // d
}

/// Slack for coordinates nominally in [0,1].
const COORD_SLACK: f64 = 1e-6;

impl LayoutTokenizer {
    pub fn new(d_model: usize, std: f64, rng: &mut impl Rng) -> Self {
        LayoutTokenizer {
            query: Param::normal(&[d_model], std, rng),
            coord_proj: Linear::new(COORD_FEATURES, d_model, std, rng),
            coord_type_emb: Param::normal(&[4, d_model], std, rng),
            wq: Linear::new(d_model, d_model, std, rng),
            wk: Linear::new(d_model, d_model, std, rng),
            wv: Linear::new(d_model, d_model, std, rng),
            wo: Linear::new(d_model, d_model, std, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.query.numel()
    }

    /// Compress one normalized box into a single d-vector.
    pub fn forward(&self, bbox: &BBox) -> Result<(Vec<f64>, LayTokCache)> {
        let d = self.d_model();
        let coords = bbox.coords();
        for c in coords {
            if !(-COORD_SLACK..=1.0 + COORD_SLACK).contains(&c) {
                return Err(Error::Argument(format!(
                    "box coordinate {c} outside the normalized domain [0,1]"
                )));
            }
        }

        let mut feats = vec![0.0; 4 * COORD_FEATURES];
        for (j, &c) in coords.iter().enumerate() {
            featurize(c, &mut feats[j * COORD_FEATURES..(j + 1) * COORD_FEATURES]);
        }
        let mut items = self.coord_proj.forward(&feats, 4);
        for j in 0..4 {
            let emb = self.coord_type_emb.value.row(j);
            for t in 0..d {
                items[j * d + t] += emb[t];
            }
        }

        let q = self.wq.forward(&self.query.value.data, 1);
        let k = self.wk.forward(&items, 4);
        let v = self.wv.forward(&items, 4);
        let scale = 1.0 / (d as f64).sqrt();
        let mut att = [0.0; 4];
        for (j, a) in att.iter_mut().enumerate() {
            let kj = &k[j * d..(j + 1) * d];
            *a = scale * q.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>();
        }
        softmax_inplace(&mut att);
        let mut pooled = vec![0.0; d];
        for j in 0..4 {
            let vj = &v[j * d..(j + 1) * d];
            for t in 0..d {
                pooled[t] += att[j] * vj[t];
            }
        }
        let b = self.wo.forward(&pooled, 1);
        Ok((
            b,
            LayTokCache {
                feats,
                items,
                k,
                v,
                q,
                att,
                pooled,
            },
        ))
    }

    /// Accumulate gradients for `d(loss)/d(b) = db`.
    pub fn backward(&mut self, cache: &LayTokCache, db: &[f64]) {
        let d = self.d_model();
        let scale = 1.0 / (d as f64).sqrt();

        let dpooled = self.wo.backward(&cache.pooled, db, 1);
        let mut datt = [0.0; 4];
        let mut dv = vec![0.0; 4 * d];
        for j in 0..4 {
            let vj = &cache.v[j * d..(j + 1) * d];
            datt[j] = dpooled.iter().zip(vj).map(|(a, b)| a * b).sum();
            let dvj = &mut dv[j * d..(j + 1) * d];
            for t in 0..d {
                dvj[t] = cache.att[j] * dpooled[t];
            }
        }
        let mut dscores = [0.0; 4];
        softmax_backward(&cache.att, &datt, &mut dscores);

        let mut dq = vec![0.0; d];
        let mut dk = vec![0.0; 4 * d];
        for j in 0..4 {
            let g = dscores[j] * scale;
            let kj = &cache.k[j * d..(j + 1) * d];
            for t in 0..d {
                dq[t] += g * kj[t];
            }
            let dkj = &mut dk[j * d..(j + 1) * d];
            for t in 0..d {
                dkj[t] = g * cache.q[t];
            }
        }

        let dquery = self.wq.backward(&self.query.value.data, &dq, 1);
        for (g, v) in self.query.grad.data.iter_mut().zip(dquery) {
            *g += v;
        }
        let mut ditems = self.wk.backward(&cache.items, &dk, 4);
        for (a, b) in ditems.iter_mut().zip(self.wv.backward(&cache.items, &dv, 4)) {
            *a += b;
        }
        for j in 0..4 {
            let dj = &ditems[j * d..(j + 1) * d];
            let ge = &mut self.coord_type_emb.grad.data[j * d..(j + 1) * d];
            for t in 0..d {
                ge[t] += dj[t];
            }
        }
        // Features are data, not parameters; the returned input grad is
        // dropped after the weight grads are accumulated.
        let _ = self.coord_proj.backward(&cache.feats, &ditems, 4);
    }

    pub fn params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("laytok.query", &self.query),
            ("laytok.coord_proj.weight", &self.coord_proj.weight),
            ("laytok.coord_proj.bias", &self.coord_proj.bias),
            ("laytok.coord_type_emb", &self.coord_type_emb),
            ("laytok.wq.weight", &self.wq.weight),
            ("laytok.wq.bias", &self.wq.bias),
            ("laytok.wk.weight", &self.wk.weight),
            ("laytok.wk.bias", &self.wk.bias),
            ("laytok.wv.weight", &self.wv.weight),
            ("laytok.wv.bias", &self.wv.bias),
            ("laytok.wo.weight", &self.wo.weight),
            ("laytok.wo.bias", &self.wo.bias),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("laytok.query", &mut self.query),
            ("laytok.coord_proj.weight", &mut self.coord_proj.weight),
            ("laytok.coord_proj.bias", &mut self.coord_proj.bias),
            ("laytok.coord_type_emb", &mut self.coord_type_emb),
            ("laytok.wq.weight", &mut self.wq.weight),
            ("laytok.wq.bias", &mut self.wq.bias),
            ("laytok.wk.weight", &mut self.wk.weight),
            ("laytok.wk.bias", &mut self.wk.bias),
            ("laytok.wv.weight", &mut self.wv.weight),
            ("laytok.wv.bias", &mut self.wv.bias),
            ("laytok.wo.weight", &mut self.wo.weight),
            ("laytok.wo.bias", &mut self.wo.bias),
        ]
    }

    /// Parameter count for a given model width, without building.
    pub fn param_count(d: usize) -> usize {
        d // query
            + d * COORD_FEATURES + d // coord_proj
            + 4 * d // type embeddings
            + 4 * (d * d + d) // four projections
    }
}

/// Linear map from a hidden state to four box coordinates squashed into
/// (0,1) by a logistic.
#[derive(Debug, Clone)]
pub struct LayoutHead {
    pub lin: Linear,
}

impl LayoutHead {
    pub fn new(d_model: usize, std: f64, rng: &mut impl Rng) -> Self {
        LayoutHead {
            lin: Linear::new(d_model, 4, std, rng),
        }
    }

    pub fn forward(&self, hidden: &[f64]) -> [f64; 4] {
        let pre = self.lin.forward(hidden, 1);
        [sigmoid(pre[0]), sigmoid(pre[1]), sigmoid(pre[2]), sigmoid(pre[3])]
    }

    /// `dpred` is the gradient on the squashed outputs; returns `dhidden`.
    pub fn backward(&mut self, hidden: &[f64], pred: &[f64; 4], dpred: &[f64; 4]) -> Vec<f64> {
        let dpre: Vec<f64> = (0..4).map(|i| dpred[i] * pred[i] * (1.0 - pred[i])).collect();
        self.lin.backward(hidden, &dpre, 1)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// How position ids are assigned to an interleaved text/layout stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionScheme {
    /// Every token, layout included, consumes the next id.
    ExtraIds,
    /// Text ids run consecutively; each layout token reuses the id of the
    /// first text token of its own segment, consuming nothing.
    SharedFirst,
    /// No layout tokens at all.
    TextOnly,
}

impl PositionScheme {
    pub fn name(&self) -> &'static str {
        match self {
            PositionScheme::ExtraIds => "extra-ids",
            PositionScheme::SharedFirst => "shared-first",
            PositionScheme::TextOnly => "text-only",
        }
    }
}

impl fmt::Display for PositionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PositionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "extra-ids" => Ok(PositionScheme::ExtraIds),
            "shared-first" => Ok(PositionScheme::SharedFirst),
            "text-only" => Ok(PositionScheme::TextOnly),
            other => Err(Error::Argument(format!(
                "unknown scheme {other:?}; valid schemes: extra-ids, shared-first, text-only"
            ))),
        }
    }
}

/// Position ids for segments of the given text-token counts, in interleaved
/// order (each segment's text tokens, then its one layout token). Under
/// `TextOnly` there are no layout slots.
pub fn assign_positions(text_token_counts: &[usize], scheme: PositionScheme) -> Result<Vec<usize>> {
    if let Some(i) = text_token_counts.iter().position(|&t| t == 0) {
        return Err(Error::Argument(format!(
            "segment {i} has no text tokens; a layout token needs a text id to share"
        )));
    }
    let mut ids = Vec::new();
    match scheme {
        PositionScheme::SharedFirst => {
            let mut next = 0usize;
            for &t in text_token_counts {
                let first = next;
                for _ in 0..t {
                    ids.push(next);
                    next += 1;
                }
                ids.push(first);
            }
        }
        PositionScheme::ExtraIds => {
            let mut next = 0usize;
            for &t in text_token_counts {
                for _ in 0..t + 1 {
                    ids.push(next);
                    next += 1;
                }
            }
        }
        PositionScheme::TextOnly => {
            let total: usize = text_token_counts.iter().sum();
            ids.extend(0..total);
        }
    }
    Ok(ids)
}
