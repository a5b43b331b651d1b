//! Random Forest for binary patch classification.
//!
//! Features are quantized once into at most 256 quantile bins; trees split
//! on bin boundaries by Gini impurity, but store the real-valued threshold so
//! prediction works on raw feature vectors.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureKind;
use super::ClassifyError;
use crate::synth::sub_seed;

pub const MODEL_VERSION: u32 = 1;
const MAX_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: u32,
        threshold: f32,
        left: u32,
        right: u32,
    },
    /// Class probabilities `[negative, positive]`.
    Leaf { proba: [f32; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f32]) -> f32 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { proba } => return proba[1],
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(t, *left as usize).max(walk(t, *right as usize)),
            }
        }
        walk(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub feature_kind: FeatureKind,
    pub patch_size: usize,
    pub n_features: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    /// Mean positive-class probability over all trees.
    pub fn predict_proba(&self, x: &[f32]) -> Result<f32, ClassifyError> {
        if x.len() != self.n_features {
            return Err(ClassifyError::Dimension {
                expected: self.n_features,
                got: x.len(),
            });
        }
        Ok(self.predict_unchecked(x))
    }

    pub(crate) fn predict_unchecked(&self, x: &[f32]) -> f32 {
        let s: f32 = self.trees.iter().map(|t| t.predict(x)).sum();
        (s / self.trees.len() as f32).clamp(0.0, 1.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("forest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClassifyError> {
        let m: ForestModel = serde_json::from_str(text).map_err(|e| ClassifyError::Model(e.to_string()))?;
        if m.version != MODEL_VERSION {
            return Err(ClassifyError::Model(format!(
                "unsupported model version {} (expected {MODEL_VERSION})",
                m.version
            )));
        }
        if m.trees.is_empty() {
            return Err(ClassifyError::Model("model has no trees".into()));
        }
        Ok(m)
    }
}

/// Column-major quantized training matrix.
struct Binned {
    n: usize,
    bins: Vec<u8>,
    /// Per feature, the upper edge of every bin but the last.
    edges: Vec<Vec<f32>>,
}

impl Binned {
    fn new(x: &[Vec<f32>]) -> Self {
        let n = x.len();
        let d = x[0].len();
        let cols: Vec<(Vec<u8>, Vec<f32>)> = (0..d)
            .into_par_iter()
            .map(|f| {
                let mut vals: Vec<f32> = x.iter().map(|r| r[f]).collect();
                vals.sort_by(|a, b| a.total_cmp(b));
                vals.dedup();
                let edges: Vec<f32> = if vals.len() <= MAX_BINS {
                    vals[..vals.len() - 1].to_vec()
                } else {
                    let mut e: Vec<f32> = (1..MAX_BINS).map(|k| vals[k * vals.len() / MAX_BINS - 1]).collect();
                    e.dedup();
                    e
                };
                let col = x
                    .iter()
                    .map(|r| edges.partition_point(|e| *e < r[f]) as u8)
                    .collect();
                (col, edges)
            })
            .collect();
        let mut bins = Vec::with_capacity(n * d);
        let mut edges = Vec::with_capacity(d);
        for (c, e) in cols {
            bins.extend(c);
            edges.push(e);
        }
        Self { n, bins, edges }
    }

    #[inline]
    fn bin(&self, f: usize, i: usize) -> usize {
        self.bins[f * self.n + i] as usize
    }
}

fn gini(pos: f64, total: f64) -> f64 {
    if total == 0.0 {
        return 0.0;
    }
    let p = pos / total;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    data: &'a Binned,
    y: &'a [bool],
    cfg: &'a ForestConfig,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    features: Vec<usize>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> u32 {
        let pos = idx.iter().filter(|&&i| self.y[i]).count() as f32;
        let p = pos / idx.len() as f32;
        self.nodes.push(Node::Leaf { proba: [1.0 - p, p] });
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> u32 {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if depth >= self.cfg.max_depth || n < 2 * self.cfg.min_leaf || pos == 0 || pos == n {
            return self.leaf(idx);
        }
        let parent = gini(pos as f64, n as f64);
        let mut best: Option<(f64, usize, usize)> = None;
        let d = self.features.len();
        // Partial Fisher-Yates: the first `mtry` entries become the candidate set.
        for k in 0..self.mtry {
            let j = self.rng.random_range(k..d);
            self.features.swap(k, j);
        }
        let mut count = [0u32; MAX_BINS];
        let mut count_pos = [0u32; MAX_BINS];
        for k in 0..self.mtry {
            let f = self.features[k];
            let nb = self.data.edges[f].len() + 1;
            if nb < 2 {
                continue;
            }
            count[..nb].iter_mut().for_each(|c| *c = 0);
            count_pos[..nb].iter_mut().for_each(|c| *c = 0);
            for &i in idx.iter() {
                let b = self.data.bin(f, i);
                count[b] += 1;
                count_pos[b] += self.y[i] as u32;
            }
            let (mut ln, mut lp) = (0usize, 0usize);
            for b in 0..nb - 1 {
                ln += count[b] as usize;
                lp += count_pos[b] as usize;
                let rn = n - ln;
                if ln < self.cfg.min_leaf {
                    continue;
                }
                if rn < self.cfg.min_leaf {
                    break;
                }
                if count[b] == 0 {
                    continue;
                }
                let rp = pos - lp;
                let g = (ln as f64 * gini(lp as f64, ln as f64) + rn as f64 * gini(rp as f64, rn as f64)) / n as f64;
                let gain = parent - g;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    best = Some((gain, f, b));
                }
            }
        }
        let Some((_, f, b)) = best else {
            return self.leaf(idx);
        };
        let mut split = 0;
        for k in 0..n {
            if self.data.bin(f, idx[k]) <= b {
                idx.swap(k, split);
                split += 1;
            }
        }
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { proba: [0.0, 0.0] });
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[me] = Node::Split {
            feature: f as u32,
            threshold: self.data.edges[f][b],
            left,
            right,
        };
        me as u32
    }
}

/// Bootstrap-aggregated trees, each with its own seed stream, built in
/// parallel. Identical inputs and seed give identical forests.
pub fn train_forest(
    x: &[Vec<f32>],
    y: &[bool],
    cfg: &ForestConfig,
    feature_kind: FeatureKind,
    patch_size: usize,
) -> Result<ForestModel, ClassifyError> {
    if x.len() != y.len() {
        return Err(ClassifyError::Training("feature and label counts differ".into()));
    }
    if x.len() < 2 {
        return Err(ClassifyError::Training("need at least 2 samples".into()));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(ClassifyError::Training("feature vectors must share a non-zero length".into()));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(ClassifyError::Training("both classes must be present".into()));
    }
    if cfg.n_trees == 0 || cfg.min_leaf == 0 {
        return Err(ClassifyError::Training("n_trees and min_leaf must be positive".into()));
    }
    let data = Binned::new(x);
    let mtry = ((d as f64).sqrt().round() as usize).clamp(1, d);
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("tree-{t}")));
            let mut idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
            let mut features: Vec<usize> = (0..d).collect();
            features.shuffle(&mut rng);
            let mut b = Builder {
                data: &data,
                y,
                cfg,
                mtry,
                rng,
                nodes: Vec::new(),
                features,
            };
            b.grow(&mut idx, 0);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel {
        version: MODEL_VERSION,
        feature_kind,
        patch_size,
        n_features: d,
        config: *cfg,
        trees,
    })
}
