//! Adjacency structures: road-graph transition matrices, the learned
//! self-adaptive adjacency, and the per-window progressive adjacency.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Sensor network with dense node indices `0..N`.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    names: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
    adjacency: Tensor,
    directed: bool,
}

impl RoadGraph {
    /// Builds the graph from `(source, target, weight)` edges over `names`.
    /// Repeated edges keep the last weight.
    pub fn from_edges(names: Vec<String>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = names.len();
        let mut a = Tensor::zeros([n, n])?;
        for &(i, j, w) in &edges {
            if i >= n || j >= n {
                return Err(Error::Config(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            a.set(&[i, j], w);
        }
        let directed = !is_symmetric(&a, 1e-12);
        Ok(RoadGraph {
            names,
            edges,
            adjacency: a,
            directed,
        })
    }

    /// Graph without edges; every node is isolated.
    pub fn empty(names: Vec<String>) -> Result<Self> {
        Self::from_edges(names, Vec::new())
    }

    /// Reads an edge list with header `from,to[,weight]`. Node names are
    /// assigned dense indices in first-seen order.
    pub fn load_edge_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let (from, to) = match (col("from"), col("to")) {
            (Some(f), Some(t)) => (f, t),
            _ => {
                return Err(Error::parse(
                    path,
                    1,
                    "header must contain `from,to[,weight]`",
                ))
            }
        };
        let weight = col("weight");

        let mut index: HashMap<String, usize> = HashMap::new();
        let mut names = Vec::new();
        let mut edges = Vec::new();
        let mut intern = |name: &str| -> usize {
            *index.entry(name.to_string()).or_insert_with(|| {
                names.push(name.to_string());
                names.len() - 1
            })
        };
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| csv_error(path, e))?;
            let get = |i: usize| record.get(i).unwrap_or("");
            if get(from).is_empty() || get(to).is_empty() {
                return Err(Error::parse(path, line, "missing node id"));
            }
            let w = match weight.map(get).filter(|s| !s.is_empty()) {
                None => 1.0,
                Some(s) => s
                    .parse::<f64>()
                    .map_err(|_| Error::parse(path, line, format!("bad weight `{s}`")))?,
            };
            let i = intern(get(from));
            let j = intern(get(to));
            edges.push((i, j, w));
        }
        Self::from_edges(names, edges)
    }

    /// Re-indexes nodes to follow `order` (e.g. the signal table's columns).
    /// Nodes in `order` that the graph never mentions become isolated.
    pub fn aligned_to(&self, order: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let remap = |i: usize| -> Result<usize> {
            pos.get(self.names[i].as_str()).copied().ok_or_else(|| {
                Error::DegenerateData(format!(
                    "graph node `{}` has no signal column",
                    self.names[i]
                ))
            })
        };
        let edges = self
            .edges
            .iter()
            .map(|&(i, j, w)| Ok((remap(i)?, remap(j)?, w)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_edges(order.to_vec(), edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Writes the `index,name` mapping.
    pub fn write_node_index(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,name\n");
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i},{n}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the edge list in the format read by [`load_edge_csv`](Self::load_edge_csv).
    /// Isolated nodes are not listed; use [`aligned_to`](Self::aligned_to) after reloading.
    pub fn write_edge_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("from,to,weight\n");
        for &(i, j, w) in &self.edges {
            out.push_str(&format!("{},{},{w}\n", self.names[i], self.names[j]));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let names = perm.iter().map(|&o| self.names[o].clone()).collect();
        let edges = self
            .edges
            .iter()
            .map(|&(i, j, w)| (inverse[i], inverse[j], w))
            .collect();
        Self::from_edges(names, edges)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

fn is_symmetric(a: &Tensor, tol: f64) -> bool {
    let n = a.shape()[0];
    (0..n).all(|i| (0..i).all(|j| (a.get(&[i, j]) - a.get(&[j, i])).abs() <= tol))
}

/// Forward and backward random-walk transition matrices.
#[derive(Debug, Clone)]
pub struct TransitionPair {
    pub forward: Tensor,
    pub backward: Tensor,
    pub undirected: bool,
}

fn row_normalize(a: &Tensor) -> Tensor {
    let n = a.shape()[1];
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// `P = A / rowsum(A)` and the same for `Aᵀ`; rows without out-edges stay zero.
pub fn transition_matrix(graph: &RoadGraph) -> Result<TransitionPair> {
    transition_from_adjacency(graph.adjacency())
}

pub fn transition_from_adjacency(a: &Tensor) -> Result<TransitionPair> {
    if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
        return Err(Error::Shape {
            shape: a.shape().to_vec(),
            reason: "adjacency must be square".into(),
        });
    }
    if let Some(v) = a.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Numeric {
            op: "transition_matrix",
            detail: format!("adjacency entry {v} is negative or NaN"),
        });
    }
    let undirected = is_symmetric(a, 1e-12);
    let forward = row_normalize(a);
    let backward = if undirected {
        forward.clone()
    } else {
        row_normalize(&a.transpose2d()?)
    };
    Ok(TransitionPair {
        forward,
        backward,
        undirected,
    })
}

/// Min-max scales a window to `[0, 1]` and then to unit length.
/// Constant windows map to the zero vector.
pub fn normalize_window(x: &[f64]) -> Vec<f64> {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; x.len()];
    }
    let scaled: Vec<f64> = x.iter().map(|v| (v - min) / (max - min)).collect();
    let norm = scaled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        scaled.into_iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; x.len()]
    }
}

/// Normalizes every node window of `x[B, N, T]`.
pub fn normalize_windows(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Shape {
            shape: x.shape().to_vec(),
            reason: "expected [batch, nodes, window]".into(),
        });
    }
    let t = x.shape()[2];
    let data = x.data().chunks(t).flat_map(normalize_window).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Learnable `T×T` bilinear form shared by every layer.
#[derive(Debug, Clone, Copy)]
pub struct AdjustorMatrix {
    pub id: ParamId,
    pub window: usize,
}

impl AdjustorMatrix {
    /// Identity plus uniform noise in `[-0.01, 0.01]`.
    pub fn init(store: &mut ParamStore, window: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut w = Tensor::eye(window)?;
        for v in w.data_mut() {
            *v += rng.random_range(-0.01..=0.01);
        }
        Ok(AdjustorMatrix {
            id: store.add("adjustor", w),
            window,
        })
    }
}

/// Source and target node embeddings for the self-adaptive adjacency.
#[derive(Debug, Clone, Copy)]
pub struct SelfAdaptiveEmbeddings {
    pub source: ParamId,
    pub target: ParamId,
    pub dim: usize,
}

impl SelfAdaptiveEmbeddings {
    pub fn init(
        store: &mut ParamStore,
        nodes: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sample = || -> Result<Tensor> {
            let data = (0..nodes * dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Tensor::new([nodes, dim], data)
        };
        let e1 = sample()?;
        let e2 = sample()?;
        Ok(SelfAdaptiveEmbeddings {
            source: store.add("sa_source", e1),
            target: store.add("sa_target", e2),
            dim,
        })
    }
}

/// Per-sample adjacency recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ProgressiveAdjacency {
    /// `[B, N, N]`, each slice row-stochastic.
    pub weights: Var,
    /// Pre-activation similarity scores `[B, N, N]`.
    pub scores: Var,
}

/// `softmax_rows(relu(X̃ W X̃ᵀ))` per sample, where `X̃` holds unit-normalized
/// node windows of `x_window[B, N, T]`. Gradients flow into `w_adj`.
pub fn progressive_adjacency(
    tape: &mut Tape,
    x_window: &Tensor,
    w_adj: Var,
) -> Result<ProgressiveAdjacency> {
    let ws = tape.shape(w_adj).to_vec();
    if x_window.rank() != 3 || ws.len() != 2 || ws[0] != ws[1] || x_window.shape()[2] != ws[0] {
        return Err(Error::dim("progressive_adjacency", x_window.shape(), &ws));
    }
    let normed = normalize_windows(x_window)?;
    let normed_t = normed.permute(&[0, 2, 1])?;
    let xn = tape.constant(normed);
    let xn_t = tape.constant(normed_t);
    let projected = tape.linear(xn, w_adj)?;
    let scores = tape.batch_matmul(projected, xn_t)?;
    let rect = tape.relu(scores);
    let weights = tape.row_softmax(rect)?;
    Ok(ProgressiveAdjacency { weights, scores })
}

/// Evaluates the progressive adjacency without recording gradients.
/// Returns `(scores, weights)`, both `[B, N, N]`.
pub fn progressive_adjacency_values(x_window: &Tensor, w_adj: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let w = tape.constant(w_adj.clone());
    let pa = progressive_adjacency(&mut tape, x_window, w)?;
    Ok((
        tape.value(pa.scores).clone(),
        tape.value(pa.weights).clone(),
    ))
}

/// `softmax_rows(relu(E₁ E₂ᵀ))`.
pub fn self_adaptive_adjacency(
    tape: &mut Tape,
    store: &ParamStore,
    emb: &SelfAdaptiveEmbeddings,
) -> Result<Var> {
    let e1 = tape.param(store, emb.source);
    let e2 = tape.param(store, emb.target);
    let e2t = tape.permute(e2, &[1, 0])?;
    let prod = tape.matmul(e1, e2t)?;
    let rect = tape.relu(prod);
    tape.row_softmax(rect)
}
