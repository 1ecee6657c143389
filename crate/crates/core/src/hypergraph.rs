//! ε-ball hypergraphs over vertex features and hypergraph convolution.
//!
//! Each vertex spawns one hyperedge holding every vertex within Euclidean
//! feature distance ε of it, so a constructed hypergraph always has as many
//! hyperedges as vertices and a unit diagonal in its incidence matrix.
//!
//! Convolution is offered in two algebraically equivalent forms:
//!
//! * message passing: `x_e = mean_{v∈e} x_v·Θ`, then `x_v' = x_v + mean_{e∋v} x_e`;
//! * matrix: `X' = X + D_v⁻¹ H D_e⁻¹ Hᵀ X Θ`.
//!
//! Zero degrees invert to zero in both forms, so a vertex outside every
//! hyperedge keeps only its residual.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{HdError, Result};
use crate::tensor::{gemm, Tensor};

/// `n` vertices with `c`-dimensional features, row-major `n × c`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexSet {
    n: usize,
    c: usize,
    features: Vec<f64>,
}

impl VertexSet {
    pub fn new(n: usize, c: usize, features: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 {
            return Err(HdError::Shape(format!(
                "vertex set needs n ≥ 1 and c ≥ 1, got {n}×{c}"
            )));
        }
        if features.len() != n * c {
            return Err(HdError::Shape(format!(
                "vertex set {n}×{c} needs {} values, got {}",
                n * c,
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(HdError::NonFinite(format!(
                "vertex {} feature {}",
                i / c,
                i % c
            )));
        }
        Ok(Self { n, c, features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(HdError::Shape("ragged vertex rows".into()));
        }
        Self::new(rows.len(), c, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.c
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.c..(i + 1) * self.c]
    }

    /// Largest absolute feature value, the scale for relative comparisons.
    pub fn scale(&self) -> f64 {
        self.features.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &VertexSet) -> f64 {
        assert_eq!((self.n, self.c), (other.n, other.c));
        self.features
            .iter()
            .zip(&other.features)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Symmetric `n × n` Euclidean distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(HdError::Shape(format!(
                "distance matrix {n}×{n} needs {} values, got {}",
                n * n,
                values.len()
            )));
        }
        Ok(Self { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

/// How features are scaled before distances are thresholded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexScaling {
    /// Raw activations.
    #[default]
    Raw,
    /// Distances divided by `sqrt(c)`: root-mean-square per-channel gap.
    PerDim,
}

pub fn pairwise_distance(vs: &VertexSet) -> Result<DistanceMatrix> {
    if !vs.features.iter().all(|v| v.is_finite()) {
        return Err(HdError::NonFinite("vertex features".into()));
    }
    let n = vs.n;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = vs
                .row(i)
                .iter()
                .zip(vs.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

/// Incidence matrix `H` (`n_vertices × n_edges`) with its degree vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypergraph {
    n_vertices: usize,
    n_edges: usize,
    incidence: Vec<u8>,
    vertex_degrees: Vec<usize>,
    edge_degrees: Vec<usize>,
}

impl Hypergraph {
    /// From an explicit 0/1 incidence matrix, row-major `n_vertices × n_edges`.
    pub fn from_incidence(n_vertices: usize, n_edges: usize, incidence: Vec<u8>) -> Result<Self> {
        if incidence.len() != n_vertices * n_edges {
            return Err(HdError::Shape(format!(
                "incidence {n_vertices}×{n_edges} needs {} entries, got {}",
                n_vertices * n_edges,
                incidence.len()
            )));
        }
        if incidence.iter().any(|&v| v > 1) {
            return Err(HdError::Shape("incidence entries must be 0 or 1".into()));
        }
        let mut vertex_degrees = vec![0; n_vertices];
        let mut edge_degrees = vec![0; n_edges];
        for v in 0..n_vertices {
            for e in 0..n_edges {
                let h = incidence[v * n_edges + e] as usize;
                vertex_degrees[v] += h;
                edge_degrees[e] += h;
            }
        }
        Ok(Self {
            n_vertices,
            n_edges,
            incidence,
            vertex_degrees,
            edge_degrees,
        })
    }

    /// One hyperedge per vertex: `e_i = { v_j : d(i, j) ≤ ε }`.
    pub fn from_distances(d: &DistanceMatrix, epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(HdError::config("epsilon", format!("must be ≥ 0, got {epsilon}")));
        }
        let n = d.n;
        // H[v][e] = 1 iff v ∈ ball(e); d is symmetric so H is too.
        let incidence = (0..n * n)
            .map(|k| u8::from(d.values[(k % n) * n + k / n] <= epsilon))
            .collect();
        Self::from_incidence(n, n, incidence)
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn contains(&self, vertex: usize, edge: usize) -> bool {
        self.incidence[vertex * self.n_edges + edge] == 1
    }

    pub fn incidence(&self) -> &[u8] {
        &self.incidence
    }

    pub fn vertex_degrees(&self) -> &[usize] {
        &self.vertex_degrees
    }

    pub fn edge_degrees(&self) -> &[usize] {
        &self.edge_degrees
    }

    /// Vertices of hyperedge `e`.
    pub fn edge_members(&self, e: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_vertices).filter(move |&v| self.contains(v, e))
    }

    /// Hyperedges containing vertex `v`.
    pub fn vertex_edges(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_edges).filter(move |&e| self.contains(v, e))
    }

    /// Count of vertices per vertex degree.
    pub fn degree_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for &d in &self.vertex_degrees {
            *hist.entry(d).or_insert(0) += 1;
        }
        hist
    }

    /// `D_v⁻¹ H D_e⁻¹ Hᵀ` as a dense row-major `n × n` matrix, zero degrees
    /// inverted to zero.
    pub fn propagation_matrix(&self) -> Vec<f64> {
        let (n, m) = (self.n_vertices, self.n_edges);
        let inv = |d: usize| if d == 0 { 0.0 } else { 1.0 / d as f64 };
        let mut left = vec![0.0; n * m]; // D_v⁻¹ H D_e⁻¹
        let mut right = vec![0.0; n * m]; // H
        for v in 0..n {
            for e in 0..m {
                if self.contains(v, e) {
                    left[v * m + e] = inv(self.vertex_degrees[v]) * inv(self.edge_degrees[e]);
                    right[v * m + e] = 1.0;
                }
            }
        }
        let mut p = vec![0.0; n * n];
        gemm(n, m, n, 1.0, &left, false, &right, true, 0.0, &mut p);
        p
    }
}

pub fn construct_hypergraph(vs: &VertexSet, epsilon: f64) -> Result<Hypergraph> {
    construct_hypergraph_scaled(vs, epsilon, VertexScaling::Raw)
}

pub fn construct_hypergraph_scaled(
    vs: &VertexSet,
    epsilon: f64,
    scaling: VertexScaling,
) -> Result<Hypergraph> {
    let mut d = pairwise_distance(vs)?;
    if scaling == VertexScaling::PerDim {
        let s = 1.0 / (vs.c as f64).sqrt();
        d.values.iter_mut().for_each(|v| *v *= s);
    }
    Hypergraph::from_distances(&d, epsilon)
}

/// Trainable `Θ`, row-major `c_in × c_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperConvWeights {
    c_in: usize,
    c_out: usize,
    theta: Vec<f64>,
}

impl HyperConvWeights {
    pub fn new(c_in: usize, c_out: usize, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != c_in * c_out {
            return Err(HdError::Shape(format!(
                "theta {c_in}×{c_out} needs {} values, got {}",
                c_in * c_out,
                theta.len()
            )));
        }
        if !theta.iter().all(|v| v.is_finite()) {
            return Err(HdError::NonFinite("theta".into()));
        }
        Ok(Self { c_in, c_out, theta })
    }

    pub fn identity(c: usize) -> Self {
        let mut theta = vec![0.0; c * c];
        for i in 0..c {
            theta[i * c + i] = 1.0;
        }
        Self { c_in: c, c_out: c, theta }
    }

    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            theta: vec![0.0; c_in * c_out],
        }
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }
}

/// Degenerate structure seen during a convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HyperConvDiagnostics {
    /// Vertices in no hyperedge; their output is the residual alone.
    pub isolated_vertices: usize,
    /// Hyperedges with no vertex; their message is zero.
    pub empty_edges: usize,
}

fn check_conv_inputs(vs: &VertexSet, hg: &Hypergraph, w: &HyperConvWeights) -> Result<()> {
    if hg.n_vertices != vs.n {
        return Err(HdError::Shape(format!(
            "hypergraph has {} vertices, vertex set has {}",
            hg.n_vertices, vs.n
        )));
    }
    if w.c_in != vs.c || w.c_out != vs.c {
        return Err(HdError::Shape(format!(
            "residual hyperconv needs theta {c}×{c}, got {}×{}",
            w.c_in,
            w.c_out,
            c = vs.c
        )));
    }
    Ok(())
}

/// Two-stage vertex → hyperedge → vertex message passing with residual.
pub fn hyperconv_message_passing(
    vs: &VertexSet,
    hg: &Hypergraph,
    w: &HyperConvWeights,
) -> Result<(VertexSet, HyperConvDiagnostics)> {
    check_conv_inputs(vs, hg, w)?;
    let c = vs.c;
    let mut diag = HyperConvDiagnostics::default();

    // x_v·Θ for every vertex
    let projected: Vec<Vec<f64>> = (0..vs.n)
        .map(|v| {
            let x = vs.row(v);
            (0..c)
                .map(|o| (0..c).map(|i| x[i] * w.theta[i * c + o]).sum())
                .collect()
        })
        .collect();

    let edge_msgs: Vec<Vec<f64>> = (0..hg.n_edges)
        .map(|e| {
            let members: Vec<usize> = hg.edge_members(e).collect();
            let mut msg = vec![0.0; c];
            if members.is_empty() {
                diag.empty_edges += 1;
                return msg;
            }
            for &v in &members {
                for (m, p) in msg.iter_mut().zip(&projected[v]) {
                    *m += p;
                }
            }
            msg.iter_mut().for_each(|m| *m /= members.len() as f64);
            msg
        })
        .collect();

    let mut out = vs.features.clone();
    for v in 0..vs.n {
        let edges: Vec<usize> = hg.vertex_edges(v).collect();
        if edges.is_empty() {
            diag.isolated_vertices += 1;
            continue;
        }
        let k = edges.len() as f64;
        for &e in &edges {
            for (o, m) in out[v * c..(v + 1) * c].iter_mut().zip(&edge_msgs[e]) {
                *o += m / k;
            }
        }
    }
    Ok((VertexSet::new(vs.n, c, out)?, diag))
}

/// `X + D_v⁻¹ H D_e⁻¹ Hᵀ X Θ`.
pub fn hyperconv_matrix(vs: &VertexSet, hg: &Hypergraph, w: &HyperConvWeights) -> Result<VertexSet> {
    check_conv_inputs(vs, hg, w)?;
    let (n, m, c) = (vs.n, hg.n_edges, vs.c);
    let inv = |d: usize| if d == 0 { 0.0 } else { 1.0 / d as f64 };
    let h: Vec<f64> = hg.incidence.iter().map(|&v| v as f64).collect();

    let mut xt = vec![0.0; n * c]; // X Θ
    gemm(n, c, c, 1.0, &vs.features, false, &w.theta, false, 0.0, &mut xt);
    let mut edge = vec![0.0; m * c]; // Hᵀ X Θ
    gemm(m, n, c, 1.0, &h, true, &xt, false, 0.0, &mut edge);
    for e in 0..m {
        let s = inv(hg.edge_degrees[e]);
        edge[e * c..(e + 1) * c].iter_mut().for_each(|v| *v *= s);
    }
    let mut agg = vec![0.0; n * c]; // H D_e⁻¹ Hᵀ X Θ
    gemm(n, m, c, 1.0, &h, false, &edge, false, 0.0, &mut agg);
    let mut out = vs.features.clone();
    for v in 0..n {
        let s = inv(hg.vertex_degrees[v]);
        for k in 0..c {
            out[v * c + k] += s * agg[v * c + k];
        }
    }
    VertexSet::new(n, c, out)
}

/// Gradients of `Σ grad_out ⊙ hyperconv_matrix(X)` with respect to `X` and
/// `Θ`, the hypergraph held fixed.
pub fn hyperconv_matrix_backward(
    vs: &VertexSet,
    hg: &Hypergraph,
    w: &HyperConvWeights,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_conv_inputs(vs, hg, w)?;
    let (n, c) = (vs.n, vs.c);
    if grad_out.len() != n * c {
        return Err(HdError::Shape("grad_out must match vertex set".into()));
    }
    let p = hg.propagation_matrix();
    // dX = G + Pᵀ G Θᵀ
    let mut ptg = vec![0.0; n * c];
    gemm(n, n, c, 1.0, &p, true, grad_out, false, 0.0, &mut ptg);
    let mut gx = grad_out.to_vec();
    gemm(n, c, c, 1.0, &ptg, false, &w.theta, true, 1.0, &mut gx);
    // dΘ = (P X)ᵀ G
    let mut px = vec![0.0; n * c];
    gemm(n, n, c, 1.0, &p, false, &vs.features, false, 0.0, &mut px);
    let mut gtheta = vec![0.0; c * c];
    gemm(c, n, c, 1.0, &px, true, grad_out, false, 0.0, &mut gtheta);
    Ok((gx, gtheta))
}

/// Per batch item, the `h·w` spatial positions (row-major) become vertices
/// carrying the `c` channel values.
pub fn feature_map_to_vertices(fm: &Tensor) -> Result<Vec<VertexSet>> {
    if fm.rank() != 4 {
        return Err(HdError::Shape(format!(
            "feature map must be rank 4, got {:?}",
            fm.shape()
        )));
    }
    let (b, c, h, w) = fm.dims4();
    let n = h * w;
    (0..b)
        .map(|bi| {
            let src = &fm.data()[bi * c * n..(bi + 1) * c * n];
            let mut feats = vec![0.0; n * c];
            for ch in 0..c {
                for v in 0..n {
                    feats[v * c + ch] = src[ch * n + v];
                }
            }
            VertexSet::new(n, c, feats)
        })
        .collect()
}

/// Inverse of [`feature_map_to_vertices`].
pub fn vertices_to_feature_map(sets: &[VertexSet], h: usize, w: usize) -> Result<Tensor> {
    let first = sets
        .first()
        .ok_or_else(|| HdError::Shape("no vertex sets".into()))?;
    let (n, c) = (h * w, first.c);
    let mut data = vec![0.0; sets.len() * c * n];
    for (bi, vs) in sets.iter().enumerate() {
        if vs.n != n || vs.c != c {
            return Err(HdError::Shape(format!(
                "vertex set {bi} is {}×{}, expected {n}×{c}",
                vs.n, vs.c
            )));
        }
        let dst = &mut data[bi * c * n..(bi + 1) * c * n];
        for v in 0..n {
            for ch in 0..c {
                dst[ch * n + v] = vs.features[v * c + ch];
            }
        }
    }
    Tensor::new(vec![sets.len(), c, h, w], data)
}
