//! Structure inference over a detection graph.
//!
//! Every node (ROI) is updated by two GRU banks that both start from the
//! node's current state: the scene GRU reads the fixed whole-image feature,
//! the edge GRU reads the max-pooled messages of the other nodes, each message
//! scaled by a learned scalar edge
//!
//! ```text
//! e[i][j] = relu(w_p · R(b_i, b_j)) * tanh(w_v · [f_i, f_j])
//! m_i     = max_{j != i} e[i][j] * f_j          (per coordinate)
//! ```
//!
//! The two outputs are fused (mean by default) into the next node state, and
//! the step repeats `T` times with edges recomputed from the new states.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{spatial_relation, BBox, RELATION_DIM};
use crate::memory_cell::{gru_backward, gru_forward, GruCache, GruParams};
use crate::numerics::{init_params, seed_for, InitScheme, Matrix, ParamStore, Tensor, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    Concat,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "concat" => Ok(Pooling::Concat),
            other => Err(Error::Config(format!(
                "unknown pooling `{other}` (expected mean, max or concat)"
            ))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
            Pooling::Concat => "concat",
        })
    }
}

/// Which GRU banks run in a step and how their outputs are fused. With only
/// one bank enabled its output is the new state and `pooling` is unused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepConfig {
    pub pooling: Pooling,
    pub scene: bool,
    pub edge: bool,
}

impl StepConfig {
    pub fn full(pooling: Pooling) -> Self {
        StepConfig {
            pooling,
            scene: true,
            edge: true,
        }
    }

    fn fuses(&self) -> bool {
        self.scene && self.edge
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinParams {
    pub scene_gru: GruParams,
    pub edge_gru: GruParams,
    /// `1 x 12`, reads the spatial relation.
    pub w_p: Matrix,
    /// `1 x 2d`, reads `[f_i, f_j]`.
    pub w_v: Matrix,
    /// `d x 2d` projection for concat fusion.
    pub w_a: Option<Matrix>,
}

/// Init scale of `w_p`: the raw relation vector carries areas and squared
/// offsets in grid units, so a fan-based range saturates the edge GRU.
pub const SPATIAL_INIT_LIMIT: f64 = 0.02;

impl SinParams {
    pub fn zeros(d: usize, with_concat: bool) -> Self {
        SinParams {
            scene_gru: GruParams::zeros(d),
            edge_gru: GruParams::zeros(d),
            w_p: Matrix::zeros(1, RELATION_DIM),
            w_v: Matrix::zeros(1, 2 * d),
            w_a: with_concat.then(|| Matrix::zeros(d, 2 * d)),
        }
    }

    pub fn init(d: usize, seed: u64, with_concat: bool) -> Self {
        let mat = |name: &str, shape: [usize; 2], scheme| match init_params(&shape, seed_for(seed, name), scheme) {
            Tensor::Matrix(m) => m,
            Tensor::Vector(_) => unreachable!(),
        };
        SinParams {
            scene_gru: GruParams::init(d, seed, "sin/scene_gru"),
            edge_gru: GruParams::init(d, seed, "sin/edge_gru"),
            w_p: mat(
                "sin/w_p",
                [1, RELATION_DIM],
                InitScheme::Uniform {
                    limit: SPATIAL_INIT_LIMIT,
                },
            ),
            w_v: mat("sin/w_v", [1, 2 * d], InitScheme::FanUniform),
            w_a: with_concat.then(|| mat("sin/w_a", [d, 2 * d], InitScheme::FanUniform)),
        }
    }

    pub fn dim(&self) -> usize {
        self.scene_gru.dim()
    }

    pub fn zeros_like(&self) -> Self {
        SinParams::zeros(self.dim(), self.w_a.is_some())
    }

    pub fn matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::with_capacity(11);
        for (prefix, g) in [("sin/scene_gru", &self.scene_gru), ("sin/edge_gru", &self.edge_gru)] {
            for (name, m) in ["W_r", "W_z", "W", "U"].iter().zip(g.matrices()) {
                out.push((format!("{prefix}/{name}"), m));
            }
        }
        out.push(("sin/w_p".into(), &self.w_p));
        out.push(("sin/w_v".into(), &self.w_v));
        if let Some(w_a) = &self.w_a {
            out.push(("sin/w_a".into(), w_a));
        }
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(11);
        out.extend(self.scene_gru.matrices_mut());
        out.extend(self.edge_gru.matrices_mut());
        out.push(&mut self.w_p);
        out.push(&mut self.w_v);
        if let Some(w_a) = &mut self.w_a {
            out.push(w_a);
        }
        out
    }

    pub fn export(&self, store: &mut ParamStore) {
        for (name, m) in self.matrices() {
            store.insert(name, m.clone());
        }
    }

    pub fn import(store: &ParamStore) -> Result<Self> {
        Ok(SinParams {
            scene_gru: GruParams::import("sin/scene_gru", store)?,
            edge_gru: GruParams::import("sin/edge_gru", store)?,
            w_p: store.matrix("sin/w_p")?.clone(),
            w_v: store.matrix("sin/w_v")?.clone(),
            w_a: if store.contains("sin/w_a") {
                Some(store.matrix("sin/w_a")?.clone())
            } else {
                None
            },
        })
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, m) in self.matrices() {
            store.accumulate(&name, &Tensor::Matrix(m.clone()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub node_features: Vec<Vector>,
    pub boxes: Vec<BBox>,
    pub scene_feature: Vector,
}

impl SceneGraph {
    pub fn new(node_features: Vec<Vector>, boxes: Vec<BBox>, scene_feature: Vector) -> Self {
        assert!(
            !node_features.is_empty() && node_features.len() == boxes.len(),
            "scene graph: {} features vs {} boxes",
            node_features.len(),
            boxes.len()
        );
        let d = scene_feature.dim();
        assert!(
            node_features.iter().all(|f| f.dim() == d),
            "scene graph: node feature dims must match scene dim {d}"
        );
        SceneGraph {
            node_features,
            boxes,
            scene_feature,
        }
    }

    pub fn len(&self) -> usize {
        self.node_features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.scene_feature.dim()
    }

    fn with_features(&self, node_features: Vec<Vector>) -> SceneGraph {
        SceneGraph {
            node_features,
            boxes: self.boxes.clone(),
            scene_feature: self.scene_feature.clone(),
        }
    }
}

/// `e[i][j]`: influence of sender `j` on receiver `i`. The diagonal is unused.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix {
    n: usize,
    data: Vec<f64>,
}

impl EdgeMatrix {
    pub fn zeros(n: usize) -> Self {
        EdgeMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "edge matrix must be square");
        EdgeMatrix {
            n,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, receiver: usize, sender: usize) -> f64 {
        self.data[receiver * self.n + sender]
    }

    pub fn set(&mut self, receiver: usize, sender: usize, v: f64) {
        self.data[receiver * self.n + sender] = v;
    }

    pub fn row(&self, receiver: usize) -> &[f64] {
        &self.data[receiver * self.n..(receiver + 1) * self.n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct EdgeTerms {
    spatial_pre: f64,
    visual: f64,
    weight: f64,
}

fn edge_terms(p: &SinParams, relation: &[f64; RELATION_DIM], fi: &Vector, fj: &Vector) -> EdgeTerms {
    let spatial_pre: f64 = p.w_p.row(0).iter().zip(relation).map(|(w, r)| w * r).sum();
    let wv = p.w_v.row(0);
    let d = fi.dim();
    let visual_pre: f64 = wv[..d].iter().zip(fi.iter()).map(|(w, f)| w * f).sum::<f64>()
        + wv[d..].iter().zip(fj.iter()).map(|(w, f)| w * f).sum::<f64>();
    let visual = visual_pre.tanh();
    EdgeTerms {
        spatial_pre,
        visual,
        weight: spatial_pre.max(0.0) * visual,
    }
}

/// Scalar edge `e_{j -> i}` for receiver `(b_i, f_i)` and sender `(b_j, f_j)`.
pub fn edge_weight(p: &SinParams, box_i: &BBox, box_j: &BBox, f_i: &Vector, f_j: &Vector) -> f64 {
    assert_eq!(
        p.w_v.cols(),
        f_i.dim() + f_j.dim(),
        "edge_weight: w_v has {} columns for features of dim {} + {}",
        p.w_v.cols(),
        f_i.dim(),
        f_j.dim()
    );
    edge_terms(p, &spatial_relation(box_i, box_j), f_i, f_j).weight
}

fn relations(boxes: &[BBox]) -> Vec<[f64; RELATION_DIM]> {
    let n = boxes.len();
    let mut out = vec![[0.0; RELATION_DIM]; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i * n + j] = spatial_relation(&boxes[i], &boxes[j]);
            }
        }
    }
    out
}

fn edges_with_terms(
    p: &SinParams,
    features: &[Vector],
    relations: &[[f64; RELATION_DIM]],
) -> (EdgeMatrix, Vec<EdgeTerms>) {
    let n = features.len();
    let mut e = EdgeMatrix::zeros(n);
    let mut terms = vec![
        EdgeTerms {
            spatial_pre: 0.0,
            visual: 0.0,
            weight: 0.0
        };
        n * n
    ];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let t = edge_terms(p, &relations[i * n + j], &features[i], &features[j]);
            e.set(i, j, t.weight);
            terms[i * n + j] = t;
        }
    }
    (e, terms)
}

pub fn compute_edges(p: &SinParams, g: &SceneGraph) -> EdgeMatrix {
    edges_with_terms(p, &g.node_features, &relations(&g.boxes)).0
}

/// Per-coordinate max over senders `j != i` of `e[i][j] * f_j`, and the
/// winning sender per coordinate (lowest index on ties).
fn pool_messages(features: &[Vector], e: &EdgeMatrix, i: usize) -> (Vector, Vec<usize>) {
    let n = features.len();
    let d = features[i].dim();
    if n == 1 {
        return (Vector::zeros(d), Vec::new());
    }
    let mut best = vec![f64::NEG_INFINITY; d];
    let mut arg = vec![usize::MAX; d];
    for j in (0..n).filter(|&j| j != i) {
        let w = e.get(i, j);
        for k in 0..d {
            let v = w * features[j][k];
            if v > best[k] {
                best[k] = v;
                arg[k] = j;
            }
        }
    }
    (Vector(best), arg)
}

pub fn integrate_messages(g: &SceneGraph, e: &EdgeMatrix, i: usize) -> Vector {
    assert_eq!(e.len(), g.len(), "integrate_messages: edge matrix size vs graph size");
    pool_messages(&g.node_features, e, i).0
}

#[derive(Debug, Clone)]
struct StepTape {
    inputs: Vec<Vector>,
    edges: Option<(EdgeMatrix, Vec<EdgeTerms>)>,
    argmax: Vec<Vec<usize>>,
    scene_caches: Vec<GruCache>,
    edge_caches: Vec<GruCache>,
    scene_out: Vec<Vector>,
    edge_out: Vec<Vector>,
}

/// Everything recorded by [`sin_infer_taped`] for the backward pass.
#[derive(Debug, Clone)]
pub struct SinTape {
    config: StepConfig,
    relations: Vec<[f64; RELATION_DIM]>,
    scene_feature: Vector,
    steps: Vec<StepTape>,
}

impl SinTape {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Edge matrix computed at step `t`, if the edge path ran.
    pub fn edges(&self, t: usize) -> Option<&EdgeMatrix> {
        self.steps.get(t).and_then(|s| s.edges.as_ref().map(|(e, _)| e))
    }

    pub fn last_edges(&self) -> Option<&EdgeMatrix> {
        self.steps.last().and_then(|s| s.edges.as_ref().map(|(e, _)| e))
    }
}

fn fuse(p: &SinParams, cfg: &StepConfig, hs: Option<&Vector>, he: Option<&Vector>) -> Vector {
    match (hs, he) {
        (Some(s), Some(e)) => match cfg.pooling {
            Pooling::Mean => Vector(s.iter().zip(e.iter()).map(|(a, b)| 0.5 * (a + b)).collect()),
            Pooling::Max => Vector(s.iter().zip(e.iter()).map(|(a, b)| a.max(*b)).collect()),
            Pooling::Concat => p
                .w_a
                .as_ref()
                .expect("concat pooling requires the sin/w_a projection")
                .affine(&s.concat(e)),
        },
        (Some(s), None) => s.clone(),
        (None, Some(e)) => e.clone(),
        (None, None) => unreachable!("step config enables no path"),
    }
}

fn step_taped(
    p: &SinParams,
    features: &[Vector],
    scene: &Vector,
    relations: &[[f64; RELATION_DIM]],
    cfg: &StepConfig,
) -> (Vec<Vector>, StepTape) {
    assert!(cfg.scene || cfg.edge, "structure inference step needs the scene or the edge path");
    let n = features.len();
    let edges = cfg.edge.then(|| edges_with_terms(p, features, relations));
    let mut tape = StepTape {
        inputs: features.to_vec(),
        edges: None,
        argmax: Vec::new(),
        scene_caches: Vec::new(),
        edge_caches: Vec::new(),
        scene_out: Vec::new(),
        edge_out: Vec::new(),
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let hs = cfg.scene.then(|| {
            let (h, cache) = gru_forward(&p.scene_gru, scene, &features[i]);
            tape.scene_caches.push(cache);
            h
        });
        let he = edges.as_ref().map(|(e, _)| {
            let (m, arg) = pool_messages(features, e, i);
            tape.argmax.push(arg);
            let (h, cache) = gru_forward(&p.edge_gru, &m, &features[i]);
            tape.edge_caches.push(cache);
            h
        });
        out.push(fuse(p, cfg, hs.as_ref(), he.as_ref()));
        if let Some(h) = hs {
            tape.scene_out.push(h);
        }
        if let Some(h) = he {
            tape.edge_out.push(h);
        }
    }
    tape.edges = edges;
    (out, tape)
}

pub fn sin_step(p: &SinParams, g: &SceneGraph, cfg: &StepConfig) -> SceneGraph {
    let rel = relations(&g.boxes);
    let (out, _) = step_taped(p, &g.node_features, &g.scene_feature, &rel, cfg);
    g.with_features(out)
}

pub fn sin_infer(p: &SinParams, g: &SceneGraph, steps: usize, cfg: &StepConfig) -> SceneGraph {
    sin_infer_taped(p, g, steps, cfg).0
}

pub fn sin_infer_taped(p: &SinParams, g: &SceneGraph, steps: usize, cfg: &StepConfig) -> (SceneGraph, SinTape) {
    let rel = if steps > 0 && cfg.edge { relations(&g.boxes) } else { Vec::new() };
    let mut features = g.node_features.clone();
    let mut tapes = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (next, tape) = step_taped(p, &features, &g.scene_feature, &rel, cfg);
        tapes.push(tape);
        features = next;
    }
    let tape = SinTape {
        config: *cfg,
        relations: rel,
        scene_feature: g.scene_feature.clone(),
        steps: tapes,
    };
    (g.with_features(features), tape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinInputGrads {
    pub node_features: Vec<Vector>,
    pub scene_feature: Vector,
}

/// Reverse pass through every recorded step. Parameter gradients are added
/// into `grads`; gradients w.r.t. the initial node features and the scene
/// feature are returned.
pub fn sin_backward(p: &SinParams, tape: &SinTape, d_out: &[Vector], grads: &mut SinParams) -> Result<SinInputGrads> {
    let d = tape.scene_feature.dim();
    let n = match tape.steps.first() {
        Some(s) => s.inputs.len(),
        None => d_out.len(),
    };
    if d_out.len() != n || d_out.iter().any(|v| v.dim() != d) {
        return Err(Error::Shape(format!(
            "sin_backward: tape has {n} nodes of dim {d}, upstream has {} gradients",
            d_out.len()
        )));
    }
    let cfg = tape.config;
    let mut d_nodes: Vec<Vector> = d_out.to_vec();
    let mut d_scene = Vector::zeros(d);
    for step in tape.steps.iter().rev() {
        d_nodes = step_backward(p, tape, step, &cfg, &d_nodes, &mut d_scene, grads);
    }
    Ok(SinInputGrads {
        node_features: d_nodes,
        scene_feature: d_scene,
    })
}

fn step_backward(
    p: &SinParams,
    tape: &SinTape,
    step: &StepTape,
    cfg: &StepConfig,
    d_out: &[Vector],
    d_scene: &mut Vector,
    grads: &mut SinParams,
) -> Vec<Vector> {
    let n = step.inputs.len();
    let d = tape.scene_feature.dim();
    let mut d_in = vec![Vector::zeros(d); n];
    let mut d_edge = vec![0.0; n * n];

    for i in 0..n {
        let (dhs, dhe) = if cfg.fuses() {
            let (hs, he) = (&step.scene_out[i], &step.edge_out[i]);
            match cfg.pooling {
                Pooling::Mean => (d_out[i].scale(0.5), d_out[i].scale(0.5)),
                Pooling::Max => {
                    let mut a = Vector::zeros(d);
                    let mut b = Vector::zeros(d);
                    for k in 0..d {
                        if hs[k] >= he[k] {
                            a[k] = d_out[i][k];
                        } else {
                            b[k] = d_out[i][k];
                        }
                    }
                    (a, b)
                }
                Pooling::Concat => {
                    let w_a = p.w_a.as_ref().expect("concat pooling requires the sin/w_a projection");
                    let g_a = grads.w_a.as_mut().expect("concat gradients require sin/w_a");
                    g_a.add_outer(1.0, &d_out[i], &hs.concat(he));
                    w_a.affine_transpose(&d_out[i]).split_at(d)
                }
            }
        } else if cfg.scene {
            (d_out[i].clone(), Vector::zeros(d))
        } else {
            (Vector::zeros(d), d_out[i].clone())
        };

        if cfg.scene {
            let gi = gru_backward(&p.scene_gru, &step.scene_caches[i], &dhs, &mut grads.scene_gru);
            d_scene.add_assign(&gi.dx);
            d_in[i].add_assign(&gi.dh);
        }
        if cfg.edge {
            let gi = gru_backward(&p.edge_gru, &step.edge_caches[i], &dhe, &mut grads.edge_gru);
            d_in[i].add_assign(&gi.dh);
            let (e, _) = step.edges.as_ref().expect("edge path recorded edges");
            for (k, &j) in step.argmax[i].iter().enumerate() {
                let g = gi.dx[k];
                if g == 0.0 {
                    continue;
                }
                d_edge[i * n + j] += g * step.inputs[j][k];
                d_in[j][k] += g * e.get(i, j);
            }
        }
    }

    if let Some((_, terms)) = &step.edges {
        let wv = p.w_v.row(0).to_vec();
        for i in 0..n {
            for j in 0..n {
                let de = d_edge[i * n + j];
                if i == j || de == 0.0 {
                    continue;
                }
                let t = terms[i * n + j];
                if t.spatial_pre > 0.0 {
                    grads.w_p.add_outer(de * t.visual, &[1.0], &tape.relations[i * n + j]);
                }
                let du = de * t.spatial_pre.max(0.0) * (1.0 - t.visual * t.visual);
                if du == 0.0 {
                    continue;
                }
                let joint = step.inputs[i].concat(&step.inputs[j]);
                grads.w_v.add_outer(du, &[1.0], &joint);
                for k in 0..d {
                    d_in[i][k] += du * wv[k];
                    d_in[j][k] += du * wv[d + k];
                }
            }
        }
    }
    d_in
}

/// For each listed receiver, the sender with the largest edge weight (lowest
/// index on ties) and that weight.
pub fn relation_report(e: &EdgeMatrix, receivers: &[usize]) -> Vec<(usize, usize, f64)> {
    let n = e.len();
    if n < 2 {
        return Vec::new();
    }
    receivers
        .iter()
        .filter(|&&i| i < n)
        .map(|&i| {
            let mut best = None::<(usize, f64)>;
            for j in (0..n).filter(|&j| j != i) {
                let w = e.get(i, j);
                if best.is_none_or(|(_, bw)| w > bw) {
                    best = Some((j, w));
                }
            }
            let (j, w) = best.expect("n >= 2");
            (i, j, w)
        })
        .collect()
}
