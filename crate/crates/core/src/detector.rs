//! Toy two-stage detector around structure inference.
//!
//! A summed-area table over the scene grid stands in for ROI pooling; a
//! linear objectness score over dense anchors stands in for the proposal
//! network. Node and scene features share one projection, the structure
//! inference net refines node states, and per-ROI heads predict a class
//! distribution and per-class box deltas from the final states.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_deltas, encode_deltas, iou, nms, BBox};
use crate::numerics::{init_params, rng_from, seed_for, sigmoid, InitScheme, Matrix, ParamStore, Tensor, Vector};
use crate::structure_inference::{
    sin_backward, sin_infer_taped, Pooling, SceneGraph, SinParams, SinTape, StepConfig,
};
use crate::synth_data::{covered_cells, GtObject, SceneSample, WorldSpec};

/// Anchor scales (box height) and aspect ratios (width / height).
pub const ANCHOR_SCALES: [f64; 3] = [1.0, 3.0, 5.0];
pub const ANCHOR_RATIOS: [f64; 2] = [1.0, 5.0 / 3.0];
pub const NUM_ANCHOR_SHAPES: usize = ANCHOR_SCALES.len() * ANCHOR_RATIOS.len();

pub const PROPOSAL_NMS_IOU: f64 = 0.7;
pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.3;
/// Anchor labeling thresholds for the objectness score.
pub const ANCHOR_POS_IOU: f64 = 0.7;
pub const ANCHOR_NEG_IOU: f64 = 0.3;
pub const REG_WEIGHT: f64 = 1.0;
/// Std-dev of the delta-space jitter applied to injected ground truth.
pub const GT_JITTER: f64 = 0.1;
pub const LR_DROP_AT: f64 = 0.7;
pub const LR_DROP_FACTOR: f64 = 0.1;

/// Ablation arm: which context paths run inside structure inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// No structure inference; heads read the raw ROI features.
    Baseline,
    /// Scene GRUs only.
    Scene,
    /// Edge GRUs only.
    Edge,
    /// Both banks, fused.
    Sin,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Scene, Arm::Edge, Arm::Sin];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Scene => "scene",
            Arm::Edge => "edge",
            Arm::Sin => "sin",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Arm::Baseline),
            "scene" => Ok(Arm::Scene),
            "edge" => Ok(Arm::Edge),
            "sin" => Ok(Arm::Sin),
            other => Err(Error::Config(format!(
                "unknown arm `{other}` (expected baseline, scene, edge or sin)"
            ))),
        }
    }
}

fn default_hidden_dim() -> usize {
    32
}

fn default_spatial_lr_mult() -> f64 {
    0.01
}

fn default_arm() -> Arm {
    Arm::Sin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iters: usize,
    pub rois_per_image: usize,
    #[serde(rename = "T")]
    pub steps: usize,
    pub pooling: Pooling,
    pub seed: u64,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_arm")]
    pub arm: Arm,
    /// Step size of `w_p` relative to `lr`. The relation vector carries raw
    /// sizes, areas and squared offsets, so `w_p` sees gradients far larger
    /// than any other parameter.
    #[serde(default = "default_spatial_lr_mult")]
    pub spatial_lr_mult: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            iters: 20000,
            rois_per_image: 16,
            steps: 2,
            pooling: Pooling::Mean,
            seed: 0,
            hidden_dim: default_hidden_dim(),
            arm: Arm::Sin,
            spatial_lr_mult: default_spatial_lr_mult(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.rois_per_image == 0 {
            return bad("rois_per_image must be at least 1".into());
        }
        if !(self.spatial_lr_mult >= 0.0 && self.spatial_lr_mult.is_finite()) {
            return bad(format!("spatial_lr_mult must be non-negative, got {}", self.spatial_lr_mult));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        Ok(())
    }

    /// Number of inference steps actually run; zero for the baseline arm.
    pub fn effective_steps(&self) -> usize {
        match self.arm {
            Arm::Baseline => 0,
            _ => self.steps,
        }
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            pooling: self.pooling,
            scene: matches!(self.arm, Arm::Scene | Arm::Sin | Arm::Baseline),
            edge: matches!(self.arm, Arm::Edge | Arm::Sin | Arm::Baseline),
        }
    }

    pub fn needs_concat(&self) -> bool {
        self.pooling == Pooling::Concat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    /// `d x C`, shared by node and scene features.
    pub feat_proj: Matrix,
    pub sin: SinParams,
    /// `(K + 1) x d`; row 0 is background.
    pub cls_head: Matrix,
    /// `4K x d`; rows `4c..4c+4` are the deltas of category `c`.
    pub reg_head: Matrix,
    /// `A x 2C` objectness weights per anchor shape over `[inside, ring]`.
    pub objectness: Matrix,
}

impl DetectorParams {
    pub fn zeros(d: usize, channels: usize, num_categories: usize, with_concat: bool) -> Self {
        DetectorParams {
            feat_proj: Matrix::zeros(d, channels),
            sin: SinParams::zeros(d, with_concat),
            cls_head: Matrix::zeros(num_categories + 1, d),
            reg_head: Matrix::zeros(4 * num_categories, d),
            objectness: Matrix::zeros(NUM_ANCHOR_SHAPES, 2 * channels),
        }
    }

    pub fn init(d: usize, channels: usize, num_categories: usize, seed: u64, with_concat: bool) -> Self {
        let mat = |name: &str, rows, cols, scheme| match init_params(&[rows, cols], seed_for(seed, name), scheme) {
            Tensor::Matrix(m) => m,
            Tensor::Vector(_) => unreachable!(),
        };
        DetectorParams {
            feat_proj: mat("feat_proj", d, channels, InitScheme::FanUniform),
            sin: SinParams::init(d, seed, with_concat),
            cls_head: mat("cls_head", num_categories + 1, d, InitScheme::FanUniform),
            reg_head: mat("reg_head", 4 * num_categories, d, InitScheme::FanUniform),
            objectness: mat("objectness", NUM_ANCHOR_SHAPES, 2 * channels, InitScheme::FanUniform),
        }
    }

    pub fn for_world(world: &WorldSpec, cfg: &TrainConfig) -> Self {
        DetectorParams::init(
            cfg.hidden_dim,
            world.channels,
            world.num_categories(),
            seed_for(cfg.seed, "init"),
            cfg.needs_concat(),
        )
    }

    pub fn dim(&self) -> usize {
        self.feat_proj.rows()
    }

    pub fn channels(&self) -> usize {
        self.feat_proj.cols()
    }

    pub fn num_categories(&self) -> usize {
        self.cls_head.rows() - 1
    }

    pub fn zeros_like(&self) -> Self {
        DetectorParams::zeros(self.dim(), self.channels(), self.num_categories(), self.sin.w_a.is_some())
    }

    pub fn named_matrices(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("cls_head".to_string(), &self.cls_head),
            ("feat_proj".to_string(), &self.feat_proj),
            ("objectness".to_string(), &self.objectness),
            ("reg_head".to_string(), &self.reg_head),
        ];
        out.extend(self.sin.matrices());
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![
            &mut self.cls_head,
            &mut self.feat_proj,
            &mut self.objectness,
            &mut self.reg_head,
        ];
        out.extend(self.sin.matrices_mut());
        out
    }

    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, m) in self.named_matrices() {
            store.insert(name, m.clone());
        }
        store
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let p = DetectorParams {
            feat_proj: store.matrix("feat_proj")?.clone(),
            sin: SinParams::import(store)?,
            cls_head: store.matrix("cls_head")?.clone(),
            reg_head: store.matrix("reg_head")?.clone(),
            objectness: store.matrix("objectness")?.clone(),
        };
        p.check_shapes()?;
        Ok(p)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dim();
        let c = self.channels();
        let k = self.num_categories();
        let ok = self.sin.dim() == d
            && self.sin.w_v.cols() == 2 * d
            && self.cls_head.cols() == d
            && self.reg_head.rows() == 4 * k
            && self.reg_head.cols() == d
            && self.objectness.rows() == NUM_ANCHOR_SHAPES
            && self.objectness.cols() == 2 * c
            && self.sin.w_a.as_ref().is_none_or(|m| m.rows() == d && m.cols() == 2 * d);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "detector parameters are inconsistent (d={d}, C={c}, K={k})"
            )))
        }
    }

    /// Writes `self` (a gradient) into the gradient buffers of `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, m) in self.named_matrices() {
            store.accumulate(&name, &Tensor::Matrix(m.clone()))?;
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.named_matrices().iter().map(|(_, m)| m.sq_norm()).sum()
    }

    pub fn scale(&mut self, k: f64) {
        for m in self.matrices_mut() {
            *m = m.scale(k);
        }
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &DetectorParams) {
        let others: Vec<Matrix> = other.named_matrices().into_iter().map(|(_, m)| m.clone()).collect();
        for (a, b) in self.matrices_mut().into_iter().zip(&others) {
            a.axpy(k, b);
        }
    }
}

/// Summed-area table over the grid, one plane per channel.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    integral: Vec<f64>,
}

impl FeatureMap {
    pub fn new(sample: &SceneSample) -> Self {
        let (h, w, c) = (sample.height, sample.width, sample.channels);
        let stride = (w + 1) * c;
        let mut integral = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            for x in 0..w {
                let cell = sample.cell(x, y);
                for k in 0..c {
                    let above = integral[y * stride + (x + 1) * c + k];
                    let left = integral[(y + 1) * stride + x * c + k];
                    let diag = integral[y * stride + x * c + k];
                    integral[(y + 1) * stride + (x + 1) * c + k] = cell[k] + above + left - diag;
                }
            }
        }
        FeatureMap {
            height: h,
            width: w,
            channels: c,
            integral,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn at(&self, y: usize, x: usize, k: usize) -> f64 {
        self.integral[y * (self.width + 1) * self.channels + x * self.channels + k]
    }

    /// Channel sums over the inclusive cell rectangle.
    fn rect_sum(&self, xa: usize, xb: usize, ya: usize, yb: usize) -> Vec<f64> {
        (0..self.channels)
            .map(|k| self.at(yb + 1, xb + 1, k) - self.at(ya, xb + 1, k) - self.at(yb + 1, xa, k) + self.at(ya, xa, k))
            .collect()
    }

    fn cover(&self, b: &BBox) -> Option<(usize, usize, usize, usize)> {
        let (xa, xb) = covered_cells(b.x0(), b.x1(), self.width)?;
        let (ya, yb) = covered_cells(b.y0(), b.y1(), self.height)?;
        Some((xa, xb, ya, yb))
    }

    /// Mean cell vector over cells whose centers lie inside `b`; the single
    /// nearest cell when none does.
    pub fn box_average(&self, b: &BBox) -> Vector {
        let (xa, xb, ya, yb) = self.cover(b).unwrap_or_else(|| {
            let x = (b.cx.floor().max(0.0) as usize).min(self.width - 1);
            let y = (b.cy.floor().max(0.0) as usize).min(self.height - 1);
            (x, x, y, y)
        });
        let count = ((xb - xa + 1) * (yb - ya + 1)) as f64;
        Vector(self.rect_sum(xa, xb, ya, yb).into_iter().map(|s| s / count).collect())
    }

    /// Mean over the one-cell ring around the interior of `b`.
    pub fn ring_average(&self, b: &BBox) -> Vector {
        let c = self.channels;
        let Some((xa, xb, ya, yb)) = self.cover(b) else {
            return Vector::zeros(c);
        };
        let (oxa, oya) = (xa.saturating_sub(1), ya.saturating_sub(1));
        let (oxb, oyb) = ((xb + 1).min(self.width - 1), (yb + 1).min(self.height - 1));
        let outer_n = (oxb - oxa + 1) * (oyb - oya + 1);
        let inner_n = (xb - xa + 1) * (yb - ya + 1);
        if outer_n == inner_n {
            return Vector::zeros(c);
        }
        let outer = self.rect_sum(oxa, oxb, oya, oyb);
        let inner = self.rect_sum(xa, xb, ya, yb);
        let n = (outer_n - inner_n) as f64;
        Vector(outer.iter().zip(&inner).map(|(o, i)| (o - i) / n).collect())
    }

    pub fn full_average(&self) -> Vector {
        let n = (self.width * self.height) as f64;
        Vector(
            self.rect_sum(0, self.width - 1, 0, self.height - 1)
                .into_iter()
                .map(|s| s / n)
                .collect(),
        )
    }

    pub fn full_box(&self) -> BBox {
        BBox::from_corners(0.0, 0.0, self.width as f64, self.height as f64)
    }
}

fn project(p: &DetectorParams, avg: &Vector) -> Vector {
    Vector(p.feat_proj.affine(avg).iter().map(|t| t.tanh()).collect())
}

pub fn extract_node_feature(p: &DetectorParams, fmap: &FeatureMap, b: &BBox) -> Vector {
    project(p, &fmap.box_average(b))
}

pub fn extract_scene_feature(p: &DetectorParams, fmap: &FeatureMap) -> Vector {
    project(p, &fmap.full_average())
}

/// `(w, h)` of every anchor shape, scale-major.
pub fn anchor_shapes() -> [(f64, f64); NUM_ANCHOR_SHAPES] {
    let mut out = [(0.0, 0.0); NUM_ANCHOR_SHAPES];
    for (si, s) in ANCHOR_SCALES.iter().enumerate() {
        for (ri, r) in ANCHOR_RATIOS.iter().enumerate() {
            out[si * ANCHOR_RATIOS.len() + ri] = (s * r, *s);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub shape: usize,
}

/// Every anchor shape centered at every cell center, clipped to the grid.
pub fn anchors(height: usize, width: usize) -> Vec<Anchor> {
    let shapes = anchor_shapes();
    let mut out = Vec::with_capacity(height * width * NUM_ANCHOR_SHAPES);
    for y in 0..height {
        for x in 0..width {
            for (shape, &(w, h)) in shapes.iter().enumerate() {
                let b = BBox::new(x as f64 + 0.5, y as f64 + 0.5, w, h).clip(width as f64, height as f64);
                out.push(Anchor { bbox: b, shape });
            }
        }
    }
    out
}

fn objectness_input(fmap: &FeatureMap, b: &BBox) -> Vector {
    fmap.box_average(b).concat(&fmap.ring_average(b))
}

#[derive(Debug, Clone)]
pub struct ScoredAnchors {
    pub anchors: Vec<Anchor>,
    pub inputs: Vec<Vector>,
    pub logits: Vec<f64>,
}

pub fn score_anchors(p: &DetectorParams, fmap: &FeatureMap) -> ScoredAnchors {
    let anchors = anchors(fmap.height(), fmap.width());
    let inputs: Vec<Vector> = anchors.iter().map(|a| objectness_input(fmap, &a.bbox)).collect();
    let logits = anchors
        .iter()
        .zip(&inputs)
        .map(|(a, x)| p.objectness.row(a.shape).iter().zip(x.iter()).map(|(w, v)| w * v).sum())
        .collect();
    ScoredAnchors { anchors, inputs, logits }
}

/// Ground truth injected ahead of the anchors during training.
pub struct Injection<'a> {
    pub gt: &'a [GtObject],
    pub jitter: f64,
    pub rng: &'a mut ChaCha8Rng,
}

/// Exactly `k` proposals: NMS over the scored anchors (and injected ground
/// truth, which outranks every anchor), padded by repeating the top box.
pub fn propose(scored: &ScoredAnchors, k: usize, width: f64, height: f64, injection: Option<Injection<'_>>) -> Vec<BBox> {
    let mut boxes: Vec<BBox> = Vec::with_capacity(scored.anchors.len() + 8);
    let mut scores: Vec<f64> = Vec::with_capacity(scored.anchors.len() + 8);
    if let Some(inj) = injection {
        let noise = Normal::new(0.0, inj.jitter.max(0.0)).expect("non-negative jitter");
        for g in inj.gt {
            let b = if inj.jitter > 0.0 {
                let d: Vec<f64> = (0..4).map(|_| noise.sample(inj.rng)).collect();
                apply_deltas(&g.bbox, &d).clip(width, height)
            } else {
                g.bbox
            };
            boxes.push(b);
            scores.push(f64::INFINITY);
        }
    }
    boxes.extend(scored.anchors.iter().map(|a| a.bbox));
    scores.extend(scored.logits.iter().copied());
    let kept = nms(&boxes, &scores, PROPOSAL_NMS_IOU, k);
    let mut out: Vec<BBox> = kept.iter().map(|&i| boxes[i]).collect();
    let top = out.first().copied().unwrap_or_else(|| BBox::from_corners(0.0, 0.0, width, height));
    out.resize(k, top);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoiLabel {
    Foreground(usize),
    Background,
    Ignore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiTarget {
    pub label: RoiLabel,
    /// Regression target for foreground ROIs.
    pub deltas: Option<Vector>,
}

/// Matches proposals to ground truth: max-IoU `>= pos_iou` is foreground,
/// `< neg_iou` background, otherwise ignored; each ground-truth box also
/// claims its highest-IoU proposal (lowest index on ties).
pub fn assign_targets(proposals: &[BBox], gt: &[GtObject], pos_iou: f64, neg_iou: f64) -> Vec<RoiTarget> {
    let mut best_gt: Vec<Option<(usize, f64)>> = vec![None; proposals.len()];
    for (i, p) in proposals.iter().enumerate() {
        for (g, obj) in gt.iter().enumerate() {
            let o = iou(p, &obj.bbox);
            if best_gt[i].is_none_or(|(_, bo)| o > bo) {
                best_gt[i] = Some((g, o));
            }
        }
    }
    let mut forced: Vec<Option<usize>> = vec![None; proposals.len()];
    for (g, obj) in gt.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in proposals.iter().enumerate() {
            let o = iou(p, &obj.bbox);
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((i, o));
            }
        }
        if let Some((i, o)) = best {
            if o > 0.0 {
                forced[i] = Some(g);
            }
        }
    }
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let matched = match (forced[i], best_gt[i]) {
                (Some(g), _) => Some(g),
                (None, Some((g, o))) if o >= pos_iou => Some(g),
                _ => None,
            };
            match matched {
                Some(g) => RoiTarget {
                    label: RoiLabel::Foreground(gt[g].category),
                    deltas: Some(encode_deltas(p, &gt[g].bbox)),
                },
                None => {
                    let best = best_gt[i].map_or(0.0, |(_, o)| o);
                    RoiTarget {
                        label: if best < neg_iou { RoiLabel::Background } else { RoiLabel::Ignore },
                        deltas: None,
                    }
                }
            }
        })
        .collect()
}

/// Forward pass record for one image.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub proposals: Vec<BBox>,
    /// Pooled cell averages feeding the projection, per ROI.
    pub roi_inputs: Vec<Vector>,
    pub scene_input: Vector,
    /// Node features before structure inference.
    pub initial: SceneGraph,
    /// Node states after structure inference.
    pub final_states: Vec<Vector>,
    pub tape: SinTape,
    pub logits: Vec<Vector>,
    pub probs: Vec<Vector>,
    pub deltas: Vec<Vector>,
}

pub fn softmax(logits: &[f64]) -> Vector {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    Vector(exps.into_iter().map(|e| e / s).collect())
}

pub fn forward_with_proposals(p: &DetectorParams, fmap: &FeatureMap, proposals: Vec<BBox>, cfg: &TrainConfig) -> ForwardOutput {
    let roi_inputs: Vec<Vector> = proposals.iter().map(|b| fmap.box_average(b)).collect();
    let scene_input = fmap.full_average();
    let nodes: Vec<Vector> = roi_inputs.iter().map(|a| project(p, a)).collect();
    let scene = project(p, &scene_input);
    let initial = SceneGraph::new(nodes, proposals.clone(), scene);
    let (refined, tape) = sin_infer_taped(&p.sin, &initial, cfg.effective_steps(), &cfg.step_config());
    let final_states = refined.node_features;
    let logits: Vec<Vector> = final_states.iter().map(|h| p.cls_head.affine(h)).collect();
    let probs = logits.iter().map(|l| softmax(l)).collect();
    let deltas = final_states.iter().map(|h| p.reg_head.affine(h)).collect();
    ForwardOutput {
        proposals,
        roi_inputs,
        scene_input,
        initial,
        final_states,
        tape,
        logits,
        probs,
        deltas,
    }
}

/// Inference-time forward: proposals from objectness alone.
pub fn forward(p: &DetectorParams, sample: &SceneSample, cfg: &TrainConfig) -> ForwardOutput {
    let fmap = FeatureMap::new(sample);
    let scored = score_anchors(p, &fmap);
    let proposals = propose(
        &scored,
        cfg.rois_per_image,
        sample.width as f64,
        sample.height as f64,
        None,
    );
    forward_with_proposals(p, &fmap, proposals, cfg)
}

/// Backpropagates head gradients through the heads, structure inference and
/// the shared projection into `grads`.
pub fn backward(
    p: &DetectorParams,
    out: &ForwardOutput,
    d_logits: &[Vector],
    d_deltas: &[Vector],
    grads: &mut DetectorParams,
) -> Result<()> {
    let n = out.final_states.len();
    if d_logits.len() != n || d_deltas.len() != n {
        return Err(Error::Shape(format!(
            "detector backward: {n} ROIs but {} / {} upstream gradients",
            d_logits.len(),
            d_deltas.len()
        )));
    }
    let mut d_states = Vec::with_capacity(n);
    for i in 0..n {
        let h = &out.final_states[i];
        grads.cls_head.add_outer(1.0, &d_logits[i], h);
        grads.reg_head.add_outer(1.0, &d_deltas[i], h);
        let mut dh = p.cls_head.affine_transpose(&d_logits[i]);
        dh.add_assign(&p.reg_head.affine_transpose(&d_deltas[i]));
        d_states.push(dh);
    }
    let gi = sin_backward(&p.sin, &out.tape, &d_states, &mut grads.sin)?;
    for (i, d_node) in gi.node_features.iter().enumerate() {
        let f = &out.initial.node_features[i];
        let pre: Vec<f64> = d_node.iter().zip(f.iter()).map(|(g, v)| g * (1.0 - v * v)).collect();
        grads.feat_proj.add_outer(1.0, &pre, &out.roi_inputs[i]);
    }
    let f = &out.initial.scene_feature;
    let pre: Vec<f64> = gi.scene_feature.iter().zip(f.iter()).map(|(g, v)| g * (1.0 - v * v)).collect();
    grads.feat_proj.add_outer(1.0, &pre, &out.scene_input);
    Ok(())
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    pub objectness: f64,
    pub decay: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.cls + REG_WEIGHT * self.reg + self.objectness + self.decay
    }
}

fn class_index(label: RoiLabel) -> Option<usize> {
    match label {
        RoiLabel::Foreground(c) => Some(c + 1),
        RoiLabel::Background => Some(0),
        RoiLabel::Ignore => None,
    }
}

/// Classification cross-entropy (mean over non-ignored ROIs) and smooth-L1
/// regression (mean over foreground ROIs of the summed 4 target-class
/// deltas). Returns `(cls, reg, d_logits, d_deltas)`.
pub fn multi_task_loss_and_grad(
    logits: &[Vector],
    deltas: &[Vector],
    targets: &[RoiTarget],
) -> (f64, f64, Vec<Vector>, Vec<Vector>) {
    assert!(
        logits.len() == targets.len() && deltas.len() == targets.len(),
        "multi_task_loss: {} logits, {} deltas, {} targets",
        logits.len(),
        deltas.len(),
        targets.len()
    );
    let counted = targets.iter().filter(|t| class_index(t.label).is_some()).count();
    let positives = targets
        .iter()
        .filter(|t| matches!(t.label, RoiLabel::Foreground(_)))
        .count();
    let mut d_logits: Vec<Vector> = logits.iter().map(|l| Vector::zeros(l.dim())).collect();
    let mut d_deltas: Vec<Vector> = deltas.iter().map(|d| Vector::zeros(d.dim())).collect();
    let mut cls = 0.0;
    let mut reg = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let Some(y) = class_index(t.label) else { continue };
        let probs = softmax(&logits[i]);
        let m = logits[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits[i].iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        cls += (lse - logits[i][y]) / counted as f64;
        for (c, pc) in probs.iter().enumerate() {
            let onehot = if c == y { 1.0 } else { 0.0 };
            d_logits[i][c] = (pc - onehot) / counted as f64;
        }
        if let (RoiLabel::Foreground(cat), Some(target)) = (t.label, &t.deltas) {
            for k in 0..4 {
                let diff = deltas[i][4 * cat + k] - target[k];
                reg += smooth_l1(diff) / positives as f64;
                d_deltas[i][4 * cat + k] = REG_WEIGHT * smooth_l1_grad(diff) / positives as f64;
            }
        }
    }
    (cls, reg, d_logits, d_deltas)
}

/// `cls + λ·reg` of the head outputs.
pub fn multi_task_loss(logits: &[Vector], deltas: &[Vector], targets: &[RoiTarget]) -> f64 {
    let (cls, reg, _, _) = multi_task_loss_and_grad(logits, deltas, targets);
    cls + REG_WEIGHT * reg
}

/// Label per anchor: `Some(true)` positive, `Some(false)` negative.
pub fn anchor_labels(anchors: &[Anchor], gt: &[GtObject]) -> Vec<Option<bool>> {
    let mut best = vec![0.0f64; anchors.len()];
    let mut forced = vec![false; anchors.len()];
    for g in gt {
        let mut top: Option<(usize, f64)> = None;
        for (i, a) in anchors.iter().enumerate() {
            let o = iou(&a.bbox, &g.bbox);
            best[i] = best[i].max(o);
            if top.is_none_or(|(_, t)| o > t) {
                top = Some((i, o));
            }
        }
        if let Some((i, o)) = top {
            if o > 0.0 {
                forced[i] = true;
            }
        }
    }
    best.iter()
        .zip(&forced)
        .map(|(&o, &f)| {
            if f || o >= ANCHOR_POS_IOU {
                Some(true)
            } else if o < ANCHOR_NEG_IOU {
                Some(false)
            } else {
                None
            }
        })
        .collect()
}

/// Balanced logistic loss: mean over positive anchors plus mean over
/// negative anchors. Adds its gradient into `grad` when given.
pub fn objectness_loss(scored: &ScoredAnchors, labels: &[Option<bool>], mut grad: Option<&mut Matrix>) -> f64 {
    let pos = labels.iter().filter(|l| **l == Some(true)).count();
    let neg = labels.iter().filter(|l| **l == Some(false)).count();
    let softplus = |t: f64| if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
    let mut loss = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let Some(positive) = *label else { continue };
        let s = scored.logits[i];
        let (l, g) = if positive {
            (softplus(-s) / pos as f64, (sigmoid(s) - 1.0) / pos as f64)
        } else {
            (softplus(s) / neg as f64, sigmoid(s) / neg as f64)
        };
        loss += l;
        if let Some(gm) = grad.as_deref_mut() {
            let shape = scored.anchors[i].shape;
            let start = shape * gm.cols();
            for (w, x) in gm.data_mut()[start..start + scored.inputs[i].dim()].iter_mut().zip(scored.inputs[i].iter()) {
                *w += g * x;
            }
        }
    }
    loss
}

/// Fixed inputs for a differentiable image loss: the proposal set and its
/// targets are frozen so the loss is a smooth function of the parameters.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub fmap: FeatureMap,
    pub proposals: Vec<BBox>,
    pub targets: Vec<RoiTarget>,
    pub anchor_labels: Vec<Option<bool>>,
}

impl ImageBatch {
    pub fn new(sample: &SceneSample, proposals: Vec<BBox>) -> Self {
        let fmap = FeatureMap::new(sample);
        let targets = assign_targets(&proposals, &sample.gt, POS_IOU, NEG_IOU);
        let anchor_labels = anchor_labels(&anchors(sample.height, sample.width), &sample.gt);
        ImageBatch {
            fmap,
            proposals,
            targets,
            anchor_labels,
        }
    }
}

/// Total per-image loss (classification, regression, objectness and weight
/// decay), with gradients added into `grads` when given.
pub fn image_loss(p: &DetectorParams, batch: &ImageBatch, cfg: &TrainConfig, grads: Option<&mut DetectorParams>) -> Result<LossParts> {
    let scored = score_anchors(p, &batch.fmap);
    let out = forward_with_proposals(p, &batch.fmap, batch.proposals.clone(), cfg);
    let (cls, reg, d_logits, d_deltas) = multi_task_loss_and_grad(&out.logits, &out.deltas, &batch.targets);
    let mut parts = LossParts {
        cls,
        reg,
        objectness: 0.0,
        decay: 0.5 * cfg.weight_decay * p.sq_norm(),
    };
    match grads {
        Some(g) => {
            parts.objectness = objectness_loss(&scored, &batch.anchor_labels, Some(&mut g.objectness));
            backward(p, &out, &d_logits, &d_deltas, g)?;
            g.axpy(cfg.weight_decay, p);
        }
        None => {
            parts.objectness = objectness_loss(&scored, &batch.anchor_labels, None);
        }
    }
    Ok(parts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub parts: LossParts,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DetectorParams,
    pub losses: Vec<LossRecord>,
}

pub fn learning_rate(cfg: &TrainConfig, iter: usize) -> f64 {
    if (iter as f64) < LR_DROP_AT * cfg.iters as f64 {
        cfg.lr
    } else {
        cfg.lr * LR_DROP_FACTOR
    }
}

/// SGD with momentum, one image per step, cycling through `samples` in a
/// fresh seeded order each epoch.
pub fn train_on(samples: &[SceneSample], world: &WorldSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training needs at least one sample".into()));
    }
    let mut params = DetectorParams::for_world(world, cfg);
    let mut velocity = params.zeros_like();
    let mut order_rng = rng_from(seed_for(cfg.seed, "shuffle"));
    let mut jitter_rng = rng_from(seed_for(cfg.seed, "jitter"));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iters);

    for iter in 0..cfg.iters {
        if order.is_empty() {
            order = (0..samples.len()).collect();
            order.shuffle(&mut order_rng);
            order.reverse();
        }
        let sample = &samples[order.pop().expect("refilled")];
        let fmap = FeatureMap::new(sample);
        let scored = score_anchors(&params, &fmap);
        let proposals = propose(
            &scored,
            cfg.rois_per_image,
            sample.width as f64,
            sample.height as f64,
            Some(Injection {
                gt: &sample.gt,
                jitter: GT_JITTER,
                rng: &mut jitter_rng,
            }),
        );
        let batch = ImageBatch::new(sample, proposals);
        let mut grads = params.zeros_like();
        let parts = image_loss(&params, &batch, cfg, Some(&mut grads))?;
        if !parts.total().is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        let lr = learning_rate(cfg, iter);
        velocity.scale(cfg.momentum);
        velocity.axpy(1.0, &grads);
        let w_p = params.sin.w_p.clone();
        params.axpy(-lr, &velocity);
        params.sin.w_p = w_p;
        params.sin.w_p.axpy(-lr * cfg.spatial_lr_mult, &velocity.sin.w_p);
        losses.push(LossRecord { iter, lr, parts });
    }
    Ok(TrainOutcome { params, losses })
}

/// Generates `n_train` samples from the config's data stream and trains.
pub fn train(world: &WorldSpec, cfg: &TrainConfig, n_train: usize) -> Result<TrainOutcome> {
    let samples = crate::synth_data::generate(world, seed_for(cfg.seed, "data/train"), n_train)?;
    train_on(&samples, world, cfg)
}

/// A scored, labeled, refined box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
    /// Index of the ROI the detection came from.
    pub roi: usize,
}

pub const DEFAULT_FINAL_NMS: f64 = 0.3;

/// Per-class thresholding, delta refinement, clipping and NMS over the
/// outputs of a forward pass.
pub fn detections_from(out: &ForwardOutput, width: f64, height: f64, score_thresh: f64, final_nms: f64) -> Vec<Detection> {
    let k = out.probs.first().map_or(0, |p| p.dim().saturating_sub(1));
    let mut dets = Vec::new();
    for cat in 0..k {
        let mut cands: Vec<Detection> = out
            .probs
            .iter()
            .enumerate()
            .filter(|(_, p)| p[cat + 1] > score_thresh)
            .map(|(i, p)| Detection {
                bbox: apply_deltas(&out.proposals[i], &out.deltas[i][4 * cat..4 * cat + 4]).clip(width, height),
                category: cat,
                score: p[cat + 1],
                roi: i,
            })
            .collect();
        cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.bbox.total_cmp(&b.bbox)));
        let boxes: Vec<BBox> = cands.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = cands.iter().map(|d| d.score).collect();
        for idx in nms(&boxes, &scores, final_nms, cands.len().max(1)) {
            dets.push(cands[idx]);
        }
    }
    dets
}

pub fn detect(p: &DetectorParams, sample: &SceneSample, cfg: &TrainConfig, score_thresh: f64, final_nms: f64) -> Vec<Detection> {
    let out = forward(p, sample, cfg);
    detections_from(&out, sample.width as f64, sample.height as f64, score_thresh, final_nms)
}

/// Detections plus the final-step edges for relation reporting.
pub fn detect_with_edges(
    p: &DetectorParams,
    sample: &SceneSample,
    cfg: &TrainConfig,
    score_thresh: f64,
    final_nms: f64,
) -> (Vec<Detection>, Option<crate::structure_inference::EdgeMatrix>) {
    let out = forward(p, sample, cfg);
    let dets = detections_from(&out, sample.width as f64, sample.height as f64, score_thresh, final_nms);
    (dets, out.tape.last_edges().cloned())
}

/// Draws `n` boxes around ground truth for tests and gradient checks.
pub fn jittered_boxes(gt: &[GtObject], n: usize, jitter: f64, rng: &mut impl Rng, width: f64, height: f64) -> Vec<BBox> {
    let noise = Normal::new(0.0, jitter).expect("non-negative jitter");
    (0..n)
        .map(|i| {
            let g = gt[i % gt.len()].bbox;
            let d: Vec<f64> = (0..4).map(|_| noise.sample(rng)).collect();
            apply_deltas(&g, &d).clip(width, height)
        })
        .collect()
}

/// Instance for a full-pipeline finite-difference check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub seed: u64,
    pub dim: usize,
    pub nodes: usize,
    pub steps: usize,
    pub pooling: Pooling,
    pub arm: Arm,
    pub eps: f64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        GradCheckSetup {
            seed: 7,
            dim: 3,
            nodes: 3,
            steps: 2,
            pooling: Pooling::Mean,
            arm: Arm::Sin,
            eps: crate::numerics::DEFAULT_GRAD_EPS,
        }
    }
}

/// Spatial weight scale for the check. The training init keeps `w_p` tiny
/// and half the edges gated off, which leaves edge-path gradients near the
/// finite-difference noise floor; the check draws positive weights instead.
const GRADCHECK_SPATIAL_LIMIT: f64 = 0.1;

/// Compares analytic gradients of the per-image loss with central
/// differences over every parameter, on a scene with at least two objects
/// and `nodes` ROIs jittered around its ground truth.
pub fn run_gradcheck(world: &WorldSpec, setup: &GradCheckSetup) -> Result<crate::numerics::GradCheckReport> {
    if setup.dim == 0 || setup.nodes == 0 {
        return Err(Error::Config("gradcheck needs d >= 1 and n >= 1".into()));
    }
    let samples = crate::synth_data::generate(world, seed_for(setup.seed, "gradcheck/data"), 64)?;
    let sample = samples
        .iter()
        .find(|s| s.gt.len() >= 2)
        .ok_or_else(|| Error::Config("world produced no scene with two objects".into()))?;
    let cfg = TrainConfig {
        hidden_dim: setup.dim,
        rois_per_image: setup.nodes,
        steps: setup.steps,
        pooling: setup.pooling,
        arm: setup.arm,
        seed: setup.seed,
        ..TrainConfig::default()
    };
    let mut p = DetectorParams::for_world(world, &cfg);
    if let Tensor::Matrix(m) = init_params(
        &[1, crate::geometry::RELATION_DIM],
        seed_for(setup.seed, "gradcheck/w_p"),
        InitScheme::Uniform {
            limit: GRADCHECK_SPATIAL_LIMIT,
        },
    ) {
        p.sin.w_p = Matrix::from_vec(1, m.cols(), m.data().iter().map(|v| v.abs()).collect());
    }
    let mut rng = rng_from(seed_for(setup.seed, "gradcheck/rois"));
    let proposals = jittered_boxes(&sample.gt, setup.nodes, 0.15, &mut rng, world.width as f64, world.height as f64);
    let batch = ImageBatch::new(sample, proposals);
    let mut grads = p.zeros_like();
    image_loss(&p, &batch, &cfg, Some(&mut grads))?;
    let mut store = p.to_store();
    grads.accumulate_into(&mut store)?;
    crate::numerics::grad_check(&store, setup.eps, |st| {
        DetectorParams::from_store(st)
            .and_then(|q| image_loss(&q, &batch, &cfg, None))
            .map_or(f64::NAN, |parts| parts.total())
    })
}
