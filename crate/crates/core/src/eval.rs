//! Detection metrics, error analysis and the ablation runner.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect, detect_with_edges, train_on, Arm, Detection, DetectorParams, TrainConfig, DEFAULT_FINAL_NMS};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numerics::seed_for;
use crate::structure_inference::{relation_report, Pooling};
use crate::synth_data::{generate, GtObject, SceneSample, WorldSpec};

pub const VOC_IOU: f64 = 0.5;
pub const LOC_MIN_IOU: f64 = 0.1;

/// COCO-style threshold sweep 0.50:0.05:0.95.
pub fn coco_ious() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Score thresholds 0:0.1:0.9.
pub fn pr_thresholds() -> Vec<f64> {
    (0..10).map(|k| k as f64 / 10.0).collect()
}

/// One detection tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Greedy matching of ranked detections against per-image ground truth:
/// each detection takes its highest-IoU ground truth, and counts as a true
/// positive when that overlap reaches `iou_thresh` and the box is still
/// unclaimed.
pub fn match_ranked(ranked: &[RankedBox], gt: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut claimed: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|d| {
            let boxes = &gt[d.image];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in boxes.iter().enumerate() {
                let o = iou(&d.bbox, g);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, o)) if o >= iou_thresh && !claimed[d.image][j] => {
                    claimed[d.image][j] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated AP of detections already sorted by descending
/// score; `None` when there is no ground truth.
pub fn average_precision(ranked: &[RankedBox], gt: &[Vec<BBox>], iou_thresh: f64) -> Option<f64> {
    let npos: usize = gt.iter().map(Vec::len).sum();
    if npos == 0 {
        return None;
    }
    let tp = match_ranked(ranked, gt, iou_thresh);
    Some(ap_from_flags(&tp, npos))
}

fn ap_from_flags(tp: &[bool], npos: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / npos as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Ranks detections of `category` across images by descending score;
/// equal scores keep image order, then within-image order.
pub fn ranked_for(dets: &[Vec<Detection>], category: usize) -> Vec<RankedBox> {
    let mut out: Vec<RankedBox> = dets
        .iter()
        .enumerate()
        .flat_map(|(image, ds)| {
            ds.iter().filter(|d| d.category == category).map(move |d| RankedBox {
                image,
                bbox: d.bbox,
                score: d.score,
            })
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

pub fn gt_for(gts: &[Vec<GtObject>], category: usize) -> Vec<Vec<BBox>> {
    gts.iter()
        .map(|g| g.iter().filter(|o| o.category == category).map(|o| o.bbox).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// Per-category AP averaged over the IoU list; `None` for categories
    /// without ground truth, which are left out of `map`.
    pub per_category: Vec<Option<f64>>,
}

/// Mean over categories of the mean over `ious` of AP.
pub fn map_at(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], num_categories: usize, ious: &[f64]) -> Result<MapReport> {
    if ious.is_empty() {
        return Err(Error::Config("map_at needs at least one IoU threshold".into()));
    }
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "map_at: {} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let per_category: Vec<Option<f64>> = (0..num_categories)
        .map(|c| {
            let ranked = ranked_for(dets, c);
            let gt = gt_for(gts, c);
            let aps: Option<Vec<f64>> = ious.iter().map(|&t| average_precision(&ranked, &gt, t)).collect();
            aps.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let present: Vec<f64> = per_category.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MapReport { map, per_category })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Category-pooled precision and recall of detections scoring at least
/// each threshold. An empty detection set has precision 1.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], num_categories: usize, thresholds: &[f64]) -> Vec<PrPoint> {
    let npos: usize = gts.iter().map(Vec::len).sum();
    let per_cat: Vec<(Vec<RankedBox>, Vec<bool>)> = (0..num_categories)
        .map(|c| {
            let ranked = ranked_for(dets, c);
            let tp = match_ranked(&ranked, &gt_for(gts, c), VOC_IOU);
            (ranked, tp)
        })
        .collect();
    thresholds
        .iter()
        .map(|&thr| {
            let mut kept = 0usize;
            let mut hits = 0usize;
            for (ranked, tp) in &per_cat {
                for (d, &t) in ranked.iter().zip(tp) {
                    if d.score >= thr {
                        kept += 1;
                        hits += usize::from(t);
                    }
                }
            }
            PrPoint {
                threshold: thr,
                precision: if kept == 0 { 1.0 } else { hits as f64 / kept as f64 },
                recall: if npos == 0 { 0.0 } else { hits as f64 / npos as f64 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FpKind {
    Cor,
    Loc,
    Sim,
    Oth,
    Bg,
}

impl FpKind {
    pub const ALL: [FpKind; 5] = [FpKind::Cor, FpKind::Loc, FpKind::Sim, FpKind::Oth, FpKind::Bg];

    pub fn label(self) -> &'static str {
        match self {
            FpKind::Cor => "Cor",
            FpKind::Loc => "Loc",
            FpKind::Sim => "Sim",
            FpKind::Oth => "Oth",
            FpKind::Bg => "BG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FpBreakdown {
    pub cor: usize,
    pub loc: usize,
    pub sim: usize,
    pub oth: usize,
    pub bg: usize,
}

impl FpBreakdown {
    pub fn get(&self, kind: FpKind) -> usize {
        match kind {
            FpKind::Cor => self.cor,
            FpKind::Loc => self.loc,
            FpKind::Sim => self.sim,
            FpKind::Oth => self.oth,
            FpKind::Bg => self.bg,
        }
    }

    fn bump(&mut self, kind: FpKind) {
        match kind {
            FpKind::Cor => self.cor += 1,
            FpKind::Loc => self.loc += 1,
            FpKind::Sim => self.sim += 1,
            FpKind::Oth => self.oth += 1,
            FpKind::Bg => self.bg += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.cor + self.loc + self.sim + self.oth + self.bg
    }
}

/// Classifies one false positive of `category` in an image.
pub fn classify_false_positive(bbox: &BBox, category: usize, gt: &[GtObject], similar: &dyn Fn(usize, usize) -> bool) -> FpKind {
    let best = |pred: &dyn Fn(usize) -> bool| {
        gt.iter()
            .filter(|g| pred(g.category))
            .map(|g| iou(bbox, &g.bbox))
            .fold(0.0f64, f64::max)
    };
    // same class at IoU >= 0.5 means a duplicate, which counts as mislocalized
    if best(&|c| c == category) >= LOC_MIN_IOU {
        FpKind::Loc
    } else if best(&|c| c != category && similar(category, c)) >= LOC_MIN_IOU {
        FpKind::Sim
    } else if best(&|c| c != category) >= LOC_MIN_IOU {
        FpKind::Oth
    } else {
        FpKind::Bg
    }
}

/// Hoiem-style breakdown over every detection: true positives at IoU 0.5
/// are `Cor`, false positives are `Loc`, `Sim`, `Oth` or `BG`.
pub fn fp_breakdown(dets: &[Vec<Detection>], gts: &[Vec<GtObject>], num_categories: usize, similar: &dyn Fn(usize, usize) -> bool) -> FpBreakdown {
    let mut out = FpBreakdown::default();
    for c in 0..num_categories {
        let ranked = ranked_for(dets, c);
        let tp = match_ranked(&ranked, &gt_for(gts, c), VOC_IOU);
        for (d, &t) in ranked.iter().zip(&tp) {
            let kind = if t {
                FpKind::Cor
            } else {
                classify_false_positive(&d.bbox, c, &gts[d.image], similar)
            };
            out.bump(kind);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_category_ap: Vec<Option<f64>>,
    pub map: f64,
    /// Mean over IoU 0.50:0.95.
    pub map_coco: f64,
    pub per_category_ap_coco: Vec<Option<f64>>,
    pub pr_points: Vec<PrPoint>,
    pub fp_breakdown: FpBreakdown,
}

/// Reads `SIN_NUM_WORKERS`, defaulting to 1.
pub fn num_workers() -> Result<usize> {
    match std::env::var("SIN_NUM_WORKERS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("SIN_NUM_WORKERS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Maps `f` over `items` on a pool of `workers` threads, preserving order.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> U + Sync + Send) -> Result<Vec<U>> {
    if workers <= 1 {
        return Ok(items.iter().map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

pub fn detect_all(p: &DetectorParams, samples: &[SceneSample], cfg: &TrainConfig, score_thresh: f64, workers: usize) -> Result<Vec<Vec<Detection>>> {
    par_map(samples, workers, |s| detect(p, s, cfg, score_thresh, DEFAULT_FINAL_NMS))
}

pub fn evaluate_detections(dets: &[Vec<Detection>], samples: &[SceneSample], world: &WorldSpec) -> Result<EvalResult> {
    let gts: Vec<Vec<GtObject>> = samples.iter().map(|s| s.gt.clone()).collect();
    let k = world.num_categories();
    let voc = map_at(dets, &gts, k, &[VOC_IOU])?;
    let coco = map_at(dets, &gts, k, &coco_ious())?;
    Ok(EvalResult {
        per_category_ap: voc.per_category,
        map: voc.map,
        map_coco: coco.map,
        per_category_ap_coco: coco.per_category,
        pr_points: pr_curve(dets, &gts, k, &pr_thresholds()),
        fp_breakdown: fp_breakdown(dets, &gts, k, &|a, b| world.is_similar(a, b)),
    })
}

pub fn evaluate(p: &DetectorParams, samples: &[SceneSample], world: &WorldSpec, cfg: &TrainConfig, score_thresh: f64, workers: usize) -> Result<EvalResult> {
    let dets = detect_all(p, samples, cfg, score_thresh, workers)?;
    evaluate_detections(&dets, samples, world)
}

/// One row of the relation report: for each kept detection's ROI, the ROI
/// sending it the strongest final-step edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationRow {
    pub sample: usize,
    pub node: usize,
    pub partner: usize,
    pub edge_weight: f64,
}

pub fn relation_rows(p: &DetectorParams, samples: &[SceneSample], cfg: &TrainConfig, score_thresh: f64, workers: usize) -> Result<Vec<RelationRow>> {
    let per_sample = par_map(samples, workers, |s| {
        let (dets, edges) = detect_with_edges(p, s, cfg, score_thresh, DEFAULT_FINAL_NMS);
        let mut receivers: Vec<usize> = dets.iter().map(|d| d.roi).collect();
        receivers.sort_unstable();
        receivers.dedup();
        edges.map_or_else(Vec::new, |e| relation_report(&e, &receivers))
    })?;
    Ok(per_sample
        .into_iter()
        .enumerate()
        .flat_map(|(sample, rows)| {
            rows.into_iter().map(move |(node, partner, edge_weight)| RelationRow {
                sample,
                node,
                partner,
                edge_weight,
            })
        })
        .collect())
}

fn default_score_thresh() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub base: TrainConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
    #[serde(default = "default_score_thresh")]
    pub score_thresh: f64,
    /// Also run the pooling and time-step sweep.
    #[serde(default)]
    pub sweep: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub name: String,
    pub config: TrainConfig,
    /// `Err` holds the reason an arm failed.
    pub result: std::result::Result<EvalResult, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<ArmRun>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&EvalResult> {
        self.runs.iter().find(|r| r.name == name).and_then(|r| r.result.as_ref().ok())
    }
}

/// The comparison arms plus, when requested, the sweep variants of the full
/// model: `(name, config)` in run order.
pub fn ablation_plan(spec: &AblationSpec) -> Vec<(String, TrainConfig)> {
    let mut plan: Vec<(String, TrainConfig)> = Arm::ALL
        .iter()
        .map(|&arm| (arm.name().to_string(), TrainConfig { arm, ..spec.base.clone() }))
        .collect();
    if spec.sweep {
        let sin = TrainConfig {
            arm: Arm::Sin,
            ..spec.base.clone()
        };
        for pooling in [Pooling::Mean, Pooling::Max, Pooling::Concat] {
            if pooling != sin.pooling {
                plan.push((format!("sin_{pooling}"), TrainConfig { pooling, ..sin.clone() }));
            }
        }
        for steps in [1, 2, 3] {
            if steps != sin.steps {
                plan.push((format!("sin_T{steps}"), TrainConfig { steps, ..sin.clone() }));
            }
        }
    }
    plan
}

pub struct AblationData {
    pub train: Vec<SceneSample>,
    pub test: Vec<SceneSample>,
}

pub fn ablation_data(world: &WorldSpec, spec: &AblationSpec) -> Result<AblationData> {
    Ok(AblationData {
        train: generate(world, seed_for(spec.base.seed, "data/train"), spec.n_train)?,
        test: generate(world, seed_for(spec.split_seed, "data/test"), spec.n_test)?,
    })
}

/// Trains every planned arm on one shared data stream and evaluates each on
/// the shared test split. A diverging arm is recorded as failed.
pub fn run_ablation(world: &WorldSpec, spec: &AblationSpec, workers: usize, mut progress: impl FnMut(&ArmRun)) -> Result<AblationReport> {
    let data = ablation_data(world, spec)?;
    let mut runs = Vec::new();
    for (name, config) in ablation_plan(spec) {
        let result = match train_on(&data.train, world, &config) {
            Ok(outcome) => evaluate(&outcome.params, &data.test, world, &config, spec.score_thresh, workers).map_err(|e| e.to_string()),
            Err(e @ Error::NonFiniteLoss { .. }) => Err(e.to_string()),
            Err(e) => return Err(e),
        };
        let run = ArmRun { name, config, result };
        progress(&run);
        runs.push(run);
    }
    Ok(AblationReport { runs })
}

fn fmt_num(v: f64) -> String {
    format!("{v:.6}")
}

/// `arm,category,iou,ap` rows: per-category AP at 0.5 and over 0.50:0.95,
/// then one `mAP` summary row per IoU setting.
pub fn metrics_csv(runs: &[(&str, Option<&EvalResult>)], world: &WorldSpec) -> String {
    let mut out = String::from("arm,category,iou,ap\n");
    for (arm, res) in runs {
        match res {
            Some(r) => {
                for (iou_label, per, map) in [
                    ("0.5", &r.per_category_ap, r.map),
                    ("0.5:0.95", &r.per_category_ap_coco, r.map_coco),
                ] {
                    for (c, ap) in per.iter().enumerate() {
                        let v = ap.map_or_else(|| "absent".to_string(), fmt_num);
                        let _ = writeln!(out, "{arm},{},{iou_label},{v}", world.categories[c].name);
                    }
                    let _ = writeln!(out, "{arm},mAP,{iou_label},{}", fmt_num(map));
                }
            }
            None => {
                let _ = writeln!(out, "{arm},mAP,0.5,failed");
            }
        }
    }
    out
}

pub fn pr_csv(runs: &[(&str, Option<&EvalResult>)]) -> String {
    let mut out = String::from("arm,threshold,precision,recall\n");
    for (arm, res) in runs {
        for p in res.iter().flat_map(|r| &r.pr_points) {
            let _ = writeln!(out, "{arm},{:.1},{},{}", p.threshold, fmt_num(p.precision), fmt_num(p.recall));
        }
    }
    out
}

pub fn breakdown_csv(runs: &[(&str, Option<&EvalResult>)]) -> String {
    let mut out = String::from("arm,kind,count\n");
    for (arm, res) in runs {
        if let Some(r) = res {
            for kind in FpKind::ALL {
                let _ = writeln!(out, "{arm},{},{}", kind.label(), r.fp_breakdown.get(kind));
            }
        }
    }
    out
}

pub fn relations_csv(rows: &[RelationRow]) -> String {
    let mut out = String::from("sample,node,partner,edge_weight\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.sample, r.node, r.partner, fmt_num(r.edge_weight));
    }
    out
}

impl AblationReport {
    pub fn csv_rows(&self) -> Vec<(&str, Option<&EvalResult>)> {
        self.runs.iter().map(|r| (r.name.as_str(), r.result.as_ref().ok())).collect()
    }
}
