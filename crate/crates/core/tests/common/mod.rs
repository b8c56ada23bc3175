//! Scalar-loop reference implementations and the check routines shared by
//! the integration tests and the acceptance runner. The references touch
//! only plain slices and nested `Vec`s.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sin_core::eval::{average_precision, RankedBox};
use sin_core::geometry::{nms, BBox};
use sin_core::memory_cell::{gru_forward, GruParams};
use sin_core::numerics::{rng_from, Matrix, Vector};
use sin_core::structure_inference::{
    compute_edges, edge_weight, integrate_messages, sin_infer, sin_step, Pooling, SceneGraph, SinParams, StepConfig,
};

pub const ORACLE_TOL: f64 = 1e-12;

/// Outcome of one check: pass flag plus a short measurement.
pub struct Check {
    pub ok: bool,
    pub detail: String,
}

impl Check {
    pub fn new(ok: bool, detail: impl Into<String>) -> Self {
        Check { ok, detail: detail.into() }
    }
}

pub fn all(checks: Vec<(&str, Check)>) -> Check {
    let ok = checks.iter().all(|(_, c)| c.ok);
    let detail = checks
        .iter()
        .map(|(n, c)| format!("{n}{} {}", if c.ok { "" } else { " FAILED" }, c.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Check { ok, detail }
}

// ---------------------------------------------------------------- helpers

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| (0..m.cols()).map(|c| m.get(r, c)).collect()).collect()
}

fn sig(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
}

fn random_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vector {
    Vector((0..d).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn random_gru(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> GruParams {
    GruParams {
        w_r: random_matrix(rng, d, 2 * d, scale),
        w_z: random_matrix(rng, d, 2 * d, scale),
        w: random_matrix(rng, d, d, scale),
        u: random_matrix(rng, d, d, scale),
    }
}

pub fn random_sin(rng: &mut ChaCha8Rng, d: usize, with_concat: bool) -> SinParams {
    SinParams {
        scene_gru: random_gru(rng, d, 1.0),
        edge_gru: random_gru(rng, d, 1.0),
        w_p: random_matrix(rng, 1, 12, 0.2),
        w_v: random_matrix(rng, 1, 2 * d, 1.0),
        w_a: with_concat.then(|| random_matrix(rng, d, 2 * d, 1.0)),
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.0..16.0),
        rng.random_range(0.0..16.0),
        rng.random_range(0.5..6.0),
        rng.random_range(0.5..6.0),
    )
}

/// Boxes on a coarse lattice so exact overlaps and score ties occur.
fn lattice_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0..8) as f64,
        rng.random_range(0..8) as f64,
        rng.random_range(1..5) as f64,
        rng.random_range(1..5) as f64,
    )
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> SceneGraph {
    SceneGraph::new(
        (0..n).map(|_| random_vec(rng, d, 1.0)).collect(),
        (0..n).map(|_| random_box(rng)).collect(),
        random_vec(rng, d, 1.0),
    )
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- references

pub struct GruRef {
    pub next: Vec<f64>,
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub cand: Vec<f64>,
}

pub fn gru_ref(p: &GruParams, x: &[f64], h: &[f64]) -> GruRef {
    let d = x.len();
    let (wr, wz, w, u) = (rows(&p.w_r), rows(&p.w_z), rows(&p.w), rows(&p.u));
    let mut xh = x.to_vec();
    xh.extend_from_slice(h);
    let mut r = vec![0.0; d];
    let mut z = vec![0.0; d];
    for k in 0..d {
        let mut sr = 0.0;
        let mut sz = 0.0;
        for c in 0..2 * d {
            sr += wr[k][c] * xh[c];
            sz += wz[k][c] * xh[c];
        }
        r[k] = sig(sr);
        z[k] = sig(sz);
    }
    let mut cand = vec![0.0; d];
    let mut next = vec![0.0; d];
    for k in 0..d {
        let mut s = 0.0;
        for c in 0..d {
            s += w[k][c] * x[c];
            s += u[k][c] * r[c] * h[c];
        }
        cand[k] = s.tanh();
        next[k] = z[k] * h[k] + (1.0 - z[k]) * cand[k];
    }
    GruRef { next, r, z, cand }
}

pub fn relation_ref(bi: &BBox, bj: &BBox) -> [f64; 12] {
    let dx = (bi.cx - bj.cx) / bj.w;
    let dy = (bi.cy - bj.cy) / bj.h;
    [
        bi.w,
        bi.h,
        bi.w * bi.h,
        bj.w,
        bj.h,
        bj.w * bj.h,
        dx,
        dy,
        dx * dx,
        dy * dy,
        (bi.w / bj.w).ln(),
        (bi.h / bj.h).ln(),
    ]
}

pub fn edge_ref(p: &SinParams, bi: &BBox, bj: &BBox, fi: &[f64], fj: &[f64]) -> f64 {
    let wp = rows(&p.w_p).remove(0);
    let wv = rows(&p.w_v).remove(0);
    let rel = relation_ref(bi, bj);
    let mut sp = 0.0;
    for k in 0..12 {
        sp += wp[k] * rel[k];
    }
    let mut sv = 0.0;
    for (c, f) in fi.iter().chain(fj).enumerate() {
        sv += wv[c] * f;
    }
    let relu = if sp > 0.0 { sp } else { 0.0 };
    relu * sv.tanh()
}

pub fn edges_ref(p: &SinParams, boxes: &[BBox], feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = boxes.len();
    let mut e = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                e[i][j] = edge_ref(p, &boxes[i], &boxes[j], &feats[i], &feats[j]);
            }
        }
    }
    e
}

pub fn messages_ref(feats: &[Vec<f64>], e: &[Vec<f64>], i: usize) -> Vec<f64> {
    let d = feats[i].len();
    let mut m = vec![0.0; d];
    for (k, mk) in m.iter_mut().enumerate() {
        let mut best: Option<f64> = None;
        for j in 0..feats.len() {
            if j == i {
                continue;
            }
            let v = e[i][j] * feats[j][k];
            if best.is_none_or(|b| v > b) {
                best = Some(v);
            }
        }
        *mk = best.unwrap_or(0.0);
    }
    m
}

pub fn step_ref(p: &SinParams, boxes: &[BBox], feats: &[Vec<f64>], scene: &[f64], cfg: &StepConfig) -> Vec<Vec<f64>> {
    let e = edges_ref(p, boxes, feats);
    let d = scene.len();
    (0..feats.len())
        .map(|i| {
            let hs = cfg.scene.then(|| gru_ref(&p.scene_gru, scene, &feats[i]).next);
            let he = cfg.edge.then(|| gru_ref(&p.edge_gru, &messages_ref(feats, &e, i), &feats[i]).next);
            match (hs, he) {
                (Some(s), Some(h)) => match cfg.pooling {
                    Pooling::Mean => (0..d).map(|k| (s[k] + h[k]) / 2.0).collect(),
                    Pooling::Max => (0..d).map(|k| if s[k] >= h[k] { s[k] } else { h[k] }).collect(),
                    Pooling::Concat => {
                        let wa = rows(p.w_a.as_ref().unwrap());
                        (0..d)
                            .map(|k| {
                                let mut acc = 0.0;
                                for c in 0..d {
                                    acc += wa[k][c] * s[c] + wa[k][d + c] * h[c];
                                }
                                acc
                            })
                            .collect()
                    }
                },
                (Some(s), None) => s,
                (None, Some(h)) => h,
                (None, None) => unreachable!(),
            }
        })
        .collect()
}

fn corners(b: &BBox) -> (f64, f64, f64, f64) {
    (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = corners(a);
    let (bx0, by0, bx1, by1) = corners(b);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    inter / (a.w * a.h + b.w * b.h - inter)
}

/// Exhaustive greedy: visit boxes by descending score then index, keeping
/// each one not yet suppressed.
pub fn nms_ref(boxes: &[BBox], scores: &[f64], thr: f64, max_keep: usize) -> Vec<usize> {
    let n = boxes.len();
    let mut order: Vec<usize> = (0..n).collect();
    for a in 0..n {
        for b in 0..n - 1 - a {
            let (x, y) = (order[b], order[b + 1]);
            if scores[y] > scores[x] || (scores[y] == scores[x] && y < x) {
                order.swap(b, b + 1);
            }
        }
    }
    let mut suppressed = vec![false; n];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] || keep.len() == max_keep {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if iou_ref(&boxes[i], &boxes[j]) > thr {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// All-point AP written as a sum over true positives of the best precision
/// reachable at or after that rank.
pub fn ap_ref(ranked: &[RankedBox], gt: &[Vec<BBox>], thr: f64) -> Option<f64> {
    let npos: usize = gt.iter().map(|g| g.len()).sum();
    if npos == 0 {
        return None;
    }
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::new();
    for d in ranked {
        let mut best_j = None;
        let mut best_o = -1.0;
        for (j, g) in gt[d.image].iter().enumerate() {
            let o = iou_ref(&d.bbox, g);
            if o > best_o {
                best_o = o;
                best_j = Some(j);
            }
        }
        let hit = match best_j {
            Some(j) if best_o >= thr && !used[d.image][j] => {
                used[d.image][j] = true;
                true
            }
            _ => false,
        };
        tp.push(hit);
    }
    let mut prec = Vec::new();
    let mut hits = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1.0;
        }
        prec.push(hits / (k + 1) as f64);
    }
    let mut ap = 0.0;
    for k in 0..tp.len() {
        if tp[k] {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / npos as f64;
        }
    }
    Some(ap)
}

pub fn random_ap_fixture(rng: &mut ChaCha8Rng) -> (Vec<RankedBox>, Vec<Vec<BBox>>) {
    let images = rng.random_range(1..4);
    let gt: Vec<Vec<BBox>> = (0..images).map(|_| (0..rng.random_range(0..4)).map(|_| lattice_box(rng)).collect()).collect();
    let mut ranked: Vec<RankedBox> = (0..rng.random_range(0..10))
        .map(|_| {
            let image = rng.random_range(0..images);
            let bbox = match gt[image].first() {
                Some(g) if rng.random_bool(0.5) => BBox::new(g.cx + rng.random_range(-1..2) as f64, g.cy, g.w, g.h),
                _ => lattice_box(rng),
            };
            RankedBox {
                image,
                bbox,
                score: rng.random_range(0..4) as f64 / 4.0,
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    (ranked, gt)
}

// ---------------------------------------------------------------- oracle checks

pub fn check_gru(instances: usize) -> Check {
    let mut rng = rng_from(101);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..6);
        let p = random_gru(&mut rng, d, 1.5);
        let x = random_vec(&mut rng, d, 2.0);
        let h = random_vec(&mut rng, d, 1.0);
        let (next, _) = gru_forward(&p, &x, &h);
        worst = worst.max(max_abs_diff(&next, &gru_ref(&p, &x, &h).next));
    }
    Check::new(worst <= ORACLE_TOL, format!("{instances} instances, max err {worst:.1e}"))
}

pub fn check_edge_weight(instances: usize) -> Check {
    let mut rng = rng_from(102);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.random_range(1..6);
        let p = random_sin(&mut rng, d, false);
        let (bi, bj) = (random_box(&mut rng), random_box(&mut rng));
        let (fi, fj) = (random_vec(&mut rng, d, 1.0), random_vec(&mut rng, d, 1.0));
        let got = edge_weight(&p, &bi, &bj, &fi, &fj);
        worst = worst.max((got - edge_ref(&p, &bi, &bj, &fi, &fj)).abs());
    }
    Check::new(worst <= ORACLE_TOL, format!("{instances} instances, max err {worst:.1e}"))
}

pub fn check_messages(instances: usize) -> Check {
    let mut rng = rng_from(103);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let p = random_sin(&mut rng, d, false);
        let g = random_graph(&mut rng, n, d);
        let e = compute_edges(&p, &g);
        let feats: Vec<Vec<f64>> = g.node_features.iter().map(|f| f.to_vec()).collect();
        let e_ref = edges_ref(&p, &g.boxes, &feats);
        for i in 0..n {
            worst = worst.max(max_abs_diff(&integrate_messages(&g, &e, i), &messages_ref(&feats, &e_ref, i)));
        }
    }
    Check::new(worst <= ORACLE_TOL, format!("{instances} instances, max err {worst:.1e}"))
}

pub fn check_sin_step(instances: usize) -> Check {
    let mut rng = rng_from(104);
    let mut worst: f64 = 0.0;
    let poolings = [Pooling::Mean, Pooling::Max, Pooling::Concat];
    for k in 0..instances {
        let (n, d) = (rng.random_range(1..6), rng.random_range(1..5));
        let pooling = poolings[k % 3];
        let p = random_sin(&mut rng, d, pooling == Pooling::Concat);
        let g = random_graph(&mut rng, n, d);
        let cfg = match (k / 3) % 3 {
            0 => StepConfig::full(pooling),
            1 => StepConfig { pooling, scene: true, edge: false },
            _ => StepConfig { pooling, scene: false, edge: true },
        };
        let got = sin_step(&p, &g, &cfg);
        let feats: Vec<Vec<f64>> = g.node_features.iter().map(|f| f.to_vec()).collect();
        let want = step_ref(&p, &g.boxes, &feats, &g.scene_feature, &cfg);
        for (a, b) in got.node_features.iter().zip(&want) {
            worst = worst.max(max_abs_diff(a, b));
        }
    }
    Check::new(worst <= ORACLE_TOL, format!("{instances} instances, max err {worst:.1e}"))
}

pub fn check_nms(instances: usize) -> Check {
    let mut rng = rng_from(105);
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.random_range(0..9);
        let boxes: Vec<BBox> = (0..n).map(|_| lattice_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let max_keep = rng.random_range(1..6);
        if nms(&boxes, &scores, thr, max_keep) != nms_ref(&boxes, &scores, thr, max_keep) {
            mismatches += 1;
        }
    }
    Check::new(mismatches == 0, format!("{instances} instances, {mismatches} index-list mismatches"))
}

pub fn check_ap(instances: usize) -> Check {
    let mut rng = rng_from(106);
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    for _ in 0..instances {
        let (ranked, gt) = random_ap_fixture(&mut rng);
        let thr = [0.3, 0.5, 0.75][rng.random_range(0..3)];
        match (average_precision(&ranked, &gt, thr), ap_ref(&ranked, &gt, thr)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => bad += 1,
        }
    }
    Check::new(worst <= ORACLE_TOL && bad == 0, format!("{instances} instances, max err {worst:.1e}"))
}

// ---------------------------------------------------------------- invariants

pub fn check_gate_ranges(instances: usize) -> Check {
    let mut rng = rng_from(201);
    let mut violations = 0;
    // pre-activations stay below ~15 in magnitude; past ~37 an f64 sigmoid
    // rounds to exactly 1
    for _ in 0..instances {
        let d = rng.random_range(1..6);
        let p = random_gru(&mut rng, d, 1.5);
        let x = random_vec(&mut rng, d, 1.0);
        let h = random_vec(&mut rng, d, 1.0);
        let (_, cache) = gru_forward(&p, &x, &h);
        let open = |v: &Vector, lo: f64, hi: f64| v.iter().all(|&t| lo < t && t < hi);
        if !(open(&cache.r, 0.0, 1.0) && open(&cache.z, 0.0, 1.0) && open(&cache.candidate, -1.0, 1.0)) {
            violations += 1;
        }
    }
    Check::new(violations == 0, format!("{instances} cells, {violations} out of range"))
}

pub fn check_convex_bound(instances: usize) -> Check {
    let mut rng = rng_from(202);
    let mut violations = 0;
    for _ in 0..instances {
        let d = rng.random_range(1..6);
        let p = random_gru(&mut rng, d, 2.0);
        let x = random_vec(&mut rng, d, 2.0);
        let h = random_vec(&mut rng, d, 1.0);
        let (next, cache) = gru_forward(&p, &x, &h);
        for k in 0..d {
            let (lo, hi) = (h[k].min(cache.candidate[k]), h[k].max(cache.candidate[k]));
            if !(lo <= next[k] && next[k] <= hi) {
                violations += 1;
            }
        }
    }
    Check::new(violations == 0, format!("{instances} cells, {violations} violations"))
}

pub fn check_permutation(instances: usize) -> Check {
    let mut rng = rng_from(203);
    let mut violations = 0;
    let poolings = [Pooling::Mean, Pooling::Max, Pooling::Concat];
    for k in 0..instances {
        let (n, d) = (rng.random_range(2..6), rng.random_range(1..5));
        let pooling = poolings[k % 3];
        let p = random_sin(&mut rng, d, pooling == Pooling::Concat);
        let g = random_graph(&mut rng, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pg = SceneGraph::new(
            perm.iter().map(|&i| g.node_features[i].clone()).collect(),
            perm.iter().map(|&i| g.boxes[i]).collect(),
            g.scene_feature.clone(),
        );
        let steps = 1 + k % 3;
        let cfg = StepConfig::full(pooling);
        let a = sin_infer(&p, &g, steps, &cfg);
        let b = sin_infer(&p, &pg, steps, &cfg);
        if perm.iter().enumerate().any(|(pos, &i)| b.node_features[pos] != a.node_features[i]) {
            violations += 1;
        }
    }
    Check::new(violations == 0, format!("{instances} graphs, {violations} not exactly equivariant"))
}

pub fn check_nms_post(instances: usize) -> Check {
    let mut rng = rng_from(204);
    let mut violations = 0;
    for _ in 0..instances {
        let n = rng.random_range(0..12);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let thr = rng.random_range(0.1..0.9);
        let max_keep = rng.random_range(1..8);
        let keep = nms(&boxes, &scores, thr, max_keep);
        let pairwise = keep
            .iter()
            .enumerate()
            .all(|(a, &i)| keep[a + 1..].iter().all(|&j| iou_ref(&boxes[i], &boxes[j]) <= thr));
        let sorted = keep.windows(2).all(|w| scores[w[0]] >= scores[w[1]]);
        if !(pairwise && sorted && keep.len() <= max_keep) {
            violations += 1;
        }
    }
    Check::new(violations == 0, format!("{instances} instances, {violations} violations"))
}

pub fn check_ap_range_monotone(instances: usize) -> Check {
    let mut rng = rng_from(205);
    let mut violations = 0;
    for _ in 0..instances {
        let (ranked, mut gt) = random_ap_fixture(&mut rng);
        let Some(ap) = average_precision(&ranked, &gt, 0.5) else { continue };
        if !(0.0..=1.0).contains(&ap) {
            violations += 1;
        }
        let image = rng.random_range(0..gt.len());
        let extra = BBox::new(40.0, 40.0, 2.0, 2.0);
        gt[image].push(extra);
        let mut more = vec![RankedBox {
            image,
            bbox: extra,
            score: 2.0,
        }];
        more.extend(ranked);
        if average_precision(&more, &gt, 0.5).unwrap() < ap {
            violations += 1;
        }
    }
    Check::new(violations == 0, format!("{instances} fixtures, {violations} violations"))
}

/// Checkpoint and dataset files read back bitwise equal.
pub fn check_round_trips() -> Check {
    use sin_core::checkpoint::{load_params, save_params};
    use sin_core::dataset::{load_dataset, save_dataset};
    use sin_core::detector::{DetectorParams, TrainConfig};
    use sin_core::synth_data::{default_world, generate};

    let dir = tempfile::tempdir().expect("tempdir");
    let world = default_world();
    let cfg = TrainConfig {
        pooling: Pooling::Concat,
        ..TrainConfig::default()
    };
    let params = DetectorParams::for_world(&world, &cfg);
    let ckpt = dir.path().join("p.ckpt");
    let ckpt_ok = save_params(&ckpt, &params).is_ok() && load_params(&ckpt).ok().as_ref() == Some(&params);
    let samples = generate(&world, 9, 25).expect("generate");
    let data = dir.path().join("d.jsonl");
    let data_ok = save_dataset(&data, &world, &samples).is_ok()
        && load_dataset(&data).map(|(_, s)| s == samples).unwrap_or(false);
    Check::new(
        ckpt_ok && data_ok,
        format!("checkpoint {}, dataset {}", if ckpt_ok { "exact" } else { "differs" }, if data_ok { "exact" } else { "differs" }),
    )
}

/// Config for the determinism check: every arm, trained briefly.
pub fn small_run_config(out: &std::path::Path) -> sin_core::harness::RunConfig {
    use sin_core::detector::TrainConfig;
    use sin_core::harness::{EvalConfig, RunConfig};
    RunConfig {
        train: TrainConfig {
            iters: 150,
            hidden_dim: 8,
            seed: 5,
            ..TrainConfig::default()
        },
        eval: EvalConfig {
            split_seed: 2,
            n_train: 40,
            n_test: 30,
            score_thresh: 0.05,
        },
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// Two identical ablation runs write byte-identical CSVs.
pub fn check_determinism() -> Check {
    use sin_core::harness::{run_ablate, Manifest};
    let dir = tempfile::tempdir().expect("tempdir");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let cfg = small_run_config(&dir.path().join(format!("run{k}")));
        let world = cfg.world.resolve().expect("world");
        if let Err(e) = run_ablate(&cfg, &world, false, Manifest::new("ablate", &cfg), |_| {}) {
            return Check::new(false, format!("run {k} failed: {e}"));
        }
        let files: Vec<Vec<u8>> = ["metrics.csv", "pr.csv", "breakdown.csv"]
            .iter()
            .map(|f| std::fs::read(cfg.output_dir.join(f)).unwrap_or_default())
            .collect();
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1] && outputs[0].iter().all(|f| !f.is_empty());
    Check::new(same, if same { "metric CSVs bitwise identical" } else { "metric CSVs differ" })
}
