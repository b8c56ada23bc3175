//! Acceptance runner: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Criteria 3 to 6 share one ablation fixture.

mod common;

use std::time::{Duration, Instant};

use common::*;
use sin_core::detector::{run_gradcheck, GradCheckSetup, TrainConfig};
use sin_core::eval::{run_ablation, AblationReport, AblationSpec, EvalResult};
use sin_core::synth_data::default_world;

const ORACLE_INSTANCES: usize = 200;
const INVARIANT_INSTANCES: usize = 300;

/// Proposals per image for the ablation fixture. At 16 the 1x1 category
/// rarely reaches the ROI set and the arms separate by noise alone.
const FIXTURE_ROIS: usize = 32;

fn fixture_spec() -> AblationSpec {
    AblationSpec {
        base: TrainConfig {
            rois_per_image: FIXTURE_ROIS,
            ..TrainConfig::default()
        },
        n_train: 2000,
        n_test: 500,
        split_seed: 1,
        score_thresh: 0.01,
        sweep: true,
    }
}

fn report(n: usize, c: &Check, elapsed: Duration) -> bool {
    println!(
        "criterion {n}: {} ({:.1}s) {}",
        if c.ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        c.detail
    );
    c.ok
}

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> (Check, Duration) {
    let t = Instant::now();
    let mut c = f();
    let elapsed = t.elapsed();
    if elapsed >= limit {
        c.ok = false;
        c.detail += &format!("; over the {}s limit", limit.as_secs());
    }
    (c, elapsed)
}

fn map_of(rep: &AblationReport, arm: &str) -> Option<f64> {
    rep.get(arm).map(|r| r.map)
}

fn pts(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn criterion_ablation(rep: &AblationReport, four_arm: Duration) -> Check {
    let (Some(b), Some(s), Some(e), Some(f)) = (
        map_of(rep, "baseline"),
        map_of(rep, "scene"),
        map_of(rep, "edge"),
        map_of(rep, "sin"),
    ) else {
        return Check::new(false, "an arm failed to train");
    };
    let ok = s >= b + 0.02 && e >= b + 0.02 && f >= s.max(e) - 0.005 && four_arm < Duration::from_secs(900);
    Check::new(
        ok,
        format!(
            "mAP baseline {} scene {} edge {} sin {}; four arms in {:.0}s",
            pts(b),
            pts(s),
            pts(e),
            pts(f),
            four_arm.as_secs_f64()
        ),
    )
}

fn criterion_steps(rep: &AblationReport) -> Check {
    let (Some(t1), Some(t2)) = (map_of(rep, "sin_T1"), map_of(rep, "sin")) else {
        return Check::new(false, "a step arm failed to train");
    };
    let t3 = map_of(rep, "sin_T3").map_or("failed".into(), pts);
    Check::new(t2 >= t1 - 0.005, format!("T1 {} T2 {} T3 {t3} (T3 unasserted)", pts(t1), pts(t2)))
}

fn criterion_pooling(rep: &AblationReport) -> Check {
    let arms = ["sin", "sin_max", "sin_concat"];
    let maps: Vec<Option<f64>> = arms.iter().map(|a| map_of(rep, a)).collect();
    let text = arms
        .iter()
        .zip(&maps)
        .map(|(a, m)| format!("{a} {}", m.map_or("diverged".into(), pts)))
        .collect::<Vec<_>>()
        .join(", ");
    let Some(vals) = maps.into_iter().collect::<Option<Vec<f64>>>() else {
        return Check::new(false, text);
    };
    let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
    Check::new(spread <= 0.03, format!("{text}; spread {}", pts(spread)))
}

fn criterion_pr(rep: &AblationReport) -> Check {
    let (Some(b), Some(s)) = (rep.get("baseline"), rep.get("sin")) else {
        return Check::new(false, "an arm failed to train");
    };
    let window = |r: &EvalResult| -> Vec<_> {
        r.pr_points
            .iter()
            .filter(|p| (0.3 - 1e-9..=0.7 + 1e-9).contains(&p.threshold))
            .copied()
            .collect()
    };
    let (pb, ps) = (window(b), window(s));
    let mut ok = pb.len() == 5 && ps.len() == 5;
    let mut parts = Vec::new();
    for (x, y) in pb.iter().zip(&ps) {
        ok &= y.precision >= x.precision && y.recall >= x.recall - 0.03;
        parts.push(format!(
            "@{:.1} P {}/{} R {}/{}",
            x.threshold,
            pts(y.precision),
            pts(x.precision),
            pts(y.recall),
            pts(x.recall)
        ));
    }
    Check::new(ok, format!("sin/baseline {}", parts.join(" ")))
}

fn main() {
    let mut all_ok = true;
    let world = default_world();

    let (c, t) = timed(Duration::from_secs(60), || match run_gradcheck(&world, &GradCheckSetup::default()) {
        Ok(r) => Check::new(
            r.max_rel_err < 1e-4,
            format!("max_rel_err {:.2e} over {} entries, worst {}", r.max_rel_err, r.entries_checked, r.worst_entry),
        ),
        Err(e) => Check::new(false, e.to_string()),
    });
    all_ok &= report(1, &c, t);

    let (c, t) = timed(Duration::from_secs(60), || {
        all(vec![
            ("gru_forward", check_gru(ORACLE_INSTANCES)),
            ("edge_weight", check_edge_weight(ORACLE_INSTANCES)),
            ("integrate_messages", check_messages(ORACLE_INSTANCES)),
            ("sin_step", check_sin_step(ORACLE_INSTANCES)),
            ("nms", check_nms(ORACLE_INSTANCES)),
            ("average_precision", check_ap(ORACLE_INSTANCES)),
        ])
    });
    all_ok &= report(2, &c, t);

    let start = Instant::now();
    let mut four_arm = None;
    let result = run_ablation(&world, &fixture_spec(), 1, |run| {
        if run.name == "sin" {
            four_arm = Some(start.elapsed());
        }
        eprintln!(
            "  {:<11} {}",
            run.name,
            run.result.as_ref().map_or_else(|e| format!("failed: {e}"), |r| format!("mAP {:.4}", r.map))
        );
    });
    let fixture_time = start.elapsed();
    match result {
        Ok(rep) => {
            let four = four_arm.unwrap_or(fixture_time);
            all_ok &= report(3, &criterion_ablation(&rep, four), four);
            all_ok &= report(4, &criterion_steps(&rep), fixture_time);
            all_ok &= report(5, &criterion_pooling(&rep), fixture_time);
            all_ok &= report(6, &criterion_pr(&rep), fixture_time);
        }
        Err(e) => {
            for n in 3..=6 {
                report(n, &Check::new(false, format!("fixture failed: {e}")), fixture_time);
            }
            all_ok = false;
        }
    }

    let (c, t) = timed(Duration::from_secs(120), || {
        all(vec![
            ("gates", check_gate_ranges(INVARIANT_INSTANCES)),
            ("convex", check_convex_bound(INVARIANT_INSTANCES)),
            ("permutation", check_permutation(INVARIANT_INSTANCES)),
            ("nms", check_nms_post(INVARIANT_INSTANCES)),
            ("ap", check_ap_range_monotone(INVARIANT_INSTANCES)),
            ("round-trips", check_round_trips()),
            ("determinism", check_determinism()),
        ])
    });
    all_ok &= report(7, &c, t);

    if !all_ok {
        std::process::exit(1);
    }
}
