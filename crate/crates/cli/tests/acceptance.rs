//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use planogram_core::align::{compliance_control, nw_align, AlignParams, AlignmentResult, BorderPenalty, GroupStatus};
use planogram_core::change::{detect_change, preprocess, ChangeParams, GrayFrame};
use planogram_core::detect::{
    greedy_nms, match_features, DetectorProvider, FeatureProvider, OracleDetector, OracleFeatures,
    ProviderError, RackImage, StaticDetector, StaticFeatures,
};
use planogram_core::detect::providers::detect_in_rack;
use planogram_core::eval::synth::{
    compose_shelf, generate_synthetic, write_oracle_files, PerturbationKind, SynthSpec, PERTURBATIONS,
};
use planogram_core::eval::{evaluate_racks, AnnotatedRack};
use planogram_core::ingest::imaging::{letterbox_transform, strip_bounds};
use planogram_core::ingest::{
    rack_key, split_racks, ContentHash, DeviceConfig, JobRecord, ReportLog, StoreConfig, DETECTOR_SIDE, RACK_HEIGHT,
};
use planogram_core::model::{BoxRect, CandidateBox, LocalFeature, PlanogramGroup, PlanogramSeq, Point};
use planogram_core::power::{
    battery_life, life_extension, simulate_node, AlternatingScene, HarvestSource, NodeEnergyConfig,
};
use planogram_core::search::{run_search, SearchParams, STALL_LIMIT};
use planogram_service::{router, AppState, ServiceConfig, UploadAck, DEVICE_HEADER, REPORT_LOG, TOKEN_HEADER};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("alignment optimality", nw_optimality),
        ("compliance arithmetic", compliance_arithmetic),
        ("pipeline closure", pipeline_closure),
        ("nms and matching oracles", nms_and_matching),
        ("change detection", change_detection),
        ("energy reproduction", energy_reproduction),
        ("search termination", search_termination),
        ("service round trip", service_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {}. {name} ({secs:.2}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name} ({secs:.2}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1. Needleman-Wunsch against exhaustive path enumeration.

#[derive(Clone, Copy)]
enum Step {
    Diag,
    Del,
    Ins,
}

fn step_score(step: Step, d: usize, t: usize, det: &[(char, i64)], reference: &[(char, i64)], dynamic: bool) -> i64 {
    match step {
        Step::Diag => {
            let ((ld, qd), (lt, qt)) = (det[d], reference[t]);
            if ld == lt {
                qd.min(qt)
            } else {
                -qd.max(qt)
            }
        }
        // Gaps taken before anything on the other side was consumed lie on
        // the matrix border.
        Step::Del => -if d == 0 && !dynamic { 1 } else { reference[t].1 },
        Step::Ins => -if t == 0 && !dynamic { 1 } else { det[d].1 },
    }
}

/// Best score over every alignment path, enumerated without memoisation.
fn exhaustive_best(d: usize, t: usize, det: &[(char, i64)], reference: &[(char, i64)], dynamic: bool) -> i64 {
    if d == det.len() && t == reference.len() {
        return 0;
    }
    let mut best = i64::MIN;
    let mut try_step = |step: Step, nd: usize, nt: usize| {
        let s = step_score(step, d, t, det, reference, dynamic) + exhaustive_best(nd, nt, det, reference, dynamic);
        best = best.max(s);
    };
    if d < det.len() && t < reference.len() {
        try_step(Step::Diag, d + 1, t + 1);
    }
    if t < reference.len() {
        try_step(Step::Del, d, t + 1);
    }
    if d < det.len() {
        try_step(Step::Ins, d + 1, t);
    }
    best
}

fn to_seq(groups: &[(char, i64)]) -> PlanogramSeq {
    PlanogramSeq::new(groups.iter().map(|&(l, q)| PlanogramGroup::product(l.to_string(), q as u32)).collect())
}

/// Rescores an alignment produced by `nw_align` and checks it spells out both
/// inputs.
fn path_score(res: &AlignmentResult, det: &[(char, i64)], reference: &[(char, i64)], dynamic: bool) -> Option<i64> {
    let (mut d, mut t, mut total) = (0, 0, 0);
    for (r, e) in res.ref_aligned.iter().zip(res.det_aligned.iter()) {
        let step = match (r.is_gap(), e.is_gap()) {
            (false, false) => Step::Diag,
            (false, true) => Step::Del,
            (true, false) => Step::Ins,
            (true, true) => return None,
        };
        if !r.is_gap() && (reference.get(t)?.0.to_string() != r.label.product()? || reference[t].1 != i64::from(r.quantity)) {
            return None;
        }
        if !e.is_gap() && (det.get(d)?.0.to_string() != e.label.product()? || det[d].1 != i64::from(e.quantity)) {
            return None;
        }
        total += step_score(step, d, t, det, reference, dynamic);
        match step {
            Step::Diag => (d, t) = (d + 1, t + 1),
            Step::Del => t += 1,
            Step::Ins => d += 1,
        }
    }
    ((d, t) == (det.len(), reference.len())).then_some(total)
}

fn random_groups(rng: &mut ChaCha8Rng) -> Vec<(char, i64)> {
    let alphabet = rng.gen_range(1..=4u8);
    (0..rng.gen_range(0..=6))
        .map(|_| ((b'A' + rng.gen_range(0..alphabet)) as char, rng.gen_range(1..=4)))
        .collect()
}

fn nw_optimality() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = 0;
    for dynamic in [false, true] {
        let params = AlignParams {
            border: if dynamic { BorderPenalty::Dynamic } else { BorderPenalty::Unit },
            ..Default::default()
        };
        for _ in 0..1000 {
            let (reference, det) = (random_groups(&mut rng), random_groups(&mut rng));
            let res = nw_align(&to_seq(&reference), &to_seq(&det), &params).map_err(|e| e.to_string())?;
            let best = exhaustive_best(0, 0, &det, &reference, dynamic);
            ensure!(res.score == best, "{reference:?} vs {det:?}: score {} but optimum {best}", res.score);
            let traced = path_score(&res, &det, &reference, dynamic);
            ensure!(traced == Some(best), "{reference:?} vs {det:?}: traceback scores {traced:?}, optimum {best}");
            pairs += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{pairs} pairs match the enumerated optimum, traceback consistent, {:.2}s", elapsed.as_secs_f64()))
}

// 2. Compliance ratio against hand-derived fractions.

fn group(token: &str, gap: PlanogramGroup) -> PlanogramGroup {
    if token == "-" {
        return gap;
    }
    let (label, qty) = token.split_at(1);
    PlanogramGroup::product(label, qty.parse().expect("quantity"))
}

/// `"A2/A3 -/B1"`: reference/detected per aligned position, `-` for a gap.
fn aligned(spec: &str) -> AlignmentResult {
    let (mut reference, mut det) = (Vec::new(), Vec::new());
    for pos in spec.split_whitespace() {
        let (r, d) = pos.split_once('/').expect("r/d");
        reference.push(group(r, PlanogramGroup::gap_ref()));
        det.push(group(d, PlanogramGroup::gap_det()));
    }
    AlignmentResult { ref_aligned: PlanogramSeq::new(reference), det_aligned: PlanogramSeq::new(det), ..Default::default() }
}

fn status(s: &str) -> GroupStatus {
    match s {
        "MT" => GroupStatus::MT,
        "ME" => GroupStatus::ME,
        "MI" => GroupStatus::MI,
        _ => GroupStatus::NM,
    }
}

/// One aligned position with its known contribution to the ratio.
fn atom(rng: &mut ChaCha8Rng, kind: usize) -> (String, &'static str, u64, u64) {
    let labels = ['A', 'B', 'C', 'D', 'E'];
    let l = labels[rng.gen_range(0..labels.len())];
    let q: u64 = rng.gen_range(1..=5);
    match kind {
        0 => (format!("{l}{q}/{l}{q}"), "MT", q, q),
        1 => {
            let more = q + rng.gen_range(1..=3);
            (format!("{l}{q}/{l}{more}"), "ME", q, q)
        }
        2 => {
            let q = q + 1;
            let fewer = rng.gen_range(1..q);
            (format!("{l}{q}/{l}{fewer}"), "MI", fewer, q)
        }
        3 => {
            let other = labels[(labels.iter().position(|&c| c == l).unwrap() + rng.gen_range(1..labels.len())) % labels.len()];
            (format!("{l}{q}/{other}{}", rng.gen_range(1..=5)), "NM", 0, q)
        }
        4 => (format!("{l}{q}/-"), "NM", 0, q),
        _ => (format!("-/{l}{q}"), "NM", 0, 0),
    }
}

fn compliance_arithmetic() -> Outcome {
    // (alignment, statuses, matched, required), worked out by hand.
    let fixed: [(&str, &str, u64, u64); 14] = [
        ("A2/A2", "MT", 2, 2),
        ("A2/A3", "ME", 2, 2),
        ("A3/A1", "MI", 1, 3),
        ("A2/B2", "NM", 0, 2),
        ("A2/-", "NM", 0, 2),
        ("-/B2", "NM", 0, 0),
        ("A2/A2 B1/- C3/C3", "MT NM MT", 5, 6),
        ("A2/A2 -/E1 B3/B2", "MT NM MI", 4, 5),
        ("A1/A4 B2/B2 C2/C1 D1/E1", "ME MT MI NM", 4, 6),
        ("-/A1 -/A2 B2/B2", "NM NM MT", 2, 2),
        ("A4/- B4/- C1/C1", "NM NM MT", 1, 9),
        ("A3/A2 B1/B1 A3/A4", "MI MT ME", 6, 7),
        ("A2/B3 B3/A2", "NM NM", 0, 5),
        ("", "", 0, 0),
    ];
    let mut cases: Vec<(String, Vec<&str>, u64, u64)> = fixed
        .iter()
        .map(|&(a, s, m, r)| (a.to_string(), s.split_whitespace().collect(), m, r))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    while cases.len() < 50 {
        let n = rng.gen_range(1..=7);
        let (mut spec, mut statuses, mut matched, mut required) = (Vec::new(), Vec::new(), 0, 0);
        for k in 0..n {
            // Cycle through the kinds so every case mixes several.
            let (pos, s, m, r) = atom(&mut rng, (cases.len() + k) % 6);
            spec.push(pos);
            statuses.push(s);
            matched += m;
            required += r;
        }
        cases.push((spec.join(" "), statuses, matched, required));
    }

    let mut seen = std::collections::BTreeSet::new();
    for (spec, statuses, matched, required) in &cases {
        let res = compliance_control(aligned(spec)).map_err(|e| e.to_string())?;
        let want: Vec<GroupStatus> = statuses.iter().map(|s| status(s)).collect();
        ensure!(res.statuses == want, "{spec:?}: statuses {:?}, expected {want:?}", res.statuses);
        // mu = matched / required as an exact fraction; 1 when nothing is required.
        let (num, den) = if *required == 0 { (1, 1) } else { (*matched, *required) };
        let (got_num, got_den) = if res.required == 0 { (1, 1) } else { (res.matched, res.required) };
        ensure!(
            u128::from(got_num) * u128::from(den) == u128::from(num) * u128::from(got_den)
                && (res.matched, res.required) == (*matched, *required),
            "{spec:?}: mu {}/{}, expected {matched}/{required}",
            res.matched,
            res.required
        );
        for s in &res.statuses {
            seen.insert(format!("{s}"));
        }
        if spec.contains("/-") {
            seen.insert("det gap".into());
        }
        if spec.contains("-/") {
            seen.insert("ref gap".into());
        }
    }
    ensure!(seen.len() == 6, "coverage incomplete: {seen:?}");
    Ok(format!("{} alignments exact, covering {}", cases.len(), seen.into_iter().collect::<Vec<_>>().join(", ")))
}

// 3. Synthetic racks through the full loop with file-backed oracle providers.

fn evaluate_synthetic(seed: u64, racks: usize, kind: PerturbationKind) -> Result<planogram_core::eval::EvaluationReport, String> {
    let spec = SynthSpec { racks, perturbation: kind, ..Default::default() };
    let ds = generate_synthetic(seed, &spec).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for r in &ds.racks {
        write_oracle_files(dir.path(), &r.annotated.key, &r.boxes, &r.features).map_err(|e| e.to_string())?;
    }
    let detector = OracleDetector::new(dir.path());
    let features = OracleFeatures::new(dir.path(), spec.descriptor_dim);
    let annotated: Vec<AnnotatedRack> = ds.racks.into_iter().map(|r| r.annotated).collect();
    evaluate_racks(&annotated, &ds.catalog, &detector, &features, &SearchParams::default()).map_err(|e| e.to_string())
}

fn pipeline_closure() -> Outcome {
    let started = Instant::now();
    let clean = evaluate_synthetic(1000, 100, PerturbationKind::None)?;
    for r in &clean.racks {
        ensure!(r.matched == r.required, "{}: mu {}/{}", r.key, r.matched, r.required);
        ensure!(r.detection.f1 == 1.0, "{}: detection F1 {}", r.key, r.detection.f1);
    }
    let mut rates = Vec::new();
    for (i, kind) in PERTURBATIONS.into_iter().enumerate() {
        let report = evaluate_synthetic(2000 + i as u64, 50, kind)?;
        let rate = report.status_reproduction();
        ensure!(rate >= 0.95, "{kind:?}: statuses reproduced on {:.1}% of racks", 100.0 * rate);
        rates.push(format!("{kind:?} {:.0}%", 100.0 * rate));
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("100/100 clean racks mu=1 and F1=1; perturbed (50 each): {}", rates.join(", ")))
}

// 4. Greedy NMS against subset search, ratio test against sorted 2-NN.

fn oracle_iou(a: &BoxRect, b: &BoxRect) -> f64 {
    let area = |r: &BoxRect| (r.br.x - r.tl.x).max(0.0) * (r.br.y - r.tl.y).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let w = (a.br.x.min(b.br.x) - a.tl.x.max(b.tl.x)).max(0.0);
    let h = (a.br.y.min(b.br.y) - a.tl.y.max(b.tl.y)).max(0.0);
    let inter = w * h;
    inter / (aa + ab - inter)
}

/// The kept set of greedy suppression is the unique subset in which every
/// box is kept exactly when no higher-ranked kept box overlaps it. Searches
/// all subsets for it.
fn nms_by_subsets(items: &[(BoxRect, f64)], threshold: f64) -> Option<Vec<usize>> {
    let n = items.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| items[b].1.partial_cmp(&items[a].1).unwrap().then(a.cmp(&b)));
    let mut found = None;
    for mask in 0u32..(1 << n) {
        let kept = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|pos| {
            let i = rank[pos];
            let blocked = rank[..pos].iter().any(|&j| kept(j) && oracle_iou(&items[i].0, &items[j].0) > threshold);
            kept(i) == !blocked
        });
        if consistent {
            if found.is_some() {
                return None;
            }
            found = Some(rank.iter().copied().filter(|&i| kept(i)).collect());
        }
    }
    found
}

fn two_nn(model: &[LocalFeature], scene: &[LocalFeature], tau: f64) -> Vec<usize> {
    let mut kept = std::collections::BTreeSet::new();
    for m in model {
        let mut dists: Vec<(f64, usize)> = scene
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sq: f64 = m.descriptor.iter().zip(&s.descriptor).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum();
                (sq.sqrt(), i)
            })
            .collect();
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if dists.len() >= 2 && dists[0].0 < tau * dists[1].0 {
            kept.insert(dists[0].1);
        }
    }
    kept.into_iter().collect()
}

fn random_features(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<LocalFeature> {
    (0..n)
        .map(|_| LocalFeature {
            x: rng.gen_range(0.0..100.0),
            y: rng.gen_range(0.0..100.0),
            descriptor: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect()
}

fn nms_and_matching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut kept_total = 0;
    for trial in 0..1000 {
        let n = rng.gen_range(0..=10);
        let items: Vec<(BoxRect, f64)> = (0..n)
            .map(|_| {
                let (x, y) = (rng.gen_range(0.0..60.0), rng.gen_range(0.0..60.0));
                let (w, h) = (rng.gen_range(5.0..40.0), rng.gen_range(5.0..40.0));
                // Coarse scores so ties occur.
                (BoxRect::from_corners(x, y, x + w, y + h), f64::from(rng.gen_range(0..8u8)) / 8.0)
            })
            .collect();
        let threshold = [0.3, 0.5, 0.7][trial % 3];
        let greedy = greedy_nms(&items, threshold);
        let oracle = nms_by_subsets(&items, threshold).ok_or("subset oracle found no unique solution")?;
        ensure!(greedy == oracle, "trial {trial}: greedy {greedy:?}, oracle {oracle:?}");
        kept_total += greedy.len();
    }
    let mut matched_total = 0;
    for trial in 0..1000 {
        let dim = rng.gen_range(1..=8);
        let (nm, ns) = (rng.gen_range(0..=12), rng.gen_range(0..=12));
        let model = random_features(&mut rng, nm, dim);
        let scene = random_features(&mut rng, ns, dim);
        let tau = rng.gen_range(0.5..1.0);
        let got = match_features(&model, &scene, tau);
        let want = two_nn(&model, &scene, tau);
        ensure!(got == want, "trial {trial}: matched {got:?}, oracle {want:?}");
        matched_total += got.len();
    }
    Ok(format!("1000 NMS sets ({kept_total} kept) and 1000 matching sets ({matched_total} matches) agree exactly"))
}

// 5. Change detection.

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> GrayFrame {
    GrayFrame::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..255.0)).collect()).unwrap()
}

fn change_detection() -> Outcome {
    let params = ChangeParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let f = preprocess(&random_frame(&mut rng, 64, 48), &params);
        let out = detect_change(&f, &f.clone(), &params).map_err(|e| e.to_string())?;
        ensure!(out.changed_fraction == 0.0 && !out.changed, "identical frames gave {out:?}");
    }
    let mut changed_pairs = 0;
    for i in 0..100 {
        let a = preprocess(&random_frame(&mut rng, 64, 48), &params);
        let mut b = a.clone();
        // Vary how much of the frame moves from pair to pair.
        let p = f64::from(i) / 100.0;
        for v in b.pixels_mut() {
            if rng.gen_bool(p) {
                *v = rng.gen_range(0.0..255.0);
            }
        }
        let (ab, ba) = (detect_change(&a, &b, &params).unwrap(), detect_change(&b, &a, &params).unwrap());
        ensure!(ab.changed_fraction == ba.changed_fraction, "pair {i}: {} vs {}", ab.changed_fraction, ba.changed_fraction);
        ensure!(ab.changed == ba.changed, "pair {i}: decisions differ");
        changed_pairs += usize::from(ab.changed);
    }

    let params = ChangeParams { change_fraction_threshold: 0.02, ..ChangeParams::default() };
    let base = GrayFrame::filled(100, 100, 120.0);
    let mut live = base.clone();
    for y in 45..55 {
        for x in 45..55 {
            live.set(x, y, 250.0);
        }
    }
    let raw = base.pixels().iter().zip(live.pixels()).filter(|(a, b)| a != b).count();
    ensure!(raw == 100, "constructed change covers {raw} pixels");
    let out = detect_change(&preprocess(&base, &params), &preprocess(&live, &params), &params).unwrap();
    ensure!(out.changed_fraction > 0.0 && !out.changed, "1% change gave {out:?}");
    let cfg = NodeEnergyConfig::default();
    let mut feed = AlternatingScene(base, live);
    let trace = simulate_node(10, &mut feed, &cfg, &[], &params);
    ensure!(trace.state.transfers == 0, "{} transfers for a 1% change", trace.state.transfers);
    Ok(format!(
        "identical frames 0, 100 pairs symmetric ({changed_pairs} changed), 1% change -> fraction {:.4}, {} wakes without transfer",
        out.changed_fraction, trace.state.wakes
    ))
}

// 6. Energy budget.

fn energy_reproduction() -> Outcome {
    let cfg = NodeEnergyConfig::default();
    ensure!(cfg.active_current == 243.2 && cfg.wakes_per_day == 2 && cfg.battery_capacity == 1500.0, "defaults changed");
    ensure!((cfg.active_seconds_per_wake() - 12.0).abs() < 1e-12, "active time {}", cfg.active_seconds_per_wake());
    let base = battery_life(&cfg, &[]).months().ok_or("unbounded without harvesting")?;
    ensure!((20.0..=30.0).contains(&base), "battery life {base:.2} months");
    let solar = HarvestSource::reference_solar();
    let rf = HarvestSource::rf_minus_8_dbm();
    let solar_ext = life_extension(&cfg, &[solar]).ok_or("solar makes life unbounded")?;
    ensure!((12.0..=36.0).contains(&solar_ext), "solar extension {solar_ext:.2} months");
    let rf_ext = life_extension(&cfg, &[rf]).ok_or("rf makes life unbounded")?;
    ensure!((6.0..=18.0).contains(&rf_ext), "rf extension {rf_ext:.2} months");

    let params = ChangeParams::default();
    let mut worst: f64 = 0.0;
    for sources in [vec![], vec![solar], vec![rf]] {
        let mut feed = AlternatingScene(GrayFrame::filled(16, 12, 60.0), GrayFrame::filled(16, 12, 200.0));
        let trace = simulate_node(3000, &mut feed, &cfg, &sources, &params);
        let expected = battery_life(&cfg, &sources).months().unwrap();
        let got = trace.depleted_months().ok_or("simulated node never depleted")?;
        let err = (got - expected).abs() / expected;
        ensure!(err < 0.01, "{sources:?}: simulated {got:.3} months, closed form {expected:.3}");
        ensure!(trace.balances(), "charge ledger does not balance");
        worst = worst.max(err);
    }
    Ok(format!(
        "life {base:.2} months, solar +{solar_ext:.2}, rf +{rf_ext:.2}, simulation within {:.3}%",
        100.0 * worst
    ))
}

// 7. Termination of the search loop under hostile providers.

struct RandomProvider {
    seed: u64,
    width: f64,
    dim: usize,
}

impl RandomProvider {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(31).wrapping_add(salt))
    }
}

impl DetectorProvider for RandomProvider {
    fn input_side(&self) -> Option<u32> {
        None
    }

    fn detect(&self, _: &RackImage) -> Result<Vec<CandidateBox>, ProviderError> {
        let mut rng = self.rng(1);
        Ok((0..rng.gen_range(0..60))
            .map(|_| {
                CandidateBox::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..self.width),
                    rng.gen_range(0.0..400.0),
                    rng.gen_range(20.0..250.0),
                    rng.gen_range(40.0..400.0),
                )
            })
            .collect())
    }
}

impl FeatureProvider for RandomProvider {
    fn descriptor_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, _: &RackImage) -> Result<Vec<LocalFeature>, ProviderError> {
        let mut rng = self.rng(2);
        Ok((0..rng.gen_range(0..400))
            .map(|_| LocalFeature {
                x: rng.gen_range(0.0..self.width),
                y: rng.gen_range(0.0..400.0),
                descriptor: (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect())
    }
}

/// Answers every call with the next of a rotating set of outputs: the true
/// oracle output, nothing, and noise.
struct OscillatingProvider {
    truth: (StaticDetector, StaticFeatures),
    noise: RandomProvider,
    calls: AtomicUsize,
}

impl OscillatingProvider {
    fn phase(&self) -> usize {
        self.calls.fetch_add(1, Ordering::SeqCst) % 3
    }
}

impl DetectorProvider for OscillatingProvider {
    fn input_side(&self) -> Option<u32> {
        None
    }

    fn detect(&self, image: &RackImage) -> Result<Vec<CandidateBox>, ProviderError> {
        match self.phase() {
            0 => self.truth.0.detect(image),
            1 => Ok(Vec::new()),
            _ => self.noise.detect(image),
        }
    }
}

impl FeatureProvider for OscillatingProvider {
    fn descriptor_dim(&self) -> usize {
        self.noise.dim
    }

    fn extract(&self, image: &RackImage) -> Result<Vec<LocalFeature>, ProviderError> {
        match self.phase() {
            0 => self.truth.1.extract(image),
            1 => Ok(Vec::new()),
            _ => self.noise.extract(image),
        }
    }
}

/// Checks one trace and returns its longest run of stalls.
fn check_trace(trace: &[planogram_core::search::IterationRecord]) -> Result<u32, String> {
    ensure!(!trace.is_empty(), "empty trace");
    let mut longest = 0;
    for (k, rec) in trace.iter().enumerate() {
        let i = k as i32 + 1;
        ensure!(rec.iteration == i as u32, "iteration numbering {} at {i}", rec.iteration);
        let expected = 0.95 - 0.2 * 0.75f64.powi(i - 1);
        ensure!((rec.tau_alpha - expected).abs() <= 1e-12, "iteration {i}: tau {} vs {expected}", rec.tau_alpha);
        ensure!(rec.stall_count <= STALL_LIMIT, "iteration {i}: {} stalls", rec.stall_count);
        longest = longest.max(rec.stall_count);
    }
    let last = trace.last().unwrap();
    ensure!(
        last.matched == last.required || last.stall_count == STALL_LIMIT,
        "stopped at {}/{} after {} stalls",
        last.matched,
        last.required,
        last.stall_count
    );
    Ok(longest)
}

fn search_termination() -> Outcome {
    let ds = generate_synthetic(7, &SynthSpec { racks: 6, ..Default::default() }).map_err(|e| e.to_string())?;
    let params = SearchParams::default();
    let dim = ds.spec.descriptor_dim;
    let (mut runs, mut max_iters, mut longest) = (0, 0, 0);
    let mut record = |outcome: planogram_core::search::SearchOutcome| -> Result<(), String> {
        longest = longest.max(check_trace(&outcome.trace)?);
        max_iters = max_iters.max(outcome.iterations());
        runs += 1;
        Ok(())
    };
    for (n, r) in ds.racks.iter().enumerate() {
        let a = &r.annotated;
        let rack = RackImage::new(a.key.clone(), a.image.clone());
        let width = f64::from(a.width);

        let empty = (StaticDetector::single(&a.key, vec![]), StaticFeatures::single(&a.key, dim, vec![]));
        let out = run_search(&rack, &a.reference, &ds.catalog, &empty.0, &empty.1, &params).map_err(|e| e.to_string())?;
        ensure!(out.iterations() == STALL_LIMIT as usize, "empty provider ran {} iterations", out.iterations());
        record(out)?;

        for seed in 0..8 {
            let noise = RandomProvider { seed: seed * 100 + n as u64, width, dim };
            let out = run_search(&rack, &a.reference, &ds.catalog, &noise, &noise, &params).map_err(|e| e.to_string())?;
            record(out)?;
        }

        let osc = OscillatingProvider {
            truth: (
                StaticDetector::single(&a.key, r.boxes.clone()),
                StaticFeatures::single(&a.key, dim, r.features.clone()),
            ),
            noise: RandomProvider { seed: n as u64, width, dim },
            calls: AtomicUsize::new(0),
        };
        for _ in 0..9 {
            let out = run_search(&rack, &a.reference, &ds.catalog, &osc, &osc, &params).map_err(|e| e.to_string())?;
            record(out)?;
        }
    }
    ensure!(longest <= STALL_LIMIT, "{longest} stalls");
    Ok(format!("{runs} runs, at most {longest} stalls and {max_iters} iterations, tau trace exact to 1e-12"))
}

// 8. Service round trip.

async fn call(state: &AppState, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

fn upload_request(body: &[u8]) -> Request<Body> {
    Request::post("/v1/shelf-image")
        .header(DEVICE_HEADER, "cam-1")
        .header(TOKEN_HEADER, "t0k")
        .body(Body::from(body.to_vec()))
        .unwrap()
}

async fn wait_for(state: &AppState, job: &str) -> Result<(JobRecord, serde_json::Value), String> {
    for _ in 0..500 {
        let (status, body) = call(state, Request::get(format!("/v1/report/{job}")).body(Body::empty()).unwrap()).await;
        if status == StatusCode::OK {
            let record = serde_json::from_value(body.clone()).map_err(|e| e.to_string())?;
            return Ok((record, body));
        }
        ensure!(status == StatusCode::ACCEPTED, "report answered {status}: {body}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    Err(format!("job {job} never finished"))
}

fn geometry_checks() -> Result<(), String> {
    for (height, count, want) in [
        (1200, 3, vec![400, 400, 400]),
        (1201, 3, vec![401, 400, 400]),
        (1000, 3, vec![334, 333, 333]),
        (800, 1, vec![800]),
    ] {
        let bounds = strip_bounds(height, count).map_err(|e| e.to_string())?;
        let heights: Vec<u32> = bounds.iter().map(|(a, b)| b - a).collect();
        ensure!(heights == want, "{height} rows / {count}: {heights:?}");
        ensure!(bounds.first().unwrap().0 == 0 && bounds.last().unwrap().1 == height, "strips do not tile {height}");
        ensure!(bounds.windows(2).all(|w| w[0].1 == w[1].0), "strips overlap");
        let img = image::RgbImage::new(600, height);
        for strip in split_racks(&img, count).map_err(|e| e.to_string())? {
            ensure!(strip.height() == RACK_HEIGHT, "strip resized to {} rows", strip.height());
        }
    }

    let t = letterbox_transform(1600, 400, DETECTOR_SIDE);
    ensure!(t.scale_x == 0.4 && t.scale_y == 0.4 && t.offset_x == 0.0 && t.offset_y == 240.0, "1600x400 letterbox {t:?}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (w, h) = (rng.gen_range(50..3000u32), rng.gen_range(50..3000u32));
        let t = letterbox_transform(w, h, DETECTOR_SIDE);
        let p = Point::new(rng.gen_range(0.0..f64::from(w)), rng.gen_range(0.0..f64::from(h)));
        let d = t.to_detector(p);
        // Detector output is reported to one hundredth of a pixel.
        let q = Point::new((d.x * 100.0).round() / 100.0, (d.y * 100.0).round() / 100.0);
        let back = t.to_source(q);
        worst = worst.max((back.x - p.x).abs()).max((back.y - p.y).abs());
        ensure!(d.x >= 0.0 && d.x <= f64::from(DETECTOR_SIDE) && d.y >= 0.0 && d.y <= f64::from(DETECTOR_SIDE), "{p:?} maps outside the input");
    }
    ensure!(worst <= 0.5, "transform round trip off by {worst}");
    Ok(())
}

/// Detector that sees the letterboxed input and reports the true boxes mapped
/// into it.
struct LetterboxedTruth(Vec<CandidateBox>, (u32, u32));

impl DetectorProvider for LetterboxedTruth {
    fn input_side(&self) -> Option<u32> {
        Some(DETECTOR_SIDE)
    }

    fn detect(&self, image: &RackImage) -> Result<Vec<CandidateBox>, ProviderError> {
        assert_eq!((image.width(), image.height()), (DETECTOR_SIDE, DETECTOR_SIDE));
        let t = letterbox_transform(self.1 .0, self.1 .1, DETECTOR_SIDE);
        Ok(self
            .0
            .iter()
            .map(|b| {
                let r = t.to_detector_rect(&b.rect());
                let c = r.center();
                CandidateBox::new(b.confidence, c.x, c.y, r.width(), r.height())
            })
            .collect())
    }
}

fn service_round_trip() -> Outcome {
    geometry_checks()?;

    let ds = generate_synthetic(11, &SynthSpec { racks: 3, ..Default::default() }).map_err(|e| e.to_string())?;
    let first = &ds.racks[0];
    let rack = RackImage::new("r", first.annotated.image.clone());
    let size = (first.annotated.width, first.annotated.height);
    let back = detect_in_rack(&LetterboxedTruth(first.boxes.clone(), size), &rack).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (a, b) in first.boxes.iter().zip(&back) {
        let (ra, rb) = (a.rect(), b.rect());
        for (p, q) in [(ra.tl, rb.tl), (ra.br, rb.br)] {
            worst = worst.max((p.x - q.x).abs()).max((p.y - q.y).abs());
        }
    }
    ensure!(back.len() == first.boxes.len() && worst <= 0.5, "detector boxes come back off by {worst}");

    let images: Vec<_> = ds.racks.iter().map(|r| &r.annotated.image).collect();
    let shelf = compose_shelf(&images);
    ensure!(shelf.dimensions() == (1600, 1200), "shelf is {:?}", shelf.dimensions());
    let mut jpeg = Vec::new();
    shelf
        .write_to(&mut std::io::Cursor::new(&mut jpeg), image::ImageFormat::Jpeg)
        .map_err(|e| e.to_string())?;
    let hash = ContentHash::of(&jpeg);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let oracle = dir.path().join("oracle");
    for (i, r) in ds.racks.iter().enumerate() {
        write_oracle_files(&oracle, &rack_key(&hash, i), &r.boxes, &r.features).map_err(|e| e.to_string())?;
    }
    let store_config = StoreConfig {
        token: "t0k".into(),
        catalog: "catalog.json".into(),
        devices: [(
            "cam-1".to_string(),
            DeviceConfig { rack_count: 3, racks: ds.racks.iter().map(|r| r.annotated.reference.clone()).collect() },
        )]
        .into(),
    };
    let config = ServiceConfig { storage_root: dir.path().join("store"), workers: 2, queue_capacity: 8 };
    let start = || {
        AppState::start(
            &config,
            store_config.clone(),
            ds.catalog.clone(),
            Box::new(OracleDetector::new(&oracle)),
            Box::new(OracleFeatures::new(&oracle, ds.spec.descriptor_dim)),
            SearchParams::default(),
        )
        .map_err(|e| e.to_string())
    };

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let state = start()?;
        let (status, body) = call(&state, upload_request(&jpeg)).await;
        ensure!(status == StatusCode::ACCEPTED, "upload answered {status}: {body}");
        let ack: UploadAck = serde_json::from_value(body).map_err(|e| e.to_string())?;
        ensure!(ack.job_id == format!("job-{}", &hash.as_str()[..16]) && !ack.duplicate, "ack {ack:?}");

        let (record, json) = wait_for(&state, &ack.job_id).await?;
        ensure!(record.racks.len() == 3, "{} racks in report", record.racks.len());
        for r in &record.racks {
            ensure!((r.width, r.height) == (1600, RACK_HEIGHT), "rack {} is {}x{}", r.index, r.width, r.height);
        }
        ensure!(record.matched == record.required, "mu {}/{}", record.matched, record.required);

        let (status, body) = call(&state, upload_request(&jpeg)).await;
        ensure!(status == StatusCode::OK, "repeat upload answered {status}");
        let again: UploadAck = serde_json::from_value(body).map_err(|e| e.to_string())?;
        ensure!(again.job_id == ack.job_id && again.duplicate, "repeat ack {again:?}");
        let (_, json_again) = wait_for(&state, &ack.job_id).await?;
        ensure!(json_again == json, "report changed after repeat upload");
        let logged: Vec<JobRecord> = ReportLog::open(config.storage_root.join(REPORT_LOG))
            .and_then(|l| l.read_all())
            .map_err(|e| e.to_string())?;
        ensure!(logged.len() == 1, "{} records logged", logged.len());

        // A restarted service serves the stored report.
        let restarted = start()?;
        let (reloaded, _) = wait_for(&restarted, &ack.job_id).await?;
        ensure!(reloaded == record, "reloaded record differs");
        Ok(format!(
            "{} -> 3 strips of {RACK_HEIGHT} rows, mu {}/{}, duplicate idempotent, detector boxes back within {worst:.1e} px",
            ack.job_id, record.matched, record.required
        ))
    })
}
