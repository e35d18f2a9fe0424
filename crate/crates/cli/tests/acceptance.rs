//! Acceptance criteria 1 to 8. Every test writes one `criterion N: PASS|FAIL`
//! line to stderr (uncaptured) and then asserts the criterion.

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use betadet_core::assignment::{build_cost_matrix, hungarian, match_detections, CostMatrix, CostWeights};
use betadet_core::autograd::AdamState;
use betadet_core::betax::{self, BetaParams, Maturity, EPS};
use betadet_core::checkpoint::Checkpoint;
use betadet_core::config::RunConfig;
use betadet_core::evalkit::{self, EvalReport};
use betadet_core::geometry::{giou, BoxCXCYWH};
use betadet_core::gradcheck::{gradcheck, Fault, TOLERANCE};
use betadet_core::model::{Detection, Model, ModelConfig};
use betadet_core::rng::RngState;
use betadet_core::synthdata::{generate, GroundTruthObject, Image, Scene};
use betadet_core::train::{train, train_step, TrainSettings};

const TRAIN_SEED: u64 = 1;
const TRAIN_SCENES: usize = 500;
const HELD_OUT_SEED: u64 = 2;
const HELD_OUT_SCENES: usize = 200;

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_beta_oracle() {
    let start = Instant::now();
    let text = include_str!("../../core/tests/fixtures/beta_oracle.txt");
    let mut rows = 0;
    let mut worst = 0.0f64;
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let p = BetaParams::new(v[0], v[1]).unwrap();
        let y = Maturity::new(v[2]).unwrap();
        let errs = [
            (betax::log_pdf(p, y) - v[3]).abs() / v[3].abs().max(1.0),
            (betax::cdf(p, y) - v[4]).abs(),
            (betax::mean(p).value() - v[5]).abs(),
            (betax::variance(p) - v[6]).abs(),
        ];
        worst = errs.into_iter().fold(worst, f64::max);
        rows += 1;
    }
    let elapsed = start.elapsed();
    let pass = rows == 7 * 7 * 99 && worst <= 1e-10 && elapsed < Duration::from_secs(10);
    report(1, pass, &format!("{rows} grid points, max error {worst:.2e}, {elapsed:.2?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_gradient_fidelity() {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut all_pass = true;
    for seed in 1..=5 {
        let r = gradcheck(seed, Fault::None).unwrap();
        all_pass &= r.passed();
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, format!("seed {seed} {}[{}]", r.worst_param, r.worst_index));
        }
    }
    let negative = !gradcheck(1, Fault::ScaledGradient).unwrap().passed();
    let elapsed = start.elapsed();
    let pass = all_pass && negative && worst.0 <= TOLERANCE && elapsed < Duration::from_secs(120);
    report(
        2,
        pass,
        &format!("5 seeds, max relative error {:.2e} at {}, corrupted backward detected: {negative}, {elapsed:.2?}", worst.0, worst.1),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3, 4

fn injections(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    fn go(rows: usize, cols: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == cols {
            out.push(cur.clone());
            return;
        }
        for r in 0..rows {
            if !cur.contains(&r) {
                cur.push(r);
                go(rows, cols, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(rows, cols, &mut Vec::new(), &mut out);
    out
}

fn assignment_cost(c: &CostMatrix, rows_for_col: &[usize]) -> f64 {
    rows_for_col.iter().enumerate().map(|(col, &row)| c.get(row, col)).sum()
}

#[test]
fn criterion_3_hungarian_oracle() {
    let start = Instant::now();
    let mut rng = RngState::new(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let cols = rng.int_range(1, 7);
        let rows = rng.int_range(cols, 7);
        let data = (0..rows * cols).map(|_| rng.uniform_range(0.0, 10.0)).collect();
        let c = CostMatrix::new(rows, cols, data).unwrap();
        let m = hungarian(&c).unwrap();
        let brute = injections(rows, cols).iter().map(|a| assignment_cost(&c, a)).fold(f64::INFINITY, f64::min);
        worst = worst.max((m.total_cost - brute).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-9 && elapsed < Duration::from_secs(30);
    report(3, pass, &format!("1000 matrices up to 7x7, max |solver - brute force| {worst:.2e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_4_maturity_cost_decisiveness() {
    let bbox = BoxCXCYWH::new(0.5, 0.5, 0.2, 0.2).unwrap();
    let det = |a, b| Detection { bbox, p_obj: 0.7, maturity: BetaParams::new(a, b).unwrap() };
    let preds = [det(2.0, 8.0), det(8.0, 2.0)];
    let gts = [GroundTruthObject::from_stage(bbox, 0).unwrap(), GroundTruthObject::from_stage(bbox, 2).unwrap()];
    let targets_ok = (gts[0].y_target.value() - 1.0 / 6.0).abs() < 1e-15 && (gts[1].y_target.value() - 5.0 / 6.0).abs() < 1e-15;

    let m = match_detections(&preds, &gts, &CostWeights::default()).unwrap();
    let assigned = m.pairs == vec![(0, 0), (1, 1)];
    let c = build_cost_matrix(&preds, &gts, &CostWeights::default()).unwrap();
    let costs: Vec<f64> = injections(2, 2).iter().map(|a| assignment_cost(&c, a)).collect();
    let strict = costs[0] < costs[1];

    let no_mat = CostWeights { lambda_mat: 0.0, ..CostWeights::default() };
    let c0 = build_cost_matrix(&preds, &gts, &no_mat).unwrap();
    let costs0: Vec<f64> = injections(2, 2).iter().map(|a| assignment_cost(&c0, a)).collect();
    let tie = costs0[0] == costs0[1];

    let pass = targets_ok && assigned && strict && tie;
    report(
        4,
        pass,
        &format!("pairs {:?}, costs {:.4}/{:.4}, without maturity cost {:.4}/{:.4}", m.pairs, costs[0], costs[1], costs0[0], costs0[1]),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5, 6, 8

struct Trained {
    model: Model,
    elapsed: Duration,
}

fn run_training(loss_reg: Option<f64>) -> Trained {
    let mut cfg = RunConfig::default();
    if let Some(r) = loss_reg {
        cfg.train.loss.lambda_reg = r;
    }
    let scenes = generate(TRAIN_SEED, TRAIN_SCENES).unwrap();
    let start = Instant::now();
    let mut model = Model::init(cfg.model, cfg.train.seed).unwrap();
    train(&mut model, &scenes, &cfg.train, |_, _| {}).unwrap();
    Trained { model, elapsed: start.elapsed() }
}

fn held_out() -> &'static (Vec<Scene>, Vec<Vec<GroundTruthObject>>) {
    static HELD: OnceLock<(Vec<Scene>, Vec<Vec<GroundTruthObject>>)> = OnceLock::new();
    HELD.get_or_init(|| {
        let scenes = generate(HELD_OUT_SEED, HELD_OUT_SCENES).unwrap();
        let gts = scenes.iter().map(|s| s.objects.clone()).collect();
        (scenes, gts)
    })
}

fn final_detections(model: &Model, scenes: &[Scene]) -> Vec<Vec<Detection>> {
    let mut out = Vec::new();
    for chunk in scenes.chunks(16) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        out.extend(model.predict(&images).unwrap().pop().unwrap());
    }
    out
}

fn default_run() -> &'static (Trained, EvalReport, Vec<BetaParams>) {
    static RUN: OnceLock<(Trained, EvalReport, Vec<BetaParams>)> = OnceLock::new();
    RUN.get_or_init(|| {
        let t = run_training(None);
        let (scenes, gts) = held_out();
        let dets = final_detections(&t.model, scenes);
        let threshold = RunConfig::default().obj_threshold;
        let report = evalkit::evaluate(&dets, gts, threshold).unwrap();
        let params = evalkit::maturity_pairs(&dets, gts, threshold).iter().map(|p| p.params).collect();
        (t, report, params)
    })
}

#[test]
fn criterion_5_desk_scale_training() {
    let (t, r, _) = default_run();
    let mae = r.maturity_mae.unwrap_or(f64::INFINITY);
    let nll = r.mean_nll.unwrap_or(f64::INFINITY);
    let checks = [r.ap50 >= 0.85, mae <= 0.12, nll <= -0.2, t.elapsed <= Duration::from_secs(15 * 60)];
    let pass = checks.iter().all(|&c| c);
    report(
        5,
        pass,
        &format!(
            "AP50 {:.4} (>= 0.85: {}), maturity MAE {mae:.4} (<= 0.12: {}), mean NLL {nll:.4} (<= -0.2: {}), training {:.1?} (<= 15 min: {}), {} matched pairs",
            r.ap50, checks[0], checks[1], checks[2], t.elapsed, checks[3], r.matched
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_calibration_harness() {
    let (_, _, params) = default_run();
    if params.is_empty() {
        report(6, false, "the trained model produced no matched predictions to sample from");
        panic!("no predictions");
    }
    let samples = evalkit::sample_from_predictions(params, 10_000, 6).unwrap();
    let cov = evalkit::coverage(&samples, &[0.8, 0.9]).unwrap();
    let ks = evalkit::pit(&samples).unwrap();
    let pass = cov.iter().all(|&(q, c)| (c - q).abs() <= 0.02) && ks < 0.025;
    report(
        6,
        pass,
        &format!("{} predicted Betas, coverage@0.8 {:.4}, coverage@0.9 {:.4}, PIT KS {ks:.4}, n = 10000", params.len(), cov[0].1, cov[1].1),
    );
    assert!(pass);
}

#[test]
fn criterion_8_regularizer_effect() {
    let (scenes, gts) = held_out();
    let threshold = RunConfig::default().obj_threshold;
    let mean_concentration = |reg: f64| {
        let t = run_training(Some(reg));
        let dets = final_detections(&t.model, scenes);
        let pairs = evalkit::maturity_pairs(&dets, gts, threshold);
        let params: Vec<BetaParams> = if pairs.is_empty() {
            dets.iter().flatten().map(|d| d.maturity).collect()
        } else {
            pairs.iter().map(|p| p.params).collect()
        };
        (params.iter().map(|p| p.concentration()).sum::<f64>() / params.len() as f64, pairs.len())
    };
    let (free, n0) = mean_concentration(0.0);
    let (reg, n1) = mean_concentration(1e-2);
    let pass = reg < free;
    report(
        8,
        pass,
        &format!("mean alpha+beta {free:.3} at lambda_reg 0 ({n0} pairs) vs {reg:.3} at lambda_reg 1e-2 ({n1} pairs)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Normalization, swap symmetry and CDF monotonicity of the Beta law.
fn beta_invariants() -> Result<(), String> {
    let shapes = [0.6, 1.0, 2.0, 5.0, 20.0];
    for &a in &shapes {
        for &b in &shapes {
            let p = BetaParams::new(a, b).unwrap();
            // Substitution y = t^k pushes the endpoint singularities of small shapes to zero.
            let k = 4.0;
            let pdf = |y: f64| betax::pdf(p, Maturity::new(y.clamp(EPS, 1.0 - EPS)).unwrap());
            let (t0, t1) = (EPS.powf(1.0 / k), 0.5f64.powf(1.0 / k));
            let lower = simpson(|t| pdf(t.powf(k)) * k * t.powf(k - 1.0), t0, t1, 4000);
            let upper = simpson(|t| pdf(1.0 - t.powf(k)) * k * t.powf(k - 1.0), t0, t1, 4000);
            let outside = betax::cdf(p, Maturity::new(EPS).unwrap()) + 1.0 - betax::cdf(p, Maturity::new(1.0 - EPS).unwrap());
            let total = lower + upper + outside;
            if (total - 1.0).abs() > 1e-5 {
                return Err(format!("normalization of Beta({a}, {b}) gives {total}"));
            }
            let mut prev = 0.0;
            for i in 1..1000 {
                let y = i as f64 / 1000.0;
                let lp = betax::log_pdf(p, Maturity::new(y).unwrap());
                let swapped = betax::log_pdf(p.swapped(), Maturity::new(1.0 - y).unwrap());
                if (lp - swapped).abs() > 1e-9 * lp.abs().max(1.0) {
                    return Err(format!("swap symmetry of Beta({a}, {b}) at {y}"));
                }
                let c = betax::cdf(p, Maturity::new(y).unwrap());
                if c < prev {
                    return Err(format!("cdf of Beta({a}, {b}) decreases at {y}"));
                }
                prev = c;
            }
        }
    }
    Ok(())
}

fn random_box(rng: &mut RngState) -> BoxCXCYWH {
    BoxCXCYWH::new(rng.uniform(), rng.uniform(), rng.uniform_range(0.02, 0.6), rng.uniform_range(0.02, 0.6)).unwrap()
}

fn giou_bounds() -> Result<(), String> {
    let mut rng = RngState::new(71);
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng).to_xyxy(), random_box(&mut rng).to_xyxy());
        let g = giou(&a, &b);
        if !(-1.0..=1.0).contains(&g) || (giou(&a, &a) - 1.0).abs() > 1e-12 || (g - giou(&b, &a)).abs() > 1e-15 {
            return Err(format!("giou {g} for {a:?} {b:?}"));
        }
    }
    Ok(())
}

fn ap_monotone_in_threshold() -> Result<(), String> {
    let mut rng = RngState::new(72);
    for _ in 0..50 {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..10 {
            let objects: Vec<GroundTruthObject> = (0..rng.int_range(1, 4))
                .map(|_| GroundTruthObject::from_stage(random_box(&mut rng), rng.int_range(0, 2) as u8).unwrap())
                .collect();
            let d: Vec<Detection> = objects
                .iter()
                .map(|o| {
                    let b = o.bbox;
                    let jitter = |v: f64, rng: &mut RngState| v * rng.uniform_range(0.7, 1.3);
                    Detection {
                        bbox: BoxCXCYWH::new(jitter(b.cx, &mut rng), jitter(b.cy, &mut rng), jitter(b.w, &mut rng), jitter(b.h, &mut rng))
                            .unwrap(),
                        p_obj: rng.uniform_range(0.01, 0.99),
                        maturity: BetaParams::new(2.0, 2.0).unwrap(),
                    }
                })
                .collect();
            dets.push(d);
            gts.push(objects);
        }
        let aps: Vec<f64> = evalkit::coco_thresholds().iter().map(|&t| evalkit::average_precision(&dets, &gts, t).unwrap()).collect();
        if aps.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            return Err(format!("AP not monotone in IoU threshold: {aps:?}"));
        }
    }
    Ok(())
}

fn determinism() -> Result<(), String> {
    let a = generate(9, 4).unwrap();
    if a != generate(9, 4).unwrap() {
        return Err("synthetic data differs between runs".into());
    }
    let config = RunConfig { model: ModelConfig { embed_dim: 16, heads: 2, num_queries: 8, ..ModelConfig::default() }, ..RunConfig::default() };
    let settings = TrainSettings { steps: 3, batch_size: 2, ..TrainSettings::default() };
    let trained = || {
        let mut m = Model::init(config.model, 4).unwrap();
        train(&mut m, &a, &settings, |_, _| {}).unwrap();
        Checkpoint::new(config.clone(), 3, &m).to_bytes()
    };
    let bytes = trained();
    if bytes != trained() {
        return Err("checkpoints of identical runs differ".into());
    }
    let reloaded = Checkpoint::from_bytes(&bytes, "memory").map_err(|e| e.to_string())?;
    if reloaded.to_bytes() != bytes {
        return Err("checkpoint save -> load -> save changed bytes".into());
    }
    let images: Vec<&Image> = a.iter().map(|s| &s.image).collect();
    let model = reloaded.model().map_err(|e| e.to_string())?;
    if model.predict(&images).unwrap() != model.predict(&images).unwrap() {
        return Err("inference is not repeatable".into());
    }
    Ok(())
}

fn single_batch_overfit() -> Result<(), String> {
    let scenes = generate(77, 8).unwrap();
    let batch: Vec<&Scene> = scenes.iter().collect();
    let mut model = Model::init(ModelConfig::default(), 77).unwrap();
    let mut adam = AdamState::new();
    let s = TrainSettings::default();
    let first = train_step(&mut model, &mut adam, &batch, &s).unwrap().total;
    let mut last = first;
    for _ in 2..=200 {
        last = train_step(&mut model, &mut adam, &batch, &s).unwrap().total;
    }
    if last < 0.2 * first {
        Ok(())
    } else {
        Err(format!("single-batch loss {first:.4} -> {last:.4} after 200 steps, needs < 20%"))
    }
}

#[test]
fn criterion_7_invariant_suites() {
    let suites: [(&str, fn() -> Result<(), String>); 6] = [
        ("beta normalization/swap symmetry/cdf monotonicity", beta_invariants),
        ("giou bounds", giou_bounds),
        ("ap monotone in iou threshold", ap_monotone_in_threshold),
        ("determinism and bit-identical checkpoints", determinism),
        ("single-batch overfit", single_batch_overfit),
        ("gradient check seed 1", || gradcheck(1, Fault::None).map_err(|e| e.to_string())?.passed().then_some(()).ok_or("gradcheck".into())),
    ];
    let failures: Vec<String> = suites
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect();
    let pass = failures.is_empty();
    let detail = if pass {
        format!("{} suites here; per-module property tests live in each crate's tests/", suites.len())
    } else {
        failures.join("; ")
    };
    report(7, pass, &detail);
    assert!(pass);
}
