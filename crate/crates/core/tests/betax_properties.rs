use betadet_core::betax::{self, BetaParams, Maturity, EPS};
use betadet_core::rng::RngState;
use proptest::prelude::*;

fn bp(a: f64, b: f64) -> BetaParams {
    BetaParams::new(a, b).unwrap()
}

fn m(y: f64) -> Maturity {
    Maturity::new(y).unwrap()
}

struct OracleRow {
    alpha: f64,
    beta: f64,
    y: f64,
    log_pdf: f64,
    cdf: f64,
    mean: f64,
    variance: f64,
}

fn oracle_rows() -> Vec<OracleRow> {
    include_str!("fixtures/beta_oracle.txt")
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
            OracleRow {
                alpha: v[0],
                beta: v[1],
                y: v[2],
                log_pdf: v[3],
                cdf: v[4],
                mean: v[5],
                variance: v[6],
            }
        })
        .collect()
}

fn close(got: f64, want: f64, tol: f64) -> bool {
    (got - want).abs() <= tol * want.abs().max(1.0)
}

#[test]
fn grid_matches_high_precision_oracle() {
    let rows = oracle_rows();
    assert_eq!(rows.len(), 7 * 7 * 99);
    for r in &rows {
        let p = bp(r.alpha, r.beta);
        let y = m(r.y);
        assert!(close(betax::log_pdf(p, y), r.log_pdf, 1e-10), "log_pdf ({}, {}, {})", r.alpha, r.beta, r.y);
        assert!((betax::cdf(p, y) - r.cdf).abs() <= 1e-10, "cdf ({}, {}, {})", r.alpha, r.beta, r.y);
        assert!(close(betax::mean(p).value(), r.mean, 1e-14));
        assert!(close(betax::variance(p), r.variance, 1e-13));
    }
}

#[test]
fn special_functions_match_oracle() {
    for line in include_str!("fixtures/special_oracle.txt").lines().skip(1) {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
        let (x, lg, dg) = (v[0], v[1], v[2]);
        let got = betax::lgamma(x).unwrap();
        assert!((got - lg).abs() <= 1e-12 * lg.abs().max(1.0), "lgamma({x}) = {got}, want {lg}");
        let got = betax::digamma(x).unwrap();
        assert!((got - dg).abs() <= 1e-10, "digamma({x}) = {got}, want {dg}");
    }
}

const SHAPES: [f64; 5] = [0.6, 1.0, 2.0, 5.0, 20.0];

#[test]
fn density_integrates_to_one() {
    let nodes = 20_001;
    let (lo, hi) = (EPS, 1.0 - EPS);
    let h = (hi - lo) / (nodes - 1) as f64;
    for &a in &SHAPES {
        for &b in &SHAPES {
            let p = bp(a, b);
            let mut acc = 0.0;
            for i in 0..nodes {
                let w = if i == 0 || i == nodes - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += w * betax::pdf(p, m(lo + i as f64 * h));
            }
            let integral = acc * h / 3.0;
            // Mass the window [EPS, 1 − EPS] cannot see: ~EPS^0.6 for shape 0.6,
            // ~20·EPS for Beta(1, 20).
            let outside = betax::cdf(p, m(lo)) + 1.0 - betax::cdf(p, m(hi));
            if a >= 1.0 && b >= 1.0 {
                assert!((integral + outside - 1.0).abs() < 1e-5, "({a},{b}) integral {integral}");
                if outside < 1e-6 {
                    assert!((integral - 1.0).abs() < 1e-5, "({a},{b}) integral {integral}");
                }
            } else {
                // Singular integrand at the window edge; Simpson is only coarse here.
                assert!(outside > 1e-5, "({a},{b}) outside mass {outside}");
                assert!((integral + outside - 1.0).abs() < 1e-2, "({a},{b}) integral {integral}");
            }
        }
    }
}

#[test]
fn quantile_inverts_cdf_on_grid() {
    for &a in &[0.5, 0.6, 1.0, 2.0, 5.0, 20.0, 100.0] {
        for &b in &[0.5, 0.6, 1.0, 2.0, 5.0, 20.0, 100.0] {
            let p = bp(a, b);
            for k in 1..100 {
                let y = k as f64 / 100.0;
                let c = betax::cdf(p, m(y));
                // Near 1 the level itself is quantized to 1.1e-16, which moves y by
                // more than 1e-7 wherever the upper tail is thinner than ~1e-6.
                if c <= 0.0 || c >= 1.0 - 1e-6 {
                    continue;
                }
                let back = betax::quantile(p, c).unwrap().value();
                assert!((back - y).abs() < 1e-7, "({a},{b}) y={y} back={back}");
            }
        }
    }
}

#[test]
fn nll_grad_matches_finite_differences() {
    let mut rng = RngState::new(2024);
    for _ in 0..1000 {
        let a = rng.uniform_range(0.6, 50.0);
        let b = rng.uniform_range(0.6, 50.0);
        let y = rng.uniform_range(0.01, 0.99);
        let (ga, gb) = betax::nll_grad(bp(a, b), m(y));
        let h = 1e-6;
        let f = |a: f64, b: f64| -betax::log_pdf(bp(a, b), m(y));
        let fa = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
        let fb = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
        // Relative error with a unit floor: the FD roundoff is absolute (~1e-10 · |f| / h).
        assert!((ga - fa).abs() <= 1e-6 * ga.abs().max(1.0), "∂α at ({a},{b},{y}): {ga} vs {fa}");
        assert!((gb - fb).abs() <= 1e-6 * gb.abs().max(1.0), "∂β at ({a},{b},{y}): {gb} vs {fb}");
    }
}

proptest! {
    #[test]
    fn swap_symmetry(a in 0.5f64..100.0, b in 0.5f64..100.0, y in 0.0f64..=1.0) {
        let lhs = betax::log_pdf(bp(a, b), m(y));
        let rhs = betax::log_pdf(bp(b, a), m(1.0 - y));
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn mean_times_concentration(a in 0.5f64..1e4, b in 0.5f64..1e4) {
        let p = bp(a, b);
        prop_assert!((betax::mean(p).value() * (a + b) - a).abs() <= 1e-14 * a.max(1.0));
    }

    #[test]
    fn cdf_monotone(a in 0.5f64..100.0, b in 0.5f64..100.0, y1 in 0.0f64..=1.0, y2 in 0.0f64..=1.0) {
        let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        let p = bp(a, b);
        prop_assert!(betax::cdf(p, m(lo)) <= betax::cdf(p, m(hi)));
    }
}
