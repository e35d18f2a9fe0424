//! Beta-distribution mathematics for the maturity head.
//!
//! `ln Γ` uses the Lanczos approximation with `g = 7` and the nine
//! coefficients in [`LANCZOS`]; arguments below 0.5 go through the reflection
//! formula. `ψ` lifts its argument to `x ≥ 6` with `ψ(x) = ψ(x + 1) − 1/x`
//! and then applies the asymptotic series through `x⁻¹²`. The CDF is the
//! regularized incomplete beta function evaluated by the continued fraction
//! with modified Lentz iteration, switching to `1 − I_{1−y}(β, α)` when
//! `y > (α + 1)/(α + β + 2)`.

use crate::error::{Error, Result};
use crate::rng::RngState;

/// Targets and evaluation points are clamped to `[EPS, 1 − EPS]` before any
/// log-density is taken.
pub const EPS: f64 = 1e-6;

/// Lower bound on both shape parameters, matching the head's `softplus + 0.5`.
pub const SHAPE_FLOOR: f64 = 0.5;

const LANCZOS_G: f64 = 7.0;
pub const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const CF_TOL: f64 = 1e-12;
const CF_MAX_ITER: usize = 10_000;
const CF_TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Domain(format!("non-finite Beta shape ({alpha}, {beta})")));
        }
        if alpha < SHAPE_FLOOR || beta < SHAPE_FLOOR {
            return Err(Error::Domain(format!(
                "Beta shape ({alpha}, {beta}) below the {SHAPE_FLOOR} floor"
            )));
        }
        Ok(BetaParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Concentration `α + β`.
    pub fn concentration(&self) -> f64 {
        self.alpha + self.beta
    }

    pub fn swapped(&self) -> Self {
        BetaParams { alpha: self.beta, beta: self.alpha }
    }
}

/// Normalized ripeness in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Maturity(f64);

impl Maturity {
    pub fn new(y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("maturity {y} outside [0, 1]")));
        }
        Ok(Maturity(y))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The value pulled into `[EPS, 1 − EPS]`.
    pub fn clamped(self) -> f64 {
        clamp_target(self.0)
    }
}

pub fn clamp_target(y: f64) -> f64 {
    y.clamp(EPS, 1.0 - EPS)
}

/// `ln Γ(x)` for finite `x > 0`.
pub fn lgamma(x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Domain(format!("lgamma requires finite x > 0, got {x}")));
    }
    Ok(ln_gamma(x))
}

pub(crate) fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection; sin(πx) > 0 on (0, 0.5).
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ψ(x) = d/dx ln Γ(x)` for finite `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x.is_finite() && x > 0.0) {
        return Err(Error::Domain(format!("digamma requires finite x > 0, got {x}")));
    }
    Ok(psi(x))
}

pub(crate) fn psi(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < 6.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    // Bernoulli terms B_2k / (2k) for k = 1..=6, Horner in x⁻².
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32_760.0))))));
    shift + x.ln() - 0.5 / x - series
}

/// `ln B(α, β)`.
pub fn log_beta_fn(p: BetaParams) -> f64 {
    ln_gamma(p.alpha) + ln_gamma(p.beta) - ln_gamma(p.alpha + p.beta)
}

/// Log-density at `y`, after clamping `y` into `[EPS, 1 − EPS]`.
pub fn log_pdf(p: BetaParams, y: Maturity) -> f64 {
    log_pdf_raw(p.alpha, p.beta, y.clamped())
}

pub(crate) fn log_pdf_raw(alpha: f64, beta: f64, y: f64) -> f64 {
    (alpha - 1.0) * y.ln() + (beta - 1.0) * (1.0 - y).ln()
        - (ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta))
}

pub fn pdf(p: BetaParams, y: Maturity) -> f64 {
    log_pdf(p, y).exp()
}

pub fn mean(p: BetaParams) -> Maturity {
    Maturity(p.alpha / (p.alpha + p.beta))
}

pub fn variance(p: BetaParams) -> f64 {
    let s = p.alpha + p.beta;
    p.alpha * p.beta / (s * s * (s + 1.0))
}

/// Regularized incomplete beta `I_y(α, β)`.
pub fn cdf(p: BetaParams, y: Maturity) -> f64 {
    incomplete_beta(p.alpha, p.beta, y.0)
}

pub(crate) fn incomplete_beta(a: f64, b: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    if y >= 1.0 {
        return 1.0;
    }
    let ln_front = a * y.ln() + b * (1.0 - y).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    let front = ln_front.exp();
    let value = if y < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, y) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - y) / b
    };
    value.clamp(0.0, 1.0)
}

fn beta_continued_fraction(a: f64, b: f64, y: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * y / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * y / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * y / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_TOL {
            break;
        }
    }
    h
}

/// Inverse CDF on `(0, 1)`, by safeguarded Newton steps inside a shrinking
/// bracket on `[0, 1]`.
pub fn quantile(p: BetaParams, q: f64) -> Result<Maturity> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!("quantile level {q} outside (0, 1)")));
    }
    let (a, b) = (p.alpha, p.beta);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    let mut y = a / (a + b);
    let mut last_width = 1.0_f64;
    for _ in 0..1000 {
        let f = incomplete_beta(a, b, y) - q;
        if f == 0.0 {
            return Ok(Maturity(y));
        }
        if f < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        let width = hi - lo;
        if width <= 1e-15 * hi.max(1e-300) {
            break;
        }
        let density = log_pdf_raw(a, b, y).exp();
        let newton = y - f / density;
        // Newton creeps through thin tails; fall back to bisection whenever
        // the bracket failed to halve since the previous step.
        let newton_ok = density > 0.0 && newton.is_finite() && newton > lo && newton < hi;
        let next = if newton_ok && width <= 0.5 * last_width { newton } else { 0.5 * (lo + hi) };
        last_width = width;
        if (next - y).abs() <= 1e-16 * y.max(1e-300) {
            break;
        }
        y = next;
    }
    Ok(Maturity(y))
}

/// Inverse-CDF draw: `quantile(p, u)` with `u` the next uniform of `rng`.
pub fn sample(p: BetaParams, rng: &mut RngState) -> Maturity {
    let u = rng.uniform();
    quantile(p, u).expect("uniform draws lie in (0, 1)")
}

/// Partial derivatives `(∂/∂α, ∂/∂β)` of `−log_pdf(p, y)` at the clamped `y`.
pub fn nll_grad(p: BetaParams, y: Maturity) -> (f64, f64) {
    nll_grad_raw(p.alpha, p.beta, y.clamped())
}

pub(crate) fn nll_grad_raw(alpha: f64, beta: f64, y: f64) -> (f64, f64) {
    let common = psi(alpha + beta);
    (-y.ln() + psi(alpha) - common, -(1.0 - y).ln() + psi(beta) - common)
}
