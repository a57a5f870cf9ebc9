//! Closed-form Pareto-optimal debiasing.
//!
//! An embedding `e` is split against the attribute subspace into a parallel
//! part of norm `p` and an orthogonal part of norm `o` (`p² + o² = 1`). The
//! debiased vector is searched on the arc
//!
//! ```text
//!   u(α) = α·ê∥ + √(1-α²)·ê⊥,   0 ≤ α ≤ p
//! ```
//!
//! where leakage `L(α) = α` grows and self-utility loss
//! `V(α) = 1 - α·p - √(1-α²)·o` shrinks monotonically. Normalizing both to
//! `[0, 1]` and minimizing their maximum gives the unique crossing
//!
//! ```text
//!   α* = (E - o·√(E² - p²)) / (E² + o²),   E = p + (1 - o)/p
//! ```
//!
//! which is evaluated here in the equivalent conjugate form
//! `α* = p² / (E + o·√(E² - p²))` with `E² - p² = (1-o)·((1-o)/p² + 2)`,
//! avoiding both cancellations of the textbook expression.
//!
//! [`oracle_alpha`] solves the same minimax problem numerically (dense grid
//! then bisection) without using the closed form; the two must agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_unit, AttributeSubspace, Decomposition};
use crate::linalg::{dot, scale};

/// Component norms at or below this take the degenerate (no-op) path.
pub const DEFAULT_EPS_DEG: f64 = 1e-6;

/// Allowed deviation of `p² + o²` from one.
const PYTHAGORAS_TOLERANCE: f64 = 1e-6;

/// Tiny negative radicands down to this value are clamped to zero.
const RADICAND_FLOOR: f64 = -1e-12;

const ORACLE_TOLERANCE: f64 = 1e-12;
pub const MIN_ORACLE_GRID: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    None,
    /// No attribute component: the embedding is already neutral.
    FairAlready,
    /// No content component: the embedding is purely attribute.
    PureAttribute,
}

/// Outcome of debiasing one embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasResult {
    pub u_star: Vec<f64>,
    pub alpha_star: f64,
    pub norm_parallel: f64,
    pub norm_orthogonal: f64,
    pub leakage: f64,
    pub self_utility_loss: f64,
    pub degenerate: Degeneracy,
    /// Per-modality term of the cross-utility bound, `√(2·(1-o)·α*/p)`.
    pub cross_bound_term: f64,
}

/// A point on the leakage / self-utility trade-off curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub alpha: f64,
    pub leakage: f64,
    pub self_utility_loss: f64,
    pub normalized_leakage: f64,
    pub normalized_loss: f64,
}

/// `1 - o` for a unit vector, as `p²/(1+o)` so it keeps full relative
/// precision when `p` is small.
pub fn orthogonal_deficit(norm_parallel: f64, norm_orthogonal: f64) -> f64 {
    norm_parallel * norm_parallel / (1.0 + norm_orthogonal)
}

/// `V(α) = 1 - α·p - √(1-α²)·o`, evaluated as `½‖u - e‖²` on the unit
/// circle `p² + o² = 1` to avoid cancellation near `α = p`.
pub fn self_utility_loss(alpha: f64, norm_parallel: f64, norm_orthogonal: f64) -> f64 {
    let p = norm_parallel;
    let beta = (1.0 - alpha * alpha).max(0.0).sqrt();
    // β - o = (p² - α²)/(β + o) when p² + o² = 1
    let db = (p - alpha) * (p + alpha) / (beta + norm_orthogonal);
    0.5 * ((alpha - p) * (alpha - p) + db * db)
}

pub fn pareto_point(alpha: f64, norm_parallel: f64, norm_orthogonal: f64) -> ParetoPoint {
    let loss = self_utility_loss(alpha, norm_parallel, norm_orthogonal);
    ParetoPoint {
        alpha,
        leakage: alpha,
        self_utility_loss: loss,
        normalized_leakage: alpha / norm_parallel,
        normalized_loss: loss / orthogonal_deficit(norm_parallel, norm_orthogonal),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremeMode {
    /// `α = 0`: drop the attribute component entirely.
    FullProjection,
    /// `α = p`: leave the embedding unchanged.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Solver {
    pub eps_deg: f64,
}

impl Default for Solver {
    fn default() -> Self {
        Solver {
            eps_deg: DEFAULT_EPS_DEG,
        }
    }
}

impl Solver {
    pub fn new(eps_deg: f64) -> Result<Self> {
        if !(eps_deg > 0.0 && eps_deg < 0.5) {
            return Err(Error::InvalidArgument(format!(
                "eps_deg {eps_deg} outside (0, 0.5)"
            )));
        }
        Ok(Solver { eps_deg })
    }

    fn check_domain(&self, p: f64, o: f64) -> Result<()> {
        if !(p.is_finite() && o.is_finite()) {
            return Err(Error::DegenerateInput(format!("non-finite norms ({p}, {o})")));
        }
        if p <= self.eps_deg || o <= self.eps_deg {
            return Err(Error::DegenerateInput(format!(
                "component norms ({p}, {o}) at or below eps_deg {}",
                self.eps_deg
            )));
        }
        if (p * p + o * o - 1.0).abs() > PYTHAGORAS_TOLERANCE {
            return Err(Error::DegenerateInput(format!(
                "p² + o² = {} is not 1",
                p * p + o * o
            )));
        }
        Ok(())
    }

    pub fn closed_form_alpha(&self, norm_parallel: f64, norm_orthogonal: f64) -> Result<f64> {
        self.check_domain(norm_parallel, norm_orthogonal)?;
        let p = norm_parallel;
        let o = norm_orthogonal;
        let gap = orthogonal_deficit(p, o);
        let e = p + gap / p;
        let mut radicand = gap * (gap / (p * p) + 2.0);
        if radicand < 0.0 {
            if radicand < RADICAND_FLOOR {
                return Err(Error::DegenerateInput(format!(
                    "negative radicand {radicand}"
                )));
            }
            radicand = 0.0;
        }
        Ok(p * p / (e + o * radicand.sqrt()))
    }

    /// Minimizes `max(L̃, Ṽ)` by a dense grid over `[0, p]` followed by
    /// bisection on `L̃ - Ṽ`.
    pub fn oracle_alpha(
        &self,
        norm_parallel: f64,
        norm_orthogonal: f64,
        grid_points: usize,
    ) -> Result<f64> {
        self.check_domain(norm_parallel, norm_orthogonal)?;
        if grid_points < MIN_ORACLE_GRID {
            return Err(Error::InvalidArgument(format!(
                "oracle grid needs at least {MIN_ORACLE_GRID} points, got {grid_points}"
            )));
        }
        let p = norm_parallel;
        let o = norm_orthogonal;
        let at = |i: usize| p * i as f64 / grid_points as f64;
        let worst = |a: f64| {
            let pt = pareto_point(a, p, o);
            pt.normalized_leakage.max(pt.normalized_loss)
        };
        let gap = |a: f64| {
            let pt = pareto_point(a, p, o);
            pt.normalized_leakage - pt.normalized_loss
        };

        let mut best = 0;
        let mut best_val = f64::INFINITY;
        for i in 0..=grid_points {
            let v = worst(at(i));
            if v < best_val {
                best_val = v;
                best = i;
            }
        }
        let mut lo = at(best.saturating_sub(1));
        let mut hi = at((best + 1).min(grid_points));
        if gap(lo) > 0.0 || gap(hi) < 0.0 {
            lo = 0.0;
            hi = p;
        }
        while hi - lo > ORACLE_TOLERANCE {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if gap(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    fn unchanged(&self, e: &[f64], d: &Decomposition, degenerate: Degeneracy) -> DebiasResult {
        DebiasResult {
            u_star: e.to_vec(),
            alpha_star: d.norm_parallel,
            norm_parallel: d.norm_parallel,
            norm_orthogonal: d.norm_orthogonal,
            leakage: d.norm_parallel,
            self_utility_loss: 0.0,
            degenerate,
            cross_bound_term: 0.0,
        }
    }

    /// Pareto-optimal debiasing of a unit embedding.
    ///
    /// Inputs with a vanishing parallel or orthogonal component are returned
    /// unchanged and flagged.
    pub fn debias(&self, e: &[f64], subspace: &AttributeSubspace) -> Result<DebiasResult> {
        let d = subspace.decompose(e)?;
        check_unit(e)?;
        if d.norm_parallel <= self.eps_deg {
            return Ok(self.unchanged(e, &d, Degeneracy::FairAlready));
        }
        if d.norm_orthogonal <= self.eps_deg {
            return Ok(self.unchanged(e, &d, Degeneracy::PureAttribute));
        }
        let p = d.norm_parallel;
        let o = d.norm_orthogonal;
        let alpha = self.closed_form_alpha(p, o)?;
        let beta = (1.0 - alpha * alpha).sqrt();
        let u_star: Vec<f64> = d
            .parallel
            .iter()
            .zip(&d.orthogonal)
            .map(|(par, orth)| alpha * par / p + beta * orth / o)
            .collect();
        let loss = orthogonal_deficit(p, o) * alpha / p;
        Ok(DebiasResult {
            u_star,
            alpha_star: alpha,
            norm_parallel: p,
            norm_orthogonal: o,
            leakage: alpha,
            self_utility_loss: loss,
            degenerate: Degeneracy::None,
            cross_bound_term: (2.0 * loss).sqrt(),
        })
    }

    /// The two endpoints of the trade-off curve, used as baselines.
    pub fn debias_extreme(
        &self,
        e: &[f64],
        subspace: &AttributeSubspace,
        mode: ExtremeMode,
    ) -> Result<DebiasResult> {
        let d = subspace.decompose(e)?;
        check_unit(e)?;
        match mode {
            ExtremeMode::Identity => Ok(self.unchanged(e, &d, Degeneracy::None)),
            ExtremeMode::FullProjection => {
                if d.norm_orthogonal <= self.eps_deg {
                    return Err(Error::DegenerateInput(format!(
                        "orthogonal component norm {} too small to project onto",
                        d.norm_orthogonal
                    )));
                }
                let loss = orthogonal_deficit(d.norm_parallel, d.norm_orthogonal);
                Ok(DebiasResult {
                    u_star: scale(&d.orthogonal, 1.0 / d.norm_orthogonal),
                    alpha_star: 0.0,
                    norm_parallel: d.norm_parallel,
                    norm_orthogonal: d.norm_orthogonal,
                    leakage: 0.0,
                    self_utility_loss: loss,
                    degenerate: Degeneracy::None,
                    cross_bound_term: (2.0 * loss).sqrt(),
                })
            }
        }
    }
}

pub fn closed_form_alpha(norm_parallel: f64, norm_orthogonal: f64) -> Result<f64> {
    Solver::default().closed_form_alpha(norm_parallel, norm_orthogonal)
}

pub fn oracle_alpha(norm_parallel: f64, norm_orthogonal: f64, grid_points: usize) -> Result<f64> {
    Solver::default().oracle_alpha(norm_parallel, norm_orthogonal, grid_points)
}

/// Worst disagreement between [`closed_form_alpha`] and [`oracle_alpha`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub trials: usize,
    pub max_alpha_deviation: f64,
    /// Largest `|L̃(α*) - Ṽ(α*)|` at the closed-form solution.
    pub max_equalization_gap: f64,
}

/// Draws `(p, o) = (cos θ, sin θ)` with `θ` uniform on `(0, π/2)`, resampling
/// degenerate pairs, and compares both solvers on each.
pub fn oracle_check(trials: usize, seed: u64, grid_points: usize) -> Result<OracleReport> {
    use rand::{Rng, SeedableRng};

    let solver = Solver::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = OracleReport {
        trials,
        max_alpha_deviation: 0.0,
        max_equalization_gap: 0.0,
    };
    let mut done = 0;
    while done < trials {
        let theta = rng.random::<f64>() * std::f64::consts::FRAC_PI_2;
        let (o, p) = theta.sin_cos();
        if p <= solver.eps_deg || o <= solver.eps_deg {
            continue;
        }
        let alpha = solver.closed_form_alpha(p, o)?;
        let oracle = solver.oracle_alpha(p, o, grid_points)?;
        let pt = pareto_point(alpha, p, o);
        report.max_alpha_deviation = report.max_alpha_deviation.max((alpha - oracle).abs());
        report.max_equalization_gap = report
            .max_equalization_gap
            .max((pt.normalized_leakage - pt.normalized_loss).abs());
        done += 1;
    }
    Ok(report)
}

/// Upper bound on `|⟨u_I,u_T⟩ - ⟨e_I,e_T⟩|` for a debiased image/text pair.
pub fn cross_utility_bound(image: &DebiasResult, text: &DebiasResult) -> f64 {
    image.cross_bound_term + text.cross_bound_term
}

/// The bound obtained when both sides are fully projected,
/// `√(2(1-o_I)) + √(2(1-o_T))`. Never smaller than [`cross_utility_bound`].
pub fn projection_cross_bound(image: &DebiasResult, text: &DebiasResult) -> f64 {
    let term = |r: &DebiasResult| match r.degenerate {
        Degeneracy::None => (2.0 * orthogonal_deficit(r.norm_parallel, r.norm_orthogonal)).sqrt(),
        _ => 0.0,
    };
    term(image) + term(text)
}

/// `|⟨u_I,u_T⟩ - ⟨e_I,e_T⟩|`
pub fn cross_utility_loss(u_image: &[f64], u_text: &[f64], e_image: &[f64], e_text: &[f64]) -> f64 {
    (dot(u_image, u_text) - dot(e_image, e_text)).abs()
}

/// `√(2ℓ_I) + √(2ℓ_T)` with `ℓ = 1 - ⟨u, e⟩` measured directly.
pub fn self_loss_cross_bound(
    u_image: &[f64],
    u_text: &[f64],
    e_image: &[f64],
    e_text: &[f64],
) -> f64 {
    let term = |u: &[f64], e: &[f64]| (2.0 * (1.0 - dot(u, e))).max(0.0).sqrt();
    term(u_image, e_image) + term(u_text, e_text)
}
