//! Independent references and helpers for the acceptance suite.
//!
//! Nothing here calls the library's solver or subspace code; the suite
//! compares the library against these.

use pareto_debias::vector::{dot, norm};
use pareto_debias::GroupPrototype;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// α* at (p, o) = (0.6, 0.8), from a 40-digit bisection of L̃(α) = Ṽ(α).
pub const WORKED_ALPHA: f64 = 0.239_159_813_125_990_3;

/// α* at p = o = 1/√2, same provenance as [`WORKED_ALPHA`].
pub const DIAGONAL_ALPHA: f64 = 0.287_904_022_521_788_6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, d);
        let n = norm(&v);
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// `normalize(e + step·noise)`, a unit vector near `e`.
pub fn nearby(rng: &mut ChaCha8Rng, e: &[f64], step: f64) -> Vec<f64> {
    let noise = unit(rng, e.len());
    let v: Vec<f64> = e.iter().zip(&noise).map(|(a, b)| a + step * b).collect();
    let n = norm(&v);
    v.iter().map(|x| x / n).collect()
}

pub fn prototypes(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<GroupPrototype> {
    (0..n)
        .map(|g| GroupPrototype::new(format!("g{g}"), unit(rng, d)).unwrap())
        .collect()
}

/// `V(α) = 1 - α·p - √(1-α²)·o`.
pub fn self_loss(alpha: f64, p: f64, o: f64) -> f64 {
    1.0 - alpha * p - (1.0 - alpha * alpha).sqrt() * o
}

/// Minimizes `max(α/p, V(α)/(1-o))` over `[0, p]` by golden-section search.
/// The objective is unimodal: one term increases, the other decreases.
pub fn golden_section_alpha(p: f64, o: f64) -> f64 {
    let f = |a: f64| (a / p).max(self_loss(a, p, o) / (1.0 - o));
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, p);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-15 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2);
        }
        if x1 >= x2 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Orthogonal projector onto span{p_g - p_ref} by modified Gram-Schmidt.
pub struct GramSchmidt {
    basis: Vec<Vec<f64>>,
}

impl GramSchmidt {
    pub fn new(prototypes: &[GroupPrototype], reference: usize) -> Self {
        let r = &prototypes[reference].vector;
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for (i, p) in prototypes.iter().enumerate() {
            if i == reference {
                continue;
            }
            let mut v: Vec<f64> = p.vector.iter().zip(r).map(|(a, b)| a - b).collect();
            for _ in 0..2 {
                for b in &basis {
                    let c = dot(&v, b);
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
                }
            }
            let n = norm(&v);
            if n > 1e-9 {
                basis.push(v.iter().map(|x| x / n).collect());
            }
        }
        GramSchmidt { basis }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for b in &self.basis {
            let c = dot(v, b);
            out.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        out
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_section_matches_frozen_values() {
        assert!((golden_section_alpha(0.6, 0.8) - WORKED_ALPHA).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((golden_section_alpha(h, h) - DIAGONAL_ALPHA).abs() < 1e-12);
    }
}
