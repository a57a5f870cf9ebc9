#![allow(dead_code)]

use pareto_debias::vector::{dot, norm};
use pareto_debias::{build_subspace, AttributeSubspace, GroupPrototype};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

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

pub fn random_prototypes(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<GroupPrototype> {
    (0..n)
        .map(|g| GroupPrototype::new(format!("g{g}"), unit(rng, d)).unwrap())
        .collect()
}

pub fn random_subspace(rng: &mut ChaCha8Rng, d: usize, n: usize) -> AttributeSubspace {
    build_subspace(&random_prototypes(rng, d, n), "g0", 1e-10).unwrap()
}

/// Projector onto span{p_g - p_0} by modified Gram-Schmidt, independent of
/// the SVD used by the library.
pub fn gram_schmidt_projector(prototypes: &[GroupPrototype]) -> impl Fn(&[f64]) -> Vec<f64> {
    let reference = &prototypes[0].vector;
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in &prototypes[1..] {
        let mut v: Vec<f64> = p.vector.iter().zip(reference).map(|(a, b)| a - b).collect();
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
    move |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for b in &basis {
            let c = dot(v, b);
            out.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
        out
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Unit vector with prescribed component norms against `s`.
pub fn with_components(rng: &mut ChaCha8Rng, s: &AttributeSubspace, p: f64, o: f64) -> Vec<f64> {
    loop {
        let v = gaussian(rng, s.dim());
        let d = s.decompose(&v).unwrap();
        if d.norm_parallel < 1e-3 || d.norm_orthogonal < 1e-3 {
            continue;
        }
        return d
            .parallel
            .iter()
            .zip(&d.orthogonal)
            .map(|(a, b)| p * a / d.norm_parallel + o * b / d.norm_orthogonal)
            .collect();
    }
}
