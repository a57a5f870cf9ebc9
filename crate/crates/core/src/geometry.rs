//! Attribute subspace construction and orthogonal decomposition.
//!
//! The attribute subspace is the span of the differences between group
//! prototypes and a reference prototype. Its orthonormal basis comes from a
//! thin SVD of the difference matrix, so near-collinear prototypes are handled
//! by dropping directions whose singular value falls below a relative
//! tolerance instead of inverting an ill-conditioned Gram matrix.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scale, sub};

/// Tolerance on `‖v‖ - 1` for accepting a vector as unit norm.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Vectors whose norm is within this distance of one are kept bit-for-bit on
/// ingestion; anything further away is rescaled.
const RENORMALIZE_SLACK: f64 = 1e-12;

/// Pre-normalization norms below this are rejected as zero vectors.
pub const MIN_INPUT_NORM: f64 = 1e-12;

/// Default relative cut-off on singular values when building a subspace.
pub const DEFAULT_RANK_TOLERANCE: f64 = 1e-10;

/// Prototype differences whose largest singular value is below this are
/// treated as identically zero.
const ABSOLUTE_RANK_FLOOR: f64 = 1e-12;

/// Tolerance for the orthonormality check on externally supplied bases.
const ORTHONORMAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl Labels {
    pub fn new(class: Option<&str>, group: Option<&str>) -> Self {
        Labels {
            class: class.map(str::to_owned),
            group: group.map(str::to_owned),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.class.is_none() && self.group.is_none()
    }
}

/// A unit-norm embedding vector with its identifier and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub id: String,
    pub vector: Vec<f64>,
    pub modality: Modality,
    pub labels: Option<Labels>,
}

impl Embedding {
    /// Builds an embedding, rescaling `vector` to unit norm.
    pub fn new(id: impl Into<String>, vector: Vec<f64>, modality: Modality) -> Result<Self> {
        let id = id.into();
        let vector = unit_normalize(vector).ok_or_else(|| Error::ZeroVector(id.clone()))?;
        if vector.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding `{id}` has dimension {} < 2",
                vector.len()
            )));
        }
        Ok(Embedding {
            id,
            vector,
            modality,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Labels) -> Self {
        self.labels = if labels.is_empty() { None } else { Some(labels) };
        self
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn class(&self) -> Option<&str> {
        self.labels.as_ref().and_then(|l| l.class.as_deref())
    }

    pub fn group(&self) -> Option<&str> {
        self.labels.as_ref().and_then(|l| l.group.as_deref())
    }
}

/// Rescales to unit norm. Vectors already unit within `RENORMALIZE_SLACK` are
/// returned untouched so that re-ingesting normalized data is bit-stable.
pub fn unit_normalize(vector: Vec<f64>) -> Option<Vec<f64>> {
    let n = norm(&vector);
    if !n.is_finite() || n < MIN_INPUT_NORM {
        return None;
    }
    if (n - 1.0).abs() <= RENORMALIZE_SLACK {
        Some(vector)
    } else {
        Some(scale(&vector, 1.0 / n))
    }
}

pub(crate) fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
        return Err(Error::NonUnitInput { norm: n });
    }
    Ok(())
}

/// Unit-norm embedding representing one sensitive group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPrototype {
    pub group: String,
    pub vector: Vec<f64>,
}

impl GroupPrototype {
    pub fn new(group: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let group = group.into();
        let vector = unit_normalize(vector).ok_or_else(|| Error::ZeroVector(group.clone()))?;
        Ok(GroupPrototype { group, vector })
    }
}

/// An embedding split against an attribute subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub parallel: Vec<f64>,
    pub orthogonal: Vec<f64>,
    pub norm_parallel: f64,
    pub norm_orthogonal: f64,
}

/// Orthonormal basis of the span of prototype differences.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeSubspace {
    basis: Vec<Vec<f64>>,
    dim: usize,
    source_groups: Vec<String>,
    reference_group: String,
}

impl AttributeSubspace {
    /// Wraps an externally supplied basis (columns), checking orthonormality.
    pub fn from_basis(
        basis: Vec<Vec<f64>>,
        dim: usize,
        source_groups: Vec<String>,
        reference_group: String,
    ) -> Result<Self> {
        if basis.is_empty() {
            return Err(Error::DegenerateSubspace);
        }
        for col in &basis {
            if col.len() != dim {
                return Err(Error::dim(dim, col.len()));
            }
        }
        if basis.len() > dim {
            return Err(Error::InvalidArgument(format!(
                "rank {} exceeds dimension {dim}",
                basis.len()
            )));
        }
        if !source_groups.is_empty() {
            if basis.len() + 1 > source_groups.len() {
                return Err(Error::InvalidArgument(format!(
                    "rank {} exceeds n - 1 = {}",
                    basis.len(),
                    source_groups.len() - 1
                )));
            }
            if !source_groups.contains(&reference_group) {
                return Err(Error::UnknownReference(reference_group));
            }
        }
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate().skip(i) {
                let target = if i == j { 1.0 } else { 0.0 };
                let g = dot(a, b);
                if (g - target).abs() > ORTHONORMAL_TOLERANCE {
                    return Err(Error::InvariantViolation(format!(
                        "basis is not orthonormal: <b{i}, b{j}> = {g}"
                    )));
                }
            }
        }
        Ok(AttributeSubspace {
            basis,
            dim,
            source_groups,
            reference_group,
        })
    }

    /// Basis columns, ordered by decreasing singular value.
    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn source_groups(&self) -> &[String] {
        &self.source_groups
    }

    pub fn reference_group(&self) -> &str {
        &self.reference_group
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::dim(self.dim, v.len()));
        }
        Ok(())
    }

    fn parallel_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for col in &self.basis {
            axpy(&mut out, dot(col, v), col);
        }
        out
    }

    /// Component of `v` inside the subspace (the attribute leakage).
    pub fn project_parallel(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        Ok(self.parallel_unchecked(v))
    }

    /// Component of `v` orthogonal to the subspace.
    pub fn project_orthogonal(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(v)?;
        Ok(sub(v, &self.parallel_unchecked(v)))
    }

    pub fn decompose(&self, v: &[f64]) -> Result<Decomposition> {
        self.check_dim(v)?;
        let parallel = self.parallel_unchecked(v);
        let orthogonal = sub(v, &parallel);
        let norm_parallel = norm(&parallel);
        let norm_orthogonal = norm(&orthogonal);
        Ok(Decomposition {
            parallel,
            orthogonal,
            norm_parallel,
            norm_orthogonal,
        })
    }
}

/// Builds the attribute subspace spanned by `p_g - p_reference` over all
/// prototypes.
///
/// Directions whose singular value is at most `rank_tolerance` times the
/// largest one are discarded.
pub fn build_subspace(
    prototypes: &[GroupPrototype],
    reference: &str,
    rank_tolerance: f64,
) -> Result<AttributeSubspace> {
    if prototypes.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 prototypes, got {}",
            prototypes.len()
        )));
    }
    if !(0.0..1.0).contains(&rank_tolerance) {
        return Err(Error::InvalidArgument(format!(
            "rank tolerance {rank_tolerance} outside [0, 1)"
        )));
    }
    let dim = prototypes[0].vector.len();
    let mut seen = BTreeSet::new();
    for p in prototypes {
        if p.vector.len() != dim {
            return Err(Error::dim(dim, p.vector.len()));
        }
        check_unit(&p.vector)?;
        if !seen.insert(p.group.as_str()) {
            return Err(Error::DuplicateGroup(p.group.clone()));
        }
    }
    let reference_vec = &prototypes
        .iter()
        .find(|p| p.group == reference)
        .ok_or_else(|| Error::UnknownReference(reference.to_owned()))?
        .vector;

    let directions: Vec<Vec<f64>> = prototypes
        .iter()
        .filter(|p| p.group != reference)
        .map(|p| sub(&p.vector, reference_vec))
        .collect();

    let a = DMatrix::from_fn(dim, directions.len(), |i, j| directions[j][i]);
    let svd = a.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma = svd.singular_values;

    let sigma_max = sigma.iter().copied().fold(0.0_f64, f64::max);
    if sigma_max <= ABSOLUTE_RANK_FLOOR {
        return Err(Error::DegenerateSubspace);
    }
    let cutoff = rank_tolerance * sigma_max;
    let mut kept: Vec<(f64, usize)> = sigma
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > cutoff)
        .map(|(i, &s)| (s, i))
        .collect();
    kept.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));

    let basis = kept
        .iter()
        .map(|&(_, i)| u.column(i).iter().copied().collect())
        .collect();

    Ok(AttributeSubspace {
        basis,
        dim,
        source_groups: prototypes.iter().map(|p| p.group.clone()).collect(),
        reference_group: reference.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn proto(g: &str, v: &[f64]) -> GroupPrototype {
        GroupPrototype::new(g, v.to_vec()).unwrap()
    }

    fn x_axis() -> AttributeSubspace {
        AttributeSubspace::from_basis(vec![vec![1.0, 0.0, 0.0]], 3, vec![], String::new())
            .unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        unit_normalize(v).unwrap()
    }

    fn residual(s: &AttributeSubspace, v: &[f64]) -> f64 {
        norm(&s.project_orthogonal(v).unwrap())
    }

    #[test]
    fn two_axis_prototypes_give_single_diagonal_direction() {
        let s = build_subspace(
            &[proto("g1", &[1.0, 0.0, 0.0]), proto("g2", &[0.0, 1.0, 0.0])],
            "g1",
            DEFAULT_RANK_TOLERANCE,
        )
        .unwrap();
        assert_eq!(s.rank(), 1);
        let b = &s.basis()[0];
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // sign of a singular vector is arbitrary
        let sign = if b[1] > 0.0 { 1.0 } else { -1.0 };
        assert!((sign * b[0] + h).abs() < 1e-12);
        assert!((sign * b[1] - h).abs() < 1e-12);
        assert!(b[2].abs() < 1e-12);
    }

    #[test]
    fn identical_prototypes_are_degenerate() {
        let err = build_subspace(
            &[proto("g1", &[0.6, 0.8, 0.0]), proto("g2", &[0.6, 0.8, 0.0])],
            "g1",
            DEFAULT_RANK_TOLERANCE,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateSubspace));
    }

    #[test]
    fn unknown_reference_and_mismatched_dims() {
        let ps = [proto("a", &[1.0, 0.0]), proto("b", &[0.0, 1.0])];
        assert!(matches!(
            build_subspace(&ps, "c", 1e-10),
            Err(Error::UnknownReference(_))
        ));
        let ps = [proto("a", &[1.0, 0.0]), proto("b", &[0.0, 1.0, 0.0])];
        assert!(matches!(
            build_subspace(&ps, "a", 1e-10),
            Err(Error::DimensionMismatch { .. })
        ));
        let ps = [proto("a", &[1.0, 0.0]), proto("a", &[0.0, 1.0])];
        assert!(matches!(
            build_subspace(&ps, "a", 1e-10),
            Err(Error::DuplicateGroup(_))
        ));
    }

    #[test]
    fn dependent_directions_reduce_rank() {
        // p4 = p2 + p3 - p1 with everything on the sphere: take p1 = u,
        // p2 = w, p3 = -w, p4 = -u, so that a_4 = a_2 + a_3 = -2u.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_unit(&mut rng, 8);
        let w = random_unit(&mut rng, 8);
        let ps = [
            proto("g1", &u),
            proto("g2", &w),
            proto("g3", &scale(&w, -1.0)),
            proto("g4", &scale(&u, -1.0)),
        ];
        let a2 = sub(&ps[1].vector, &ps[0].vector);
        let a3 = sub(&ps[2].vector, &ps[0].vector);
        let a4 = sub(&ps[3].vector, &ps[0].vector);
        let sum: Vec<f64> = a2.iter().zip(&a3).map(|(x, y)| x + y).collect();
        assert!(norm(&sub(&sum, &a4)) < 1e-15);

        let s = build_subspace(&ps, "g1", DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(s.rank(), 2);
        for a in [&a2, &a3, &a4] {
            assert!(residual(&s, a) < 1e-8);
        }
    }

    #[test]
    fn decompose_examples() {
        let s = x_axis();
        let d = s.decompose(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(d.parallel, vec![0.0, 0.0, 0.0]);
        assert_eq!(d.orthogonal, vec![0.0, 0.0, 1.0]);
        assert_eq!((d.norm_parallel, d.norm_orthogonal), (0.0, 1.0));

        let d = s.decompose(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.parallel, vec![1.0, 0.0, 0.0]);
        assert_eq!((d.norm_parallel, d.norm_orthogonal), (1.0, 0.0));

        let e = [0.6, 0.8, 0.0];
        let d = s.decompose(&e).unwrap();
        // oracle: direct dot products with the basis column and its complement
        assert!((d.norm_parallel - dot(&e, &[1.0, 0.0, 0.0]).abs()).abs() < 1e-15);
        assert!((d.norm_orthogonal - dot(&e, &[0.0, 1.0, 0.0]).abs()).abs() < 1e-15);
        assert!((d.norm_parallel - 0.6).abs() < 1e-15);
        assert!((d.norm_orthogonal - 0.8).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = x_axis();
        assert!(matches!(
            s.decompose(&[1.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 3, found: 2 })
        ));
        assert!(s.project_parallel(&[1.0; 4]).is_err());
        assert!(s.project_orthogonal(&[1.0; 4]).is_err());
    }

    #[test]
    fn orthogonal_projection_kills_basis_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps: Vec<GroupPrototype> = (0..4)
            .map(|i| GroupPrototype::new(format!("g{i}"), random_unit(&mut rng, 16)).unwrap())
            .collect();
        let s = build_subspace(&ps, "g0", DEFAULT_RANK_TOLERANCE).unwrap();
        assert_eq!(s.rank(), 3);
        for b in s.basis() {
            assert!(norm(&s.project_orthogonal(b).unwrap()) < 1e-12);
        }
        let v: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let pp = s.project_parallel(&v).unwrap();
        let po = s.project_orthogonal(&v).unwrap();
        let lhs = dot(&pp, &pp) + dot(&po, &po);
        assert!((lhs - dot(&v, &v)).abs() < 1e-10 * dot(&v, &v));
        assert_eq!(s.project_parallel(&pp).unwrap().len(), 16);
        for (a, b) in s.project_parallel(&pp).unwrap().iter().zip(&pp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_normalizes_and_rejects_zero() {
        let e = Embedding::new("x", vec![3.0, 4.0], Modality::Text).unwrap();
        assert!((e.vector[0] - 0.6).abs() < 1e-15);
        assert!(matches!(
            Embedding::new("z", vec![0.0, 0.0], Modality::Text),
            Err(Error::ZeroVector(_))
        ));
        let unit = vec![0.6, 0.8];
        assert_eq!(unit_normalize(unit.clone()).unwrap(), unit);
    }

    #[test]
    fn from_basis_rejects_non_orthonormal() {
        let err = AttributeSubspace::from_basis(
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            2,
            vec![],
            String::new(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvariantViolation(_)));
    }
}
