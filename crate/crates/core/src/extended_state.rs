//! Exact algebra of sub-Markov kernels on tagged finite state spaces and their
//! one-point cemetery extensions.
//!
//! A sub-Markov kernel has row sums at most one; the missing mass is the
//! probability of dying. Adjoining a dead state as the last matrix index turns
//! it into a proper Markov kernel with the dead state absorbing. Functions are
//! extended by zero at the dead state, so `k_ext * f_ext` restricted to the
//! alive block reproduces `k * f` exactly.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::mat;

/// Slack tolerated on row sums before a kernel is rejected.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Tolerance for the Chapman-Kolmogorov identity on kernel families.
pub const SEMIGROUP_TOLERANCE: f64 = 1e-10;

/// Identifies one finite alive state space. Distinct blocks of a concatenation
/// carry distinct ids; that is how the disjointness of their state spaces is
/// realized without any set arithmetic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpaceTag {
    pub id: u32,
    pub size: usize,
    pub labels: Option<Vec<String>>,
}

impl StateSpaceTag {
    pub fn new(id: u32, size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidModel(
                "state space must contain at least one alive state".into(),
            ));
        }
        Ok(Self {
            id,
            size,
            labels: None,
        })
    }

    pub fn with_labels(id: u32, labels: Vec<String>) -> Result<Self> {
        let mut tag = Self::new(id, labels.len())?;
        tag.labels = Some(labels);
        Ok(tag)
    }
}

/// A point of some alive state space, or the cemetery.
///
/// Finite-state points carry the tag id of their space; diffusion points live
/// on the real line. The cemetery carries nothing and compares equal only to
/// itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtState {
    Discrete { tag: u32, index: usize },
    Real(f64),
    Dead,
}

impl ExtState {
    pub fn is_alive(&self) -> bool {
        !matches!(self, ExtState::Dead)
    }

    pub fn discrete_index(&self) -> Option<usize> {
        match self {
            ExtState::Discrete { index, .. } => Some(*index),
            _ => None,
        }
    }

    pub fn real_value(&self) -> Option<f64> {
        match self {
            ExtState::Real(x) => Some(*x),
            _ => None,
        }
    }
}

fn check_rows(rows: &[Vec<f64>], n: usize, markov: bool) -> Result<()> {
    if rows.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: rows.len(),
        });
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: row.len(),
            });
        }
        let mut sum = 0.0;
        for &p in row {
            if !(0.0..=1.0 + ROW_SUM_TOLERANCE).contains(&p) || !p.is_finite() {
                return Err(Error::InvalidKernel(format!(
                    "entry {p} in row {i} is outside [0, 1]"
                )));
            }
            sum += p;
        }
        if sum > 1.0 + ROW_SUM_TOLERANCE {
            return Err(Error::InvalidKernel(format!(
                "row {i} sums to {sum}, exceeding 1"
            )));
        }
        if markov && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::InvalidKernel(format!(
                "row {i} sums to {sum}, not 1"
            )));
        }
    }
    Ok(())
}

/// Row-substochastic transition matrix on the alive states of one tagged space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubKernel {
    tag: StateSpaceTag,
    rows: Vec<Vec<f64>>,
}

impl SubKernel {
    pub fn new(tag: StateSpaceTag, rows: Vec<Vec<f64>>) -> Result<Self> {
        check_rows(&rows, tag.size, false)?;
        Ok(Self { tag, rows })
    }

    pub fn tag(&self) -> &StateSpaceTag {
        &self.tag
    }

    pub fn size(&self) -> usize {
        self.tag.size
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Plain matrix-vector product `k f` on alive states.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.size() {
            return Err(Error::DimensionMismatch {
                expected: self.size(),
                got: f.len(),
            });
        }
        Ok(mat::mat_vec(&self.rows, f))
    }
}

/// Markov kernel on a tagged space extended by the cemetery; the dead state is
/// the last matrix index and its row is exactly the unit vector on itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtKernel {
    tag: StateSpaceTag,
    rows: Vec<Vec<f64>>,
}

impl ExtKernel {
    pub fn new(tag: StateSpaceTag, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = tag.size + 1;
        check_rows(&rows, n, true)?;
        let dead = &rows[n - 1];
        let dead_ok = dead[..n - 1].iter().all(|&p| p == 0.0) && dead[n - 1] == 1.0;
        if !dead_ok {
            return Err(Error::InvalidKernel(
                "cemetery row must be the exact unit vector on the cemetery".into(),
            ));
        }
        Ok(Self { tag, rows })
    }

    pub fn tag(&self) -> &StateSpaceTag {
        &self.tag
    }

    /// Number of alive states (the matrix is one larger).
    pub fn alive_size(&self) -> usize {
        self.tag.size
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Extends a sub-Markov kernel by the cemetery: each alive row keeps its alive
/// entries and routes the missing mass `1 - sum` to the dead column; the dead
/// row is the unit vector on the dead state.
pub fn extend_kernel(k: &SubKernel) -> ExtKernel {
    let n = k.size();
    let mut rows = Vec::with_capacity(n + 1);
    for row in k.rows() {
        let sum: f64 = row.iter().sum();
        let mut ext = row.clone();
        ext.push((1.0 - sum).max(0.0));
        rows.push(ext);
    }
    let mut dead = vec![0.0; n + 1];
    dead[n] = 1.0;
    rows.push(dead);
    ExtKernel {
        tag: k.tag.clone(),
        rows,
    }
}

/// Restricts an extended kernel back to its alive block. The alive entries are
/// copied unchanged, so restriction after extension is the identity bit for bit.
pub fn restrict_kernel(k: &ExtKernel) -> SubKernel {
    let n = k.alive_size();
    let rows = k.rows[..n].iter().map(|row| row[..n].to_vec()).collect();
    SubKernel {
        tag: k.tag.clone(),
        rows,
    }
}

/// Extends a function on alive states by zero at the cemetery.
pub fn extend_function(f: &[f64]) -> Vec<f64> {
    let mut out = f.to_vec();
    out.push(0.0);
    out
}

/// Applies an extended kernel to an extended function: a plain matrix-vector
/// product. Equals `k(f|_E - f(dead)) + f(dead)` on every coordinate.
pub fn apply_extended(k: &ExtKernel, fstar: &[f64]) -> Result<Vec<f64>> {
    let n = k.alive_size() + 1;
    if fstar.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: fstar.len(),
        });
    }
    Ok(mat::mat_vec(&k.rows, fstar))
}

fn check_chapman_kolmogorov<K, F>(family: &[(f64, K)], mul: F) -> Result<()>
where
    F: Fn(&K, &K) -> Vec<Vec<f64>>,
    K: KernelRows,
{
    for (s, ks) in family {
        for (t, kt) in family {
            let sum = s + t;
            let Some((_, kst)) = family
                .iter()
                .find(|(u, _)| (u - sum).abs() <= 1e-12 * sum.max(1.0))
            else {
                continue;
            };
            let product = mul(ks, kt);
            let deviation = mat::inf_norm_diff(&product, kst.kernel_rows());
            if deviation > SEMIGROUP_TOLERANCE {
                return Err(Error::SemigroupViolation {
                    s: *s,
                    t: *t,
                    deviation,
                });
            }
        }
    }
    Ok(())
}

trait KernelRows {
    fn kernel_rows(&self) -> &[Vec<f64>];
}

impl KernelRows for SubKernel {
    fn kernel_rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

impl KernelRows for ExtKernel {
    fn kernel_rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Extends a whole sub-Markov family `(t_i, k_{t_i})`, checking the
/// Chapman-Kolmogorov identity on every pair `(s, t)` whose sum is also on the
/// grid, both before and after extension.
pub fn extend_semigroup_family(family: &[(f64, SubKernel)]) -> Result<Vec<(f64, ExtKernel)>> {
    if family.is_empty() {
        return Ok(Vec::new());
    }
    let tag = family[0].1.tag().clone();
    for (_, k) in family {
        if *k.tag() != tag {
            return Err(Error::InvalidKernel(
                "all kernels of a family must share one tag".into(),
            ));
        }
    }
    check_chapman_kolmogorov(family, |a: &SubKernel, b: &SubKernel| {
        mat::mat_mul(&a.rows, &b.rows)
    })?;
    let extended: Vec<(f64, ExtKernel)> = family
        .iter()
        .map(|(t, k)| (*t, extend_kernel(k)))
        .collect();
    check_chapman_kolmogorov(&extended, |a: &ExtKernel, b: &ExtKernel| {
        mat::mat_mul(&a.rows, &b.rows)
    })?;
    Ok(extended)
}

#[derive(Serialize, Deserialize)]
struct KernelRepr {
    tag: u32,
    rows: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extended: Option<bool>,
}

impl Serialize for SubKernel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KernelRepr {
            tag: self.tag.id,
            rows: self.rows.clone(),
            extended: None,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SubKernel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = KernelRepr::deserialize(d)?;
        if repr.extended == Some(true) {
            return Err(D::Error::custom("expected a plain kernel, got an extended one"));
        }
        let tag = StateSpaceTag::new(repr.tag, repr.rows.len()).map_err(D::Error::custom)?;
        SubKernel::new(tag, repr.rows).map_err(D::Error::custom)
    }
}

impl Serialize for ExtKernel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        KernelRepr {
            tag: self.tag.id,
            rows: self.rows.clone(),
            extended: Some(true),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ExtKernel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = KernelRepr::deserialize(d)?;
        if repr.extended != Some(true) {
            return Err(D::Error::custom("expected an extended kernel"));
        }
        if repr.rows.is_empty() {
            return Err(D::Error::custom("extended kernel must have at least 2 rows"));
        }
        let tag = StateSpaceTag::new(repr.tag, repr.rows.len() - 1).map_err(D::Error::custom)?;
        ExtKernel::new(tag, repr.rows).map_err(D::Error::custom)
    }
}
