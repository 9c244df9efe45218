//! First-level protection: seeded orthonormal random projection followed by
//! median binarization.
//!
//! The projection seed is the user's first-level token. Re-keying with a
//! fresh seed yields a statistically independent template for the same
//! biometric, which is what makes the template revocable.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Residual norm below which a direction is considered linearly dependent
/// and is redrawn from the generator stream.
const GS_RESIDUAL_EPS: f64 = 1e-12;
/// Bound on redraws per direction before giving up.
const GS_MAX_RETRIES: usize = 100;

/// Real-valued unprotected feature vector with subject/sample labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub subject_id: String,
    pub sample_id: String,
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(
        subject_id: impl Into<String>,
        sample_id: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Dimension("feature vector must be non-empty".into()));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "feature value at index {pos} is not finite"
            )));
        }
        Ok(FeatureVector {
            subject_id: subject_id.into(),
            sample_id: sample_id.into(),
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// First-level token plus the projection shape it parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionKey {
    pub seed: u64,
    pub m_f: usize,
    pub m_p: usize,
}

impl ProjectionKey {
    pub fn new(seed: u64, m_f: usize, m_p: usize) -> Result<Self> {
        if m_f == 0 || m_p == 0 {
            return Err(Error::Dimension(
                "projection dimensions must be positive".into(),
            ));
        }
        if m_p > m_f {
            return Err(Error::Dimension(format!(
                "m_p ({m_p}) must not exceed m_f ({m_f}): cannot orthonormalize \
                 more directions than the ambient dimension"
            )));
        }
        Ok(ProjectionKey { seed, m_f, m_p })
    }
}

/// `m_p` pairwise-orthonormal projection directions in `R^{m_f}`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalMatrix {
    m_f: usize,
    directions: Vec<Vec<f64>>,
}

impl OrthonormalMatrix {
    pub fn m_f(&self) -> usize {
        self.m_f
    }

    pub fn m_p(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self) -> &[Vec<f64>] {
        &self.directions
    }
}

/// Binary first-level protected template.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CancelableTemplate {
    bits: Vec<u8>,
}

impl CancelableTemplate {
    /// Wraps raw bits; every element must be 0 or 1.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Validation(format!(
                "template bit at index {pos} is not binary"
            )));
        }
        Ok(CancelableTemplate { bits })
    }

    /// Parses a string of `0`/`1` characters. Rejects anything else, in
    /// particular the `*` of stored negative entries: the stored format is
    /// not a valid query template.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => bits.push(0),
                '1' => bits.push(1),
                other => {
                    return Err(Error::Validation(format!(
                        "invalid template character {other:?} at position {i}"
                    )))
                }
            }
        }
        Ok(CancelableTemplate { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b == 1 { '1' } else { '0' })
            .collect()
    }

    /// Hamming distance to another template of the same length.
    pub fn hamming(&self, other: &CancelableTemplate) -> Result<usize> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "template lengths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }
}

/// Bipolar view of a binary template: 0 maps to -1, 1 maps to +1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipolarTemplate {
    values: Vec<i8>,
}

impl BipolarTemplate {
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Inverse of [`to_bipolar`].
    pub fn to_template(&self) -> CancelableTemplate {
        CancelableTemplate {
            bits: self.values.iter().map(|&v| u8::from(v > 0)).collect(),
        }
    }
}

/// Deterministically expands `(seed, m_f, m_p)` into an orthonormal matrix.
///
/// Raw direction entries are i.i.d. standard normal from the pinned
/// generator; Gram-Schmidt (with one re-orthogonalization pass, so pairwise
/// inner products stay below 1e-9 even for square matrices) turns the `m_p`
/// directions into an orthonormal set. A direction whose residual collapses
/// is redrawn from the same stream.
pub fn gen_projection_matrix(key: &ProjectionKey) -> Result<OrthonormalMatrix> {
    // Re-validate so a hand-built key cannot bypass the invariants.
    let key = ProjectionKey::new(key.seed, key.m_f, key.m_p)?;
    let mut rng = SplitMix64::new(key.seed);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(key.m_p);

    for j in 0..key.m_p {
        let mut retries = 0;
        loop {
            let mut v: Vec<f64> = (0..key.m_f).map(|_| rng.next_gaussian()).collect();
            for _ in 0..2 {
                for prev in &directions {
                    let coeff = dot(&v, prev);
                    for (vi, pi) in v.iter_mut().zip(prev) {
                        *vi -= coeff * pi;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm >= GS_RESIDUAL_EPS {
                for vi in &mut v {
                    *vi /= norm;
                }
                directions.push(v);
                break;
            }
            retries += 1;
            if retries >= GS_MAX_RETRIES {
                return Err(Error::Degenerate(format!(
                    "Gram-Schmidt failed to produce direction {j} after \
                     {GS_MAX_RETRIES} redraws"
                )));
            }
        }
    }

    Ok(OrthonormalMatrix {
        m_f: key.m_f,
        directions,
    })
}

/// Projects a feature vector onto the matrix directions.
pub fn project(u: &FeatureVector, matrix: &OrthonormalMatrix) -> Result<Vec<f64>> {
    if u.dim() != matrix.m_f() {
        return Err(Error::Dimension(format!(
            "feature dimension {} does not match projection dimension {}",
            u.dim(),
            matrix.m_f()
        )));
    }
    Ok(matrix
        .directions
        .iter()
        .map(|dir| dot(u.values(), dir))
        .collect())
}

/// Thresholds a projected vector at its median.
///
/// For even length the median is the midpoint of the two middle order
/// statistics. A value strictly above the median becomes 1; ties map to 0.
/// All-equal input would produce the all-zero template and is rejected.
pub fn binarize(q: &[f64]) -> Result<CancelableTemplate> {
    if q.len() < 2 {
        return Err(Error::Dimension(
            "binarization needs at least two values".into(),
        ));
    }
    if let Some(pos) = q.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "projected value at index {pos} is not finite"
        )));
    }
    let beta = median(q);
    let first = q[0];
    if q.iter().all(|&v| v == first) {
        return Err(Error::Degenerate(
            "all projected values are equal; template would be all-zero".into(),
        ));
    }
    Ok(CancelableTemplate {
        bits: q.iter().map(|&v| u8::from(v > beta)).collect(),
    })
}

fn median(q: &[f64]) -> f64 {
    let mut sorted = q.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Maps a binary template to its bipolar form (0 -> -1, 1 -> +1).
pub fn to_bipolar(b: &CancelableTemplate) -> BipolarTemplate {
    BipolarTemplate {
        values: b
            .bits
            .iter()
            .map(|&bit| if bit == 1 { 1 } else { -1 })
            .collect(),
    }
}

/// Full first-level protection: project with the key's matrix, then binarize.
pub fn protect(u: &FeatureVector, key: &ProjectionKey) -> Result<CancelableTemplate> {
    let matrix = gen_projection_matrix(key)?;
    protect_with_matrix(u, &matrix)
}

/// Like [`protect`], for callers that cache the generated matrix.
pub fn protect_with_matrix(
    u: &FeatureVector,
    matrix: &OrthonormalMatrix,
) -> Result<CancelableTemplate> {
    binarize(&project(u, matrix)?)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
