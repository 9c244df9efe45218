//! Verification metrics (EER, ROC, score-distribution statistics), the
//! mated/non-mated unlinkability analysis, and the batch scoring protocols
//! that drive them over a labeled feature corpus.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::cancelable::{
    gen_projection_matrix, protect_with_matrix, CancelableTemplate, FeatureVector,
    OrthonormalMatrix, ProjectionKey,
};
use crate::error::{Error, Result};
use crate::ndb::{generate_ndb, IntervalSet, PackedNdb};
use crate::rng::{derive_seed, hash_bytes};

/// Genuine and imposter distance lists, all values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

impl ScoreSet {
    pub fn new(genuine: Vec<f64>, imposter: Vec<f64>) -> Result<Self> {
        for (name, list) in [("genuine", &genuine), ("imposter", &imposter)] {
            if let Some(v) = list
                .iter()
                .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
            {
                return Err(Error::Validation(format!(
                    "{name} score {v} outside [0, 1]"
                )));
            }
        }
        Ok(ScoreSet { genuine, imposter })
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.genuine.is_empty() || self.imposter.is_empty() {
            return Err(Error::Parameter(
                "metric computation needs non-empty genuine and imposter lists".into(),
            ));
        }
        Ok(())
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    s
}

/// Fraction of `sorted_list` that is `<= t`.
fn frac_le(sorted_list: &[f64], t: f64) -> f64 {
    let count = sorted_list.partition_point(|&s| s <= t);
    count as f64 / sorted_list.len() as f64
}

/// Equal error rate and its threshold.
///
/// Thresholds sweep the merged score values; `FAR(t)` is the imposter
/// fraction `<= t` and `FRR(t)` the genuine fraction `> t`. The crossing of
/// the two staircase curves is located and resolved by linear interpolation
/// between the adjacent thresholds.
pub fn eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    scores.require_nonempty()?;
    let genuine = sorted(&scores.genuine);
    let imposter = sorted(&scores.imposter);

    let mut thresholds: Vec<f64> = Vec::with_capacity(genuine.len() + imposter.len());
    thresholds.extend_from_slice(&genuine);
    thresholds.extend_from_slice(&imposter);
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();

    // Sentinel below every score: FAR = 0, FRR = 1.
    let mut prev_t = thresholds[0] - 1.0;
    let mut prev_far = 0.0;
    let mut prev_frr = 1.0;
    for &t in &thresholds {
        let far = frac_le(&imposter, t);
        let frr = 1.0 - frac_le(&genuine, t);
        let diff = far - frr;
        if diff >= 0.0 {
            let prev_diff = prev_far - prev_frr;
            let lambda = if diff - prev_diff > 0.0 {
                (0.0 - prev_diff) / (diff - prev_diff)
            } else {
                1.0
            };
            let eer_value = prev_far + (far - prev_far) * lambda;
            let threshold = prev_t + (t - prev_t) * lambda;
            return Ok((eer_value, threshold));
        }
        prev_t = t;
        prev_far = far;
        prev_frr = frr;
    }
    // FAR never reaches FRR below the top threshold; at t = max both are
    // (1, 0), so the loop always returns. Kept for completeness.
    Ok((prev_far, prev_t))
}

/// ROC curve as `(FAR, GAR)` points with `GAR = 1 - FRR`, non-decreasing in
/// FAR. `n_points = 0` keeps every threshold; otherwise the curve is
/// subsampled evenly, endpoints included.
pub fn roc_points(scores: &ScoreSet, n_points: usize) -> Result<Vec<(f64, f64)>> {
    scores.require_nonempty()?;
    let genuine = sorted(&scores.genuine);
    let imposter = sorted(&scores.imposter);

    let mut thresholds: Vec<f64> = Vec::with_capacity(genuine.len() + imposter.len() + 1);
    thresholds.push(genuine[0].min(imposter[0]) - 1.0);
    thresholds.extend_from_slice(&genuine);
    thresholds.extend_from_slice(&imposter);
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();

    let full: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| (frac_le(&imposter, t), frac_le(&genuine, t)))
        .collect();

    if n_points == 0 || n_points >= full.len() {
        return Ok(full);
    }
    if n_points < 2 {
        return Err(Error::Parameter("n_points must be 0 or >= 2".into()));
    }
    let last = full.len() - 1;
    let picked: Vec<(f64, f64)> = (0..n_points)
        .map(|i| full[i * last / (n_points - 1)])
        .collect();
    Ok(picked)
}

/// Mean and population standard deviation of both score lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionStats {
    pub genuine_mean: f64,
    pub genuine_std: f64,
    pub imposter_mean: f64,
    pub imposter_std: f64,
}

pub fn distribution_stats(scores: &ScoreSet) -> Result<DistributionStats> {
    scores.require_nonempty()?;
    let (genuine_mean, genuine_std) = mean_std(&scores.genuine);
    let (imposter_mean, imposter_std) = mean_std(&scores.imposter);
    Ok(DistributionStats {
        genuine_mean,
        genuine_std,
        imposter_mean,
        imposter_std,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Histogram strategy for the unlinkability estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binning {
    /// Equal-width bins over the shared min-max support (the default).
    EqualWidth,
    /// Bin edges at quantiles of the pooled scores; invariant under common
    /// strictly monotone transforms of both lists.
    Quantile,
}

/// Local curve `D(s)` (bin center, value) and global measure `D_sys`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlinkabilityResult {
    pub local: Vec<(f64, f64)>,
    pub d_sys: f64,
}

/// Likelihood-ratio unlinkability of mated vs non-mated score lists.
///
/// Histograms on a shared support estimate `p(s | mated)` and
/// `p(s | non-mated)`; per bin, `LR = p_m / p_nm` (0/0 counts as 1, x/0 as
/// infinity) and `D(s) = 0` when `omega * LR <= 1`, else
/// `2 * omega * LR / (1 + omega * LR) - 1`. The global measure is the
/// mated-weighted sum `D_sys = sum_bins D(s) * mass_m(s)`.
pub fn unlinkability(
    mated: &[f64],
    non_mated: &[f64],
    bins: usize,
    omega: f64,
) -> Result<UnlinkabilityResult> {
    unlinkability_with_binning(mated, non_mated, bins, omega, Binning::EqualWidth)
}

pub fn unlinkability_with_binning(
    mated: &[f64],
    non_mated: &[f64],
    bins: usize,
    omega: f64,
    binning: Binning,
) -> Result<UnlinkabilityResult> {
    if mated.is_empty() || non_mated.is_empty() {
        return Err(Error::Parameter(
            "unlinkability needs non-empty mated and non-mated lists".into(),
        ));
    }
    if bins < 10 {
        return Err(Error::Parameter(format!("bins must be >= 10, got {bins}")));
    }
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::Parameter(format!(
            "omega must be positive, got {omega}"
        )));
    }
    for (name, list) in [("mated", mated), ("non-mated", non_mated)] {
        if list.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{name} scores must be finite")));
        }
    }

    let lo = mated
        .iter()
        .chain(non_mated)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = mated
        .iter()
        .chain(non_mated)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);

    // Degenerate support: everything lands in one bin with LR = 1.
    if lo == hi {
        let d = d_of_lr(1.0, omega);
        return Ok(UnlinkabilityResult {
            local: vec![(lo, d)],
            d_sys: d,
        });
    }

    let (mass_m, mass_nm, centers) = match binning {
        Binning::EqualWidth => {
            let width = (hi - lo) / bins as f64;
            let index = |s: f64| (((s - lo) / width) as usize).min(bins - 1);
            let mut mm = vec![0usize; bins];
            let mut mn = vec![0usize; bins];
            for &s in mated {
                mm[index(s)] += 1;
            }
            for &s in non_mated {
                mn[index(s)] += 1;
            }
            let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
            (mm, mn, centers)
        }
        Binning::Quantile => {
            let mut pooled: Vec<f64> = mated.iter().chain(non_mated).cloned().collect();
            pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
            // Edges at pooled quantiles; membership decided purely by value
            // comparisons, which is what makes the estimate invariant under
            // strictly monotone transforms.
            let edges: Vec<f64> = (1..bins)
                .map(|j| pooled[(j * pooled.len() / bins).min(pooled.len() - 1)])
                .collect();
            let index = |s: f64| edges.partition_point(|e| *e <= s).min(bins - 1);
            let mut mm = vec![0usize; bins];
            let mut mn = vec![0usize; bins];
            for &s in mated {
                mm[index(s)] += 1;
            }
            for &s in non_mated {
                mn[index(s)] += 1;
            }
            let mut centers = Vec::with_capacity(bins);
            for b in 0..bins {
                let left = if b == 0 { lo } else { edges[b - 1] };
                let right = if b == bins - 1 { hi } else { edges[b] };
                centers.push(0.5 * (left + right));
            }
            (mm, mn, centers)
        }
    };

    let nm_total = non_mated.len() as f64;
    let m_total = mated.len() as f64;
    let mut local = Vec::with_capacity(centers.len());
    let mut d_sys = 0.0;
    for b in 0..centers.len() {
        let pm = mass_m[b] as f64 / m_total;
        let pnm = mass_nm[b] as f64 / nm_total;
        let d = if pm == 0.0 && pnm == 0.0 {
            d_of_lr(1.0, omega)
        } else if pnm == 0.0 {
            1.0
        } else {
            d_of_lr(pm / pnm, omega)
        };
        local.push((centers[b], d));
        d_sys += d * pm;
    }
    Ok(UnlinkabilityResult { local, d_sys })
}

fn d_of_lr(lr: f64, omega: f64) -> f64 {
    let w = omega * lr;
    if w <= 1.0 {
        0.0
    } else {
        2.0 * w / (1.0 + w) - 1.0
    }
}

/// Key handling for batch scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyMode {
    /// One first-level token for every identity (stolen-token worst case).
    Shared,
    /// Per-identity first-level tokens derived from the base seed.
    PerUser,
}

/// Parameters of the protected pipeline used by the scoring protocols.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub m_p: usize,
    pub r: usize,
    pub intervals: IntervalSet,
    pub seed: u64,
}

struct Corpus<'a> {
    /// (subject id, rows) in first-occurrence order.
    subjects: Vec<(&'a str, Vec<&'a FeatureVector>)>,
    m_f: usize,
}

fn group_by_subject(features: &[FeatureVector]) -> Result<Corpus<'_>> {
    if features.is_empty() {
        return Err(Error::Parameter("empty feature corpus".into()));
    }
    let m_f = features[0].dim();
    let mut order: Vec<&str> = Vec::new();
    let mut map: HashMap<&str, Vec<&FeatureVector>> = HashMap::new();
    for f in features {
        if f.dim() != m_f {
            return Err(Error::Dimension(format!(
                "feature {}/{} has dimension {}, expected {m_f}",
                f.subject_id,
                f.sample_id,
                f.dim()
            )));
        }
        map.entry(f.subject_id.as_str())
            .or_insert_with(|| {
                order.push(f.subject_id.as_str());
                Vec::new()
            })
            .push(f);
    }
    Ok(Corpus {
        subjects: order
            .into_iter()
            .map(|id| {
                let rows = map.remove(id).expect("grouped above");
                (id, rows)
            })
            .collect(),
        m_f,
    })
}

// Sub-stream labels for seed derivation.
const LBL_K1: u64 = 1;
const LBL_K2: u64 = 2;
const LBL_K1_PROBE: u64 = 3;

fn subject_k1(cfg: &PipelineConfig, mode: KeyMode, id: &str) -> u64 {
    match mode {
        KeyMode::Shared => cfg.seed,
        KeyMode::PerUser => derive_seed(derive_seed(cfg.seed, LBL_K1), hash_bytes(id.as_bytes())),
    }
}

fn subject_k2(cfg: &PipelineConfig, id: &str) -> u64 {
    derive_seed(derive_seed(cfg.seed, LBL_K2), hash_bytes(id.as_bytes()))
}

/// Runs the enrollment/verification protocol over a labeled corpus and
/// returns genuine and imposter distances.
///
/// Each subject is enrolled from its first sample; every later sample is a
/// genuine probe against the subject's own record and an imposter probe
/// against every other record. Probes are protected with the claimed
/// identity's first-level token. Pair enumeration order is fixed (subjects
/// in first-occurrence order, samples in file order), and the parallel
/// evaluation preserves it.
pub fn protected_scores(
    features: &[FeatureVector],
    cfg: &PipelineConfig,
    mode: KeyMode,
) -> Result<ScoreSet> {
    let corpus = group_by_subject(features)?;
    let n_subjects = corpus.subjects.len();
    if n_subjects < 2 {
        return Err(Error::Parameter(
            "need at least two subjects for imposter pairs".into(),
        ));
    }
    if corpus.subjects.iter().all(|(_, rows)| rows.len() < 2) {
        return Err(Error::Parameter(
            "need at least one subject with two samples for genuine pairs".into(),
        ));
    }

    // One projection matrix per distinct token.
    let mut matrices: HashMap<u64, OrthonormalMatrix> = HashMap::new();
    for (id, _) in &corpus.subjects {
        let k1 = subject_k1(cfg, mode, id);
        if let std::collections::hash_map::Entry::Vacant(e) = matrices.entry(k1) {
            e.insert(gen_projection_matrix(&ProjectionKey::new(
                k1, corpus.m_f, cfg.m_p,
            )?)?);
        }
    }

    // Protect every sample under every distinct token, in parallel. Shared
    // mode has one token, so this is one pass over the corpus.
    let all_rows: Vec<&FeatureVector> = corpus
        .subjects
        .iter()
        .flat_map(|(_, rows)| rows.iter().copied())
        .collect();
    let mut token_templates: HashMap<u64, Vec<CancelableTemplate>> = HashMap::new();
    let mut distinct: Vec<u64> = matrices.keys().copied().collect();
    distinct.sort_unstable();
    for k1 in distinct {
        let matrix = &matrices[&k1];
        let templates: Vec<CancelableTemplate> = all_rows
            .par_iter()
            .map(|row| protect_with_matrix(row, matrix))
            .collect::<Result<_>>()?;
        token_templates.insert(k1, templates);
    }
    // Flat index of (subject, sample) into `all_rows`.
    let mut flat_index: HashMap<(usize, usize), usize> = HashMap::new();
    {
        let mut next = 0usize;
        for (si, (_, rows)) in corpus.subjects.iter().enumerate() {
            for sj in 0..rows.len() {
                flat_index.insert((si, sj), next);
                next += 1;
            }
        }
    }

    // Enroll subject i from its first sample.
    let mut packed: Vec<PackedNdb> = Vec::with_capacity(n_subjects);
    for (si, (id, _)) in corpus.subjects.iter().enumerate() {
        let k1 = subject_k1(cfg, mode, id);
        let template = &token_templates[&k1][flat_index[&(si, 0)]];
        let generated = generate_ndb(template, subject_k2(cfg, id), cfg.r, &cfg.intervals)?;
        packed.push(PackedNdb::from_ndb(&generated.ndb));
    }

    let score_pair = |enroll_subject: usize, probe_flat: usize| -> Result<f64> {
        let id = corpus.subjects[enroll_subject].0;
        let k1 = subject_k1(cfg, mode, id);
        let template = &token_templates[&k1][probe_flat];
        Ok(packed[enroll_subject].match_score(template)?.distance)
    };

    let mut genuine_pairs: Vec<(usize, usize)> = Vec::new();
    let mut imposter_pairs: Vec<(usize, usize)> = Vec::new();
    for (si, (_, rows)) in corpus.subjects.iter().enumerate() {
        for sj in 1..rows.len() {
            genuine_pairs.push((si, flat_index[&(si, sj)]));
        }
    }
    for (ei, _) in corpus.subjects.iter().enumerate() {
        for (pi, (_, rows)) in corpus.subjects.iter().enumerate() {
            if pi == ei {
                continue;
            }
            for sj in 1..rows.len() {
                imposter_pairs.push((ei, flat_index[&(pi, sj)]));
            }
        }
    }

    let genuine: Vec<f64> = genuine_pairs
        .par_iter()
        .map(|&(e, p)| score_pair(e, p))
        .collect::<Result<_>>()?;
    let imposter: Vec<f64> = imposter_pairs
        .par_iter()
        .map(|&(e, p)| score_pair(e, p))
        .collect::<Result<_>>()?;
    ScoreSet::new(genuine, imposter)
}

/// Unprotected baseline: angular cosine distance between raw feature
/// vectors under the same pairing protocol as [`protected_scores`].
pub fn cosine_scores(features: &[FeatureVector]) -> Result<ScoreSet> {
    let corpus = group_by_subject(features)?;
    if corpus.subjects.len() < 2 {
        return Err(Error::Parameter(
            "need at least two subjects for imposter pairs".into(),
        ));
    }
    let angular = |a: &FeatureVector, b: &FeatureVector| -> Result<f64> {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (x, y) in a.values().iter().zip(b.values()) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate(
                "zero-norm feature vector in cosine matching".into(),
            ));
        }
        let cos = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
        Ok(cos.acos() / std::f64::consts::PI)
    };

    let mut genuine = Vec::new();
    let mut imposter = Vec::new();
    for (ei, (_, enroll_rows)) in corpus.subjects.iter().enumerate() {
        let reference = enroll_rows[0];
        for (pi, (_, probe_rows)) in corpus.subjects.iter().enumerate() {
            for probe in probe_rows.iter().skip(1) {
                let d = angular(reference, probe)?;
                if pi == ei {
                    genuine.push(d);
                } else {
                    imposter.push(d);
                }
            }
        }
    }
    ScoreSet::new(genuine, imposter)
}

/// Cross-key linkage scores for the unlinkability protocol.
///
/// Every sample of every subject is enrolled under the subject's enrollment
/// token set (fresh second-level token per enrollment). Probe templates are
/// protected under a different per-subject token. Mated scores match probes
/// of the same subject (other samples) against each enrollment; non-mated
/// scores match the same-index sample of every other subject. Returns
/// `(mated, non_mated)`.
pub fn unlinkability_scores(
    features: &[FeatureVector],
    cfg: &PipelineConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let corpus = group_by_subject(features)?;
    let n_subjects = corpus.subjects.len();
    if n_subjects < 2 {
        return Err(Error::Parameter(
            "unlinkability needs at least two subjects".into(),
        ));
    }

    let enroll_base = derive_seed(cfg.seed, LBL_K1);
    let probe_base = derive_seed(cfg.seed, LBL_K1_PROBE);
    let k2_base = derive_seed(cfg.seed, LBL_K2);

    // Per-subject enrollment records (all samples) and probe templates.
    let per_subject: Vec<(Vec<PackedNdb>, Vec<CancelableTemplate>)> = corpus
        .subjects
        .par_iter()
        .map(|(id, rows)| -> Result<_> {
            let h = hash_bytes(id.as_bytes());
            let enroll_key = ProjectionKey::new(derive_seed(enroll_base, h), corpus.m_f, cfg.m_p)?;
            let probe_key = ProjectionKey::new(derive_seed(probe_base, h), corpus.m_f, cfg.m_p)?;
            let enroll_matrix = gen_projection_matrix(&enroll_key)?;
            let probe_matrix = gen_projection_matrix(&probe_key)?;
            let mut records = Vec::with_capacity(rows.len());
            for (s, row) in rows.iter().enumerate() {
                let template = protect_with_matrix(row, &enroll_matrix)?;
                let k2 = derive_seed(k2_base, h ^ crate::rng::mix64(s as u64));
                let generated = generate_ndb(&template, k2, cfg.r, &cfg.intervals)?;
                records.push(PackedNdb::from_ndb(&generated.ndb));
            }
            let probes = rows
                .iter()
                .map(|row| protect_with_matrix(row, &probe_matrix))
                .collect::<Result<Vec<_>>>()?;
            Ok((records, probes))
        })
        .collect::<Result<_>>()?;

    let mut mated = Vec::new();
    let mut non_mated = Vec::new();
    for (si, (records, probes)) in per_subject.iter().enumerate() {
        for (s, record) in records.iter().enumerate() {
            for (sp, probe) in probes.iter().enumerate() {
                if sp != s {
                    mated.push(record.match_score(probe)?.distance);
                }
            }
            for (sj, (_, other_probes)) in per_subject.iter().enumerate() {
                if sj == si {
                    continue;
                }
                // Same sample index keeps the list sizes balanced per pair.
                if let Some(probe) = other_probes.get(s) {
                    non_mated.push(record.match_score(probe)?.distance);
                }
            }
        }
    }
    Ok((mated, non_mated))
}
