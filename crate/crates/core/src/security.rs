//! Reversal-hardness analysis and an empirical local-search attacker.
//!
//! For a candidate string at relative Hamming distance `alpha` from the
//! hidden template, `g(alpha)` is the expected proportion of NDB entries the
//! candidate does not match. Local search descends the matched-entry
//! landscape, so its fate is governed by the smallest positive stationary
//! point `alpha_0` of `g`: below 1/2 the gradient near random starts points
//! away from the template and reversal fails; above 1/2 it succeeds. The
//! condition `sum_i (K - 2i) p_i > 0` guarantees `alpha_0 < 1/2` (and for
//! K = 3 it is also necessary).

use rayon::prelude::*;

use crate::cancelable::CancelableTemplate;
use crate::error::{Error, Result};
use crate::ndb::{IntervalSet, NegativeDatabase, Trit};
use crate::rng::{derive_seed, SplitMix64};

const STATIONARY_GRID: usize = 1000;
const STATIONARY_TOL: f64 = 1e-9;
const BOUNDARY_EPS: f64 = 1e-9;

/// Outcome of the hardness classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardnessClass {
    Hard,
    Easy,
    Boundary,
}

impl std::fmt::Display for HardnessClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HardnessClass::Hard => write!(f, "Hard"),
            HardnessClass::Easy => write!(f, "Easy"),
            HardnessClass::Boundary => write!(f, "Boundary"),
        }
    }
}

/// Full hardness analysis of an interval set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardnessReport {
    /// `sum_i (K - 2i) p_i`.
    pub condition_value: f64,
    /// Whether the sufficient condition holds (`condition_value > 0`).
    pub is_hard_sufficient: bool,
    /// Smallest positive stationary point of `g`, 1 if none exists.
    pub alpha0: f64,
    pub classification: HardnessClass,
}

/// Expected proportion of entries that do not match a candidate at relative
/// Hamming distance `alpha` from the hidden template:
/// `g(alpha) = 1 - sum_i p_i alpha^i (1 - alpha)^(K-i)`.
pub fn g_alpha(alpha: f64, p: &IntervalSet) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let k = p.k();
    let mut sum = 0.0;
    for (idx, &pi) in p.probs().iter().enumerate() {
        let i = idx + 1;
        sum += pi * alpha.powi(i as i32) * (1.0 - alpha).powi((k - i) as i32);
    }
    Ok(1.0 - sum)
}

/// Derivative of [`g_alpha`]:
/// `g'(alpha) = sum_i (K alpha - i) p_i alpha^(i-1) (1 - alpha)^(K-i-1)`.
pub fn g_prime(alpha: f64, p: &IntervalSet) -> Result<f64> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha {alpha} outside (0, 1)")));
    }
    Ok(g_prime_unchecked(alpha, p))
}

fn g_prime_unchecked(alpha: f64, p: &IntervalSet) -> f64 {
    let k = p.k();
    let kf = k as f64;
    let mut sum = 0.0;
    for (idx, &pi) in p.probs().iter().enumerate() {
        let i = idx + 1;
        if i == k {
            // (K alpha - K) (1 - alpha)^(-1) cancels to -K analytically.
            sum += -kf * pi * alpha.powi((k - 1) as i32);
        } else {
            sum += (kf * alpha - i as f64)
                * pi
                * alpha.powi((i - 1) as i32)
                * (1.0 - alpha).powi((k - i - 1) as i32);
        }
    }
    sum
}

/// Smallest `alpha` in (0,1) with `g'(alpha) = 0`, found by a 1000-point
/// sign-change grid scan plus bisection to interval width 1e-9. Returns 1
/// when no interior stationary point exists.
pub fn smallest_positive_stationary_point(p: &IntervalSet) -> f64 {
    let step = 1.0 / STATIONARY_GRID as f64;
    let mut prev_alpha = step;
    let mut prev_val = g_prime_unchecked(prev_alpha, p);
    if prev_val == 0.0 {
        return prev_alpha;
    }
    for j in 2..STATIONARY_GRID {
        let alpha = j as f64 * step;
        let val = g_prime_unchecked(alpha, p);
        if val == 0.0 {
            return alpha;
        }
        if prev_val * val < 0.0 {
            let (mut lo, mut hi) = (prev_alpha, alpha);
            let mut f_lo = prev_val;
            while hi - lo > STATIONARY_TOL {
                let mid = 0.5 * (lo + hi);
                let f_mid = g_prime_unchecked(mid, p);
                if f_mid == 0.0 {
                    return mid;
                }
                if f_lo * f_mid < 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    f_lo = f_mid;
                }
            }
            return 0.5 * (lo + hi);
        }
        prev_alpha = alpha;
        prev_val = val;
    }
    1.0
}

/// The sufficient reversal-hardness condition: returns
/// `(sum_i (K - 2i) p_i, value > 0)`.
pub fn hardness_condition(p: &IntervalSet) -> (f64, bool) {
    let k = p.k() as f64;
    let value = p
        .probs()
        .iter()
        .enumerate()
        .map(|(idx, &pi)| (k - 2.0 * (idx + 1) as f64) * pi)
        .sum::<f64>();
    (value, value > 0.0)
}

/// Assembles condition value, `alpha_0` and the classification.
pub fn classify(p: &IntervalSet) -> HardnessReport {
    let (condition_value, is_hard_sufficient) = hardness_condition(p);
    let alpha0 = smallest_positive_stationary_point(p);
    let classification = if (alpha0 - 0.5).abs() <= BOUNDARY_EPS {
        HardnessClass::Boundary
    } else if alpha0 < 0.5 {
        HardnessClass::Hard
    } else {
        HardnessClass::Easy
    };
    HardnessReport {
        condition_value,
        is_hard_sufficient,
        alpha0,
        classification,
    }
}

/// Result of the local-search reversal attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackResult {
    pub best_candidate: CancelableTemplate,
    /// Entries whose K specified characters all agree with the candidate.
    pub matched_entries: usize,
    /// Set when the true template was supplied for comparison.
    pub recovered_exact: Option<bool>,
    pub iterations_used: usize,
    pub restarts_used: usize,
}

/// Per-position counts of specified characters, the attack's view of the NDB.
struct CharCounts {
    /// zeros[p] = entries specifying character `0` at position p.
    zeros: Vec<u64>,
    /// ones[p] = entries specifying character `1` at position p.
    ones: Vec<u64>,
}

impl CharCounts {
    fn build(ndb: &NegativeDatabase) -> Self {
        let m = ndb.m();
        let mut zeros = vec![0u64; m];
        let mut ones = vec![0u64; m];
        for entry in ndb.entries() {
            for (pos, c) in entry.chars().iter().enumerate() {
                match c {
                    Trit::Zero => zeros[pos] += 1,
                    Trit::One => ones[pos] += 1,
                    Trit::Star => {}
                }
            }
        }
        CharCounts { zeros, ones }
    }

    /// Total specified characters agreeing with the candidate bits.
    fn agreement(&self, bits: &[u8]) -> u64 {
        bits.iter()
            .enumerate()
            .map(|(p, &bit)| {
                if bit == 0 {
                    self.zeros[p]
                } else {
                    self.ones[p]
                }
            })
            .sum()
    }

    /// Change in agreement if bit p were flipped.
    fn flip_delta(&self, bits: &[u8], p: usize) -> i64 {
        if bits[p] == 0 {
            self.ones[p] as i64 - self.zeros[p] as i64
        } else {
            self.zeros[p] as i64 - self.ones[p] as i64
        }
    }
}

pub(crate) struct RestartOutcome {
    pub(crate) bits: Vec<u8>,
    pub(crate) objective: u64,
    pub(crate) iterations: usize,
    /// Objective after every accepted move, for the monotonicity check.
    #[allow(dead_code)]
    pub(crate) trace: Vec<u64>,
}

/// One greedy descent on the agreement objective: move to the strictly best
/// single-bit flip (ties broken by lowest index), allow at most m
/// consecutive sideways moves, stop early when the objective hits 0.
fn restart_descent(counts: &CharCounts, m: usize, max_iters: usize, seed: u64) -> RestartOutcome {
    let mut rng = SplitMix64::new(seed);
    let mut bits: Vec<u8> = (0..m).map(|_| (rng.next_u64() & 1) as u8).collect();
    let mut objective = counts.agreement(&bits);
    let mut trace = vec![objective];
    let mut sideways = 0usize;
    let mut iterations = 0usize;

    while iterations < max_iters && objective > 0 {
        iterations += 1;
        let mut best_delta = i64::MAX;
        let mut best_pos = 0usize;
        for p in 0..m {
            let delta = counts.flip_delta(&bits, p);
            if delta < best_delta {
                best_delta = delta;
                best_pos = p;
            }
        }
        if best_delta > 0 {
            break; // strict local minimum
        }
        if best_delta == 0 {
            if sideways >= m {
                break;
            }
            sideways += 1;
        } else {
            sideways = 0;
        }
        bits[best_pos] ^= 1;
        objective = (objective as i64 + best_delta) as u64;
        trace.push(objective);
    }

    RestartOutcome {
        bits,
        objective,
        iterations,
        trace,
    }
}

/// Counts entries whose specified characters all agree with the candidate.
pub fn matched_entry_count(ndb: &NegativeDatabase, candidate: &CancelableTemplate) -> usize {
    ndb.entries()
        .iter()
        .filter(|entry| {
            entry
                .chars()
                .iter()
                .zip(candidate.bits())
                .all(|(c, &bit)| match c {
                    Trit::Star => true,
                    Trit::Zero => bit == 0,
                    Trit::One => bit == 1,
                })
        })
        .count()
}

/// Local-search reversal attack with random restarts.
///
/// Each restart starts from a uniformly random string and greedily descends
/// the agreement objective (total specified characters of the NDB agreeing
/// with the candidate, the dictionary score up to sign). The best candidate
/// across restarts is returned. Restarts run in parallel with per-restart
/// seeds derived from `seed`, and the selection is identical to sequential
/// best-of-restarts, so the result is deterministic regardless of thread
/// count. Pass the hidden template as `truth` to have `recovered_exact`
/// filled in; verification deployments do not have it.
pub fn local_search_attack(
    ndb: &NegativeDatabase,
    max_iters: usize,
    restarts: usize,
    seed: u64,
    truth: Option<&CancelableTemplate>,
) -> AttackResult {
    let m = ndb.m();
    let counts = CharCounts::build(ndb);
    let restarts = restarts.max(1);

    let outcomes: Vec<RestartOutcome> = (0..restarts)
        .into_par_iter()
        .map(|t| restart_descent(&counts, m, max_iters, derive_seed(seed, t as u64)))
        .collect();

    let iterations_used = outcomes.iter().map(|o| o.iterations).sum();
    let best = outcomes
        .iter()
        .enumerate()
        .min_by_key(|(idx, o)| (o.objective, *idx))
        .map(|(_, o)| o)
        .expect("at least one restart");

    let best_candidate =
        CancelableTemplate::new(best.bits.clone()).expect("descent bits are binary");
    let matched_entries = matched_entry_count(ndb, &best_candidate);
    let recovered_exact = truth.map(|t| &best_candidate == t);

    AttackResult {
        best_candidate,
        matched_entries,
        recovered_exact,
        iterations_used,
        restarts_used: restarts,
    }
}

#[cfg(test)]
pub(crate) fn descent_trace_for_tests(
    ndb: &NegativeDatabase,
    max_iters: usize,
    seed: u64,
) -> RestartOutcome {
    restart_descent(&CharCounts::build(ndb), ndb.m(), max_iters, seed)
}
