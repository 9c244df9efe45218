//! Second-level protection: K-hidden negative databases.
//!
//! A negative database (NDB) hides a binary template `b` as `N = m * r`
//! ternary strings over `{0,1,*}`. Every entry specifies exactly `K`
//! positions, of which `i >= 1` carry the flipped bit of `b` and `K - i`
//! carry `b`'s bit, so the template itself never matches any entry. The
//! type `i` is drawn from the interval set `P = (p_1..p_K)`.
//!
//! Matching a query against the NDB is defined by the classical dictionary
//! rule (per specified character: agree -1, disagree +1, `*` 0, summed over
//! all entries) and computed by an equivalent integer matrix rule: with
//! entries mapped to rows over `{-1,0,+1}` (`0 -> -1`, `1 -> +1`, `* -> 0`)
//! and the query in bipolar form, the correlation `raw = sum_z <row_z, q>`
//! equals the negated dictionary sum exactly. The normalized distance is
//! `arccos(raw / (N*K)) / pi`, so an unrelated query sits near 0.5 and the
//! enrolled template strictly below it.

use rayon::prelude::*;

use crate::cancelable::{BipolarTemplate, CancelableTemplate};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::security;

/// Probability mass `p_1..p_K` over entry types, with its cumulative
/// boundaries `0 = c_0 <= ... <= c_K = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSet {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl IntervalSet {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 3 {
            return Err(Error::Parameter(format!(
                "interval set needs K >= 3 entry types, got {}",
                probs.len()
            )));
        }
        if let Some(pos) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter(format!(
                "interval probability p_{} is invalid",
                pos + 1
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "interval probabilities sum to {sum}, expected 1"
            )));
        }
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Ok(IntervalSet { probs, cumulative })
    }

    /// Number of specified characters per entry.
    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Maps a draw `v` in (0,1) to the 1-based type whose interval contains it.
    pub fn select_type(&self, v: f64) -> usize {
        for (idx, c) in self.cumulative.iter().enumerate() {
            if v < *c {
                return idx + 1;
            }
        }
        self.probs.len()
    }
}

/// One ternary character of a negative entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trit {
    Zero,
    One,
    Star,
}

impl Trit {
    pub fn to_char(self) -> char {
        match self {
            Trit::Zero => '0',
            Trit::One => '1',
            Trit::Star => '*',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            '0' => Ok(Trit::Zero),
            '1' => Ok(Trit::One),
            '*' => Ok(Trit::Star),
            other => Err(Error::Validation(format!(
                "invalid negative entry character {other:?}"
            ))),
        }
    }

    fn from_bit(bit: u8) -> Trit {
        if bit == 1 {
            Trit::One
        } else {
            Trit::Zero
        }
    }
}

/// Ternary string with exactly K specified (non-`*`) positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeEntry {
    chars: Vec<Trit>,
}

impl NegativeEntry {
    pub fn new(chars: Vec<Trit>) -> Self {
        NegativeEntry { chars }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let chars = s.chars().map(Trit::from_char).collect::<Result<_>>()?;
        Ok(NegativeEntry { chars })
    }

    pub fn chars(&self) -> &[Trit] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn specified_count(&self) -> usize {
        self.chars
            .iter()
            .filter(|c| !matches!(c, Trit::Star))
            .count()
    }

    pub fn to_text(&self) -> String {
        self.chars.iter().map(|c| c.to_char()).collect()
    }
}

/// The stored second-level form of a template: `N` negative entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeDatabase {
    m: usize,
    k: usize,
    r: usize,
    entries: Vec<NegativeEntry>,
}

impl NegativeDatabase {
    /// Assembles an NDB from parts, validating shape invariants. `r = 0`
    /// marks a synthetic database (unit tests, hand-built instances) whose
    /// entry count is unconstrained; generated and stored databases carry
    /// `r >= 1` and must satisfy `N = m * r`.
    pub fn from_parts(m: usize, k: usize, r: usize, entries: Vec<NegativeEntry>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Parameter(
                "template length m must be positive".into(),
            ));
        }
        if k > m {
            return Err(Error::Parameter(format!(
                "specified count K ({k}) exceeds template length m ({m})"
            )));
        }
        if r > 0 && entries.len() != m * r {
            return Err(Error::Validation(format!(
                "entry count {} does not equal m*r = {}",
                entries.len(),
                m * r
            )));
        }
        for (z, entry) in entries.iter().enumerate() {
            if entry.len() != m {
                return Err(Error::Validation(format!(
                    "entry {z} has length {}, expected {m}",
                    entry.len()
                )));
            }
            if entry.specified_count() != k {
                return Err(Error::Validation(format!(
                    "entry {z} has {} specified characters, expected {k}",
                    entry.specified_count()
                )));
            }
        }
        Ok(NegativeDatabase { m, k, r, entries })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[NegativeEntry] {
        &self.entries
    }

    /// Serializes to the text form: header `NDB1 m=<m> K=<K> r=<r>` followed
    /// by one entry per line, LF newlines, no trailing whitespace.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.m + 1) * (self.entries.len() + 1));
        out.push_str(&format!("NDB1 m={} K={} r={}\n", self.m, self.k, self.r));
        for entry in &self.entries {
            out.push_str(&entry.to_text());
            out.push('\n');
        }
        out
    }

    /// Parses the text form, re-validating every invariant.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty input, expected NDB1 header".into(),
        })?;
        let (m, k, r) = parse_ndb_header(header)?;
        if r == 0 {
            return Err(Error::Parse {
                line: 1,
                msg: "r must be positive".into(),
            });
        }
        let mut entries = Vec::with_capacity(m * r);
        for (idx, line) in lines.enumerate() {
            let entry = NegativeEntry::parse(line).map_err(|e| Error::Parse {
                line: idx + 2,
                msg: e.to_string(),
            })?;
            entries.push(entry);
        }
        NegativeDatabase::from_parts(m, k, r, entries)
    }
}

fn parse_ndb_header(header: &str) -> Result<(usize, usize, usize)> {
    let bad = |msg: &str| Error::Parse {
        line: 1,
        msg: msg.into(),
    };
    let mut parts = header.split(' ');
    if parts.next() != Some("NDB1") {
        return Err(bad("expected NDB1 magic"));
    }
    let mut take = |key: &str| -> Result<usize> {
        let tok = parts
            .next()
            .ok_or_else(|| bad(&format!("missing {key}= field")))?;
        let value = tok
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .ok_or_else(|| bad(&format!("expected {key}=<int>, got {tok:?}")))?;
        value
            .parse::<usize>()
            .map_err(|_| bad(&format!("invalid {key} value {value:?}")))
    };
    let m = take("m")?;
    let k = take("K")?;
    let r = take("r")?;
    Ok((m, k, r))
}

/// Output of NDB generation: the database plus the per-entry types `i_z`.
///
/// The types are generation-time metadata. They are never serialized: an
/// entry of type K, for instance, would reveal K template bits outright.
#[derive(Debug, Clone)]
pub struct GeneratedNdb {
    pub ndb: NegativeDatabase,
    pub entry_types: Vec<u8>,
}

/// Negative cancelable template transformation: produces one entry.
///
/// Draws `v_r` in (0,1) to pick the type `i` from the interval set, selects
/// `K` distinct positions uniformly without replacement, writes the flipped
/// bit of `b` at the first `i` selected positions and `b`'s bit at the
/// remaining `K - i`. Advances `rng` deterministically.
pub fn nctt(
    b: &CancelableTemplate,
    p: &IntervalSet,
    rng: &mut SplitMix64,
) -> Result<(NegativeEntry, u8)> {
    let m = b.len();
    let k = p.k();
    if k > m {
        return Err(Error::Parameter(format!(
            "K ({k}) exceeds template length m ({m})"
        )));
    }
    let entry_type = p.select_type(rng.next_open01());

    // Partial Fisher-Yates draw of K distinct positions, in draw order.
    let mut indices: Vec<u32> = (0..m as u32).collect();
    let mut chars = vec![Trit::Star; m];
    for t in 0..k {
        let j = t + rng.next_below((m - t) as u64) as usize;
        indices.swap(t, j);
        let pos = indices[t] as usize;
        let bit = b.bits()[pos];
        chars[pos] = if t < entry_type {
            Trit::from_bit(1 - bit)
        } else {
            Trit::from_bit(bit)
        };
    }
    Ok((NegativeEntry::new(chars), entry_type as u8))
}

/// Generates the `N = m * r` entry NDB hiding `b`, seeded by the
/// second-level token. Refuses interval sets that fail the
/// reversal-hardness condition; see [`generate_ndb_unchecked`].
pub fn generate_ndb(
    b: &CancelableTemplate,
    k2: u64,
    r: usize,
    p: &IntervalSet,
) -> Result<GeneratedNdb> {
    let (value, hard) = security::hardness_condition(p);
    if !hard {
        return Err(Error::NonHardIntervals { value });
    }
    generate_ndb_unchecked(b, k2, r, p)
}

/// [`generate_ndb`] without the hardness gate, for experiments that need
/// deliberately weak interval sets.
pub fn generate_ndb_unchecked(
    b: &CancelableTemplate,
    k2: u64,
    r: usize,
    p: &IntervalSet,
) -> Result<GeneratedNdb> {
    if r == 0 {
        return Err(Error::Parameter("r must be positive".into()));
    }
    let m = b.len();
    let n = m * r;
    let mut rng = SplitMix64::new(k2);
    let mut entries = Vec::with_capacity(n);
    let mut entry_types = Vec::with_capacity(n);
    for _ in 0..n {
        let (entry, ty) = nctt(b, p, &mut rng)?;
        entries.push(entry);
        entry_types.push(ty);
    }
    let ndb = NegativeDatabase::from_parts(m, p.k(), r, entries)?;
    Ok(GeneratedNdb { ndb, entry_types })
}

/// Row-wise real view of an NDB: `0 -> -1`, `1 -> +1`, `* -> 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealNdbMatrix {
    n: usize,
    m: usize,
    k: usize,
    rows: Vec<i8>,
}

impl RealNdbMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, z: usize) -> &[i8] {
        &self.rows[z * self.m..(z + 1) * self.m]
    }

    /// Inverse of [`to_real`]: maps rows back to ternary entries.
    pub fn to_entries(&self) -> Vec<NegativeEntry> {
        (0..self.n)
            .map(|z| {
                NegativeEntry::new(
                    self.row(z)
                        .iter()
                        .map(|&v| match v {
                            -1 => Trit::Zero,
                            1 => Trit::One,
                            _ => Trit::Star,
                        })
                        .collect(),
                )
            })
            .collect()
    }
}

/// Converts an NDB to its real matrix form.
pub fn to_real(ndb: &NegativeDatabase) -> RealNdbMatrix {
    let mut rows = Vec::with_capacity(ndb.len() * ndb.m());
    for entry in ndb.entries() {
        for c in entry.chars() {
            rows.push(match c {
                Trit::Zero => -1,
                Trit::One => 1,
                Trit::Star => 0,
            });
        }
    }
    RealNdbMatrix {
        n: ndb.len(),
        m: ndb.m(),
        k: ndb.k(),
        rows,
    }
}

/// Exact matching result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchScore {
    /// Bipolar correlation `sum_z <row_z, q>`, an integer in `[-N*K, N*K]`.
    pub raw: i64,
    /// Dictionary-rule sum; always `-raw`.
    pub dict: i64,
    /// `arccos(raw / (N*K)) / pi`, in `[0, 1]`.
    pub distance: f64,
}

fn distance_from_raw(raw: i64, n: usize, k: usize) -> Result<f64> {
    let nk = (n as i64) * (k as i64);
    if nk == 0 {
        return Err(Error::UndefinedDistance);
    }
    let x = (raw as f64 / nk as f64).clamp(-1.0, 1.0);
    Ok(x.acos() / std::f64::consts::PI)
}

fn score_from_raw(raw: i64, n: usize, k: usize) -> Result<MatchScore> {
    Ok(MatchScore {
        raw,
        dict: -raw,
        distance: distance_from_raw(raw, n, k)?,
    })
}

/// Classical dictionary matching: per specified character, -1 on agreement
/// with the query bit, +1 on disagreement, 0 for `*`, summed over all
/// entries. Kept as the independent oracle for the matrix kernels.
pub fn match_dictionary(ndb: &NegativeDatabase, q: &CancelableTemplate) -> Result<i64> {
    if q.len() != ndb.m() {
        return Err(Error::Dimension(format!(
            "query length {} does not match NDB entry length {}",
            q.len(),
            ndb.m()
        )));
    }
    let mut sum = 0i64;
    for entry in ndb.entries() {
        for (c, &bit) in entry.chars().iter().zip(q.bits()) {
            sum += match (c, bit) {
                (Trit::Star, _) => 0,
                (Trit::Zero, 0) | (Trit::One, 1) => -1,
                _ => 1,
            };
        }
    }
    Ok(sum)
}

/// Matrix-rule matching over the real view, exact in integer arithmetic.
pub fn match_fast(matrix: &RealNdbMatrix, q: &BipolarTemplate) -> Result<MatchScore> {
    if q.len() != matrix.m() {
        return Err(Error::Dimension(format!(
            "query length {} does not match NDB entry length {}",
            q.len(),
            matrix.m()
        )));
    }
    let mut raw = 0i64;
    for z in 0..matrix.n() {
        let row = matrix.row(z);
        let mut acc = 0i64;
        for (&rv, &qv) in row.iter().zip(q.values()) {
            acc += i64::from(rv) * i64::from(qv);
        }
        raw += acc;
    }
    score_from_raw(raw, matrix.n(), matrix.k())
}

/// Bit-packed matching kernel.
///
/// Per entry, `spec` masks the specified positions and `val` their values.
/// Agreements against a packed query `Q` are `popcount(!(val ^ Q) & spec)`,
/// and the entry contributes `2 * agreements - K` to the raw score, which is
/// bit-identical to the naive integer sum.
#[derive(Debug, Clone)]
pub struct PackedNdb {
    m: usize,
    k: usize,
    n: usize,
    words: usize,
    spec: Vec<u64>,
    val: Vec<u64>,
}

impl PackedNdb {
    pub fn from_ndb(ndb: &NegativeDatabase) -> Self {
        let words = ndb.m().div_ceil(64).max(1);
        let n = ndb.len();
        let mut spec = vec![0u64; n * words];
        let mut val = vec![0u64; n * words];
        for (z, entry) in ndb.entries().iter().enumerate() {
            for (h, c) in entry.chars().iter().enumerate() {
                let w = z * words + h / 64;
                let bit = 1u64 << (h % 64);
                match c {
                    Trit::Zero => spec[w] |= bit,
                    Trit::One => {
                        spec[w] |= bit;
                        val[w] |= bit;
                    }
                    Trit::Star => {}
                }
            }
        }
        PackedNdb {
            m: ndb.m(),
            k: ndb.k(),
            n,
            words,
            spec,
            val,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    fn pack_query(&self, q: &CancelableTemplate) -> Result<Vec<u64>> {
        if q.len() != self.m {
            return Err(Error::Dimension(format!(
                "query length {} does not match NDB entry length {}",
                q.len(),
                self.m
            )));
        }
        let mut packed = vec![0u64; self.words];
        for (h, &bit) in q.bits().iter().enumerate() {
            if bit == 1 {
                packed[h / 64] |= 1u64 << (h % 64);
            }
        }
        Ok(packed)
    }

    pub fn match_score(&self, q: &CancelableTemplate) -> Result<MatchScore> {
        let packed = self.pack_query(q)?;
        Ok(self.match_packed_query(&packed))
    }

    fn match_packed_query(&self, packed: &[u64]) -> MatchScore {
        let mut agree_total = 0i64;
        for z in 0..self.n {
            let base = z * self.words;
            let vals = &self.val[base..base + self.words];
            let specs = &self.spec[base..base + self.words];
            let mut agree = 0u32;
            for ((v, s), q) in vals.iter().zip(specs).zip(packed) {
                agree += (!(v ^ q) & s).count_ones();
            }
            agree_total += i64::from(agree);
        }
        let raw = 2 * agree_total - (self.n as i64) * (self.k as i64);
        score_from_raw(raw, self.n, self.k).expect("packed kernel is only built for N >= 1, K >= 1")
    }

    /// Scores many queries; parallel, with output order identical to the
    /// sequential evaluation.
    pub fn match_batch(&self, queries: &[CancelableTemplate]) -> Result<Vec<MatchScore>> {
        let packed = queries
            .iter()
            .map(|q| self.pack_query(q))
            .collect::<Result<Vec<_>>>()?;
        Ok(packed
            .par_iter()
            .map(|p| self.match_packed_query(p))
            .collect())
    }
}

/// Accept/reject decision with the underlying score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accepted: bool,
    pub score: MatchScore,
}

/// Matches `q` against the NDB and accepts iff `distance <= threshold`.
pub fn verify(
    ndb: &NegativeDatabase,
    q: &CancelableTemplate,
    threshold: f64,
) -> Result<Verification> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    if ndb.is_empty() || ndb.k() == 0 {
        return Err(Error::UndefinedDistance);
    }
    let score = PackedNdb::from_ndb(ndb).match_score(q)?;
    Ok(Verification {
        accepted: score.distance <= threshold,
        score,
    })
}
