//! Persistence of enrollment records.
//!
//! The store keeps only second-level data: per subject, the negative
//! database and its public parameters. First-level templates, raw features
//! and tokens are never written, and the line-oriented text format makes
//! that auditable: everything after a record header is a ternary string.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};
use crate::ndb::{IntervalSet, NegativeDatabase, NegativeEntry};

const MAGIC: &str = "DCPVSTORE v1";

/// One enrolled subject: the stored NDB plus the interval set it was
/// generated with. `created_at` is informational, in-memory only, and
/// excluded from equality.
#[derive(Debug, Clone)]
pub struct EnrollmentRecord {
    pub subject_id: String,
    pub ndb: NegativeDatabase,
    pub intervals: IntervalSet,
    pub created_at: Option<String>,
}

impl PartialEq for EnrollmentRecord {
    fn eq(&self, other: &Self) -> bool {
        self.subject_id == other.subject_id
            && self.ndb == other.ndb
            && self.intervals == other.intervals
    }
}

impl EnrollmentRecord {
    pub fn new(
        subject_id: impl Into<String>,
        ndb: NegativeDatabase,
        intervals: IntervalSet,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        validate_subject_id(&subject_id)?;
        if ndb.r() == 0 {
            return Err(Error::Validation(
                "only generated NDBs (r >= 1) can be stored".into(),
            ));
        }
        if intervals.k() != ndb.k() {
            return Err(Error::Validation(format!(
                "interval set has K = {} but NDB has K = {}",
                intervals.k(),
                ndb.k()
            )));
        }
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs().to_string());
        Ok(EnrollmentRecord {
            subject_id,
            ndb,
            intervals,
            created_at,
        })
    }
}

fn validate_subject_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Validation("subject id must be non-empty".into()));
    }
    if id.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Validation(format!(
            "subject id {id:?} must not contain whitespace"
        )));
    }
    Ok(())
}

/// In-memory enrollment store; records are kept sorted by subject id so
/// serialization is canonical.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnrollmentStore {
    records: BTreeMap<String, EnrollmentRecord>,
}

impl EnrollmentStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, subject_id: &str) -> Option<&EnrollmentRecord> {
        self.records.get(subject_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnrollmentRecord> {
        self.records.values()
    }

    /// Adds a record; duplicate subject ids are refused.
    pub fn insert(&mut self, record: EnrollmentRecord) -> Result<()> {
        if self.records.contains_key(&record.subject_id) {
            return Err(Error::Validation(format!(
                "subject {:?} is already enrolled; revoke it first",
                record.subject_id
            )));
        }
        self.records.insert(record.subject_id.clone(), record);
        Ok(())
    }

    /// Removes a subject's record. Re-enrolling afterwards with a fresh
    /// second-level token produces an NDB unlinkable to the removed one.
    pub fn revoke(&mut self, subject_id: &str) -> Result<EnrollmentRecord> {
        self.records
            .remove(subject_id)
            .ok_or_else(|| Error::Validation(format!("no record for subject {subject_id:?}")))
    }

    /// Serializes the store; byte-deterministic for equal contents.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        for record in self.records.values() {
            let probs = record
                .intervals
                .probs()
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(
                out,
                "REC {} m={} K={} r={} P={}",
                record.subject_id,
                record.ndb.m(),
                record.ndb.k(),
                record.ndb.r(),
                probs
            );
            for entry in record.ndb.entries() {
                out.push_str(&entry.to_text());
                out.push('\n');
            }
            out.push_str("END\n");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first == MAGIC => {}
            Some((_, first)) => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("bad magic {first:?}, expected {MAGIC:?}"),
                })
            }
            None => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "empty store file".into(),
                })
            }
        }

        let mut store = EnrollmentStore::new();
        while let Some((idx, line)) = lines.next() {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let header = parse_record_header(line, line_no)?;
            let n = header.m * header.r;
            let mut entries = Vec::with_capacity(n);
            for _ in 0..n {
                let (entry_idx, entry_line) = lines.next().ok_or(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "record {} truncated: expected {n} entries",
                        header.subject_id
                    ),
                })?;
                let entry = NegativeEntry::parse(entry_line).map_err(|e| Error::Parse {
                    line: entry_idx + 1,
                    msg: format!("record {}: {e}", header.subject_id),
                })?;
                entries.push(entry);
            }
            match lines.next() {
                Some((_, "END")) => {}
                Some((end_idx, l)) => {
                    return Err(Error::Parse {
                        line: end_idx + 1,
                        msg: format!("expected END for record {}, got {l:?}", header.subject_id),
                    })
                }
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("missing END for record {}", header.subject_id),
                    })
                }
            }

            let ndb = NegativeDatabase::from_parts(header.m, header.k, header.r, entries).map_err(
                |e| Error::Parse {
                    line: line_no,
                    msg: format!("record {}: {e}", header.subject_id),
                },
            )?;
            let intervals = IntervalSet::new(header.probs).map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("record {}: {e}", header.subject_id),
            })?;
            if intervals.k() != header.k {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "record {}: P has {} probabilities but K = {}",
                        header.subject_id,
                        intervals.k(),
                        header.k
                    ),
                });
            }
            let record = EnrollmentRecord {
                subject_id: header.subject_id.clone(),
                ndb,
                intervals,
                created_at: None,
            };
            store.insert(record).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        }
        Ok(store)
    }
}

struct RecordHeader {
    subject_id: String,
    m: usize,
    k: usize,
    r: usize,
    probs: Vec<f64>,
}

fn parse_record_header(line: &str, line_no: usize) -> Result<RecordHeader> {
    let bad = |msg: String| Error::Parse { line: line_no, msg };
    let mut parts = line.split(' ');
    if parts.next() != Some("REC") {
        return Err(bad(format!("expected REC header, got {line:?}")));
    }
    let subject_id = parts
        .next()
        .ok_or_else(|| bad("missing subject id".into()))?
        .to_string();
    validate_subject_id(&subject_id).map_err(|e| bad(e.to_string()))?;

    let mut field = |key: &str| -> Result<String> {
        let tok = parts
            .next()
            .ok_or_else(|| bad(format!("missing {key}= field")))?;
        tok.strip_prefix(key)
            .and_then(|rest| rest.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected {key}=..., got {tok:?}")))
    };
    let m: usize = field("m")?
        .parse()
        .map_err(|_| bad("invalid m value".into()))?;
    let k: usize = field("K")?
        .parse()
        .map_err(|_| bad("invalid K value".into()))?;
    let r: usize = field("r")?
        .parse()
        .map_err(|_| bad("invalid r value".into()))?;
    if r == 0 {
        return Err(bad("r must be positive".into()));
    }
    let probs = field("P")?
        .split(',')
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| bad(format!("invalid probability {s:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(RecordHeader {
        subject_id,
        m,
        k,
        r,
        probs,
    })
}

/// Writes the store atomically (temp file in the same directory, then
/// rename).
pub fn save(store: &EnrollmentStore, path: &Path) -> Result<()> {
    let text = store.to_text();
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Loads and fully re-validates a store file.
pub fn load(path: &Path) -> Result<EnrollmentStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EnrollmentStore::from_text(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cancelable::CancelableTemplate;
    use crate::ndb::generate_ndb;
    use crate::rng::SplitMix64;

    fn intervals() -> IntervalSet {
        IntervalSet::new(vec![0.8, 0.1, 0.1]).unwrap()
    }

    fn record(id: &str, seed: u64) -> EnrollmentRecord {
        let mut rng = SplitMix64::new(seed);
        let bits: Vec<u8> = (0..32).map(|_| (rng.next_u64() & 1) as u8).collect();
        let b = CancelableTemplate::new(bits).unwrap();
        let g = generate_ndb(&b, seed ^ 0xBEEF, 2, &intervals()).unwrap();
        EnrollmentRecord::new(id, g.ndb, intervals()).unwrap()
    }

    fn store_with(ids: &[&str]) -> EnrollmentStore {
        let mut store = EnrollmentStore::new();
        for (i, id) in ids.iter().enumerate() {
            store.insert(record(id, i as u64 + 1)).unwrap();
        }
        store
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.txt");
        let store = store_with(&["alice", "bob", "carol"]);
        save(&store, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, store);
    }

    #[test]
    fn saves_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = store_with(&["zeta", "alpha"]);
        let p1 = dir.path().join("a.txt");
        let p2 = dir.path().join("b.txt");
        save(&store, &p1).unwrap();
        save(&store, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        // canonical ordering: alpha before zeta regardless of insert order
        let text = fs::read_to_string(&p1).unwrap();
        let alpha = text.find("REC alpha").unwrap();
        let zeta = text.find("REC zeta").unwrap();
        assert!(alpha < zeta);
    }

    #[test]
    fn empty_store_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        save(&EnrollmentStore::new(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "DCPVSTORE v1\n");
        assert!(load(&path).unwrap().is_empty());
    }

    #[test]
    fn tampered_entry_is_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.txt");
        save(&store_with(&["alice"]), &path).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        // corrupt the first entry character on line 3
        let pos = text.find('\n').unwrap() + 1;
        let pos = text[pos..].find('\n').unwrap() + pos + 1;
        text.replace_range(pos..pos + 1, "2");
        fs::write(&path, &text).unwrap();
        match load(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("alice"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_subject_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.txt");
        let store = store_with(&["alice"]);
        save(&store, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let body = text.strip_prefix("DCPVSTORE v1\n").unwrap();
        let doubled = format!("DCPVSTORE v1\n{body}{body}");
        assert!(EnrollmentStore::from_text(&doubled).is_err());
    }

    #[test]
    fn wrong_specified_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.txt");
        save(&store_with(&["alice"]), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        // make the first entry all-star: specified count 0 instead of K
        let pos = text.find('\n').unwrap() + 1;
        let pos2 = text[pos..].find('\n').unwrap() + pos + 1;
        let end = text[pos2..].find('\n').unwrap() + pos2;
        let mut bad = text.clone();
        bad.replace_range(pos2..end, &"*".repeat(32));
        assert!(EnrollmentStore::from_text(&bad).is_err());
    }

    #[test]
    fn insert_duplicate_errors() {
        let mut store = store_with(&["alice"]);
        assert!(store.insert(record("alice", 9)).is_err());
    }

    #[test]
    fn revoke_then_lookup_fails() {
        let mut store = store_with(&["alice", "bob"]);
        let removed = store.revoke("alice").unwrap();
        assert_eq!(removed.subject_id, "alice");
        assert!(store.get("alice").is_none());
        assert!(store.revoke("alice").is_err());
        assert!(EnrollmentStore::new().revoke("nobody").is_err());
    }

    #[test]
    fn reenrollment_with_fresh_token_changes_entries() {
        let mut rng = SplitMix64::new(55);
        let bits: Vec<u8> = (0..64).map(|_| (rng.next_u64() & 1) as u8).collect();
        let b = CancelableTemplate::new(bits).unwrap();
        let mut differing = 0usize;
        let mut total = 0usize;
        for trial in 0..20u64 {
            let old = generate_ndb(&b, trial * 2, 4, &intervals()).unwrap().ndb;
            let new = generate_ndb(&b, trial * 2 + 1, 4, &intervals())
                .unwrap()
                .ndb;
            for (a, c) in old.entries().iter().zip(new.entries()) {
                total += 1;
                if a != c {
                    differing += 1;
                }
            }
        }
        let frac = differing as f64 / total as f64;
        assert!(
            frac >= 0.99,
            "only {frac} of entries differ after re-keying"
        );
    }

    #[test]
    fn stored_entries_never_parse_as_templates() {
        let store = store_with(&["alice", "bob"]);
        for record in store.iter() {
            for entry in record.ndb.entries() {
                assert!(CancelableTemplate::from_bit_str(&entry.to_text()).is_err());
            }
        }
    }

    #[test]
    fn subject_id_validation() {
        let rec = record("ok", 3);
        assert!(EnrollmentRecord::new("has space", rec.ndb.clone(), intervals()).is_err());
        assert!(EnrollmentRecord::new("", rec.ndb.clone(), intervals()).is_err());
    }
}
