//! dcpv: dual-level cancelable template protection from the command line.
//!
//! Exit codes: 0 success, 1 verification reject, 2 usage or validation
//! error, 3 I/O error.

use std::collections::hash_map::RandomState;
use std::fmt::Write as _;
use std::fs;
use std::hash::{BuildHasher, Hasher};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use dcpv_core::cancelable::{gen_projection_matrix, protect_with_matrix, ProjectionKey};
use dcpv_core::error::Error;
use dcpv_core::eval::{
    distribution_stats, eer, roc_points, unlinkability, unlinkability_scores, KeyMode,
    PipelineConfig,
};
use dcpv_core::features::{competition_code, load_features, write_features, GaborBank, RoiImage};
use dcpv_core::ndb::{generate_ndb, generate_ndb_unchecked, verify, IntervalSet};
use dcpv_core::rng::{derive_seed, hash_bytes};
use dcpv_core::security::{classify, local_search_attack};
use dcpv_core::store::{load as load_store, save as save_store, EnrollmentRecord, EnrollmentStore};

const DEFAULT_THRESHOLD: f64 = 0.48;
const DEFAULT_P: &str = "0.8,0.1,0.1";

#[derive(Parser)]
#[command(
    name = "dcpv",
    about = "Dual-level cancelable biometric template protection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct NdbParams {
    /// Protected template length m_p (must not exceed the feature dimension)
    #[arg(long = "mp", default_value_t = 512)]
    m_p: usize,
    /// Entries per template bit; the NDB holds m_p * r entries
    #[arg(long, default_value_t = 4)]
    r: usize,
    /// Entry-type probabilities p_1,...,p_K
    #[arg(long, default_value = DEFAULT_P)]
    p: String,
}

impl NdbParams {
    fn intervals(&self) -> Result<IntervalSet, Error> {
        IntervalSet::new(parse_probs(&self.p)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fresh token pair (k1, k2)
    Keygen {
        /// Output file; receives `k1=<seed>` and `k2=<seed>` lines
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract competition-code features from PGM (P5) palmprint ROI images
    Extract {
        /// Output feature CSV
        #[arg(long)]
        out: PathBuf,
        /// Orientations in the Gabor bank
        #[arg(long, default_value_t = 6)]
        n_theta: usize,
        /// Odd Gabor kernel size in pixels
        #[arg(long, default_value_t = 35)]
        kernel_size: usize,
        /// Carrier wavelength in pixels
        #[arg(long, default_value_t = 8.0)]
        wavelength: f64,
        /// Gaussian envelope sigma in pixels
        #[arg(long, default_value_t = 4.0)]
        sigma: f64,
        /// Envelope aspect ratio (smaller = more elongated along the line)
        #[arg(long, default_value_t = 0.5)]
        aspect: f64,
        /// Pooling grid per side; feature length is grid^2 * n_theta
        #[arg(long, default_value_t = 8)]
        grid: usize,
        /// Input images; subject/sample ids come from `<id>_<sample>.pgm`
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Enroll every subject of a feature file (first sample each)
    Enroll {
        #[arg(long)]
        features: PathBuf,
        /// First-level token (projection seed), shared by this invocation
        #[arg(long)]
        k1: u64,
        /// Second-level token; per-subject generation seeds derive from it
        #[arg(long)]
        k2: u64,
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        params: NdbParams,
        /// Enroll even if the interval set fails the hardness condition
        #[arg(long)]
        force: bool,
    },
    /// Verify a probe from a feature file against an enrolled subject
    Verify {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        k1: u64,
        /// Claimed identity (store lookup key)
        #[arg(long)]
        id: String,
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Feature row to use as the probe (defaults to the claimed id)
        #[arg(long)]
        probe_id: Option<String>,
    },
    /// Batch evaluation: EER, ROC, score distributions and D_sys
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        /// Output directory for roc.csv, dist.csv and summary.txt
        #[arg(long)]
        out: PathBuf,
        /// One first-level token for all identities (stolen-token worst case)
        #[arg(long, conflicts_with = "per_user_key")]
        shared_key: bool,
        /// Per-identity first-level tokens derived from the seed
        #[arg(long)]
        per_user_key: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        params: NdbParams,
        /// Specified positions per entry; must equal the length of --p
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Histogram bins for the D_sys estimate
        #[arg(long, default_value_t = 100)]
        bins: usize,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
        /// ROC points written to roc.csv (0 keeps every threshold)
        #[arg(long, default_value_t = 200)]
        roc_points: usize,
    },
    /// Hardness analysis of an interval set
    Analyze {
        /// Specified positions per entry
        #[arg(long = "K")]
        k: usize,
        /// Entry-type probabilities p_1,...,p_K
        #[arg(long = "P")]
        p: String,
        /// Optional report file (hardness.txt); always printed to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Local-search reversal attack against a stored record
    Attack {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Optional report file (attack.txt); always printed to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-key unlinkability analysis over a feature file
    Unlink {
        #[arg(long)]
        features: PathBuf,
        /// Output directory for unlink.csv and summary.txt
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[command(flatten)]
        params: NdbParams,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
    },
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}

fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } => 3,
                _ => 2,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<i32, Error> {
    match command {
        Command::Keygen { out } => keygen(&out),
        Command::Extract {
            out,
            n_theta,
            kernel_size,
            wavelength,
            sigma,
            aspect,
            grid,
            images,
        } => {
            let bank = GaborBank {
                n_theta,
                kernel_size,
                wavelength,
                sigma,
                aspect,
            };
            extract(&out, &bank, grid, &images)
        }
        Command::Enroll {
            features,
            k1,
            k2,
            store,
            params,
            force,
        } => enroll(&features, k1, k2, &store, &params, force),
        Command::Verify {
            features,
            k1,
            id,
            store,
            threshold,
            probe_id,
        } => verify_cmd(&features, k1, &id, &store, threshold, probe_id.as_deref()),
        Command::Evaluate {
            features,
            out,
            shared_key,
            per_user_key,
            seed,
            params,
            k,
            bins,
            omega,
            roc_points: n_roc,
        } => {
            let _ = shared_key; // shared is the default; flag kept for symmetry
            let mode = if per_user_key {
                KeyMode::PerUser
            } else {
                KeyMode::Shared
            };
            evaluate(&features, &out, mode, seed, &params, k, bins, omega, n_roc)
        }
        Command::Analyze { k, p, out } => analyze(k, &p, out.as_deref()),
        Command::Attack {
            store,
            id,
            iters,
            restarts,
            seed,
            out,
        } => attack(&store, &id, iters, restarts, seed, out.as_deref()),
        Command::Unlink {
            features,
            out,
            seed,
            params,
            bins,
            omega,
        } => unlink(&features, &out, seed, &params, bins, omega),
    }
}

/// Fresh 64-bit seed from OS-seeded hasher state plus the clock.
fn fresh_seed() -> u64 {
    let mut h = RandomState::new().build_hasher();
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    h.write_u128(now);
    h.finish()
}

fn write_file(path: &Path, content: &str) -> Result<(), Error> {
    fs::write(path, content).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn parse_probs(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::Parameter(format!("invalid probability {tok:?}")))
        })
        .collect()
}

fn keygen(out: &Path) -> Result<i32, Error> {
    let k1 = fresh_seed();
    let k2 = fresh_seed();
    write_file(out, &format!("k1={k1}\nk2={k2}\n"))?;
    println!("wrote token pair to {}", out.display());
    Ok(0)
}

fn extract(out: &Path, bank: &GaborBank, grid: usize, images: &[PathBuf]) -> Result<i32, Error> {
    let mut features = Vec::with_capacity(images.len());
    for path in images {
        let img = RoiImage::from_pgm_file(path)?;
        let values = competition_code(&img, bank, grid)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        let (id, sample) = match stem.rsplit_once('_') {
            Some((id, sample)) if !id.is_empty() && !sample.is_empty() => {
                (id.to_string(), sample.to_string())
            }
            _ => (stem, "0".to_string()),
        };
        features.push(dcpv_core::cancelable::FeatureVector::new(
            id, sample, values,
        )?);
    }
    write_features(out, &features)?;
    println!(
        "extracted {} feature vectors (dimension {}) to {}",
        features.len(),
        features.first().map(|f| f.dim()).unwrap_or(0),
        out.display()
    );
    Ok(0)
}

fn enroll(
    features_path: &Path,
    k1: u64,
    k2: u64,
    store_path: &Path,
    params: &NdbParams,
    force: bool,
) -> Result<i32, Error> {
    let intervals = params.intervals()?;
    let features = load_features(features_path, None)?;
    if features.is_empty() {
        return Err(Error::Parameter("feature file has no rows".into()));
    }
    let m_f = features[0].dim();
    let key = ProjectionKey::new(k1, m_f, params.m_p)?;
    let matrix = gen_projection_matrix(&key)?;

    let mut store = if store_path.exists() {
        load_store(store_path)?
    } else {
        EnrollmentStore::new()
    };

    let mut enrolled = 0usize;
    let mut seen: Vec<&str> = Vec::new();
    for row in &features {
        if seen.contains(&row.subject_id.as_str()) {
            continue; // first sample per subject enrolls
        }
        seen.push(&row.subject_id);
        let template = protect_with_matrix(row, &matrix)?;
        let subject_k2 = derive_seed(k2, hash_bytes(row.subject_id.as_bytes()));
        let generated = if force {
            generate_ndb_unchecked(&template, subject_k2, params.r, &intervals)?
        } else {
            generate_ndb(&template, subject_k2, params.r, &intervals)?
        };
        store.insert(EnrollmentRecord::new(
            row.subject_id.clone(),
            generated.ndb,
            intervals.clone(),
        )?)?;
        enrolled += 1;
    }
    save_store(&store, store_path)?;
    println!(
        "enrolled {enrolled} subjects ({} total) into {}",
        store.len(),
        store_path.display()
    );
    Ok(0)
}

fn verify_cmd(
    features_path: &Path,
    k1: u64,
    id: &str,
    store_path: &Path,
    threshold: f64,
    probe_id: Option<&str>,
) -> Result<i32, Error> {
    let store = load_store(store_path)?;
    let record = store
        .get(id)
        .ok_or_else(|| Error::Validation(format!("no record for subject {id:?}")))?;

    let features = load_features(features_path, None)?;
    let probe_id = probe_id.unwrap_or(id);
    let probe = features
        .iter()
        .find(|f| f.subject_id == probe_id)
        .ok_or_else(|| Error::Validation(format!("no feature row for probe id {probe_id:?}")))?;

    let key = ProjectionKey::new(k1, probe.dim(), record.ndb.m())?;
    let template = protect_with_matrix(probe, &gen_projection_matrix(&key)?)?;
    let result = verify(&record.ndb, &template, threshold)?;
    println!(
        "subject={id} probe={probe_id} distance={:.6} raw={} threshold={threshold} decision={}",
        result.score.distance,
        result.score.raw,
        if result.accepted { "ACCEPT" } else { "REJECT" }
    );
    Ok(if result.accepted { 0 } else { 1 })
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    features_path: &Path,
    out_dir: &Path,
    mode: KeyMode,
    seed: u64,
    params: &NdbParams,
    k: usize,
    bins: usize,
    omega: f64,
    n_roc: usize,
) -> Result<i32, Error> {
    let intervals = params.intervals()?;
    if intervals.k() != k {
        return Err(Error::Parameter(format!(
            "--k {k} does not match the {} probabilities in --p",
            intervals.k()
        )));
    }
    let features = load_features(features_path, None)?;
    let cfg = PipelineConfig {
        m_p: params.m_p,
        r: params.r,
        intervals,
        seed,
    };

    let scores = dcpv_core::eval::protected_scores(&features, &cfg, mode)?;
    let (eer_value, eer_threshold) = eer(&scores)?;
    let stats = distribution_stats(&scores)?;
    let roc = roc_points(&scores, n_roc)?;
    let (mated, non_mated) = unlinkability_scores(&features, &cfg)?;
    let unlink_result = unlinkability(&mated, &non_mated, bins, omega)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;

    let mut roc_csv = String::from("far,gar\n");
    for (far, gar) in &roc {
        let _ = writeln!(roc_csv, "{far:.6},{gar:.6}");
    }
    write_file(&out_dir.join("roc.csv"), &roc_csv)?;

    let mut dist_csv = String::from("label,score\n");
    for s in &scores.genuine {
        let _ = writeln!(dist_csv, "genuine,{s:.6}");
    }
    for s in &scores.imposter {
        let _ = writeln!(dist_csv, "imposter,{s:.6}");
    }
    write_file(&out_dir.join("dist.csv"), &dist_csv)?;

    let mode_name = match mode {
        KeyMode::Shared => "shared-key",
        KeyMode::PerUser => "per-user-key",
    };
    let summary = format!(
        "mode={mode_name}\n\
         genuine_count={}\n\
         imposter_count={}\n\
         eer_percent={:.5}\n\
         eer_threshold={:.6}\n\
         genuine_mean={:.6}\n\
         genuine_std={:.6}\n\
         imposter_mean={:.6}\n\
         imposter_std={:.6}\n\
         d_sys={:.6}\n",
        scores.genuine.len(),
        scores.imposter.len(),
        eer_value * 100.0,
        eer_threshold,
        stats.genuine_mean,
        stats.genuine_std,
        stats.imposter_mean,
        stats.imposter_std,
        unlink_result.d_sys
    );
    write_file(&out_dir.join("summary.txt"), &summary)?;

    print!("{summary}");
    println!(
        "wrote roc.csv, dist.csv, summary.txt to {}",
        out_dir.display()
    );
    Ok(0)
}

fn analyze(k: usize, p: &str, out: Option<&Path>) -> Result<i32, Error> {
    let probs = parse_probs(p)?;
    if probs.len() != k {
        return Err(Error::Parameter(format!(
            "--K {k} does not match the {} probabilities in --P",
            probs.len()
        )));
    }
    let intervals = IntervalSet::new(probs)?;
    let report = classify(&intervals);
    let text = format!(
        "classification={}\n\
         condition_value={:.6}\n\
         is_hard_sufficient={}\n\
         alpha0={:.9}\n",
        report.classification, report.condition_value, report.is_hard_sufficient, report.alpha0
    );
    print!("{text}");
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    Ok(0)
}

fn attack(
    store_path: &Path,
    id: &str,
    iters: usize,
    restarts: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<i32, Error> {
    let store = load_store(store_path)?;
    let record = store
        .get(id)
        .ok_or_else(|| Error::Validation(format!("no record for subject {id:?}")))?;
    let result = local_search_attack(&record.ndb, iters, restarts, seed, None);
    let text = format!(
        "subject={id}\n\
         matched_entries={}\n\
         iterations_used={}\n\
         restarts_used={}\n\
         candidate={}\n",
        result.matched_entries,
        result.iterations_used,
        result.restarts_used,
        result.best_candidate.to_bit_string()
    );
    print!("{text}");
    if let Some(path) = out {
        write_file(path, &text)?;
    }
    Ok(0)
}

fn unlink(
    features_path: &Path,
    out_dir: &Path,
    seed: u64,
    params: &NdbParams,
    bins: usize,
    omega: f64,
) -> Result<i32, Error> {
    let features = load_features(features_path, None)?;
    let cfg = PipelineConfig {
        m_p: params.m_p,
        r: params.r,
        intervals: params.intervals()?,
        seed,
    };
    let (mated, non_mated) = unlinkability_scores(&features, &cfg)?;
    let result = unlinkability(&mated, &non_mated, bins, omega)?;

    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut csv = String::from("score,d_local\n");
    for (s, d) in &result.local {
        let _ = writeln!(csv, "{s:.6},{d:.6}");
    }
    write_file(&out_dir.join("unlink.csv"), &csv)?;
    let summary = format!(
        "mated_count={}\nnon_mated_count={}\nd_sys={:.6}\n",
        mated.len(),
        non_mated.len(),
        result.d_sys
    );
    write_file(&out_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("wrote unlink.csv, summary.txt to {}", out_dir.display());
    Ok(0)
}
