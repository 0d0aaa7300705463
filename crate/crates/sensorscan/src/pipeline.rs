//! Stage orchestration: wires data preparation, pretraining, neighbor
//! mining, clustering, label matching, fine-tuning, and evaluation into a
//! resumable on-disk pipeline.
//!
//! Each stage reads its prerequisites from the working directory and writes
//! its own artifact there. Artifacts are self-describing: every one embeds
//! the fingerprint of the configuration slice that produced it, and loading
//! an artifact under a different configuration fails loudly instead of
//! silently mixing incompatible stages. Running a stage before its
//! prerequisite exists yields [`Error::MissingArtifact`] naming the stage to
//! run first.
//!
//! Determinism contract: given the same configuration and seed, every stage
//! writes byte-identical artifacts. All stage randomness is derived from the
//! global seed via tagged seed derivation, so stages stay independent of
//! each other's random streams.

use crate::cluster::{
    mine_neighbors, read_neighbors_csv, subsample_normal, train_scan, write_embeddings_csv,
    write_neighbors_csv, MiningMode, ScanConfig,
};
use crate::data::{
    ingest_csv, make_windows, select_channels, split_runs, synth_generate, unbalance_train,
    write_csv, NormalizationStats, SensorRun, SyntheticSpec, WindowSample,
};
use crate::data::compute_normalization;
use crate::error::{Error, Result};
use crate::eval::{
    acc, ari, baseline_pca_kmeans, build_report, fdd_metrics, nmi, read_report_json,
    render_report, write_report_files, ClusteringMetrics, FddInputs, FddReport,
};
use crate::kmeans::KmeansConfig;
use crate::model::{assign_clusters, ClusterHead, FeatureExtractor, ModelConfig};
use crate::nn::checkpoint;
use crate::nn::tensor::Tensor;
use crate::ssl::{pretrain, PretrainConfig, SslTasks};
use crate::supervise::{
    finetune, match_labels, predict_supervised, read_labelmap_csv, write_labelmap_csv,
    FinetuneConfig,
};
use crate::util::{derive_seed, fingerprint, fnv1a64, rng_from_seed};
use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as FmtWrite;
use std::ops::Range;
use std::path::{Path, PathBuf};

const TAG_SYNTH: u64 = 0x57D0;
const TAG_MODEL_INIT: u64 = 0x40D1;
const TAG_HEAD_INIT: u64 = 0xEAD1;
const TAG_STAGE_PRETRAIN: u64 = 0x06E1;
const TAG_STAGE_SCAN: u64 = 0x06E2;
const TAG_STAGE_FINETUNE: u64 = 0x06E3;
const TAG_STAGE_BASELINE: u64 = 0x06E4;
const TAG_PICK_RUNS: u64 = 0x91C5;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_CSV_FILE: &str = "train.csv";
pub const TEST_CSV_FILE: &str = "test.csv";
pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const NEIGHBORS_FILE: &str = "neighbors.csv";
pub const MINED_FILE: &str = "mined.json";
pub const CLUSTERED_FILE: &str = "clustered.json";
pub const LABELMAP_FILE: &str = "labelmap.csv";
pub const MATCHED_FILE: &str = "matched.json";
pub const FINETUNED_FILE: &str = "finetuned.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const REPORT_BASELINE_JSON_FILE: &str = "report_baseline.json";
pub const REPORT_BASELINE_TEXT_FILE: &str = "report_baseline.txt";
pub const REPORT_FINETUNED_JSON_FILE: &str = "report_finetuned.json";
pub const REPORT_FINETUNED_TEXT_FILE: &str = "report_finetuned.txt";
pub const REPORT_SEEDS_JSON_FILE: &str = "report_seeds.json";
pub const REPORT_SEEDS_TEXT_FILE: &str = "report_seeds.txt";
pub const PREDICTIONS_CSV_FILE: &str = "predictions.csv";

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Data section: where runs come from and how they are windowed and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Generate runs with the built-in synthetic process (exclusive with
    /// `ingest_path`).
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Ingest runs from a Run-CSV file (exclusive with `synthetic`).
    #[serde(default)]
    pub ingest_path: Option<PathBuf>,
    /// Runs generated per state when `synthetic` is used.
    #[serde(default = "default_runs_per_state")]
    pub runs_per_state: usize,
    /// Sliding window length L.
    pub window: usize,
    /// Sliding window step in samples.
    #[serde(default = "default_step")]
    pub step: usize,
    /// Channel allowlist (indices into the raw channels); `None` keeps all.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    /// Training runs kept for the normal state after the split (class
    /// unbalancing); both counts must be set together.
    #[serde(default)]
    pub normal_train_runs: Option<usize>,
    /// Training runs kept per fault state after the split.
    #[serde(default)]
    pub fault_train_runs: Option<usize>,
    /// Fraction of runs per state that go to the training side.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Keep only these fault states (original ids, 0 excluded — normal is
    /// always kept); labels are remapped to a contiguous range. Applied
    /// after the split so all subsets share the same split.
    #[serde(default)]
    pub fault_states: Option<Vec<usize>>,
}

fn default_runs_per_state() -> usize {
    12
}
fn default_step() -> usize {
    1
}
fn default_train_fraction() -> f64 {
    0.8
}

/// Evaluation section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// PCA dimensionality of the flattened-window baseline.
    #[serde(default = "default_baseline_dims")]
    pub baseline_dims: usize,
}

fn default_baseline_dims() -> usize {
    crate::eval::BASELINE_DIMS
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            baseline_dims: default_baseline_dims(),
        }
    }
}

/// Which pipeline knob an ablation sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    /// Pretraining objectives: reconstruction only / contrastive only / both.
    SslTasks,
    /// Neighbor mining: chunked vs. exhaustive.
    Mining,
    /// Cluster count sweep (list in `n_clusters`).
    NClusters,
    /// Fault-state subsets (list of original state-id sets in
    /// `fault_subsets`).
    FaultSubset,
}

impl AblationAxis {
    pub fn slug(self) -> &'static str {
        match self {
            AblationAxis::SslTasks => "ssl-tasks",
            AblationAxis::Mining => "mining",
            AblationAxis::NClusters => "n-clusters",
            AblationAxis::FaultSubset => "fault-subset",
        }
    }
}

/// Ablation section: the axis plus the per-axis variant lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub axis: AblationAxis,
    /// Cluster counts when `axis` is `n-clusters`.
    #[serde(default)]
    pub n_clusters: Vec<usize>,
    /// State-id sets when `axis` is `fault-subset`.
    #[serde(default)]
    pub fault_subsets: Vec<Vec<usize>>,
}

/// Complete pipeline configuration: one JSON file drives every command.
/// Unknown keys anywhere in the file are rejected, so hyperparameter typos
/// fail instead of silently falling back to defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Directory all stage artifacts are read from and written to.
    pub workdir: PathBuf,
    /// Global seed; every stage derives its own streams from it.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Only consulted by the `ablate` command.
    #[serde(default)]
    pub ablate: Option<AblateConfig>,
}

/// Per-stage configuration fingerprints. Downstream fingerprints chain over
/// upstream ones, so changing any upstream knob (or the seed) invalidates
/// everything after it.
#[derive(Clone, Debug, PartialEq)]
pub struct StageFingerprints {
    pub data: String,
    pub pretrain: String,
    pub mine: String,
    pub cluster: String,
    pub finetune: String,
    /// Fingerprint over every science-relevant section (the working
    /// directory and the ablation section are excluded); stamped on reports.
    pub full: String,
}

impl PipelineConfig {
    pub fn fingerprints(&self) -> StageFingerprints {
        let data = fingerprint(&(self.seed, &self.data));
        let pretrain = fingerprint(&(&data, &self.model, &self.pretrain));
        let mine = fingerprint(&(&pretrain, &self.scan));
        let cluster = fingerprint(&(&mine, "scan-training"));
        let finetune = fingerprint(&(&pretrain, &self.finetune));
        let full = fingerprint(&(
            self.seed,
            &self.data,
            &self.model,
            &self.pretrain,
            &self.scan,
            &self.finetune,
            &self.eval,
        ));
        StageFingerprints {
            data,
            pretrain,
            mine,
            cluster,
            finetune,
            full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.ingest_path) {
            (Some(_), Some(_)) => {
                return Err(Error::Validation(
                    "data: provide either a synthetic spec or an ingest path, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Validation(
                    "data: provide a synthetic spec or an ingest path".into(),
                ))
            }
            _ => {}
        }
        if let Some(spec) = &self.data.synthetic {
            spec.validate()?;
            if self.data.runs_per_state == 0 {
                return Err(Error::Validation(
                    "data: runs_per_state must be ≥ 1".into(),
                ));
            }
        }
        if self.data.window == 0 {
            return Err(Error::Validation("data: window must be ≥ 1".into()));
        }
        if self.data.step == 0 {
            return Err(Error::Validation("data: step must be ≥ 1".into()));
        }
        let tf = self.data.train_fraction;
        if !(tf > 0.0 && tf < 1.0) {
            return Err(Error::Validation(format!(
                "data: train_fraction {tf} outside (0, 1)"
            )));
        }
        if let Some(ch) = &self.data.channels {
            if ch.is_empty() {
                return Err(Error::Validation(
                    "data: channel allowlist must not be empty".into(),
                ));
            }
            let uniq: BTreeSet<usize> = ch.iter().copied().collect();
            if uniq.len() != ch.len() {
                return Err(Error::Validation(
                    "data: channel allowlist contains a duplicate".into(),
                ));
            }
            if let Some(spec) = &self.data.synthetic {
                if let Some(&bad) = ch.iter().find(|&&c| c >= spec.d) {
                    return Err(Error::Validation(format!(
                        "data: channel {bad} outside the synthetic channel range 0..{}",
                        spec.d
                    )));
                }
            }
        }
        let expected_d = match (&self.data.channels, &self.data.synthetic) {
            (Some(ch), _) => Some(ch.len()),
            (None, Some(spec)) => Some(spec.d),
            (None, None) => None,
        };
        if let Some(d) = expected_d {
            if d != self.model.d {
                return Err(Error::Validation(format!(
                    "model.d is {} but the dataset has {d} channels",
                    self.model.d
                )));
            }
        }
        if self.model.l != self.data.window {
            return Err(Error::Validation(format!(
                "model.l is {} but data.window is {}",
                self.model.l, self.data.window
            )));
        }
        match (self.data.normal_train_runs, self.data.fault_train_runs) {
            (Some(_), None) | (None, Some(_)) => {
                return Err(Error::Validation(
                    "data: set normal_train_runs and fault_train_runs together or not at all"
                        .into(),
                ))
            }
            (Some(a), Some(b)) if a == 0 || b == 0 => {
                return Err(Error::Validation(
                    "data: unbalancing counts must be ≥ 1".into(),
                ))
            }
            _ => {}
        }
        if let Some(fs) = &self.data.fault_states {
            if fs.is_empty() {
                return Err(Error::Validation(
                    "data: fault_states must not be empty".into(),
                ));
            }
            if fs.contains(&0) {
                return Err(Error::Validation(
                    "data: state 0 is the normal state and is always kept".into(),
                ));
            }
            let uniq: BTreeSet<usize> = fs.iter().copied().collect();
            if uniq.len() != fs.len() {
                return Err(Error::Validation(
                    "data: fault_states contains a duplicate".into(),
                ));
            }
            if let Some(spec) = &self.data.synthetic {
                if let Some(&bad) = fs.iter().find(|&&s| s >= spec.n_states()) {
                    return Err(Error::Validation(format!(
                        "data: fault_states includes state {bad}, but the synthetic spec defines states 0..{}",
                        spec.n_states()
                    )));
                }
            }
        }
        self.model.validate()?;
        self.pretrain.validate(self.model.l)?;
        self.scan.validate()?;
        self.finetune.validate()?;
        if self.eval.baseline_dims == 0 {
            return Err(Error::Validation(
                "eval: baseline_dims must be ≥ 1".into(),
            ));
        }
        if let Some(ab) = &self.ablate {
            match ab.axis {
                AblationAxis::NClusters => {
                    if ab.n_clusters.is_empty() {
                        return Err(Error::Validation(
                            "ablate: the n-clusters axis needs a non-empty `n_clusters` list"
                                .into(),
                        ));
                    }
                    if let Some(&bad) = ab.n_clusters.iter().find(|&&m| m < 2) {
                        return Err(Error::Validation(format!(
                            "ablate: cluster count {bad} must be ≥ 2"
                        )));
                    }
                }
                AblationAxis::FaultSubset => {
                    if ab.fault_subsets.is_empty() {
                        return Err(Error::Validation(
                            "ablate: the fault-subset axis needs a non-empty `fault_subsets` list"
                                .into(),
                        ));
                    }
                    if ab.fault_subsets.iter().any(|s| s.is_empty()) {
                        return Err(Error::Validation(
                            "ablate: every fault subset must name at least one state".into(),
                        ));
                    }
                    if ab.fault_subsets.iter().any(|s| s.contains(&0)) {
                        return Err(Error::Validation(
                            "ablate: fault subsets must not include the normal state 0".into(),
                        ));
                    }
                }
                AblationAxis::SslTasks | AblationAxis::Mining => {}
            }
        }
        Ok(())
    }
}

/// Read and parse a pipeline configuration file. Unknown keys are rejected
/// with the offending field named.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::parse(
            path.display().to_string(),
            format!("cannot read config: {e}"),
        )
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

// ---------------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------------

/// Checkpoint payload wrapper carrying the producing configuration's
/// fingerprint.
#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    config_fingerprint: String,
    payload: T,
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!(
            "{what} ({}) — run `sensorscan {producer}` first",
            path.display()
        )))
    }
}

fn check_fingerprint(found: &str, expected: &str, what: &str, producer: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::IncompatibleArtifact(format!(
            "{what} was produced with config fingerprint {found}, but the current config \
             expects {expected}; re-run `sensorscan {producer}`"
        )))
    }
}

fn save_stamped<T: Serialize>(path: &Path, kind: &str, fp: &str, payload: &T) -> Result<()> {
    checkpoint::save(
        path,
        kind,
        &Stamped {
            config_fingerprint: fp.to_string(),
            payload,
        },
    )
}

fn load_stamped<T: DeserializeOwned>(
    path: &Path,
    kind: &str,
    expected_fp: &str,
    what: &str,
    producer: &str,
) -> Result<T> {
    require(path, what, producer)?;
    let stamped: Stamped<T> = checkpoint::load(path, kind)?;
    check_fingerprint(&stamped.config_fingerprint, expected_fp, what, producer)?;
    Ok(stamped.payload)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(Error::from)
}

fn file_fnv(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:016x}", fnv1a64(&bytes)))
}

fn effective_pretrain(cfg: &PipelineConfig) -> PretrainConfig {
    PretrainConfig {
        seed: derive_seed(cfg.seed, &[TAG_STAGE_PRETRAIN, cfg.pretrain.seed]),
        ..cfg.pretrain.clone()
    }
}

fn effective_scan(cfg: &PipelineConfig) -> ScanConfig {
    ScanConfig {
        seed: derive_seed(cfg.seed, &[TAG_STAGE_SCAN, cfg.scan.seed]),
        ..cfg.scan.clone()
    }
}

fn effective_finetune(cfg: &PipelineConfig) -> FinetuneConfig {
    FinetuneConfig {
        seed: derive_seed(cfg.seed, &[TAG_STAGE_FINETUNE, cfg.finetune.seed]),
        ..cfg.finetune.clone()
    }
}

// ---------------------------------------------------------------------------
// Data stage
// ---------------------------------------------------------------------------

/// Summary of a prepared dataset, written next to the Run-CSV files. The
/// CSV files hold raw (un-normalized) values; loaders standardize with the
/// recorded statistics, which are computed from the training split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub n_states: usize,
    pub normal_state: usize,
    pub d: usize,
    pub window: usize,
    pub step: usize,
    pub sampling_period_min: f64,
    /// Original state ids behind fault labels 1..; the identity mapping
    /// unless a fault-subset filter was applied.
    pub fault_states: Vec<usize>,
    /// Training runs per state.
    pub train_run_counts: BTreeMap<usize, usize>,
    /// Test runs per state.
    pub test_run_counts: BTreeMap<usize, usize>,
    pub run_length_min: usize,
    pub run_length_max: usize,
    pub normalization: NormalizationStats,
    pub train_csv_fnv: String,
    pub test_csv_fnv: String,
}

/// Generate synthetic runs and prepare the dataset artifacts
/// (train/test Run-CSVs plus the manifest).
pub fn cmd_synth(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let spec = cfg.data.synthetic.as_ref().ok_or_else(|| {
        Error::Validation("synth requires a `data.synthetic` section".into())
    })?;
    let effective = SyntheticSpec {
        seed: derive_seed(cfg.seed, &[TAG_SYNTH, spec.seed]),
        ..spec.clone()
    };
    let runs = synth_generate(&effective, cfg.data.runs_per_state)?;
    build_dataset(cfg, runs)
}

/// Ingest runs from the configured Run-CSV file and prepare the dataset
/// artifacts.
pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let path = cfg.data.ingest_path.as_ref().ok_or_else(|| {
        Error::Validation("ingest requires a `data.ingest_path` entry".into())
    })?;
    let runs = ingest_csv(path)?;
    build_dataset(cfg, runs)
}

fn filter_remap_runs(runs: Vec<SensorRun>, kept_faults: &[usize]) -> Vec<SensorRun> {
    runs.into_iter()
        .filter_map(|mut r| {
            if r.fault_label == 0 {
                return Some(r);
            }
            kept_faults.binary_search(&r.fault_label).ok().map(|pos| {
                r.fault_label = pos + 1;
                r
            })
        })
        .collect()
}

fn run_counts(runs: &[SensorRun]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for r in runs {
        *counts.entry(r.fault_label).or_insert(0) += 1;
    }
    counts
}

fn build_dataset(cfg: &PipelineConfig, runs: Vec<SensorRun>) -> Result<()> {
    let fps = cfg.fingerprints();
    let runs = match &cfg.data.channels {
        Some(ch) => select_channels(&runs, ch)?,
        None => runs,
    };
    let first = runs
        .first()
        .ok_or_else(|| Error::Validation("dataset has no runs".into()))?;
    let d = first.n_channels();
    if d != cfg.model.d {
        return Err(Error::Validation(format!(
            "model.d is {} but the dataset has {d} channels",
            cfg.model.d
        )));
    }
    let sampling_period_min = first.sampling_period_min;
    if runs
        .iter()
        .any(|r| r.sampling_period_min != sampling_period_min)
    {
        return Err(Error::Validation(
            "dataset mixes runs with different sampling periods".into(),
        ));
    }
    let n_states_raw = runs.iter().map(|r| r.fault_label).max().unwrap_or(0) + 1;
    if let Some(fs) = &cfg.data.fault_states {
        let observed: BTreeSet<usize> = runs.iter().map(|r| r.fault_label).collect();
        if let Some(&bad) = fs.iter().find(|s| !observed.contains(s)) {
            return Err(Error::Validation(format!(
                "data: fault_states includes state {bad}, but the dataset has no runs with that label"
            )));
        }
    }

    let (mut train, mut test) = split_runs(&runs, cfg.data.train_fraction, cfg.seed)?;
    let fault_states: Vec<usize> = match &cfg.data.fault_states {
        Some(fs) => {
            let mut s = fs.clone();
            s.sort_unstable();
            train = filter_remap_runs(train, &s);
            test = filter_remap_runs(test, &s);
            s
        }
        None => (1..n_states_raw).collect(),
    };
    let n_states = fault_states.len() + 1;
    if let (Some(n0), Some(nf)) = (cfg.data.normal_train_runs, cfg.data.fault_train_runs) {
        train = unbalance_train(&train, n0, nf, cfg.seed)?;
    }
    if train.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }

    let normalization = compute_normalization(&train)?;
    std::fs::create_dir_all(&cfg.workdir).map_err(|e| Error::io(&cfg.workdir, e))?;
    let train_path = cfg.workdir.join(TRAIN_CSV_FILE);
    let test_path = cfg.workdir.join(TEST_CSV_FILE);
    write_csv(&train_path, &train)?;
    write_csv(&test_path, &test)?;

    let lengths: Vec<usize> = train.iter().chain(test.iter()).map(|r| r.t_len()).collect();
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_fingerprint: fps.data.clone(),
        n_states,
        normal_state: 0,
        d,
        window: cfg.data.window,
        step: cfg.data.step,
        sampling_period_min,
        fault_states,
        train_run_counts: run_counts(&train),
        test_run_counts: run_counts(&test),
        run_length_min: lengths.iter().copied().min().unwrap_or(0),
        run_length_max: lengths.iter().copied().max().unwrap_or(0),
        normalization,
        train_csv_fnv: file_fnv(&train_path)?,
        test_csv_fnv: file_fnv(&test_path)?,
    };
    write_json(&cfg.workdir.join(MANIFEST_FILE), &manifest)?;
    eprintln!(
        "dataset: {} states, {} train / {} test runs, D={d}",
        n_states,
        train.len(),
        test.len()
    );
    Ok(())
}

/// A prepared dataset loaded back from the working directory: normalized,
/// windowed, with run bookkeeping for delay metrics and labeled-run picks.
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// Normalized training windows, ordered run by run.
    pub train_windows: Vec<WindowSample>,
    /// Normalized test windows, ordered run by run.
    pub test_windows: Vec<WindowSample>,
    /// Window-index ranges of each test run (ordered, contiguous).
    pub test_run_ranges: Vec<Range<usize>>,
    /// `(run_id, state)` of every training run.
    pub train_run_states: Vec<(String, usize)>,
}

fn run_ranges(windows: &[WindowSample]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=windows.len() {
        if i == windows.len() || windows[i].run_id != windows[start].run_id {
            out.push(start..i);
            start = i;
        }
    }
    out
}

const DATA_PRODUCER: &str = "synth` or `sensorscan ingest";

/// Load the prepared dataset, verifying the manifest fingerprint and the
/// CSV content hashes.
pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let fps = cfg.fingerprints();
    let manifest_path = cfg.workdir.join(MANIFEST_FILE);
    require(&manifest_path, "dataset manifest", DATA_PRODUCER)?;
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::IncompatibleArtifact(format!(
            "dataset manifest has schema {}, this build reads schema {}",
            manifest.schema_version, MANIFEST_SCHEMA_VERSION
        )));
    }
    check_fingerprint(
        &manifest.config_fingerprint,
        &fps.data,
        "dataset manifest",
        DATA_PRODUCER,
    )?;
    let train_path = cfg.workdir.join(TRAIN_CSV_FILE);
    let test_path = cfg.workdir.join(TEST_CSV_FILE);
    require(&train_path, "training runs", DATA_PRODUCER)?;
    require(&test_path, "test runs", DATA_PRODUCER)?;
    for (path, expected) in [
        (&train_path, &manifest.train_csv_fnv),
        (&test_path, &manifest.test_csv_fnv),
    ] {
        let found = file_fnv(path)?;
        if &found != expected {
            return Err(Error::IncompatibleArtifact(format!(
                "{} does not match the manifest (content hash {found}, manifest says {expected}); \
                 regenerate the dataset",
                path.display()
            )));
        }
    }
    let mut train_runs = ingest_csv(&train_path)?;
    let mut test_runs = ingest_csv(&test_path)?;
    for r in train_runs.iter_mut().chain(test_runs.iter_mut()) {
        r.sampling_period_min = manifest.sampling_period_min;
    }
    let train_run_states: Vec<(String, usize)> = train_runs
        .iter()
        .map(|r| (r.run_id.clone(), r.fault_label))
        .collect();
    let train_norm = manifest.normalization.apply_runs(&train_runs);
    let test_norm = manifest.normalization.apply_runs(&test_runs);
    let train_windows = make_windows(&train_norm, manifest.window, manifest.step);
    let test_windows = make_windows(&test_norm, manifest.window, manifest.step);
    if train_windows.is_empty() {
        return Err(Error::Validation(
            "dataset yields no training windows (is the window longer than every run?)".into(),
        ));
    }
    let test_run_ranges = run_ranges(&test_windows);
    Ok(Dataset {
        manifest,
        train_windows,
        test_windows,
        test_run_ranges,
        train_run_states,
    })
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

/// Pretrain the feature extractor on all training windows and checkpoint it.
pub fn cmd_pretrain(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ds = load_dataset(cfg)?;
    let windows: Vec<Tensor> = ds.train_windows.iter().map(|w| w.values.clone()).collect();
    let extractor = FeatureExtractor::new(
        cfg.model.clone(),
        derive_seed(cfg.seed, &[TAG_MODEL_INIT]),
    )?;
    let (trained, _stats) = pretrain(extractor, &windows, &effective_pretrain(cfg))?;
    save_stamped(
        &cfg.workdir.join(PRETRAINED_FILE),
        "pretrained_extractor",
        &fps.pretrain,
        &trained,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MinedArtifact {
    schema_version: u32,
    config_fingerprint: String,
    k: usize,
    mining_mode: MiningMode,
    /// Indices into the full ordered training-window list that survived
    /// normal-class subsampling; neighbor rows correspond to these 1:1.
    retained: Vec<usize>,
    embeddings_csv_fnv: String,
    neighbors_csv_fnv: String,
}

/// Embed all training windows, subsample the dominant (normal) group, and
/// mine nearest neighbors over the retained set.
pub fn cmd_mine(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ds = load_dataset(cfg)?;
    let extractor: FeatureExtractor = load_stamped(
        &cfg.workdir.join(PRETRAINED_FILE),
        "pretrained_extractor",
        &fps.pretrain,
        "pretrained feature extractor",
        "pretrain",
    )?;
    let refs: Vec<&Tensor> = ds.train_windows.iter().map(|w| &w.values).collect();
    let embeddings = extractor.extract_features_eval(&refs);
    let ids: Vec<String> = ds.train_windows.iter().map(|w| w.sample_id()).collect();
    let labels: Vec<Option<usize>> = ds.train_windows.iter().map(|w| Some(w.label)).collect();
    let embeddings_path = cfg.workdir.join(EMBEDDINGS_FILE);
    write_embeddings_csv(&embeddings_path, &ids, &labels, &embeddings)?;

    let scan = effective_scan(cfg);
    let retained = subsample_normal(
        &embeddings,
        cfg.model.n_clusters,
        &KmeansConfig::default(),
        scan.seed,
    )?;
    let mut retained_emb = Tensor::zeros(&[retained.len(), embeddings.cols()]);
    let mut retained_ids = Vec::with_capacity(retained.len());
    for (row, &i) in retained.iter().enumerate() {
        retained_emb.row_mut(row).copy_from_slice(embeddings.row(i));
        retained_ids.push(ids[i].clone());
    }
    let index = mine_neighbors(&retained_emb, &scan)?;
    let neighbors_path = cfg.workdir.join(NEIGHBORS_FILE);
    write_neighbors_csv(&neighbors_path, &retained_ids, &index)?;
    eprintln!(
        "mining: kept {} of {} windows, {} neighbors each",
        retained.len(),
        ds.train_windows.len(),
        index.k
    );
    write_json(
        &cfg.workdir.join(MINED_FILE),
        &MinedArtifact {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_fingerprint: fps.mine.clone(),
            k: index.k,
            mining_mode: cfg.scan.mining_mode,
            retained,
            embeddings_csv_fnv: file_fnv(&embeddings_path)?,
            neighbors_csv_fnv: file_fnv(&neighbors_path)?,
        },
    )
}

fn load_mined(cfg: &PipelineConfig, fps: &StageFingerprints) -> Result<MinedArtifact> {
    let path = cfg.workdir.join(MINED_FILE);
    require(&path, "mined neighbors", "mine")?;
    let mined: MinedArtifact = read_json(&path)?;
    if mined.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::IncompatibleArtifact(format!(
            "mined artifact has schema {}, this build reads schema {}",
            mined.schema_version, MANIFEST_SCHEMA_VERSION
        )));
    }
    check_fingerprint(&mined.config_fingerprint, &fps.mine, "mined neighbors", "mine")?;
    let neighbors_path = cfg.workdir.join(NEIGHBORS_FILE);
    require(&neighbors_path, "neighbor table", "mine")?;
    let found = file_fnv(&neighbors_path)?;
    if found != mined.neighbors_csv_fnv {
        return Err(Error::IncompatibleArtifact(format!(
            "{} does not match the mined artifact (content hash {found}); re-run `sensorscan mine`",
            neighbors_path.display()
        )));
    }
    Ok(mined)
}

/// Train the clustering head (and then the whole network) on mined
/// neighbors and checkpoint the clustered model.
pub fn cmd_cluster(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ds = load_dataset(cfg)?;
    let mined = load_mined(cfg, &fps)?;
    let mut extractor: FeatureExtractor = load_stamped(
        &cfg.workdir.join(PRETRAINED_FILE),
        "pretrained_extractor",
        &fps.pretrain,
        "pretrained feature extractor",
        "pretrain",
    )?;
    if mined.retained.iter().any(|&i| i >= ds.train_windows.len()) {
        return Err(Error::IncompatibleArtifact(
            "mined artifact references windows outside the current dataset; re-run `sensorscan mine`"
                .into(),
        ));
    }
    let windows: Vec<Tensor> = mined
        .retained
        .iter()
        .map(|&i| ds.train_windows[i].values.clone())
        .collect();
    let ids: Vec<String> = mined
        .retained
        .iter()
        .map(|&i| ds.train_windows[i].sample_id())
        .collect();
    let neighbors = read_neighbors_csv(&cfg.workdir.join(NEIGHBORS_FILE), &ids)?;
    let mut head = ClusterHead::new(
        cfg.model.f,
        cfg.model.n_clusters,
        derive_seed(cfg.seed, &[TAG_HEAD_INIT]),
    );
    train_scan(&mut extractor, &mut head, &windows, &neighbors, &effective_scan(cfg))?;
    save_stamped(
        &cfg.workdir.join(CLUSTERED_FILE),
        "scan_model",
        &fps.cluster,
        &(extractor, head),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MatchedArtifact {
    schema_version: u32,
    config_fingerprint: String,
    labelmap_csv_fnv: String,
    unmatched_clusters: Vec<usize>,
}

/// Assign every training window to a cluster and match clusters to states
/// by weighted majority vote over the training labels.
pub fn cmd_match(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ds = load_dataset(cfg)?;
    let (extractor, head): (FeatureExtractor, ClusterHead) = load_stamped(
        &cfg.workdir.join(CLUSTERED_FILE),
        "scan_model",
        &fps.cluster,
        "clustered model",
        "cluster",
    )?;
    let refs: Vec<&Tensor> = ds.train_windows.iter().map(|w| &w.values).collect();
    let embeddings = extractor.extract_features_eval(&refs);
    let (_, probs) = head.forward_eval(&embeddings);
    let assignments = assign_clusters(&probs);
    let labels: Vec<usize> = ds.train_windows.iter().map(|w| w.label).collect();
    let map = match_labels(
        &assignments,
        &labels,
        cfg.model.n_clusters,
        ds.manifest.n_states,
        ds.manifest.normal_state,
    )?;
    let unmatched = map.unmatched_clusters();
    if !unmatched.is_empty() {
        eprintln!("matching: clusters {unmatched:?} received no training windows");
    }
    let labelmap_path = cfg.workdir.join(LABELMAP_FILE);
    write_labelmap_csv(&labelmap_path, &map)?;
    write_json(
        &cfg.workdir.join(MATCHED_FILE),
        &MatchedArtifact {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_fingerprint: fps.cluster.clone(),
            labelmap_csv_fnv: file_fnv(&labelmap_path)?,
            unmatched_clusters: unmatched,
        },
    )
}

/// Fine-tune the pretrained extractor with a fresh state-classification
/// head on a small labeled subset of the training runs.
pub fn cmd_finetune(cfg: &PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ds = load_dataset(cfg)?;
    let mut extractor: FeatureExtractor = load_stamped(
        &cfg.workdir.join(PRETRAINED_FILE),
        "pretrained_extractor",
        &fps.pretrain,
        "pretrained feature extractor",
        "pretrain",
    )?;
    let ft = effective_finetune(cfg);
    let mut by_state: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (id, state) in &ds.train_run_states {
        by_state.entry(*state).or_default().push(id.clone());
    }
    let want = ft.labeled_runs_per_state;
    let mut picked: BTreeSet<String> = BTreeSet::new();
    for state in 0..ds.manifest.n_states {
        let mut ids = by_state.get(&state).cloned().unwrap_or_default();
        if ids.len() < want {
            return Err(Error::Validation(format!(
                "finetune: state {state} has {} training runs, need {want} labeled",
                ids.len()
            )));
        }
        ids.sort_unstable();
        let mut rng = rng_from_seed(derive_seed(ft.seed, &[TAG_PICK_RUNS, state as u64]));
        ids.shuffle(&mut rng);
        picked.extend(ids.into_iter().take(want));
    }
    let mut windows = Vec::new();
    let mut labels = Vec::new();
    for w in &ds.train_windows {
        if picked.contains(&w.run_id) {
            windows.push(w.values.clone());
            labels.push(w.label);
        }
    }
    eprintln!(
        "finetune: {} labeled windows from {} runs",
        windows.len(),
        picked.len()
    );
    let (head, _losses) = finetune(&mut extractor, &windows, &labels, ds.manifest.n_states, &ft)?;
    let picked: Vec<String> = picked.into_iter().collect();
    save_stamped(
        &cfg.workdir.join(FINETUNED_FILE),
        "finetuned_model",
        &fps.finetune,
        &(extractor, head, picked),
    )
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// The reports one `evaluate` invocation produced.
pub struct PipelineReports {
    pub unsupervised: FddReport,
    pub baseline: Option<FddReport>,
    pub finetuned: Option<FddReport>,
}

fn score(
    ds: &Dataset,
    fp_full: &str,
    truth: &[usize],
    pred: &[usize],
    raw_assignments: Option<&[usize]>,
) -> Result<FddReport> {
    let report = fdd_metrics(&FddInputs {
        truth,
        pred,
        runs: &ds.test_run_ranges,
        n_states: ds.manifest.n_states,
        normal_state: ds.manifest.normal_state,
        step: ds.manifest.step,
        sampling_period_min: ds.manifest.sampling_period_min,
    })?;
    let clustering = match raw_assignments {
        Some(a) => Some(ClusteringMetrics {
            acc: acc(truth, a)?,
            nmi: nmi(truth, a)?,
            ari: ari(truth, a)?,
        }),
        None => None,
    };
    Ok(build_report(report, clustering, fp_full))
}

/// Write per-window test predictions as CSV:
/// `run_id,window_end,true_state,cluster,predicted_state`.
fn write_predictions_csv(
    path: &Path,
    windows: &[WindowSample],
    clusters: &[usize],
    pred: &[usize],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    writer
        .write_record(["run_id", "window_end", "true_state", "cluster", "predicted_state"])
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for (i, w) in windows.iter().enumerate() {
        writer
            .write_record([
                w.run_id.clone(),
                w.end_index.to_string(),
                w.label.to_string(),
                clusters[i].to_string(),
                pred[i].to_string(),
            ])
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Evaluate the clustered model on the test split (plus the flattened
/// PCA+k-means baseline when requested, and the fine-tuned model when its
/// checkpoint exists). Writes report files and returns the reports.
pub fn cmd_evaluate(cfg: &PipelineConfig, baseline: bool) -> Result<PipelineReports> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ds = load_dataset(cfg)?;
    if ds.test_windows.is_empty() {
        return Err(Error::Validation("no test windows to evaluate".into()));
    }
    let (extractor, head): (FeatureExtractor, ClusterHead) = load_stamped(
        &cfg.workdir.join(CLUSTERED_FILE),
        "scan_model",
        &fps.cluster,
        "clustered model",
        "cluster",
    )?;
    let matched_path = cfg.workdir.join(MATCHED_FILE);
    require(&matched_path, "label map", "match")?;
    let matched: MatchedArtifact = read_json(&matched_path)?;
    if matched.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::IncompatibleArtifact(format!(
            "label map artifact has schema {}, this build reads schema {}",
            matched.schema_version, MANIFEST_SCHEMA_VERSION
        )));
    }
    check_fingerprint(&matched.config_fingerprint, &fps.cluster, "label map", "match")?;
    let labelmap_path = cfg.workdir.join(LABELMAP_FILE);
    require(&labelmap_path, "label map table", "match")?;
    let found = file_fnv(&labelmap_path)?;
    if found != matched.labelmap_csv_fnv {
        return Err(Error::IncompatibleArtifact(format!(
            "{} does not match its artifact record (content hash {found}); re-run `sensorscan match`",
            labelmap_path.display()
        )));
    }
    let map = read_labelmap_csv(&labelmap_path, ds.manifest.n_states, ds.manifest.normal_state)?;

    let test_refs: Vec<&Tensor> = ds.test_windows.iter().map(|w| &w.values).collect();
    let truth: Vec<usize> = ds.test_windows.iter().map(|w| w.label).collect();

    // Single-sample latency, logged for feasibility context.
    let single = &ds.test_windows[0].values;
    let warm = extractor.extract_features_eval(&[single]);
    let _ = head.forward_eval(&warm);
    let reps = 16;
    let start = std::time::Instant::now();
    for _ in 0..reps {
        let e = extractor.extract_features_eval(&[single]);
        let _ = head.forward_eval(&e);
    }
    eprintln!(
        "single-sample inference latency: {:.3} ms",
        start.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );

    let embeddings = extractor.extract_features_eval(&test_refs);
    let (_, probs) = head.forward_eval(&embeddings);
    let assignments = assign_clusters(&probs);
    let pred: Vec<usize> = assignments
        .iter()
        .map(|&c| map.state_of(c))
        .collect::<Result<_>>()?;
    let unsupervised = score(&ds, &fps.full, &truth, &pred, Some(&assignments))?;
    write_report_files(
        &unsupervised,
        &cfg.workdir.join(REPORT_JSON_FILE),
        &cfg.workdir.join(REPORT_TEXT_FILE),
    )?;
    write_predictions_csv(
        &cfg.workdir.join(PREDICTIONS_CSV_FILE),
        &ds.test_windows,
        &assignments,
        &pred,
    )?;

    let baseline_report = if baseline {
        let train_refs: Vec<&Tensor> = ds.train_windows.iter().map(|w| &w.values).collect();
        let train_labels: Vec<usize> = ds.train_windows.iter().map(|w| w.label).collect();
        let fit = baseline_pca_kmeans(
            &train_refs,
            &test_refs,
            cfg.eval.baseline_dims,
            cfg.model.n_clusters,
            &KmeansConfig::default(),
            derive_seed(cfg.seed, &[TAG_STAGE_BASELINE]),
        )?;
        let bmap = match_labels(
            &fit.train_assignments,
            &train_labels,
            cfg.model.n_clusters,
            ds.manifest.n_states,
            ds.manifest.normal_state,
        )?;
        let bpred: Vec<usize> = fit
            .test_assignments
            .iter()
            .map(|&c| bmap.state_of(c))
            .collect::<Result<_>>()?;
        let report = score(&ds, &fps.full, &truth, &bpred, Some(&fit.test_assignments))?;
        write_report_files(
            &report,
            &cfg.workdir.join(REPORT_BASELINE_JSON_FILE),
            &cfg.workdir.join(REPORT_BASELINE_TEXT_FILE),
        )?;
        Some(report)
    } else {
        None
    };

    let finetuned_path = cfg.workdir.join(FINETUNED_FILE);
    let finetuned_report = if finetuned_path.exists() {
        let (ft_extractor, ft_head, _picked): (FeatureExtractor, ClusterHead, Vec<String>) =
            load_stamped(
                &finetuned_path,
                "finetuned_model",
                &fps.finetune,
                "fine-tuned model",
                "finetune",
            )?;
        let pred_ft = predict_supervised(&ft_extractor, &ft_head, &test_refs);
        let report = score(&ds, &fps.full, &truth, &pred_ft, None)?;
        write_report_files(
            &report,
            &cfg.workdir.join(REPORT_FINETUNED_JSON_FILE),
            &cfg.workdir.join(REPORT_FINETUNED_TEXT_FILE),
        )?;
        Some(report)
    } else {
        None
    };

    Ok(PipelineReports {
        unsupervised,
        baseline: baseline_report,
        finetuned: finetuned_report,
    })
}

/// Re-render the text table from the stored JSON report and return it.
pub fn cmd_report(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let path = cfg.workdir.join(REPORT_JSON_FILE);
    require(&path, "evaluation report", "evaluate")?;
    let report = read_report_json(&path)?;
    check_fingerprint(
        &report.config_fingerprint,
        &fps.full,
        "evaluation report",
        "evaluate",
    )?;
    let text = render_report(&report);
    std::fs::write(cfg.workdir.join(REPORT_TEXT_FILE), text.as_bytes())
        .map_err(|e| Error::io(cfg.workdir.join(REPORT_TEXT_FILE), e))?;
    Ok(text)
}

/// Run every stage in order inside the configured working directory:
/// data preparation, pretraining, mining, clustering, matching, optional
/// fine-tuning, then evaluation.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    with_finetune: bool,
    with_baseline: bool,
) -> Result<PipelineReports> {
    if cfg.data.synthetic.is_some() {
        cmd_synth(cfg)?;
    } else {
        cmd_ingest(cfg)?;
    }
    cmd_pretrain(cfg)?;
    cmd_mine(cfg)?;
    cmd_cluster(cfg)?;
    cmd_match(cfg)?;
    if with_finetune {
        cmd_finetune(cfg)?;
    }
    cmd_evaluate(cfg, with_baseline)
}

// ---------------------------------------------------------------------------
// Multi-seed evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    /// How many seeds produced the metric (rate metrics can be undefined
    /// for some seeds).
    pub n: usize,
}

fn summarize(values: &[f64]) -> Option<MetricSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MetricSummary { mean, std, n })
}

/// Mean ± std aggregation of full pipeline runs under consecutive seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSweep {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub baseline_metrics: Option<BTreeMap<String, MetricSummary>>,
}

fn collect_metrics(reports: &[&FddReport]) -> BTreeMap<String, MetricSummary> {
    let mut out = BTreeMap::new();
    let mut insert = |key: &str, values: Vec<f64>| {
        if let Some(s) = summarize(&values) {
            out.insert(key.to_string(), s);
        }
    };
    insert(
        "detection_tpr",
        reports.iter().map(|r| r.detection_tpr).collect(),
    );
    insert(
        "detection_fpr",
        reports.iter().map(|r| r.detection_fpr).collect(),
    );
    insert("cdr", reports.iter().filter_map(|r| r.cdr).collect());
    insert(
        "add_samples",
        reports.iter().filter_map(|r| r.add_samples).collect(),
    );
    insert(
        "add_minutes",
        reports.iter().filter_map(|r| r.add_minutes).collect(),
    );
    insert(
        "clustering_acc",
        reports
            .iter()
            .filter_map(|r| r.clustering.as_ref().map(|c| c.acc))
            .collect(),
    );
    insert(
        "clustering_nmi",
        reports
            .iter()
            .filter_map(|r| r.clustering.as_ref().map(|c| c.nmi))
            .collect(),
    );
    insert(
        "clustering_ari",
        reports
            .iter()
            .filter_map(|r| r.clustering.as_ref().map(|c| c.ari))
            .collect(),
    );
    let states: BTreeSet<usize> = reports
        .iter()
        .flat_map(|r| r.per_fault.iter().map(|f| f.state))
        .collect();
    for state in states {
        let tprs: Vec<f64> = reports
            .iter()
            .filter_map(|r| {
                r.per_fault
                    .iter()
                    .find(|f| f.state == state)
                    .and_then(|f| f.tpr)
            })
            .collect();
        let fprs: Vec<f64> = reports
            .iter()
            .filter_map(|r| {
                r.per_fault
                    .iter()
                    .find(|f| f.state == state)
                    .map(|f| f.fpr)
            })
            .collect();
        if let Some(s) = summarize(&tprs) {
            out.insert(format!("fault_{state}_tpr"), s);
        }
        if let Some(s) = summarize(&fprs) {
            out.insert(format!("fault_{state}_fpr"), s);
        }
    }
    out
}

fn render_seed_sweep(sweep: &SeedSweep) -> String {
    let total = sweep.seeds.len();
    let mut out = String::new();
    let _ = writeln!(out, "seed sweep over {total} seeds: {:?}", sweep.seeds);
    let width = sweep
        .metrics
        .keys()
        .chain(
            sweep
                .baseline_metrics
                .iter()
                .flat_map(|m| m.keys()),
        )
        .map(|k| k.len())
        .max()
        .unwrap_or(6)
        .max("metric".len());
    let _ = writeln!(out, "{:<width$}  {:>16}  seeds", "metric", "mean ± std");
    for (key, s) in &sweep.metrics {
        let _ = writeln!(
            out,
            "{key:<width$}  {:>7.2} ± {:<6.2}  {}/{total}",
            s.mean, s.std, s.n
        );
    }
    if let Some(baseline) = &sweep.baseline_metrics {
        let _ = writeln!(out, "\nbaseline (PCA + k-means):");
        for (key, s) in baseline {
            let _ = writeln!(
                out,
                "{key:<width$}  {:>7.2} ± {:<6.2}  {}/{total}",
                s.mean, s.std, s.n
            );
        }
    }
    out
}

/// Run the full pipeline under `n_seeds` consecutive seeds (each in its own
/// subdirectory of the working directory) and aggregate every metric as
/// mean ± sample std. Returns the rendered summary.
pub fn evaluate_seeds(cfg: &PipelineConfig, n_seeds: usize, baseline: bool) -> Result<String> {
    if n_seeds == 0 {
        return Err(Error::Validation("--seeds must be ≥ 1".into()));
    }
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let mut seeds = Vec::with_capacity(n_seeds);
    let mut reports = Vec::with_capacity(n_seeds);
    for i in 0..n_seeds {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut sub = cfg.clone();
        sub.seed = seed;
        sub.workdir = cfg.workdir.join("seeds").join(format!("seed_{seed}"));
        std::fs::create_dir_all(&sub.workdir).map_err(|e| Error::io(&sub.workdir, e))?;
        eprintln!("=== seed {seed} ===");
        reports.push(run_pipeline(&sub, false, baseline)?);
        seeds.push(seed);
    }
    let unsupervised: Vec<&FddReport> = reports.iter().map(|r| &r.unsupervised).collect();
    let baselines: Vec<&FddReport> = reports.iter().filter_map(|r| r.baseline.as_ref()).collect();
    let sweep = SeedSweep {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_fingerprint: fps.full,
        seeds,
        metrics: collect_metrics(&unsupervised),
        baseline_metrics: if baselines.is_empty() {
            None
        } else {
            Some(collect_metrics(&baselines))
        },
    };
    std::fs::create_dir_all(&cfg.workdir).map_err(|e| Error::io(&cfg.workdir, e))?;
    write_json(&cfg.workdir.join(REPORT_SEEDS_JSON_FILE), &sweep)?;
    let text = render_seed_sweep(&sweep);
    std::fs::write(cfg.workdir.join(REPORT_SEEDS_TEXT_FILE), text.as_bytes())
        .map_err(|e| Error::io(cfg.workdir.join(REPORT_SEEDS_TEXT_FILE), e))?;
    Ok(text)
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub report: FddReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArtifact {
    pub schema_version: u32,
    pub config_fingerprint: String,
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

fn slug(label: &str) -> String {
    let mut out = String::new();
    let mut last_dash = true;
    for c in label.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
            last_dash = false;
        } else if !last_dash {
            out.push('-');
            last_dash = true;
        }
    }
    while out.ends_with('-') {
        out.pop();
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into())
}

fn render_ablation(artifact: &AblationArtifact) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ablation axis: {}", artifact.axis.slug());
    let width = artifact
        .rows
        .iter()
        .map(|r| r.label.len())
        .max()
        .unwrap_or(7)
        .max("variant".len());
    let _ = writeln!(
        out,
        "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7}  {:>7}  {:>6}  {:>12}",
        "variant", "ACC", "NMI", "ARI", "DetTPR", "DetFPR", "CDR", "ADD(samples)"
    );
    for row in &artifact.rows {
        let c = row.report.clustering.as_ref();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>7.2}  {:>7.2}  {:>6}  {:>12}",
            row.label,
            fmt_opt(c.map(|c| c.acc)),
            fmt_opt(c.map(|c| c.nmi)),
            fmt_opt(c.map(|c| c.ari)),
            row.report.detection_tpr,
            row.report.detection_fpr,
            fmt_opt(row.report.cdr),
            fmt_opt(row.report.add_samples),
        );
    }
    out
}

/// Run the pipeline once per variant along the configured ablation axis
/// (same seed and split everywhere) and emit a side-by-side table. Each
/// variant keeps its artifacts under `workdir/ablate/<axis>/<variant>/`.
pub fn cmd_ablate(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let fps = cfg.fingerprints();
    let ab = cfg.ablate.as_ref().ok_or_else(|| {
        Error::Validation("ablate: the config has no `ablate` section".into())
    })?;
    let mut variants: Vec<(String, PipelineConfig)> = Vec::new();
    match ab.axis {
        AblationAxis::SslTasks => {
            for (label, tasks) in [
                ("only reconstruction task", SslTasks::ReconstructionOnly),
                ("only contrastive learning", SslTasks::ContrastiveOnly),
                ("both tasks", SslTasks::Both),
            ] {
                let mut v = cfg.clone();
                v.pretrain.tasks = tasks;
                variants.push((label.to_string(), v));
            }
        }
        AblationAxis::Mining => {
            for (label, mode) in [
                ("chunked mining", MiningMode::Chunked),
                ("naive mining", MiningMode::Naive),
            ] {
                let mut v = cfg.clone();
                v.scan.mining_mode = mode;
                variants.push((label.to_string(), v));
            }
        }
        AblationAxis::NClusters => {
            for &m in &ab.n_clusters {
                let mut v = cfg.clone();
                v.model.n_clusters = m;
                variants.push((format!("{m} clusters"), v));
            }
        }
        AblationAxis::FaultSubset => {
            for set in &ab.fault_subsets {
                let mut s = set.clone();
                s.sort_unstable();
                s.dedup();
                let mut v = cfg.clone();
                v.data.fault_states = Some(s.clone());
                variants.push((format!("faults {s:?}"), v));
            }
        }
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (i, (label, mut variant)) in variants.into_iter().enumerate() {
        variant.workdir = cfg
            .workdir
            .join("ablate")
            .join(ab.axis.slug())
            .join(format!("{i:02}-{}", slug(&label)));
        variant.ablate = None;
        std::fs::create_dir_all(&variant.workdir).map_err(|e| Error::io(&variant.workdir, e))?;
        variant.validate()?;
        eprintln!("=== ablation variant: {label} ===");
        let reports = run_pipeline(&variant, false, false)?;
        rows.push(AblationRow {
            label,
            report: reports.unsupervised,
        });
    }
    let artifact = AblationArtifact {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_fingerprint: fps.full,
        axis: ab.axis,
        rows,
    };
    let json_path = cfg
        .workdir
        .join(format!("ablation_{}.json", ab.axis.slug()));
    write_json(&json_path, &artifact)?;
    let text = render_ablation(&artifact);
    let text_path = cfg.workdir.join(format!("ablation_{}.txt", ab.axis.slug()));
    std::fs::write(&text_path, text.as_bytes()).map_err(|e| Error::io(&text_path, e))?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FaultKind, FaultSpec};
    use crate::augmask::{AugmentConfig, MaskConfig};

    fn tiny_cfg(workdir: &Path) -> PipelineConfig {
        PipelineConfig {
            workdir: workdir.to_path_buf(),
            seed: 7,
            data: DataConfig {
                synthetic: Some(SyntheticSpec {
                    d: 2,
                    run_length: 36,
                    onset: 12,
                    faults: vec![FaultSpec {
                        kind: FaultKind::Step,
                        channels: vec![0],
                        magnitude: 4.0,
                    }],
                    noise_std: 0.5,
                    ar_coeff: 0.5,
                    sampling_period_min: 3.0,
                    seed: 0,
                }),
                ingest_path: None,
                runs_per_state: 6,
                window: 6,
                step: 2,
                channels: None,
                normal_train_runs: None,
                fault_train_runs: None,
                train_fraction: 0.8,
                fault_states: None,
            },
            model: ModelConfig {
                d: 2,
                l: 6,
                n_clusters: 2,
                n_layers: 1,
                h: 16,
                ff_dim: 24,
                heads: 2,
                dropout: 0.1,
                f: 4,
            },
            pretrain: PretrainConfig {
                epochs: 1,
                batch: 32,
                augment: AugmentConfig {
                    n_permute_chunks: 3,
                    ..AugmentConfig::default()
                },
                mask: MaskConfig { r: 0.5, l_m: 2.0 },
                ..PretrainConfig::default()
            },
            scan: ScanConfig {
                k: 3,
                t_chunks: 1,
                epochs: 3,
                freeze_epochs: 3,
                batch: 32,
                ..ScanConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 2,
                lr: 1e-3,
                batch: 32,
                ..FinetuneConfig::default()
            },
            eval: EvalConfig { baseline_dims: 3 },
            ablate: None,
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected_at_any_depth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let mut v = serde_json::to_value(&cfg).unwrap();
        v["pretrain"]["bogus_knob"] = 1.into();
        let err = serde_json::from_value::<PipelineConfig>(v).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");

        let mut v = serde_json::to_value(&cfg).unwrap();
        v["windoww"] = 5.into();
        let err = serde_json::from_value::<PipelineConfig>(v).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
    }

    #[test]
    fn fingerprints_chain_over_upstream_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        let base = cfg.fingerprints();

        let mut seeded = cfg.clone();
        seeded.seed += 1;
        let f = seeded.fingerprints();
        assert_ne!(f.data, base.data);
        assert_ne!(f.pretrain, base.pretrain);
        assert_ne!(f.mine, base.mine);
        assert_ne!(f.cluster, base.cluster);
        assert_ne!(f.finetune, base.finetune);
        assert_ne!(f.full, base.full);

        let mut scanned = cfg.clone();
        scanned.scan.lambda_ent += 1.0;
        let f = scanned.fingerprints();
        assert_eq!(f.data, base.data);
        assert_eq!(f.pretrain, base.pretrain);
        assert_eq!(f.finetune, base.finetune);
        assert_ne!(f.mine, base.mine);
        assert_ne!(f.cluster, base.cluster);
        assert_ne!(f.full, base.full);

        // The working directory is not part of any fingerprint.
        let mut moved = cfg.clone();
        moved.workdir = dir.path().join("elsewhere");
        let f = moved.fingerprints();
        assert_eq!(f.full, base.full);
        assert_eq!(f.data, base.data);
    }

    #[test]
    fn fault_subset_filter_remaps_labels_contiguously() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        // Three faults so a subset is meaningful.
        if let Some(spec) = cfg.data.synthetic.as_mut() {
            spec.faults = vec![
                FaultSpec {
                    kind: FaultKind::Step,
                    channels: vec![0],
                    magnitude: 4.0,
                },
                FaultSpec {
                    kind: FaultKind::SlowDrift,
                    channels: vec![1],
                    magnitude: 0.2,
                },
                FaultSpec {
                    kind: FaultKind::Step,
                    channels: vec![1],
                    magnitude: 2.0,
                },
            ];
        }
        cfg.data.fault_states = Some(vec![1, 3]);
        cmd_synth(&cfg).unwrap();
        let manifest: DatasetManifest = read_json(&cfg.workdir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.n_states, 3);
        assert_eq!(manifest.fault_states, vec![1, 3]);
        let states: Vec<usize> = manifest.train_run_counts.keys().copied().collect();
        assert_eq!(states, vec![0, 1, 2]);

        let runs = filter_remap_runs(
            vec![
                run_with_label("a", 0),
                run_with_label("b", 1),
                run_with_label("c", 2),
                run_with_label("d", 3),
            ],
            &[1, 3],
        );
        let labels: Vec<usize> = runs.iter().map(|r| r.fault_label).collect();
        assert_eq!(labels, vec![0, 1, 2]);
        let ids: Vec<&str> = runs.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(ids, vec!["a", "b", "d"]);
    }

    fn run_with_label(id: &str, label: usize) -> SensorRun {
        SensorRun {
            run_id: id.to_string(),
            fault_label: label,
            fault_onset: (label > 0).then_some(0),
            values: Tensor::zeros(&[4, 2]),
            sampling_period_min: 3.0,
        }
    }

    #[test]
    fn summarize_matches_hand_computed_mean_and_std() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!((s.std - 1.0).abs() < 1e-12);
        assert_eq!(s.n, 3);
        let single = summarize(&[0.5]).unwrap();
        assert_eq!(single.std, 0.0);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn slugs_are_filesystem_friendly() {
        assert_eq!(slug("Only reconstruction task"), "only-reconstruction-task");
        assert_eq!(slug("faults [1, 3]"), "faults-1-3");
        assert_eq!(slug("8 clusters"), "8-clusters");
    }

    #[test]
    fn stages_run_end_to_end_with_self_describing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());

        // Prerequisites are enforced with stage-naming errors.
        let err = cmd_cluster(&cfg).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
        assert!(err.to_string().contains("synth"), "{err}");

        cmd_synth(&cfg).unwrap();
        let train_bytes = std::fs::read(cfg.workdir.join(TRAIN_CSV_FILE)).unwrap();
        cmd_synth(&cfg).unwrap();
        assert_eq!(
            train_bytes,
            std::fs::read(cfg.workdir.join(TRAIN_CSV_FILE)).unwrap(),
            "data stage should be byte-deterministic"
        );

        let err = cmd_cluster(&cfg).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err}");
        assert!(err.to_string().contains("mine"), "{err}");

        cmd_pretrain(&cfg).unwrap();
        let pretrained_bytes = std::fs::read(cfg.workdir.join(PRETRAINED_FILE)).unwrap();
        cmd_pretrain(&cfg).unwrap();
        assert_eq!(
            pretrained_bytes,
            std::fs::read(cfg.workdir.join(PRETRAINED_FILE)).unwrap(),
            "pretraining should be byte-deterministic"
        );

        cmd_mine(&cfg).unwrap();
        cmd_cluster(&cfg).unwrap();
        cmd_match(&cfg).unwrap();
        let reports = cmd_evaluate(&cfg, true).unwrap();
        assert!(reports.baseline.is_some());
        assert!(reports.finetuned.is_none());

        let report = read_report_json(&cfg.workdir.join(REPORT_JSON_FILE)).unwrap();
        assert_eq!(report.config_fingerprint, cfg.fingerprints().full);
        assert_eq!(report.n_states, 2);
        assert!(report.clustering.is_some());

        cmd_finetune(&cfg).unwrap();
        let reports = cmd_evaluate(&cfg, false).unwrap();
        assert!(reports.finetuned.is_some());
        assert!(cfg.workdir.join(REPORT_FINETUNED_JSON_FILE).exists());

        let text = cmd_report(&cfg).unwrap();
        assert!(text.contains("Detection TPR"), "{text}");

        // A config change upstream invalidates artifacts loudly.
        let mut other = cfg.clone();
        other.seed = 999;
        let err = cmd_pretrain(&other).unwrap_err();
        assert!(matches!(err, Error::IncompatibleArtifact(_)), "{err}");
    }

    #[test]
    fn ablation_emits_one_row_per_variant() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(dir.path());
        cfg.ablate = Some(AblateConfig {
            axis: AblationAxis::Mining,
            n_clusters: vec![],
            fault_subsets: vec![],
        });
        let text = cmd_ablate(&cfg).unwrap();
        assert!(text.contains("chunked mining"), "{text}");
        assert!(text.contains("naive mining"), "{text}");
        let artifact: AblationArtifact =
            read_json(&cfg.workdir.join("ablation_mining.json")).unwrap();
        assert_eq!(artifact.rows.len(), 2);
        assert!(cfg.workdir.join("ablation_mining.txt").exists());

        // Unknown axis strings are rejected at parse time.
        let err = serde_json::from_str::<AblationAxis>("\"bogus\"").unwrap_err();
        assert!(err.to_string().contains("unknown variant"), "{err}");
    }
}
