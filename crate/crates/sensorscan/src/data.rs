//! Run-level data handling: CSV ingestion, the synthetic process generator,
//! feature-wise standardization, sliding windows, unbalancing, and the
//! stratified train/test split.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::util::{derive_seed, rng_from_seed};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

/// One simulation or plant run: a T×D sensor matrix plus its fault metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRun {
    pub run_id: String,
    /// Process state: 0 = normal operation, 1..Q−1 = fault classes.
    pub fault_label: usize,
    /// Timestamp index at which the fault is introduced; `None` for normal
    /// runs. Samples before the onset are in the normal state.
    pub fault_onset: Option<usize>,
    /// T×D sensor values.
    pub values: Tensor,
    /// Sampling period in minutes (used to convert detection delay to time).
    pub sampling_period_min: f64,
}

impl SensorRun {
    pub fn t_len(&self) -> usize {
        self.values.rows()
    }

    pub fn n_channels(&self) -> usize {
        self.values.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len() < 1 {
            return Err(Error::Validation(format!("run {}: empty run", self.run_id)));
        }
        if !self.values.all_finite() {
            return Err(Error::Validation(format!(
                "run {}: non-finite sensor value",
                self.run_id
            )));
        }
        match (self.fault_label, self.fault_onset) {
            (0, Some(_)) => Err(Error::Validation(format!(
                "run {}: normal run with a fault onset",
                self.run_id
            ))),
            (l, None) if l != 0 => Err(Error::Validation(format!(
                "run {}: faulty run without a fault onset",
                self.run_id
            ))),
            (_, Some(onset)) if onset >= self.t_len() => Err(Error::Validation(format!(
                "run {}: fault onset {} outside run of length {}",
                self.run_id,
                onset,
                self.t_len()
            ))),
            _ => Ok(()),
        }
    }
}

/// An L×D sliding-window slice of a run with its derived state label.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub run_id: String,
    /// Index of the window's last timestamp within its run.
    pub end_index: usize,
    pub values: Tensor,
    /// State at the last timestamp: the run's fault label if
    /// `end_index ≥ fault_onset`, otherwise 0.
    pub label: usize,
}

impl WindowSample {
    /// Stable identifier used in exported embedding/neighbor tables.
    pub fn sample_id(&self) -> String {
        format!("{}:{}", self.run_id, self.end_index)
    }
}

/// Per-channel standardization statistics computed from training runs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fault archetypes the synthetic generator can inject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Additive offset on the affected channels from the onset on.
    Step,
    /// Innovation noise multiplied by `magnitude` from the onset on.
    RandomVariation,
    /// Additive linear ramp with slope `magnitude` per step.
    SlowDrift,
    /// Each post-onset reading is replaced by the onset value with
    /// probability `magnitude` (an intermittently stuck sensor).
    Sticking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub channels: Vec<usize>,
    pub magnitude: f64,
}

/// Configuration of the synthetic process generator. Normal channels follow
/// a stationary AR(1) process around fixed per-channel baselines; each fault
/// descriptor defines one fault state (label = its index + 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub d: usize,
    pub run_length: usize,
    pub onset: usize,
    pub faults: Vec<FaultSpec>,
    pub noise_std: f64,
    /// AR(1) coefficient of every channel (0 = white noise).
    #[serde(default = "default_ar_coeff")]
    pub ar_coeff: f64,
    #[serde(default = "default_sampling_period")]
    pub sampling_period_min: f64,
    pub seed: u64,
}

fn default_ar_coeff() -> f64 {
    0.9
}

fn default_sampling_period() -> f64 {
    3.0
}

impl SyntheticSpec {
    /// Number of process states (normal + one per fault descriptor).
    pub fn n_states(&self) -> usize {
        self.faults.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Validation("synthetic spec: d must be ≥ 1".into()));
        }
        if self.onset >= self.run_length {
            return Err(Error::Validation(format!(
                "synthetic spec: onset {} must precede run length {}",
                self.onset, self.run_length
            )));
        }
        if !(0.0..1.0).contains(&self.ar_coeff) {
            return Err(Error::Validation(format!(
                "synthetic spec: ar_coeff {} outside [0,1)",
                self.ar_coeff
            )));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::Validation("synthetic spec: noise_std must be > 0".into()));
        }
        for (i, f) in self.faults.iter().enumerate() {
            if f.channels.is_empty() || f.channels.len() > self.d {
                return Err(Error::Validation(format!(
                    "fault {}: needs between 1 and {} affected channels",
                    i + 1,
                    self.d
                )));
            }
            if let Some(&c) = f.channels.iter().find(|&&c| c >= self.d) {
                return Err(Error::Validation(format!(
                    "fault {}: channel {c} out of range (d = {})",
                    i + 1,
                    self.d
                )));
            }
            if matches!(f.kind, FaultKind::Sticking) && !(0.0..=1.0).contains(&f.magnitude) {
                return Err(Error::Validation(format!(
                    "fault {}: sticking magnitude {} is a probability",
                    i + 1,
                    f.magnitude
                )));
            }
        }
        Ok(())
    }
}

/// Generate `n_runs_per_state` runs for every state (normal first, then each
/// fault). Deterministic: identical (spec, n) produce identical output.
pub fn synth_generate(spec: &SyntheticSpec, n_runs_per_state: usize) -> Result<Vec<SensorRun>> {
    spec.validate()?;
    // Per-channel baselines are fixed for the whole dataset so that state,
    // not channel identity, carries the label signal.
    let mut base_rng = rng_from_seed(derive_seed(spec.seed, &[0xBA5E]));
    let baselines: Vec<f64> = (0..spec.d).map(|_| base_rng.random_range(-1.0..1.0)).collect();
    let marginal_std = spec.noise_std / (1.0 - spec.ar_coeff * spec.ar_coeff).sqrt();

    let mut runs = Vec::with_capacity(spec.n_states() * n_runs_per_state);
    for state in 0..spec.n_states() {
        for idx in 0..n_runs_per_state {
            let mut rng = rng_from_seed(derive_seed(spec.seed, &[1, state as u64, idx as u64]));
            let innov = Normal::new(0.0, spec.noise_std).expect("valid std");
            let stationary = Normal::new(0.0, marginal_std).expect("valid std");
            // Latent AR(1) state per channel, started from its stationary
            // distribution so there is no burn-in transient.
            let mut latent: Vec<f64> = (0..spec.d).map(|_| stationary.sample(&mut rng)).collect();
            let fault = if state == 0 { None } else { Some(&spec.faults[state - 1]) };
            let mut values = Tensor::zeros(&[spec.run_length, spec.d]);
            let mut onset_readings = vec![0.0; spec.d];
            for t in 0..spec.run_length {
                let faulty_now = fault.is_some() && t >= spec.onset;
                for c in 0..spec.d {
                    let affected = fault.is_some_and(|f| f.channels.contains(&c));
                    let noise_scale = match fault {
                        Some(f)
                            if matches!(f.kind, FaultKind::RandomVariation)
                                && faulty_now
                                && affected =>
                        {
                            f.magnitude
                        }
                        _ => 1.0,
                    };
                    latent[c] = spec.ar_coeff * latent[c] + noise_scale * innov.sample(&mut rng);
                    let mut out = baselines[c] + latent[c];
                    if let Some(f) = fault {
                        if faulty_now && affected {
                            match f.kind {
                                FaultKind::Step => out += f.magnitude,
                                FaultKind::SlowDrift => out += f.magnitude * (t - spec.onset) as f64,
                                FaultKind::Sticking => {
                                    if t == spec.onset {
                                        onset_readings[c] = out;
                                    } else if rng.random::<f64>() < f.magnitude {
                                        out = onset_readings[c];
                                    }
                                }
                                FaultKind::RandomVariation => {}
                            }
                        }
                    }
                    values.set(t, c, out);
                }
            }
            runs.push(SensorRun {
                run_id: format!("s{state}r{idx}"),
                fault_label: state,
                fault_onset: if state == 0 { None } else { Some(spec.onset) },
                values,
                sampling_period_min: spec.sampling_period_min,
            });
        }
    }
    Ok(runs)
}

/// Parse the Run-CSV interchange format:
/// `run_id,t,fault_label,fault_onset,s0,...,s{D-1}` with a header row.
/// Rows of one run may be interleaved with other runs; they are reassembled
/// by `run_id` and ordered by `t`. Runs appear in order of first appearance.
pub fn ingest_csv(path: &Path) -> Result<Vec<SensorRun>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_csv_reader(file, &path.display().to_string())
}

pub fn ingest_csv_reader(reader: impl std::io::Read, source: &str) -> Result<Vec<SensorRun>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let at = |line: u64| format!("{source}:{line}");

    let headers = rdr.headers().map_err(|e| Error::parse(source, e.to_string()))?;
    let fixed = ["run_id", "t", "fault_label", "fault_onset"];
    if headers.len() < 5 || headers.iter().take(4).ne(fixed) {
        return Err(Error::parse(
            format!("{source}:1"),
            "header must be run_id,t,fault_label,fault_onset,s0,...".to_string(),
        ));
    }
    let d = headers.len() - 4;
    for (i, name) in headers.iter().skip(4).enumerate() {
        if name != format!("s{i}") {
            return Err(Error::parse(
                format!("{source}:1"),
                format!("sensor column {} named {name}, expected s{i}", i + 4),
            ));
        }
    }

    struct Partial {
        order: usize,
        fault_label: usize,
        fault_onset: Option<usize>,
        rows: Vec<(usize, Vec<f64>, u64)>,
    }
    let mut partials: BTreeMap<String, Partial> = BTreeMap::new();
    let mut next_order = 0usize;

    for record in rdr.records() {
        let record = record.map_err(|e| Error::parse(source, e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 4 + d {
            let run = record.get(0).unwrap_or("?");
            return Err(Error::parse(
                at(line),
                format!(
                    "run {run}: row has {} sensor columns, expected {d}",
                    record.len().saturating_sub(4)
                ),
            ));
        }
        let run_id = record[0].to_string();
        let t: usize = record[1]
            .parse()
            .map_err(|_| Error::parse(at(line), format!("run {run_id}: bad timestamp '{}'", &record[1])))?;
        let fault_label: usize = record[2]
            .parse()
            .map_err(|_| Error::parse(at(line), format!("run {run_id}: bad fault label '{}'", &record[2])))?;
        let fault_onset = if record[3].is_empty() {
            None
        } else {
            Some(record[3].parse::<usize>().map_err(|_| {
                Error::parse(at(line), format!("run {run_id}: bad fault onset '{}'", &record[3]))
            })?)
        };
        let mut row = Vec::with_capacity(d);
        for (i, field) in record.iter().skip(4).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(at(line), format!("run {run_id}: bad value '{field}' in s{i}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    at(line),
                    format!("run {run_id}: non-finite value in s{i}"),
                ));
            }
            row.push(v);
        }

        let entry = partials.entry(run_id.clone()).or_insert_with(|| Partial {
            order: next_order,
            fault_label,
            fault_onset,
            rows: Vec::new(),
        });
        next_order = next_order.max(entry.order + 1);
        if entry.fault_label != fault_label {
            return Err(Error::parse(
                at(line),
                format!(
                    "run {run_id}: fault label changes from {} to {fault_label}",
                    entry.fault_label
                ),
            ));
        }
        if entry.fault_onset != fault_onset {
            return Err(Error::parse(
                at(line),
                format!("run {run_id}: fault onset is not constant within the run"),
            ));
        }
        entry.rows.push((t, row, line));
    }

    let mut ordered: Vec<(String, Partial)> = partials.into_iter().collect();
    ordered.sort_by_key(|(_, p)| p.order);

    let mut runs = Vec::with_capacity(ordered.len());
    for (run_id, mut partial) in ordered {
        partial.rows.sort_by_key(|(t, _, _)| *t);
        for (expect, (t, _, line)) in partial.rows.iter().enumerate() {
            if *t != expect {
                return Err(Error::parse(
                    at(*line),
                    format!("run {run_id}: timestamps not contiguous (saw {t}, expected {expect})"),
                ));
            }
        }
        let t_len = partial.rows.len();
        let mut values = Tensor::zeros(&[t_len, d]);
        for (t, row, _) in &partial.rows {
            values.row_mut(*t).copy_from_slice(row);
        }
        let run = SensorRun {
            run_id,
            fault_label: partial.fault_label,
            fault_onset: partial.fault_onset,
            values,
            sampling_period_min: default_sampling_period(),
        };
        run.validate()?;
        runs.push(run);
    }
    Ok(runs)
}

/// Write runs in the Run-CSV interchange format (the inverse of
/// [`ingest_csv`] up to float formatting).
pub fn write_csv(path: &Path, runs: &[SensorRun]) -> Result<()> {
    let d = match runs.first() {
        Some(r) => r.n_channels(),
        None => return Err(Error::Validation("write_csv: no runs".into())),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut header = String::from("run_id,t,fault_label,fault_onset");
    for i in 0..d {
        header.push_str(&format!(",s{i}"));
    }
    writeln!(w, "{header}").map_err(io_err)?;
    for run in runs {
        if run.n_channels() != d {
            return Err(Error::ShapeMismatch(format!(
                "write_csv: run {} has {} channels, first run has {d}",
                run.run_id,
                run.n_channels()
            )));
        }
        let onset = run.fault_onset.map(|o| o.to_string()).unwrap_or_default();
        for t in 0..run.t_len() {
            let mut line = format!("{},{t},{},{onset}", run.run_id, run.fault_label);
            for v in run.values.row(t) {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(w, "{line}").map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Keep only the listed channels, in the listed order.
pub fn select_channels(runs: &[SensorRun], channels: &[usize]) -> Result<Vec<SensorRun>> {
    runs.iter()
        .map(|run| {
            let d = run.n_channels();
            if let Some(&c) = channels.iter().find(|&&c| c >= d) {
                return Err(Error::Validation(format!(
                    "channel {c} out of range for run {} with {d} channels",
                    run.run_id
                )));
            }
            let t_len = run.t_len();
            let mut values = Tensor::zeros(&[t_len, channels.len()]);
            for t in 0..t_len {
                for (j, &c) in channels.iter().enumerate() {
                    values.set(t, j, run.values.at(t, c));
                }
            }
            Ok(SensorRun {
                values,
                ..run.clone()
            })
        })
        .collect()
}

/// Pool all timestamps of the given (training) runs and compute per-channel
/// mean and population std. Channels with zero variance get std clamped to 1
/// and a warning on stderr.
pub fn compute_normalization(runs: &[SensorRun]) -> Result<NormalizationStats> {
    let d = match runs.first() {
        Some(r) => r.n_channels(),
        None => return Err(Error::Validation("compute_normalization: no runs".into())),
    };
    let mut n = 0usize;
    let mut mean = vec![0.0; d];
    for run in runs {
        for t in 0..run.t_len() {
            for (m, &v) in mean.iter_mut().zip(run.values.row(t)) {
                *m += v;
            }
        }
        n += run.t_len();
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for run in runs {
        for t in 0..run.t_len() {
            for (s, (&v, &m)) in var.iter_mut().zip(run.values.row(t).iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let std = (s / n as f64).sqrt();
            if std == 0.0 {
                eprintln!("warning: channel s{c} has zero variance; std clamped to 1");
                1.0
            } else {
                std
            }
        })
        .collect();
    Ok(NormalizationStats { mean, std })
}

impl NormalizationStats {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        self.transform(x, |v, m, s| (v - m) / s)
    }

    pub fn invert(&self, x: &Tensor) -> Tensor {
        self.transform(x, |v, m, s| v * s + m)
    }

    fn transform(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        assert_eq!(x.cols(), self.mean.len(), "normalization dimension mismatch");
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = f(*v, self.mean[j], self.std[j]);
            }
        }
        out
    }

    pub fn apply_runs(&self, runs: &[SensorRun]) -> Vec<SensorRun> {
        runs.iter()
            .map(|r| SensorRun {
                values: self.apply(&r.values),
                ..r.clone()
            })
            .collect()
    }
}

/// Slide a window of size `L` with the given step over each run. Windows lie
/// fully inside runs (no padding); a run shorter than `L` yields none. The
/// window label is the state at its last timestamp.
pub fn make_windows(runs: &[SensorRun], l: usize, step: usize) -> Vec<WindowSample> {
    assert!(l >= 1 && step >= 1, "window size and step must be ≥ 1");
    let mut windows = Vec::new();
    for run in runs {
        let t_len = run.t_len();
        if t_len < l {
            continue;
        }
        let d = run.n_channels();
        let mut end = l - 1;
        loop {
            let start = end + 1 - l;
            let mut values = Tensor::zeros(&[l, d]);
            for (i, t) in (start..=end).enumerate() {
                values.row_mut(i).copy_from_slice(run.values.row(t));
            }
            let label = match run.fault_onset {
                Some(onset) if end >= onset => run.fault_label,
                _ => 0,
            };
            windows.push(WindowSample {
                run_id: run.run_id.clone(),
                end_index: end,
                values,
                label,
            });
            match end.checked_add(step) {
                Some(next) if next < t_len => end = next,
                _ => break,
            }
        }
    }
    windows
}

fn group_indices_by_state(runs: &[SensorRun]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, run) in runs.iter().enumerate() {
        groups.entry(run.fault_label).or_default().push(i);
    }
    groups
}

fn take_random(indices: &[usize], n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let mut taken: Vec<usize> = shuffled.into_iter().take(n).collect();
    taken.sort_unstable();
    taken
}

/// Subsample the run list to `normal_count` normal runs and
/// `per_fault_count` runs of every fault state (uniform, without
/// replacement, deterministic given seed). Original order is preserved.
pub fn unbalance_train(
    runs: &[SensorRun],
    normal_count: usize,
    per_fault_count: usize,
    seed: u64,
) -> Result<Vec<SensorRun>> {
    let groups = group_indices_by_state(runs);
    let mut keep = Vec::new();
    for (&state, indices) in &groups {
        let want = if state == 0 { normal_count } else { per_fault_count };
        if indices.len() < want {
            return Err(Error::Validation(format!(
                "state {state}: requested {want} runs but only {} available",
                indices.len()
            )));
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[0x0BA1, state as u64]));
        keep.extend(take_random(indices, want, &mut rng));
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| runs[i].clone()).collect())
}

/// Stratified split: per state, `train_fraction` of the runs (rounded) go to
/// the training side. Deterministic given seed; output preserves input order
/// within each side.
pub fn split_runs(
    runs: &[SensorRun],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SensorRun>, Vec<SensorRun>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Validation(format!(
            "train fraction {train_fraction} outside (0,1)"
        )));
    }
    let groups = group_indices_by_state(runs);
    let mut train_idx = Vec::new();
    for (&state, indices) in &groups {
        let n_train = (indices.len() as f64 * train_fraction).round() as usize;
        let mut rng = rng_from_seed(derive_seed(seed, &[0x5B11, state as u64]));
        train_idx.extend(take_random(indices, n_train, &mut rng));
    }
    train_idx.sort_unstable();
    let in_train: std::collections::BTreeSet<usize> = train_idx.iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        if in_train.contains(&i) {
            train.push(run.clone());
        } else {
            test.push(run.clone());
        }
    }
    Ok((train, test))
}
