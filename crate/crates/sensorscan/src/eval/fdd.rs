//! Fault detection and diagnosis metrics over windowed predictions:
//! per-fault true/false positive rates, the binary detection reduction,
//! correct diagnosis rate, and average detection delay.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Everything needed to score a set of window predictions. `runs` lists the
/// window index span of each run, in order, and must partition
/// `0..truth.len()`; run structure is only used for the detection-delay
/// metric.
#[derive(Clone, Debug)]
pub struct FddInputs<'a> {
    pub truth: &'a [usize],
    pub pred: &'a [usize],
    /// Window index ranges, one per run, partitioning `0..truth.len()`.
    pub runs: &'a [Range<usize>],
    pub n_states: usize,
    pub normal_state: usize,
    /// Window step in raw samples; converts window-index delays to samples.
    pub step: usize,
    /// Minutes per raw sample; converts sample delays to time.
    pub sampling_period_min: f64,
}

/// Rates for one fault state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultMetrics {
    pub state: usize,
    /// Fraction of this fault's samples predicted as exactly this fault;
    /// absent when the evaluation set has no sample of the fault.
    pub tpr: Option<f64>,
    /// Fraction of normal samples predicted as this fault.
    pub fpr: f64,
    /// Number of samples of this fault in the evaluation set.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
}

/// Full evaluation report. Detection metrics reduce states to
/// faulty-vs-normal; a faulty sample predicted as a *different* fault counts
/// as detected but misdiagnosed, which is reconciled by `cdr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FddReport {
    pub schema_version: u32,
    /// Fingerprint of the configuration that produced the predictions;
    /// empty until report assembly fills it.
    #[serde(default)]
    pub config_fingerprint: String,
    pub n_states: usize,
    pub normal_state: usize,
    /// One entry per fault state, ascending by state id.
    pub per_fault: Vec<FaultMetrics>,
    /// Fraction of faulty samples predicted as some fault.
    pub detection_tpr: f64,
    /// Fraction of normal samples predicted as some fault.
    pub detection_fpr: f64,
    /// Correctly diagnosed faulty samples / detected faulty samples;
    /// absent when nothing was detected.
    pub cdr: Option<f64>,
    /// Mean delay between a run's first true faulty window and its first
    /// at-or-after fault prediction, in raw samples (window delay × step),
    /// over faulty runs with at least one detection; absent when no faulty
    /// run was detected.
    pub add_samples: Option<f64>,
    /// `add_samples` × sampling period.
    pub add_minutes: Option<f64>,
    /// Clustering agreement metrics, when the evaluation also scored raw
    /// cluster assignments.
    pub clustering: Option<ClusteringMetrics>,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Compute the detection/diagnosis metrics. Requires at least one normal
/// and one faulty sample (rates are undefined otherwise). The detection
/// delay ignores fault predictions before a run's true onset — a run counts
/// as detected only if some window at or after the first truly faulty one
/// is predicted faulty.
pub fn fdd_metrics(inputs: &FddInputs) -> Result<FddReport> {
    let FddInputs {
        truth,
        pred,
        runs,
        n_states,
        normal_state,
        step,
        sampling_period_min,
    } = *inputs;
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Validation(format!(
            "fdd metrics: need equal nonempty truth/prediction, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    if normal_state >= n_states {
        return Err(Error::Validation(format!(
            "fdd metrics: normal state {normal_state} out of range for {n_states} states"
        )));
    }
    if let Some(&q) = truth.iter().chain(pred).find(|&&q| q >= n_states) {
        return Err(Error::Validation(format!(
            "fdd metrics: state id {q} out of range for {n_states} states"
        )));
    }
    if step == 0 {
        return Err(Error::Validation("fdd metrics: step must be ≥ 1".into()));
    }
    if !(sampling_period_min > 0.0) {
        return Err(Error::Validation(
            "fdd metrics: sampling period must be > 0".into(),
        ));
    }
    // Runs must partition the window axis in order.
    let mut cursor = 0usize;
    for (i, r) in runs.iter().enumerate() {
        if r.start != cursor || r.end <= r.start {
            return Err(Error::Validation(format!(
                "fdd metrics: run {i} spans {}..{} but the previous run ended at {cursor}; \
                 runs must be nonempty, ordered, and contiguous",
                r.start, r.end
            )));
        }
        cursor = r.end;
    }
    if cursor != truth.len() {
        return Err(Error::Validation(format!(
            "fdd metrics: runs cover {cursor} windows, predictions have {}",
            truth.len()
        )));
    }

    let normal_count = truth.iter().filter(|&&q| q == normal_state).count();
    let faulty_count = truth.len() - normal_count;
    if normal_count == 0 || faulty_count == 0 {
        return Err(Error::Validation(format!(
            "fdd metrics: need both normal and faulty samples \
             (got {normal_count} normal, {faulty_count} faulty)"
        )));
    }

    let mut per_fault = Vec::new();
    for q in 0..n_states {
        if q == normal_state {
            continue;
        }
        let support = truth.iter().filter(|&&t| t == q).count();
        let hits = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t == q && p == q)
            .count();
        let false_alarms = truth
            .iter()
            .zip(pred)
            .filter(|(&t, &p)| t == normal_state && p == q)
            .count();
        per_fault.push(FaultMetrics {
            state: q,
            tpr: (support > 0).then(|| hits as f64 / support as f64),
            fpr: false_alarms as f64 / normal_count as f64,
            support,
        });
    }

    let detected_faulty = truth
        .iter()
        .zip(pred)
        .filter(|(&t, &p)| t != normal_state && p != normal_state)
        .count();
    let correctly_diagnosed = truth
        .iter()
        .zip(pred)
        .filter(|(&t, &p)| t != normal_state && p == t)
        .count();
    let normal_alarms = truth
        .iter()
        .zip(pred)
        .filter(|(&t, &p)| t == normal_state && p != normal_state)
        .count();
    let detection_tpr = detected_faulty as f64 / faulty_count as f64;
    let detection_fpr = normal_alarms as f64 / normal_count as f64;
    let cdr = (detected_faulty > 0).then(|| correctly_diagnosed as f64 / detected_faulty as f64);

    // Detection delay per faulty run.
    let mut delays = Vec::new();
    for r in runs {
        let Some(first_true) = (r.start..r.end).find(|&i| truth[i] != normal_state) else {
            continue; // normal run
        };
        let Some(first_pred) = (first_true..r.end).find(|&i| pred[i] != normal_state) else {
            continue; // undetected faulty run: excluded from the average
        };
        delays.push((first_pred - first_true) as f64);
    }
    let add_samples = (!delays.is_empty())
        .then(|| delays.iter().sum::<f64>() / delays.len() as f64 * step as f64);
    let add_minutes = add_samples.map(|s| s * sampling_period_min);

    Ok(FddReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_fingerprint: String::new(),
        n_states,
        normal_state,
        per_fault,
        detection_tpr,
        detection_fpr,
        cdr,
        add_samples,
        add_minutes,
        clustering: None,
    })
}
