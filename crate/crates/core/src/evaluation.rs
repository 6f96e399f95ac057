//! Benchmark protocols.
//!
//! The re-initialization protocol tracks each sequence, declares a failure
//! when the overlap with ground truth drops to the threshold, re-initializes
//! from ground truth five frames later, and reports expected average overlap
//! (EAO), accuracy (A, burn-in frames excluded) and robustness (R, failures
//! per 100 frames). The one-pass protocol runs a single uninterrupted pass
//! and reports precision/success curves over tracked frames (the given
//! init frame is not scored). Metrics are pure functions of the recorded
//! trajectories, so stored result files reproduce them exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data_model::{center_error, iou, BoundingBox, FramePair, Sequence, ATTRIBUTE_VOCABULARY};
use crate::error::{Error, Result};
use crate::model::{mix_seed, TrackModel};
use crate::tracker::{self, TrackerConfig};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub vot_runs: usize,
    pub ope_runs: usize,
    /// A frame fails when overlap ≤ this (0 = the VOT convention).
    pub fail_threshold: f64,
    /// Re-initialize this many frames after a failure.
    pub reinit_gap: usize,
    /// Evaluated frames right after each (re-)initialization excluded from A.
    pub burn_in: usize,
    /// Percentile interval of segment lengths defining the EAO window.
    pub eao_lo_pct: f64,
    pub eao_hi_pct: f64,
    /// Precision curve runs over 0..=max center-error pixels, step 1.
    pub precision_max_px: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            vot_runs: 15,
            ope_runs: 5,
            fail_threshold: 0.0,
            reinit_gap: 5,
            burn_in: 5,
            eao_lo_pct: 15.0,
            eao_hi_pct: 85.0,
            precision_max_px: 50,
            seed: 0,
        }
    }
}

/// Per-sequence tracking session the protocols drive.
pub trait SequenceTracker {
    fn init(&mut self, frame_idx: usize, frame: &FramePair, bbox: &BoundingBox) -> Result<()>;
    fn track(&mut self, frame_idx: usize, frame: &FramePair) -> Result<BoundingBox>;
}

/// Creates one tracking session per (sequence, run).
pub trait TrackerFactory: Sync {
    fn start<'a>(&'a self, seq: &Sequence, run: usize) -> Result<Box<dyn SequenceTracker + 'a>>;
}

/// Live tracker sessions over a trained model.
pub struct ModelTrackerFactory<'m> {
    pub model: &'m TrackModel,
    pub config: TrackerConfig,
    pub base_seed: u64,
}

struct ModelSession<'m> {
    model: &'m TrackModel,
    config: TrackerConfig,
    seed: u64,
    state: Option<tracker::TrackerState>,
}

impl SequenceTracker for ModelSession<'_> {
    fn init(&mut self, frame_idx: usize, frame: &FramePair, bbox: &BoundingBox) -> Result<()> {
        let seed = mix_seed(self.seed, &format!("init{frame_idx}"));
        self.state = Some(tracker::init(frame, bbox, self.model, &self.config, seed)?);
        Ok(())
    }

    fn track(&mut self, _frame_idx: usize, frame: &FramePair) -> Result<BoundingBox> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::InvalidConfig("track before init".into()))?;
        tracker::track_frame(state, frame, self.model, &self.config)
    }
}

impl TrackerFactory for ModelTrackerFactory<'_> {
    fn start<'a>(&'a self, seq: &Sequence, run: usize) -> Result<Box<dyn SequenceTracker + 'a>> {
        let seed = mix_seed(mix_seed(self.base_seed, "run"), &format!("{run}/{}", seq.name));
        Ok(Box::new(ModelSession {
            model: self.model,
            config: self.config.clone(),
            seed,
            state: None,
        }))
    }
}

/// Replays stored trajectories (result files, scripted fixtures, oracle
/// ground truth). Re-initialization does not change what it replays.
pub struct ReplayFactory {
    /// boxes[run][sequence name] -> one box per frame
    pub runs: Vec<BTreeMap<String, Vec<BoundingBox>>>,
}

struct ReplaySession {
    boxes: Vec<BoundingBox>,
}

impl SequenceTracker for ReplaySession {
    fn init(&mut self, _frame_idx: usize, _frame: &FramePair, _bbox: &BoundingBox) -> Result<()> {
        Ok(())
    }

    fn track(&mut self, frame_idx: usize, _frame: &FramePair) -> Result<BoundingBox> {
        self.boxes.get(frame_idx).copied().ok_or_else(|| {
            Error::DatasetLayout(format!("replay trajectory has no frame {frame_idx}"))
        })
    }
}

impl TrackerFactory for ReplayFactory {
    fn start<'a>(&'a self, seq: &Sequence, run: usize) -> Result<Box<dyn SequenceTracker + 'a>> {
        let run_map = self.runs.get(run % self.runs.len().max(1)).ok_or_else(|| {
            Error::DatasetLayout(format!("no stored run {run}"))
        })?;
        let boxes = run_map.get(&seq.name).ok_or_else(|| {
            Error::DatasetLayout(format!("no stored results for sequence {}", seq.name))
        })?;
        if boxes.len() != seq.len() {
            return Err(Error::GroundtruthMismatch {
                frames: seq.len(),
                boxes: boxes.len(),
            });
        }
        Ok(Box::new(ReplaySession { boxes: boxes.clone() }))
    }
}

/// Oracle: replays the ground truth itself.
pub struct OracleFactory;

impl TrackerFactory for OracleFactory {
    fn start(&self, seq: &Sequence, _run: usize) -> Result<Box<dyn SequenceTracker>> {
        Ok(Box::new(ReplaySession {
            boxes: seq.groundtruth.clone(),
        }))
    }
}

/// What happened at each frame of a supervised (re-initialization) pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrameOutcome {
    /// Tracker was (re-)initialized on this frame with ground truth.
    Init,
    /// Burn-in frame between a failure and the next re-initialization.
    Skipped,
    Tracked { bbox: BoundingBox, overlap: f64 },
}

/// One initialization-to-failure (or sequence-end) span.
#[derive(Debug, Clone)]
pub struct Segment {
    pub overlaps: Vec<f64>,
    pub ended_by_failure: bool,
}

#[derive(Debug, Clone)]
pub struct VotSequenceResult {
    pub name: String,
    pub frames: usize,
    pub trace: Vec<FrameOutcome>,
    pub failures: Vec<usize>,
    pub reinits: Vec<usize>,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone)]
pub struct VotRunResult {
    pub per_sequence: Vec<VotSequenceResult>,
}

/// Supervised pass over one sequence.
pub fn run_vot_sequence(
    session: &mut dyn SequenceTracker,
    seq: &Sequence,
    cfg: &EvalConfig,
) -> Result<VotSequenceResult> {
    let n = seq.len();
    let mut trace = vec![FrameOutcome::Skipped; n];
    let mut failures = Vec::new();
    let mut reinits = Vec::new();
    let mut segments = Vec::new();

    let mut t = 0usize;
    session.init(0, &seq.frames[0], &seq.groundtruth[0])?;
    trace[0] = FrameOutcome::Init;
    let mut current: Vec<f64> = Vec::new();
    t += 1;
    while t < n {
        let bbox = session.track(t, &seq.frames[t])?;
        let overlap = iou(&bbox, &seq.groundtruth[t]);
        trace[t] = FrameOutcome::Tracked { bbox, overlap };
        current.push(overlap);
        if overlap <= cfg.fail_threshold {
            failures.push(t);
            segments.push(Segment {
                overlaps: std::mem::take(&mut current),
                ended_by_failure: true,
            });
            let reinit_at = t + cfg.reinit_gap;
            if reinit_at < n {
                for skipped in t + 1..reinit_at {
                    trace[skipped] = FrameOutcome::Skipped;
                }
                session.init(reinit_at, &seq.frames[reinit_at], &seq.groundtruth[reinit_at])?;
                trace[reinit_at] = FrameOutcome::Init;
                reinits.push(reinit_at);
                t = reinit_at + 1;
            } else {
                t = n;
            }
        } else {
            t += 1;
        }
    }
    if !current.is_empty() {
        segments.push(Segment {
            overlaps: current,
            ended_by_failure: false,
        });
    }
    Ok(VotSequenceResult {
        name: seq.name.clone(),
        frames: n,
        trace,
        failures,
        reinits,
        segments,
    })
}

fn nearest_rank(sorted: &[usize], pct: f64) -> usize {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Expected average overlap over the declared percentile window of segment
/// lengths: overlap-vs-frame curves per segment (zeros extend past a
/// failure, truncation past a natural sequence end), averaged at each index.
pub fn expected_average_overlap(segments: &[Segment], lo_pct: f64, hi_pct: f64) -> f64 {
    if segments.is_empty() {
        return 0.0;
    }
    let mut lengths: Vec<usize> = segments.iter().map(|s| s.overlaps.len().max(1)).collect();
    lengths.sort_unstable();
    let n_lo = nearest_rank(&lengths, lo_pct).max(1);
    let n_hi = nearest_rank(&lengths, hi_pct).max(n_lo);

    let mut total = 0.0;
    for idx in n_lo..=n_hi {
        // curve index idx (1-based frame position within a segment)
        let mut sum = 0.0;
        let mut count = 0usize;
        for seg in segments {
            if idx <= seg.overlaps.len() {
                sum += seg.overlaps[idx - 1];
                count += 1;
            } else if seg.ended_by_failure {
                // zeros after failure
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
        }
    }
    total / (n_hi - n_lo + 1) as f64
}

/// Accuracy: mean overlap over evaluated frames, excluding the first
/// `burn_in` frames of every segment. Length-weighted across sequences.
pub fn vot_accuracy(results: &[VotSequenceResult], burn_in: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seq in results {
        for seg in &seq.segments {
            for ov in seg.overlaps.iter().skip(burn_in) {
                sum += ov;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Robustness: failures per 100 frames, length-weighted across sequences.
pub fn vot_robustness(results: &[VotSequenceResult]) -> f64 {
    let failures: usize = results.iter().map(|r| r.failures.len()).sum();
    let frames: usize = results.iter().map(|r| r.frames).sum();
    if frames == 0 {
        0.0
    } else {
        100.0 * failures as f64 / frames as f64
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct VotMetrics {
    pub eao: f64,
    pub accuracy: f64,
    pub robustness: f64,
}

#[derive(Debug, Clone)]
pub struct VotReport {
    pub eao: f64,
    pub accuracy: f64,
    pub robustness: f64,
    pub eao_sd: f64,
    pub per_run: Vec<VotMetrics>,
    pub runs: Vec<VotRunResult>,
}

/// Full supervised protocol: `runs` repetitions over every sequence,
/// metrics per run, means over runs.
pub fn run_vot_protocol(
    factory: &dyn TrackerFactory,
    sequences: &[Sequence],
    runs: usize,
    cfg: &EvalConfig,
) -> Result<VotReport> {
    if sequences.is_empty() {
        return Err(Error::InvalidConfig("empty sequence set".into()));
    }
    if runs == 0 {
        return Err(Error::InvalidConfig("runs must be >= 1".into()));
    }
    let jobs: Vec<(usize, &Sequence)> = (0..runs)
        .flat_map(|r| sequences.iter().map(move |s| (r, s)))
        .collect();
    let results: Vec<Result<(usize, VotSequenceResult)>> = jobs
        .par_iter()
        .map(|(run, seq)| {
            let mut session = factory.start(seq, *run)?;
            Ok((*run, run_vot_sequence(session.as_mut(), seq, cfg)?))
        })
        .collect();

    let mut per_run_results: Vec<VotRunResult> = (0..runs)
        .map(|_| VotRunResult { per_sequence: Vec::new() })
        .collect();
    for r in results {
        let (run, res) = r?;
        per_run_results[run].per_sequence.push(res);
    }

    let per_run: Vec<VotMetrics> = per_run_results
        .iter()
        .map(|run| {
            let segments: Vec<Segment> = run
                .per_sequence
                .iter()
                .flat_map(|s| s.segments.iter().cloned())
                .collect();
            VotMetrics {
                eao: expected_average_overlap(&segments, cfg.eao_lo_pct, cfg.eao_hi_pct),
                accuracy: vot_accuracy(&run.per_sequence, cfg.burn_in),
                robustness: vot_robustness(&run.per_sequence),
            }
        })
        .collect();

    let (eao, eao_sd) = aggregate_runs(&per_run.iter().map(|m| m.eao).collect::<Vec<_>>());
    let (accuracy, _) = aggregate_runs(&per_run.iter().map(|m| m.accuracy).collect::<Vec<_>>());
    let (robustness, _) = aggregate_runs(&per_run.iter().map(|m| m.robustness).collect::<Vec<_>>());
    Ok(VotReport {
        eao,
        accuracy,
        robustness,
        eao_sd,
        per_run,
        runs: per_run_results,
    })
}

/// Precision curve over integer center-error thresholds and success curve
/// over overlap thresholds 0..1 step 0.01.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct OpeCurves {
    pub precision: Vec<f64>,
    pub success: Vec<f64>,
    pub pr20: f64,
    pub sr_auc: f64,
}

impl OpeCurves {
    fn from_errors(overlaps: &[f64], errors: &[f64], max_px: usize) -> Self {
        let n = overlaps.len().max(1) as f64;
        let precision: Vec<f64> = (0..=max_px)
            .map(|t| errors.iter().filter(|&&e| e <= t as f64).count() as f64 / n)
            .collect();
        // strict at zero (failed frames never count), inclusive elsewhere
        // (perfect overlap counts at threshold 1)
        let success: Vec<f64> = (0..=100)
            .map(|i| {
                let t = i as f64 / 100.0;
                let hits = if i == 0 {
                    overlaps.iter().filter(|&&o| o > 0.0).count()
                } else {
                    overlaps.iter().filter(|&&o| o >= t).count()
                };
                hits as f64 / n
            })
            .collect();
        Self::from_curves(precision, success)
    }

    fn from_curves(precision: Vec<f64>, success: Vec<f64>) -> Self {
        let pr20 = precision.get(20).copied().unwrap_or(0.0);
        let sr_auc = success.iter().sum::<f64>() / success.len().max(1) as f64;
        Self { precision, success, pr20, sr_auc }
    }

    fn average(curves: &[&OpeCurves]) -> OpeCurves {
        let np = curves[0].precision.len();
        let ns = curves[0].success.len();
        let m = curves.len() as f64;
        let precision = (0..np)
            .map(|i| curves.iter().map(|c| c.precision[i]).sum::<f64>() / m)
            .collect();
        let success = (0..ns)
            .map(|i| curves.iter().map(|c| c.success[i]).sum::<f64>() / m)
            .collect();
        Self::from_curves(precision, success)
    }
}

#[derive(Debug, Clone)]
pub struct OpeReport {
    pub curves: OpeCurves,
    /// Sequence name → curve averaged over runs.
    pub per_sequence: Vec<(String, OpeCurves)>,
    pub per_run: Vec<OpeCurves>,
}

/// One-pass evaluation: init only at frame 0, uninterrupted tracking,
/// curves averaged over frames → sequences → runs.
pub fn run_ope(
    factory: &dyn TrackerFactory,
    sequences: &[Sequence],
    runs: usize,
    cfg: &EvalConfig,
) -> Result<OpeReport> {
    if sequences.is_empty() {
        return Err(Error::InvalidConfig("empty sequence set".into()));
    }
    if runs == 0 {
        return Err(Error::InvalidConfig("runs must be >= 1".into()));
    }
    let jobs: Vec<(usize, &Sequence)> = (0..runs)
        .flat_map(|r| sequences.iter().map(move |s| (r, s)))
        .collect();
    let traced: Vec<Result<(usize, String, OpeCurves)>> = jobs
        .par_iter()
        .map(|(run, seq)| {
            let mut session = factory.start(seq, *run)?;
            session.init(0, &seq.frames[0], &seq.groundtruth[0])?;
            let mut overlaps = Vec::with_capacity(seq.len() - 1);
            let mut errors = Vec::with_capacity(seq.len() - 1);
            for t in 1..seq.len() {
                let bbox = session.track(t, &seq.frames[t])?;
                overlaps.push(iou(&bbox, &seq.groundtruth[t]));
                errors.push(center_error(&bbox, &seq.groundtruth[t]));
            }
            Ok((
                *run,
                seq.name.clone(),
                OpeCurves::from_errors(&overlaps, &errors, cfg.precision_max_px),
            ))
        })
        .collect();

    let mut by_run: Vec<Vec<(String, OpeCurves)>> = (0..runs).map(|_| Vec::new()).collect();
    for t in traced {
        let (run, name, curves) = t?;
        by_run[run].push((name, curves));
    }
    let per_run: Vec<OpeCurves> = by_run
        .iter()
        .map(|seqs| OpeCurves::average(&seqs.iter().map(|(_, c)| c).collect::<Vec<_>>()))
        .collect();
    let curves = OpeCurves::average(&per_run.iter().collect::<Vec<_>>());

    // per-sequence curves averaged over runs
    let mut per_sequence = Vec::new();
    for (name, _) in &by_run[0] {
        let collected: Vec<&OpeCurves> = by_run
            .iter()
            .map(|seqs| &seqs.iter().find(|(n, _)| n == name).expect("same set per run").1)
            .collect();
        per_sequence.push((name.clone(), OpeCurves::average(&collected)));
    }
    Ok(OpeReport { curves, per_sequence, per_run })
}

/// Recompute PR/SR over the subset of sequences carrying each attribute tag.
/// Sequences may contribute to several attributes; tags without sequences
/// are absent from the output.
pub fn attribute_breakdown(
    per_sequence: &[(String, OpeCurves)],
    sequences: &[Sequence],
) -> Result<BTreeMap<String, (f64, f64)>> {
    let mut out = BTreeMap::new();
    for seq in sequences {
        for tag in &seq.attributes {
            if !ATTRIBUTE_VOCABULARY.contains(&tag.as_str()) {
                return Err(Error::UnknownAttribute(tag.clone()));
            }
        }
    }
    for tag in ATTRIBUTE_VOCABULARY {
        let members: Vec<&OpeCurves> = sequences
            .iter()
            .filter(|s| s.attributes.contains(tag))
            .filter_map(|s| {
                per_sequence
                    .iter()
                    .find(|(name, _)| name == &s.name)
                    .map(|(_, c)| c)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let avg = OpeCurves::average(&members);
        out.insert(tag.to_string(), (avg.pr20, avg.sr_auc));
    }
    Ok(out)
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate_runs(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// JSON summary of an evaluation (either protocol fills its fields).
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub protocol: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eao: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robustness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr20: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sr_auc: Option<f64>,
    pub per_attribute: BTreeMap<String, (f64, f64)>,
    pub per_run: Vec<serde_json::Value>,
    pub runs: usize,
}

/// Write `threshold,value` rows.
pub fn write_curve_csv(path: &Path, thresholds: impl Iterator<Item = f64>, values: &[f64]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "threshold,value").map_err(|e| Error::io(path, e))?;
    for (t, v) in thresholds.zip(values) {
        writeln!(f, "{t},{v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Persist a supervised-pass trace: `init`, `skip`, or `x,y,w,h` per frame.
pub fn write_vot_trace(dir: &Path, seq_name: &str, trace: &[FrameOutcome]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{seq_name}.txt"));
    let mut text = String::new();
    for outcome in trace {
        match outcome {
            FrameOutcome::Init => text.push_str("init\n"),
            FrameOutcome::Skipped => text.push_str("skip\n"),
            FrameOutcome::Tracked { bbox, .. } => {
                text.push_str(&format!("{},{},{},{}\n", bbox.x, bbox.y, bbox.w, bbox.h))
            }
        }
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
