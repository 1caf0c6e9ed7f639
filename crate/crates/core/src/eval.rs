//! Pointwise confusion matrices, accuracy summaries and k-fold evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Label, PointCloud, NUM_CLASSES};
use crate::forest::{train_forest, TrainingSet};
use crate::pipeline::{
    label_frame, prepare_frame, training_samples, PipelineConfig, PipelineError, PreparedFrame,
    StageTimings,
};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth has {truth} labels but prediction has {predicted}")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("k must be >= 2, got {0}")]
    FoldCount(usize),
    #[error("cannot split {frames} frames into {k} folds")]
    TooFewFrames { frames: usize, k: usize },
}

/// Rows are ground truth, columns predictions, over the trainable labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
    /// Points with known ground truth whose prediction is `unknown`.
    pub uncovered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    /// Recall per class; `None` for classes absent from the ground truth.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub class_average: f64,
    pub global: f64,
    /// Fraction of known ground-truth points that received a label.
    pub coverage: f64,
}

impl ConfusionMatrix {
    pub fn accumulate(&mut self, truth: &[Label], predicted: &[Label]) -> Result<(), EvalError> {
        if truth.len() != predicted.len() {
            return Err(EvalError::LengthMismatch {
                truth: truth.len(),
                predicted: predicted.len(),
            });
        }
        for (t, p) in truth.iter().zip(predicted) {
            let Some(ti) = t.class_index() else { continue };
            match p.class_index() {
                Some(pi) => self.counts[ti][pi] += 1,
                None => self.uncovered += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..NUM_CLASSES {
            for c in 0..NUM_CLASSES {
                self.counts[r][c] += other.counts[r][c];
            }
        }
        self.uncovered += other.uncovered;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn summary(&self) -> AccuracySummary {
        let per_class: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|c| {
            let support = self.row_sum(c);
            (support > 0).then(|| self.counts[c][c] as f64 / support as f64)
        });
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let class_average = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = self.total();
        let global = if total == 0 { 0.0 } else { self.trace() as f64 / total as f64 };
        let known = total + self.uncovered;
        let coverage = if known == 0 { 1.0 } else { total as f64 / known as f64 };
        AccuracySummary { per_class, class_average, global, coverage }
    }
}

/// Shuffles `0..n` with the seed and cuts it into `k` contiguous folds whose
/// sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::TooFewFrames { frames: n, k });
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(ids[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class_accuracy: [Option<f64>; NUM_CLASSES],
    pub class_average: f64,
    pub global: f64,
    pub coverage: f64,
    /// Same metrics for the forest argmax without smoothing.
    pub unary_only: AccuracySummary,
    pub frames_evaluated: usize,
    pub frames_discarded: usize,
    /// Mean per-frame stage timings.
    pub timing: StageTimings,
}

impl EvalReport {
    fn new(
        confusion: ConfusionMatrix,
        unary: &ConfusionMatrix,
        frames_evaluated: usize,
        frames_discarded: usize,
        timing_sum: StageTimings,
    ) -> Self {
        let s = confusion.summary();
        EvalReport {
            per_class_accuracy: s.per_class,
            class_average: s.class_average,
            global: s.global,
            coverage: s.coverage,
            unary_only: unary.summary(),
            confusion,
            frames_evaluated,
            frames_discarded,
            timing: timing_sum.scaled(1.0 / frames_evaluated.max(1) as f64),
        }
    }

    /// Key/value lines followed by the confusion matrix block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        writeln!(out, "class_average {}", pct(self.class_average)).unwrap();
        writeln!(out, "global {}", pct(self.global)).unwrap();
        writeln!(out, "coverage {}", pct(self.coverage)).unwrap();
        writeln!(out, "unary_class_average {}", pct(self.unary_only.class_average)).unwrap();
        writeln!(out, "unary_global {}", pct(self.unary_only.global)).unwrap();
        writeln!(out, "frames_evaluated {}", self.frames_evaluated).unwrap();
        writeln!(out, "frames_discarded {}", self.frames_discarded).unwrap();
        for (label, acc) in Label::TRAINABLE.iter().zip(&self.per_class_accuracy) {
            let v = acc.map_or_else(|| "-".to_string(), pct);
            writeln!(out, "accuracy_{} {v}", label.name()).unwrap();
        }
        out.push_str(&self.timing.report());
        writeln!(out, "confusion (rows truth, cols prediction: {})",
            Label::TRAINABLE.map(|l| l.name()).join(" ")).unwrap();
        for row in &self.confusion.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
        out
    }
}

fn truth_of(frame: &PreparedFrame) -> Vec<Label> {
    frame.cloud.points.iter().map(|p| p.label.unwrap_or(Label::Unknown)).collect()
}

/// Prepares frames in parallel; frames without a usable ground plane are
/// counted as discarded.
pub fn prepare_frames(
    clouds: &[PointCloud],
    config: &PipelineConfig,
) -> Result<(Vec<Option<PreparedFrame>>, usize), PipelineError> {
    config.validate()?;
    let prepared: Vec<Result<PreparedFrame, PipelineError>> =
        clouds.par_iter().map(|c| prepare_frame(c, config, None)).collect();
    let mut out = Vec::with_capacity(prepared.len());
    let mut discarded = 0;
    for r in prepared {
        match r {
            Ok(f) => out.push(Some(f)),
            Err(PipelineError::FrameDiscarded(_)) => {
                discarded += 1;
                out.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((out, discarded))
}

/// Trains on `train` frames and scores `test` frames.
fn train_and_score(
    train: &[&PreparedFrame],
    test: &[&PreparedFrame],
    config: &PipelineConfig,
) -> Result<(ConfusionMatrix, ConfusionMatrix, StageTimings), PipelineError> {
    let samples: Vec<_> = train.iter().flat_map(|f| training_samples(f)).collect();
    if samples.is_empty() {
        return Err(PipelineError::Evaluation("no training patches".into()));
    }
    let model = train_forest(&TrainingSet::new(samples), &config.forest)?;
    let scored: Vec<_> = test
        .par_iter()
        .map(|f| label_frame(f, &model, config).map(|seg| (truth_of(f), seg)))
        .collect::<Result<_, _>>()?;
    let mut cm = ConfusionMatrix::default();
    let mut unary = ConfusionMatrix::default();
    let mut timing = StageTimings::default();
    for (truth, seg) in scored {
        cm.accumulate(&truth, &seg.labels).expect("same frame");
        unary.accumulate(&truth, &seg.unary_labels).expect("same frame");
        timing.add(&seg.timings);
    }
    Ok((cm, unary, timing))
}

/// Trains on `train` and evaluates on `test`.
pub fn evaluate_holdout(
    train: &[PointCloud],
    test: &[PointCloud],
    config: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    let (train_frames, _) = prepare_frames(train, config)?;
    let (test_frames, discarded) = prepare_frames(test, config)?;
    let train_refs: Vec<&PreparedFrame> = train_frames.iter().flatten().collect();
    let test_refs: Vec<&PreparedFrame> = test_frames.iter().flatten().collect();
    evaluate_prepared(&train_refs, &test_refs, discarded, config)
}

/// Scores already prepared frames; lets callers reuse preprocessing across
/// several forest configurations.
pub fn evaluate_prepared(
    train: &[&PreparedFrame],
    test: &[&PreparedFrame],
    discarded: usize,
    config: &PipelineConfig,
) -> Result<EvalReport, PipelineError> {
    if test.is_empty() {
        return Err(PipelineError::Evaluation("all test frames were discarded".into()));
    }
    let (cm, unary, timing) = train_and_score(train, test, config)?;
    Ok(EvalReport::new(cm, &unary, test.len(), discarded, timing))
}

/// k-fold cross-validation over frames.
pub fn cross_validate(
    dataset: &[PointCloud],
    config: &PipelineConfig,
    k: usize,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    if k < 2 {
        return Err(PipelineError::Evaluation(EvalError::FoldCount(k).to_string()));
    }
    let folds = kfold_split(dataset.len(), k, seed)
        .map_err(|e| PipelineError::Evaluation(e.to_string()))?;
    let (frames, discarded) = prepare_frames(dataset, config)?;
    if frames.iter().all(Option::is_none) {
        return Err(PipelineError::Evaluation("all frames were discarded".into()));
    }
    let mut cm = ConfusionMatrix::default();
    let mut unary = ConfusionMatrix::default();
    let mut timing = StageTimings::default();
    let mut evaluated = 0;
    for (f, fold) in folds.iter().enumerate() {
        let test: Vec<&PreparedFrame> = fold.iter().filter_map(|&i| frames[i].as_ref()).collect();
        if test.is_empty() {
            continue;
        }
        let train: Vec<&PreparedFrame> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, ids)| ids.iter().filter_map(|&i| frames[i].as_ref()))
            .collect();
        let (c, u, t) = train_and_score(&train, &test, config)?;
        cm.merge(&c);
        unary.merge(&u);
        timing.add(&t);
        evaluated += test.len();
    }
    Ok(EvalReport::new(cm, &unary, evaluated, discarded, timing))
}
