//! End-to-end frame processing: normals, oversegmentation, gravity frame,
//! features, forest prediction and MRF smoothing.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Frame, Label, PointCloud, NUM_CLASSES};
use crate::features::{extract_features, ExtractedFeatures, FeatureVector};
use crate::forest::{argmax, ForestError, ForestModel, ForestParams, LabelDistribution};
use crate::ground::{
    estimate_ground_plane, gravity_align, gravity_rotation, CameraPose, GroundError, GroundPlane,
    RansacParams,
};
use crate::mrf::{build_problem, solve_map_lbp, LbpParams, Labeling, MrfError, MrfParams};
use crate::normals::compute_normals;
use crate::overseg::{oversegment, OversegError, OversegParams, PatchGraph};
use crate::search::SearchParams;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("frame discarded: {0}")]
    FrameDiscarded(#[from] GroundError),
    #[error(transparent)]
    Overseg(#[from] OversegError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Mrf(#[from] MrfError),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

/// Every tunable of the pipeline; serialized next to each output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub normal_k: usize,
    pub overseg: OversegParams,
    pub min_floor_points: usize,
    pub ransac: RansacParams,
    pub forest: ForestParams,
    pub mrf: MrfParams,
    pub lbp: LbpParams,
    /// Skip smoothing and label each patch by its forest argmax.
    pub unary_only: bool,
    pub search: SearchParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            normal_k: 15,
            overseg: OversegParams::default(),
            min_floor_points: 500,
            ransac: RansacParams::default(),
            forest: ForestParams::default(),
            mrf: MrfParams::default(),
            lbp: LbpParams::default(),
            unary_only: false,
            search: SearchParams::default(),
        }
    }
}

impl PipelineConfig {
    /// Sets every random seed in the configuration.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.forest.seed = seed;
        self.ransac.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.normal_k < 3 {
            return fail("normal_k must be >= 3");
        }
        self.overseg.validate()?;
        if self.overseg.min_patch_points < 3 {
            return fail("overseg.min_patch_points must be >= 3");
        }
        if self.ransac.iterations == 0 || !(self.ransac.threshold > 0.0) {
            return fail("ransac needs iterations >= 1 and threshold > 0");
        }
        self.forest.validate()?;
        if !(self.mrf.lambda > 0.0 && self.mrf.lambda.is_finite()) {
            return fail("mrf.lambda must be > 0");
        }
        if !(self.mrf.sigma > 0.0 && self.mrf.sigma.is_finite()) {
            return fail("mrf.sigma must be > 0");
        }
        if !(0.0..1.0).contains(&self.lbp.damping) {
            return fail("lbp.damping must be in [0, 1)");
        }
        if !(self.lbp.tol >= 0.0) {
            return fail("lbp.tol must be >= 0");
        }
        if !(self.search.cluster_radius > 0.0) || !(self.search.security_distance >= 0.0) {
            return fail("search radius must be > 0 and security distance >= 0");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Wall time per stage in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub normals_ms: f64,
    pub overseg_ms: f64,
    pub ground_ms: f64,
    pub features_ms: f64,
    pub prediction_ms: f64,
    pub mrf_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub fn add(&mut self, other: &StageTimings) {
        self.normals_ms += other.normals_ms;
        self.overseg_ms += other.overseg_ms;
        self.ground_ms += other.ground_ms;
        self.features_ms += other.features_ms;
        self.prediction_ms += other.prediction_ms;
        self.mrf_ms += other.mrf_ms;
        self.total_ms += other.total_ms;
    }

    pub fn scaled(&self, f: f64) -> StageTimings {
        StageTimings {
            normals_ms: self.normals_ms * f,
            overseg_ms: self.overseg_ms * f,
            ground_ms: self.ground_ms * f,
            features_ms: self.features_ms * f,
            prediction_ms: self.prediction_ms * f,
            mrf_ms: self.mrf_ms * f,
            total_ms: self.total_ms * f,
        }
    }

    pub fn report(&self) -> String {
        format!(
            "normals_ms {:.1}\noverseg_ms {:.1}\nground_ms {:.1}\nfeatures_ms {:.1}\nprediction_ms {:.1}\nmrf_ms {:.1}\ntotal_ms {:.1}\n",
            self.normals_ms,
            self.overseg_ms,
            self.ground_ms,
            self.features_ms,
            self.prediction_ms,
            self.mrf_ms,
            self.total_ms
        )
    }
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Where the ground plane comes from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroundSource {
    /// Known camera height and tilt (robot mode).
    Pose(CameraPose),
    /// Fit to floor-labeled points (dataset mode).
    Labels,
}

/// A frame up to and including feature extraction; independent of any model.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    /// Gravity-aligned cloud with normals.
    pub cloud: PointCloud,
    pub graph: PatchGraph,
    pub features: ExtractedFeatures,
    pub plane: Option<GroundPlane>,
    pub timings: StageTimings,
}

/// Runs the model-independent stages. Gravity-aligned input is used as is;
/// camera-frame input needs a pose or floor labels.
pub fn prepare_frame(
    cloud: &PointCloud,
    config: &PipelineConfig,
    pose: Option<&CameraPose>,
) -> Result<PreparedFrame, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let with_normals = compute_normals(cloud, config.normal_k)?;
    timings.normals_ms = ms_since(t);

    let t = Instant::now();
    let mut graph = oversegment(&with_normals, &config.overseg)?;
    timings.overseg_ms = ms_since(t);

    let t = Instant::now();
    let (aligned, plane) = match cloud.frame {
        Frame::GravityAligned => (with_normals, None),
        Frame::Camera => {
            let plane = match pose {
                Some(p) => p.ground_plane()?,
                None => estimate_ground_plane(cloud, config.min_floor_points, &config.ransac)?,
            };
            let aligned = gravity_align(&with_normals, &plane);
            let rot = gravity_rotation(&plane);
            for patch in &mut graph.patches {
                let n = patch.point_indices.len() as f64;
                patch.centroid = patch
                    .point_indices
                    .iter()
                    .map(|&i| aligned.points[i].position)
                    .sum::<crate::cloud::Vec3>()
                    / n;
                patch.mean_normal = rot * patch.mean_normal;
            }
            (aligned, Some(plane))
        }
    };
    timings.ground_ms = ms_since(t);

    let t = Instant::now();
    let features = extract_features(&graph, &aligned);
    timings.features_ms = ms_since(t);
    timings.total_ms = ms_since(start);

    Ok(PreparedFrame {
        cloud: aligned,
        graph,
        features,
        plane,
        timings,
    })
}

/// Majority ground-truth label of each patch, ties to the lower label id.
/// Patches whose majority is `unknown` yield no sample.
pub fn training_samples(frame: &PreparedFrame) -> Vec<(FeatureVector, Label)> {
    frame
        .features
        .vectors
        .iter()
        .filter_map(|(id, fv)| {
            let mut counts = [0usize; 8];
            for &i in &frame.graph.patches[*id].point_indices {
                if let Some(l) = frame.cloud.points[i].label {
                    counts[l.id() as usize] += 1;
                }
            }
            let mut best = 0;
            for k in 1..counts.len() {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            let label = Label::from_id(best as u8)?;
            (counts[best] > 0 && label.is_trainable()).then_some((*fv, label))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    /// Final label per point; points of dropped patches are `unknown`.
    pub labels: Vec<Label>,
    /// Per-point labels from the forest argmax alone.
    pub unary_labels: Vec<Label>,
    /// Forest output per patch, `(patch id, distribution)`.
    pub patch_distributions: Vec<(usize, LabelDistribution)>,
    pub mrf: Option<Labeling>,
    pub timings: StageTimings,
}

fn spread(graph: &PatchGraph, n: usize, patch_labels: &[Option<Label>]) -> Vec<Label> {
    let mut out = vec![Label::Unknown; n];
    for patch in &graph.patches {
        if let Some(l) = patch_labels[patch.id] {
            for &i in &patch.point_indices {
                out[i] = l;
            }
        }
    }
    out
}

/// Classifies a prepared frame and smooths the result over the patch graph.
pub fn label_frame(
    frame: &PreparedFrame,
    model: &ForestModel,
    config: &PipelineConfig,
) -> Result<Segmentation, PipelineError> {
    let mut timings = frame.timings;
    let t = Instant::now();
    let xs: Vec<FeatureVector> = frame.features.vectors.iter().map(|(_, x)| *x).collect();
    let dists = model.predict_batch(&xs)?;
    let patch_distributions: Vec<(usize, LabelDistribution)> = frame
        .features
        .vectors
        .iter()
        .map(|(id, _)| *id)
        .zip(dists)
        .collect();
    timings.prediction_ms = ms_since(t);

    let mut unary: Vec<Option<Label>> = vec![None; frame.graph.len()];
    for (id, d) in &patch_distributions {
        unary[*id] = Some(Label::TRAINABLE[argmax(d)]);
    }

    let t = Instant::now();
    let (final_patch, mrf) = if config.unary_only || frame.graph.is_empty() {
        (unary.clone(), None)
    } else {
        // Patches without features take no part in smoothing.
        let mut full = patch_distributions.clone();
        if full.len() < frame.graph.len() {
            let uniform = [1.0 / NUM_CLASSES as f64; NUM_CLASSES];
            let have: std::collections::HashSet<usize> = full.iter().map(|(id, _)| *id).collect();
            full.extend((0..frame.graph.len()).filter(|id| !have.contains(id)).map(|id| (id, uniform)));
        }
        let problem = build_problem(&frame.graph, &full, &config.mrf)?;
        let labeling = solve_map_lbp(&problem, &config.lbp);
        let labels = labeling
            .assignment
            .iter()
            .enumerate()
            .map(|(id, &c)| unary[id].map(|_| Label::TRAINABLE[c]))
            .collect();
        (labels, Some(labeling))
    };
    timings.mrf_ms = ms_since(t);
    timings.total_ms += timings.prediction_ms + timings.mrf_ms;

    let n = frame.cloud.len();
    Ok(Segmentation {
        labels: spread(&frame.graph, n, &final_patch),
        unary_labels: spread(&frame.graph, n, &unary),
        patch_distributions,
        mrf,
        timings,
    })
}

/// Full pipeline on one cloud. Returns the gravity-aligned cloud with its
/// labels replaced by the predictions, plus the segmentation details.
pub fn segment_cloud(
    cloud: &PointCloud,
    model: &ForestModel,
    config: &PipelineConfig,
    ground: Option<GroundSource>,
) -> Result<(PointCloud, Segmentation), PipelineError> {
    let pose = match ground {
        Some(GroundSource::Pose(p)) => Some(p),
        _ => None,
    };
    let frame = prepare_frame(cloud, config, pose.as_ref())?;
    let seg = label_frame(&frame, model, config)?;
    let mut out = frame.cloud;
    for (p, l) in out.points.iter_mut().zip(&seg.labels) {
        p.label = Some(*l);
    }
    Ok((out, seg))
}
