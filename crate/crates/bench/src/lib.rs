//! Fixtures shared by the pipeline benchmarks.

use patchseg::eval::prepare_frames;
use patchseg::pipeline::training_samples;
use patchseg::{
    generate_scene, train_forest, ForestModel, PipelineConfig, PointCloud, PreparedFrame, SceneSpec, TrainingSet,
};

/// A benchmark scene capped at `max_points`.
pub fn scene(seed: u64, max_points: usize) -> PointCloud {
    let spec = SceneSpec {
        max_points,
        points_per_m2: 4000.0,
        ..SceneSpec::benchmark(seed)
    };
    generate_scene(&spec).expect("benchmark spec is valid")
}

/// Prepared training frames and a forest trained on them.
pub fn trained(config: &PipelineConfig, seeds: &[u64], max_points: usize) -> (Vec<PreparedFrame>, ForestModel) {
    let clouds: Vec<PointCloud> = seeds.iter().map(|&s| scene(s, max_points)).collect();
    let (frames, _) = prepare_frames(&clouds, config).expect("synthetic frames prepare");
    let frames: Vec<PreparedFrame> = frames.into_iter().flatten().collect();
    let samples = frames.iter().flat_map(training_samples).collect();
    let model = train_forest(&TrainingSet::new(samples), &config.forest).expect("training succeeds");
    (frames, model)
}
