//! Semantic segmentation of indoor RGB-D point clouds by patch
//! classification and pairwise smoothing.

pub mod cloud;
pub mod color;
pub mod eval;
pub mod features;
pub mod forest;
pub mod ground;
pub mod mrf;
pub mod normals;
pub mod overseg;
pub mod pipeline;
pub mod ply;
pub mod search;
pub mod synth;

pub use cloud::{
    ingest_depth_frame, reduce_labels, CloudError, CloudMeta, Frame, Image, Intrinsics, Label,
    LabelMapping, Point, PointCloud, Vec3, NUM_CLASSES,
};
pub use eval::{cross_validate, evaluate_holdout, kfold_split, ConfusionMatrix, EvalReport};
pub use features::{extract_features, FeatureVector, FEATURE_CONTRACT_VERSION, FEATURE_DIM};
pub use forest::{
    load_model, save_model, train_forest, ForestError, ForestModel, ForestParams,
    LabelDistribution, TrainingSet,
};
pub use ground::{estimate_ground_plane, gravity_align, CameraPose, GroundError, GroundPlane, RansacParams};
pub use mrf::{build_problem, exact_map_bruteforce, solve_map_lbp, Labeling, LbpParams, MrfParams, MrfProblem};
pub use normals::compute_normals;
pub use overseg::{oversegment, OversegError, OversegParams, Patch, PatchGraph};
pub use pipeline::{
    label_frame, prepare_frame, segment_cloud, GroundSource, PipelineConfig, PipelineError,
    PreparedFrame, Segmentation, StageTimings,
};
pub use ply::{read_cloud, write_cloud, PlyError, PlyFormat};
pub use search::{cluster_tables, search_positions, SearchParams, SearchPosition, TableCluster};
pub use synth::{generate_scene, SceneSpec, SynthError};
