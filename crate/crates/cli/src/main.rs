//! `patchseg` command-line front end.
//!
//! Every command writes the resolved `config.json` into its output directory.
//! Exit status: 0 success, 1 input error, 2 pipeline error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use image::DynamicImage;
use patchseg::eval::prepare_frames;
use patchseg::overseg::patch_debug_cloud;
use patchseg::pipeline::training_samples;
use patchseg::search::format_positions;
use patchseg::*;

#[derive(Parser, Debug)]
#[command(name = "patchseg", version, about = "Patch-based semantic segmentation of indoor point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a forest on labeled clouds.
    Train(TrainArgs),
    /// Segment one cloud with a trained model.
    Segment(SegmentArgs),
    /// Evaluate by k-fold cross-validation or on a held-out set.
    Eval(EvalArgs),
    /// Generate labeled synthetic scenes.
    Synth(SynthArgs),
    /// Compute object-search positions around tables of a labeled cloud.
    SearchPositions(SearchArgs),
    /// Convert a registered depth/RGB/label PNG triple into a labeled cloud.
    IngestNyu(IngestArgs),
}

/// Configuration flags shared by all commands. Flags override `--config`.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON config to start from (as written next to every output).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stage [default: the config's, else 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    #[arg(long)]
    normal_k: Option<usize>,
    #[arg(long)]
    voxel_resolution: Option<f64>,
    #[arg(long)]
    seed_resolution: Option<f64>,
    #[arg(long)]
    w_spatial: Option<f64>,
    #[arg(long)]
    w_normal: Option<f64>,
    #[arg(long)]
    w_color: Option<f64>,
    #[arg(long)]
    min_patch_points: Option<usize>,
    #[arg(long)]
    min_floor_points: Option<usize>,
    #[arg(long)]
    ransac_iterations: Option<usize>,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    candidates_per_node: Option<usize>,
    #[arg(long)]
    thresholds_per_candidate: Option<usize>,
    #[arg(long)]
    min_samples_split: Option<usize>,
    #[arg(long)]
    class_weighting: Option<bool>,
    /// Unary weight of the MRF.
    #[arg(long)]
    lambda: Option<f64>,
    /// Edge-weight length scale of the MRF, meters.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lbp_iterations: Option<usize>,
    #[arg(long)]
    lbp_damping: Option<f64>,
    #[arg(long)]
    lbp_tol: Option<f64>,
    /// Skip the MRF and label patches by forest argmax.
    #[arg(long)]
    unary_only: bool,
    #[arg(long)]
    cluster_radius: Option<f64>,
    #[arg(long)]
    min_cluster_points: Option<usize>,
    #[arg(long)]
    security_distance: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Labeled PLY files or directories of them.
    #[arg(required = true)]
    data: Vec<PathBuf>,
    /// Output directory (model.json, config.json).
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    /// Input PLY cloud.
    input: PathBuf,
    #[arg(long, short)]
    model: PathBuf,
    /// Output directory (labels.ply, distributions.txt, timing.txt, config.json).
    #[arg(long, short)]
    out: PathBuf,
    /// Camera pose file (`height`, `pitch`, `roll`); otherwise the ground is
    /// fit to floor labels for camera-frame input.
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Also write patches.ply, colored by patch id.
    #[arg(long)]
    debug_patches: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labeled PLY files or directories (training set, or the whole set for k-fold).
    #[arg(required = true)]
    data: Vec<PathBuf>,
    /// Held-out test clouds; switches from k-fold to train/test evaluation.
    #[arg(long, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Output directory (report.txt, report.json, config.json).
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; scenes are written as scene_<seed>.ply.
    #[arg(long, short)]
    out: PathBuf,
    /// Number of scenes; scene i uses seed `--seed + i`.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Empty room without furniture.
    #[arg(long)]
    empty: bool,
    #[arg(long)]
    points_per_m2: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct SearchArgs {
    /// Labeled gravity-aligned PLY (e.g. `segment` output).
    input: PathBuf,
    /// Output directory (positions.txt, config.json).
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// 16-bit depth PNG.
    #[arg(long)]
    depth: PathBuf,
    /// RGB PNG registered to the depth image.
    #[arg(long)]
    rgb: PathBuf,
    /// 8- or 16-bit PNG of raw dataset class ids.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Intrinsics file (`fx`, `fy`, `cx`, `cy`, `depth_scale`); default Kinect v1.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Raw id to label table (`raw_id,label` lines); default is the bundled NYU table.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
    /// Output file stem; default is the depth file stem.
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

enum Failure {
    Input(anyhow::Error),
    Pipeline(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait InputContext<T> {
    fn input(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self) -> Outcome<T> {
        self.map_err(|e| Failure::Input(e.into()))
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => Failure::Input(e.into()),
        other => Failure::Pipeline(other.into()),
    }
}

fn resolve_config(a: &ConfigArgs) -> Outcome<PipelineConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .input()?;
            PipelineConfig::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .input()?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    macro_rules! set {
        ($flag:ident => $($field:ident).+) => {
            if let Some(v) = a.$flag {
                cfg.$($field).+ = v;
            }
        };
    }
    set!(normal_k => normal_k);
    set!(voxel_resolution => overseg.voxel_resolution);
    set!(seed_resolution => overseg.seed_resolution);
    set!(w_spatial => overseg.w_spatial);
    set!(w_normal => overseg.w_normal);
    set!(w_color => overseg.w_color);
    set!(min_patch_points => overseg.min_patch_points);
    set!(min_floor_points => min_floor_points);
    set!(ransac_iterations => ransac.iterations);
    set!(ransac_threshold => ransac.threshold);
    set!(trees => forest.num_trees);
    set!(max_depth => forest.max_depth);
    set!(candidates_per_node => forest.candidates_per_node);
    set!(thresholds_per_candidate => forest.thresholds_per_candidate);
    set!(min_samples_split => forest.min_samples_split);
    set!(class_weighting => forest.class_weighting);
    set!(lambda => mrf.lambda);
    set!(sigma => mrf.sigma);
    set!(lbp_iterations => lbp.max_iters);
    set!(lbp_damping => lbp.damping);
    set!(lbp_tol => lbp.tol);
    set!(cluster_radius => search.cluster_radius);
    set!(min_cluster_points => search.min_points);
    set!(security_distance => search.security_distance);
    if a.unary_only {
        cfg.unary_only = true;
    }
    cfg.validate().map_err(pipeline_failure)?;

    if let Some(n) = a.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")
            .input()?;
    }
    Ok(cfg)
}

fn prepare_out_dir(out: &Path, cfg: &PipelineConfig) -> Outcome<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .input()?;
    write_file(&out.join("config.json"), cfg.to_json().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome<()> {
    fs::write(path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .input()
}

/// Expands directories to their `.ply` files; order is sorted and stable.
fn collect_clouds(paths: &[PathBuf]) -> Outcome<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))
                .input()?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::Input(anyhow!("no input clouds found")));
    }
    Ok(out)
}

fn load_clouds(paths: &[PathBuf]) -> Outcome<Vec<PointCloud>> {
    collect_clouds(paths)?
        .iter()
        .map(|p| read_cloud(p).with_context(|| format!("reading {}", p.display())).input())
        .collect()
}

fn train(args: &TrainArgs) -> Outcome<()> {
    let cfg = resolve_config(&args.cfg)?;
    let clouds = load_clouds(&args.data)?;
    let (frames, discarded) = prepare_frames(&clouds, &cfg).map_err(pipeline_failure)?;
    if discarded > 0 {
        eprintln!("skipped {discarded} frame(s) without a usable ground plane");
    }
    let samples: Vec<_> = frames.iter().flatten().flat_map(training_samples).collect();
    let model = train_forest(&TrainingSet::new(samples), &cfg.forest)
        .map_err(|e| Failure::Pipeline(e.into()))?;
    prepare_out_dir(&args.out, &cfg)?;
    write_file(&args.out.join("model.json"), model.to_json().as_bytes())?;
    println!(
        "trained {} trees on {} patches from {} frame(s)",
        model.num_trees,
        model.training_meta.num_samples,
        frames.len() - discarded
    );
    Ok(())
}

fn segment(args: &SegmentArgs) -> Outcome<()> {
    let cfg = resolve_config(&args.cfg)?;
    let cloud = read_cloud(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))
        .input()?;
    let model = ForestModel::load(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))
        .input()?;
    let pose = match &args.pose {
        Some(p) => Some(CameraPose::load(p).input()?),
        None => None,
    };
    let frame = match prepare_frame(&cloud, &cfg, pose.as_ref()) {
        Ok(f) => f,
        Err(PipelineError::FrameDiscarded(reason)) => {
            return Err(Failure::Pipeline(anyhow!("frame skipped: {reason}")));
        }
        Err(e) => return Err(pipeline_failure(e)),
    };
    let seg = label_frame(&frame, &model, &cfg).map_err(pipeline_failure)?;
    let mut labeled = frame.cloud.clone();
    for (p, l) in labeled.points.iter_mut().zip(&seg.labels) {
        p.label = Some(*l);
    }

    prepare_out_dir(&args.out, &cfg)?;
    let labels_path = args.out.join("labels.ply");
    write_cloud(&labeled, &labels_path)
        .with_context(|| format!("writing {}", labels_path.display()))
        .input()?;

    let mut dump = String::from("# patch_id");
    for l in Label::TRAINABLE {
        write!(dump, " {}", l.name()).unwrap();
    }
    dump.push('\n');
    for (id, dist) in &seg.patch_distributions {
        write!(dump, "{id}").unwrap();
        for p in dist {
            write!(dump, " {p:.6}").unwrap();
        }
        dump.push('\n');
    }
    write_file(&args.out.join("distributions.txt"), dump.as_bytes())?;

    if args.debug_patches {
        let path = args.out.join("patches.ply");
        write_cloud(&patch_debug_cloud(&frame.cloud, &frame.graph), &path)
            .with_context(|| format!("writing {}", path.display()))
            .input()?;
    }

    let report = seg.timings.report();
    write_file(&args.out.join("timing.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn eval(args: &EvalArgs) -> Outcome<()> {
    let cfg = resolve_config(&args.cfg)?;
    let data = load_clouds(&args.data)?;
    let report = if args.test.is_empty() {
        cross_validate(&data, &cfg, args.folds, cfg.forest.seed).map_err(pipeline_failure)?
    } else {
        let test = load_clouds(&args.test)?;
        evaluate_holdout(&data, &test, &cfg).map_err(pipeline_failure)?
    };
    prepare_out_dir(&args.out, &cfg)?;
    let text = report.to_text();
    write_file(&args.out.join("report.txt"), text.as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&args.out.join("report.json"), json.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn synth(args: &SynthArgs) -> Outcome<()> {
    let cfg = resolve_config(&args.cfg)?;
    prepare_out_dir(&args.out, &cfg)?;
    for i in 0..args.count {
        let seed = cfg.forest.seed + i;
        let mut spec = SceneSpec::benchmark(seed);
        if args.empty {
            spec.furniture = patchseg::synth::FurnitureCounts::empty();
        }
        if let Some(v) = args.points_per_m2 {
            spec.points_per_m2 = v;
        }
        if let Some(v) = args.noise_sigma {
            spec.noise_sigma = v;
        }
        if let Some(v) = args.max_points {
            spec.max_points = v;
        }
        let cloud = generate_scene(&spec).input()?;
        let path = args.out.join(format!("scene_{seed:04}.ply"));
        write_cloud(&cloud, &path)
            .with_context(|| format!("writing {}", path.display()))
            .input()?;
        println!("{} ({} points)", path.display(), cloud.len());
    }
    Ok(())
}

fn search(args: &SearchArgs) -> Outcome<()> {
    let cfg = resolve_config(&args.cfg)?;
    let cloud = read_cloud(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))
        .input()?;
    if cloud.frame != Frame::GravityAligned {
        return Err(Failure::Input(anyhow!(
            "{} is not gravity-aligned; run `segment` first",
            args.input.display()
        )));
    }
    let clusters = cluster_tables(&cloud, &cfg.search);
    let positions: Vec<SearchPosition> = clusters
        .iter()
        .flat_map(|c| search_positions(c, cfg.search.security_distance))
        .collect();
    prepare_out_dir(&args.out, &cfg)?;
    let text = format_positions(&positions);
    write_file(&args.out.join("positions.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn gray_image(img: DynamicImage, what: &str) -> Outcome<Image<u16>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u16> = match img {
        DynamicImage::ImageLuma8(i) => i.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(i) => i.into_raw(),
        other => {
            return Err(Failure::Input(anyhow!("{what} must be a single-channel PNG, got {:?}", other.color())))
        }
    };
    Image::new(w, h, data).input()
}

fn ingest(args: &IngestArgs) -> Outcome<()> {
    let cfg = resolve_config(&args.cfg)?;
    let open = |p: &Path| image::open(p).with_context(|| format!("reading {}", p.display())).input();
    let depth = gray_image(open(&args.depth)?, "depth")?;
    let rgb_img = open(&args.rgb)?.into_rgb8();
    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    let rgb = Image::new(w, h, rgb_img.pixels().map(|p| p.0).collect()).input()?;

    let mapping = match &args.mapping {
        Some(p) => LabelMapping::load(p).input()?,
        None => LabelMapping::nyu_default(),
    };
    let labels = match &args.labels {
        Some(p) => {
            let raw = gray_image(open(p)?, "labels")?;
            let reduced = raw.data.iter().map(|&id| mapping.reduce(u32::from(id)).id()).collect();
            Some(Image::new(raw.width, raw.height, reduced).input()?)
        }
        None => None,
    };
    let intrinsics = match &args.intrinsics {
        Some(p) => Intrinsics::load(p).input()?,
        None => Intrinsics::default(),
    };
    let mut cloud = ingest_depth_frame(&depth, &rgb, labels.as_ref(), &intrinsics).input()?;
    let stem = match &args.name {
        Some(n) => n.clone(),
        None => args
            .depth
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "frame".into()),
    };
    cloud.meta.source_id = stem.clone();
    prepare_out_dir(&args.out, &cfg)?;
    let path = args.out.join(format!("{stem}.ply"));
    write_cloud(&cloud, &path)
        .with_context(|| format!("writing {}", path.display()))
        .input()?;
    println!("{} ({} points)", path.display(), cloud.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Eval(a) => eval(a),
        Command::Synth(a) => synth(a),
        Command::SearchPositions(a) => search(a),
        Command::IngestNyu(a) => ingest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
