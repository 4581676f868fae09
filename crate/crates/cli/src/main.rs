use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fsac_core::data::{split_paired, validate_graph};
use fsac_core::eval::{evaluate, evaluate_mixed, export_features};
use fsac_core::experiment::{ablation_suite, sweep, SweepParam};
use fsac_core::synth::{calibrate, measure_spatial_stats, measure_temporal_stats};
use fsac_core::trainer::{ClusterAlgorithm, EvalSets};
use fsac_core::{
    generate_world, load_samples, run_fsac, EmbeddingHead, FaceBodyGraph, FsacError, MiningMode, Part,
    PipelineConfig, SampleSet, WorldConfig, WorldStats,
};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "fsac", version, about = "Unsupervised face/body re-identification on manga embeddings")]
struct Cli {
    /// Seed for every random choice; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for the parallel stages.
    #[arg(long, global = true, env = "FSAC_THREADS")]
    threads: Option<usize>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic world: faces.jsonl, bodies.jsonl, graph.jsonl, stats.json.
    Gen(GenArgs),
    /// Cluster one part's samples and write the labels.
    Cluster(ClusterArgs),
    /// Fine-tune face and body heads; writes heads and the epoch log.
    Train(TrainArgs),
    /// Evaluate trained heads on a query/gallery split.
    Eval(EvalArgs),
    /// Baseline / +ST triplet / full ablation over several seeds.
    Ablate(ExperimentArgs),
    /// One run per value of sigma or eta.
    Sweep(SweepArgs),
    /// Check a config (and optionally data files) without running anything.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mining_mode: Option<MiningMode>,
    #[arg(long, value_parser = parse_algorithm)]
    algorithm: Option<ClusterAlgorithm>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Shuffle mini-batches instead of keeping reading order.
    #[arg(long)]
    shuffle: Option<bool>,
    /// Face-body label fusion on or off.
    #[arg(long)]
    fusion: Option<bool>,
}

fn parse_mode(s: &str) -> Result<MiningMode, String> {
    s.parse().map_err(|e: FsacError| e.to_string())
}

fn parse_algorithm(s: &str) -> Result<ClusterAlgorithm, String> {
    s.parse().map_err(|e: FsacError| e.to_string())
}

#[derive(Args, Debug)]
struct GenArgs {
    /// World config, or a pipeline config with a `world` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Fit persistence and multi-character rates to the reference statistics first.
    #[arg(long)]
    calibrate: bool,
    #[arg(long, default_value_t = 30)]
    calibrate_iterations: usize,
}

#[derive(Args, Debug)]
struct Inputs {
    #[arg(long)]
    faces: PathBuf,
    #[arg(long)]
    bodies: PathBuf,
    #[arg(long)]
    graph: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_part, default_value = "face")]
    part: Part,
    /// Embed with this head before clustering.
    #[arg(long)]
    head: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn parse_part(s: &str) -> Result<Part, String> {
    match s {
        "face" => Ok(Part::Face),
        "body" => Ok(Part::Body),
        other => Err(format!("expected face or body, got `{other}`")),
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Hold out query/gallery samples (needs ground truth) and log metrics per epoch.
    #[arg(long)]
    holdout: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Directory holding face_head.json and body_head.json.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write query/gallery features as CSV.
    #[arg(long)]
    export_features: bool,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of seeds, counted up from --seed.
    #[arg(long)]
    seeds: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_parser = parse_param)]
    param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[command(flatten)]
    experiment: ExperimentArgs,
}

fn parse_param(s: &str) -> Result<SweepParam, String> {
    s.parse().map_err(|e: FsacError| e.to_string())
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, requires_all = ["bodies", "graph"])]
    faces: Option<PathBuf>,
    #[arg(long)]
    bodies: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
}

/// A problem with the invocation or its inputs, as opposed to a failure while running.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Invalid>().is_some() || e.downcast_ref::<FsacError>().is_some_and(FsacError::is_validation)
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Invalid("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Gen(args) => gen(args, seed),
        Command::Cluster(args) => cluster(args, seed),
        Command::Train(args) => train(args, seed),
        Command::Eval(args) => eval(args, seed),
        Command::Ablate(args) => ablate(args, seed),
        Command::Sweep(args) => run_sweep(args, seed),
        Command::Validate(args) => validate(args, seed),
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        bail!(Invalid(format!("file not found: {}", path.display())));
    }
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>, overrides: Option<&Overrides>) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => {
            require_file(p)?;
            PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(o) = overrides {
        apply_overrides(&mut cfg, o);
    }
    let seed = seed.unwrap_or(cfg.seed);
    let cfg = cfg.seeded(seed);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut PipelineConfig, o: &Overrides) {
    let t = &mut cfg.train;
    if let Some(v) = o.sigma {
        t.st_params.sigma = v;
    }
    if let Some(v) = o.eta {
        t.st_params.eta = v;
    }
    if let Some(v) = o.mining_mode {
        t.mining_mode = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.shuffle {
        t.shuffle = v;
    }
    if let Some(v) = o.fusion {
        t.fusion = v;
    }
    let c = &mut cfg.cluster;
    if let Some(v) = o.algorithm {
        c.algorithm = v;
    }
    if let Some(v) = o.eps {
        c.eps = v;
    }
    if let Some(v) = o.min_pts {
        c.min_pts = v;
    }
    if let Some(v) = o.k {
        c.k = v;
    }
}

fn out_dir(explicit: Option<PathBuf>, cfg: &PipelineConfig, fallback: &str) -> anyhow::Result<PathBuf> {
    let dir = explicit.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(FsacError::from)
        .with_context(|| format!("parsing {}", path.display()))
}

struct Data {
    faces: SampleSet,
    bodies: SampleSet,
    graph: FaceBodyGraph,
}

fn load_data(inputs: &Inputs) -> anyhow::Result<Data> {
    for p in [&inputs.faces, &inputs.bodies, &inputs.graph] {
        require_file(p)?;
    }
    let data = Data {
        faces: load_samples(&inputs.faces, Part::Face)?,
        bodies: load_samples(&inputs.bodies, Part::Body)?,
        graph: FaceBodyGraph::load(&inputs.graph)?,
    };
    check_graph(&data)?;
    Ok(data)
}

fn check_graph(data: &Data) -> anyhow::Result<()> {
    let violations = validate_graph(&data.graph, &data.faces, &data.bodies);
    if let Some(first) = violations.first() {
        bail!(Invalid(format!(
            "face-body graph has {} invalid pair(s); first: {} ({first:?})",
            violations.len(),
            first.kind()
        )));
    }
    Ok(())
}

/// The world section of a pipeline config, or a bare world config.
fn load_world_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<WorldConfig> {
    let mut world = match path {
        None => WorldConfig::default(),
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            match serde_json::from_str::<PipelineConfig>(&text) {
                Ok(cfg) => {
                    let seed = seed.unwrap_or(cfg.seed);
                    let mut w = cfg.world_or_default();
                    w.seed = seed;
                    w
                }
                Err(pipeline_err) => serde_json::from_str::<WorldConfig>(&text)
                    .map_err(|_| FsacError::from(pipeline_err))
                    .with_context(|| format!("parsing {}", p.display()))?,
            }
        }
    };
    if let Some(s) = seed {
        world.seed = s;
    }
    world.validate()?;
    Ok(world)
}

#[derive(Serialize)]
struct GenStats {
    world: WorldConfig,
    faces: usize,
    identities: usize,
    measured: WorldStats,
    reference: WorldStats,
}

fn gen(args: GenArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let mut world_cfg = load_world_config(args.config.as_deref(), seed)?;
    let reference = WorldStats::reference();
    if args.calibrate {
        world_cfg = calibrate(&world_cfg, &reference, args.calibrate_iterations)?;
    }
    let world = generate_world(&world_cfg)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    world.faces.write_jsonl(&args.out_dir.join("faces.jsonl"))?;
    world.bodies.write_jsonl(&args.out_dir.join("bodies.jsonl"))?;
    world.graph.write_jsonl(&args.out_dir.join("graph.jsonl"))?;

    let temporal = reference
        .temporal
        .keys()
        .map(|&k| Ok((k, measure_temporal_stats(&world.faces, k)?)))
        .collect::<fsac_core::Result<_>>()?;
    let identities: std::collections::BTreeSet<&str> =
        world.faces.samples().iter().filter_map(|s| s.identity.as_deref()).collect();
    let stats = GenStats {
        faces: world.faces.len(),
        identities: identities.len(),
        measured: WorldStats {
            temporal,
            frame_types: Some(measure_spatial_stats(&world.faces)?),
        },
        reference,
        world: world_cfg,
    };
    write_json(&args.out_dir.join("stats.json"), &stats)
}

#[derive(Serialize)]
struct ClusterReport {
    n_clusters: usize,
    n_noise: usize,
    labels: Vec<LabelRow>,
}

#[derive(Serialize)]
struct LabelRow {
    id: String,
    label: Option<usize>,
}

fn cluster(args: ClusterArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), seed, Some(&args.overrides))?;
    require_file(&args.input)?;
    let samples = load_samples(&args.input, args.part)?;
    let head = match &args.head {
        Some(p) => read_json::<EmbeddingHead>(p)?,
        None => EmbeddingHead::identity(samples.dim(), samples.dim()),
    };
    let features = head.forward_all(&samples.embeddings())?;
    let assignment = cfg.cluster.run(&features, cfg.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let report = ClusterReport {
        n_clusters: assignment.n_clusters,
        n_noise: assignment.n_noise(),
        labels: samples
            .samples()
            .iter()
            .zip(&assignment.labels)
            .map(|(s, l)| LabelRow {
                id: s.id.clone(),
                label: *l,
            })
            .collect(),
    };
    write_json(&args.out, &report)
}

fn train(args: TrainArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), seed, Some(&args.overrides))?;
    let data = load_data(&args.inputs)?;
    let dir = out_dir(args.out, &cfg, "model")?;
    let outcome = if args.holdout {
        let (face, body) = split_paired(&data.faces, &data.bodies, &data.graph, cfg.eval.gallery_ratio, cfg.seed)?;
        let graph = data.graph.restrict(&face.train, &body.train);
        let sets = EvalSets { face, body };
        run_fsac(&sets.face.train, &sets.body.train, &graph, &cfg.cluster, &cfg.train, Some(&sets))?
    } else {
        run_fsac(&data.faces, &data.bodies, &data.graph, &cfg.cluster, &cfg.train, None)?
    };
    write_json(&dir.join("face_head.json"), &outcome.face_head)?;
    write_json(&dir.join("body_head.json"), &outcome.body_head)?;
    write_json(&dir.join("epoch_log.json"), &outcome.log)?;
    write_json(&dir.join("config.json"), &cfg)?;
    if let Some(m) = outcome.final_metrics() {
        println!("face mAP {:.4}  body mAP {:.4}", m.face.map, m.body.map);
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    face: fsac_core::MetricsReport,
    body: fsac_core::MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    mixed: Option<fsac_core::MetricsReport>,
}

fn eval(args: EvalArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(args.config.as_deref(), seed, None)?;
    let data = load_data(&args.inputs)?;
    let face_head: EmbeddingHead = read_json(&args.model.join("face_head.json"))?;
    let body_head: EmbeddingHead = read_json(&args.model.join("body_head.json"))?;
    let (face, body) = split_paired(&data.faces, &data.bodies, &data.graph, cfg.eval.gallery_ratio, cfg.seed)?;
    let mixed = if face_head.d_out() == body_head.d_out() {
        Some(evaluate_mixed(&face, &body, &face_head, &body_head)?)
    } else {
        None
    };
    let report = EvalReport {
        face: evaluate(&face, &face_head)?,
        body: evaluate(&body, &body_head)?,
        mixed,
    };
    let dir = out_dir(args.out, &cfg, "report")?;
    write_json(&dir.join("metrics.json"), &report)?;
    write_metrics_csv(&dir.join("metrics.csv"), &report)?;
    if args.export_features {
        for (name, split, head) in [("face", &face, &face_head), ("body", &body, &body_head)] {
            export_features(&split.query, head, &dir.join(format!("{name}_query_features.csv")))?;
            export_features(&split.gallery, head, &dir.join(format!("{name}_gallery_features.csv")))?;
        }
    }
    println!("face mAP {:.4}  body mAP {:.4}", report.face.map, report.body.map);
    Ok(())
}

fn write_metrics_csv(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    let mut text = String::from("set,mAP,rank1,rank5,rank10,n_queries\n");
    let rows = [("face", Some(&report.face)), ("body", Some(&report.body)), ("mixed", report.mixed.as_ref())];
    for (name, m) in rows {
        if let Some(m) = m {
            text += &format!("{name},{},{},{},{},{}\n", m.map, m.rank(1), m.rank(5), m.rank(10), m.n_queries);
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn experiment_config(args: &ExperimentArgs, seed: Option<u64>) -> anyhow::Result<PipelineConfig> {
    let mut cfg = load_config(args.config.as_deref(), seed, Some(&args.overrides))?;
    if let Some(n) = args.seeds {
        cfg.eval.n_seeds = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ablate(args: ExperimentArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = experiment_config(&args, seed)?;
    let table = ablation_suite(&cfg)?;
    let dir = out_dir(args.out, &cfg, "ablation")?;
    write_json(&dir.join("ablation.json"), &table)?;
    table.write_csv(&dir.join("ablation.csv"))?;
    for row in &table.rows {
        println!(
            "{:<20} face mAP {:.4} (±{:.4})  rank-1 {:.4}  body mAP {:.4}",
            row.name,
            row.face.mean.map,
            row.face.std.map,
            row.face.mean.rank(1),
            row.body.mean.map
        );
    }
    Ok(())
}

fn run_sweep(args: SweepArgs, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = experiment_config(&args.experiment, seed)?;
    let world = generate_world(&cfg.world_or_default())?;
    let curve = sweep(args.param, &args.values, &world, &cfg)?;
    let dir = out_dir(args.experiment.out, &cfg, "sweep")?;
    write_json(&dir.join("sweep.json"), &curve)?;
    curve.write_csv(&dir.join("sweep.csv"))?;
    for p in &curve.points {
        println!("{} = {:<8} face mAP {:.4}", args.param.name(), p.value, p.report.face.map);
    }
    Ok(())
}

fn validate(args: ValidateArgs, seed: Option<u64>) -> anyhow::Result<()> {
    load_config(args.config.as_deref(), seed, None)?;
    if let (Some(faces), Some(bodies), Some(graph)) = (args.faces, args.bodies, args.graph) {
        load_data(&Inputs { faces, bodies, graph })?;
    }
    println!("ok");
    Ok(())
}

