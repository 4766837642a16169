use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use roll_core::eval::{analyze_scene, grid_text, scene_knowledge};
use roll_core::fusion::TrainingSample;
use roll_core::ingest::load_dataset;
use roll_core::{
    backend_from_spec, fuse, generate_description, BranchHeads, BranchScores, BranchSet, DataRoot, EvalConfig,
    EvalReport, FusionEmbeddings, FusionHead, FusionMethod, MWConfig, Pipeline, QASample, Resources, SceneGraph,
    ScorerBackend, SynthConfig, SyntheticCorpus, TrainConfig,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "roll", version, about = "Knowledge-based video QA: read, observe, recall")]
struct Cli {
    /// Data directory; falls back to the working directory.
    #[arg(long, global = true, env = "ROLL_DATA_ROOT")]
    data_root: Option<PathBuf>,
    /// Scorer backend: mock, mock:<dim> or remote:<host:port>.
    #[arg(long, global = true, default_value = "mock")]
    backend: String,
    /// Pipeline config (TOML, or JSON by extension). Flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a dataset and report accuracy per question category.
    Eval(EvalArgs),
    /// Recognize and filter characters in one scene.
    Characters(CharacterArgs),
    /// Predict the place of one scene.
    Place(SceneArg),
    /// Build the scene graph of one scene.
    Graph {
        #[command(flatten)]
        scene: SceneArg,
        /// Write the graph here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the generated description of a scene or a stored graph.
    Describe {
        #[arg(long, required_unless_present = "graph")]
        scene: Option<String>,
        #[arg(long, conflicts_with = "scene")]
        graph: Option<PathBuf>,
    },
    /// Identify a scene's episode and slice its plot summary.
    Recall(RecallArgs),
    /// Fuse branch scores for one sample or a stored score file.
    Fuse(FuseArgs),
    /// Train a fusion head (and, for fc, the branch heads).
    TrainFusion(TrainArgs),
    /// Write a seeded synthetic data root.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SceneArg {
    #[arg(long)]
    scene: String,
}

#[derive(Args)]
struct ModelArgs {
    /// Directory with read.bin, observe.bin and recall.bin.
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Fusion method; trained methods need --fusion-head.
    #[arg(long)]
    fusion: Option<FusionMethod>,
    /// Trained fusion head JSON.
    #[arg(long, conflicts_with = "fusion")]
    fusion_head: Option<PathBuf>,
    /// Enabled branches, e.g. read+observe.
    #[arg(long)]
    branches: Option<BranchSet>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Dataset file; defaults to qa.jsonl under the data root.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Emit the JSON report on stdout.
    #[arg(long)]
    json: bool,
    /// Also write the JSON report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate all seven branch subsets.
    #[arg(long, conflicts_with = "compare_fusion")]
    ablation: bool,
    /// Train and evaluate every fusion method.
    #[arg(long)]
    compare_fusion: bool,
    /// Training set for --compare-fusion; without it the first half of the dataset trains.
    #[arg(long, requires = "compare_fusion")]
    train: Option<PathBuf>,
    #[command(flatten)]
    training: TrainOpts,
    /// Exit non-zero when overall accuracy falls below this value.
    #[arg(long, conflicts_with_all = ["ablation", "compare_fusion"])]
    assert_min_accuracy: Option<f64>,
    /// Worker threads for sample scoring.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss weights beta_r,beta_o,beta_ll,beta_omega.
    #[arg(long, default_value = "0.06,0.06,0.08,0.80")]
    betas: MWConfig,
}

impl TrainOpts {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: self.seed,
            betas: self.betas,
        }
    }
}

#[derive(Args)]
struct CharacterArgs {
    #[arg(long)]
    scene: String,
    #[arg(long)]
    knn_threshold: Option<f64>,
    #[arg(long)]
    shot_threshold: Option<f64>,
    #[arg(long)]
    dist_threshold: Option<f64>,
    #[arg(long)]
    majority: Option<f64>,
}

#[derive(Args)]
struct RecallArgs {
    #[arg(long)]
    scene: String,
    #[arg(long)]
    wl: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    max_segments: Option<usize>,
    /// Let the scene's own frames vote.
    #[arg(long)]
    include_own_scene: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Sample id from the dataset.
    #[arg(long, required_unless_present = "scores")]
    sample: Option<String>,
    /// JSON file with `scores` and optional `embeddings`.
    #[arg(long, conflicts_with = "sample")]
    scores: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "fc")]
    method: FusionMethod,
    #[command(flatten)]
    training: TrainOpts,
    /// Initial branch heads; reference heads otherwise.
    #[arg(long)]
    heads: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory for the heads and fusion.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 5)]
    scenes_per_episode: usize,
    #[arg(long, default_value_t = 4)]
    questions_per_scene: usize,
    /// Make every candidate, gold included, absent from all contexts.
    #[arg(long)]
    stripped: bool,
}

#[derive(Deserialize)]
struct ScoreFile {
    scores: BranchScores,
    #[serde(default)]
    embeddings: Option<FusionEmbeddings>,
}

struct Env {
    root: DataRoot,
    backend_spec: String,
    config: EvalConfig,
}

impl Env {
    fn resources(&self) -> Result<Resources> {
        Resources::load(&self.root).with_context(|| format!("loading data root {}", self.root.path().display()))
    }

    fn backend(&self) -> Result<Box<dyn ScorerBackend>> {
        backend_from_spec(&self.backend_spec).with_context(|| format!("backend {}", self.backend_spec))
    }

    fn dataset(&self, path: Option<&Path>) -> Result<Vec<QASample>> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.root.dataset());
        load_dataset(&path).with_context(|| format!("loading {}", path.display()))
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => EvalConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => EvalConfig::default(),
    };
    let env = Env {
        root: DataRoot::resolve(cli.data_root),
        backend_spec: cli.backend,
        config,
    };
    match cli.command {
        Command::Eval(args) => eval(&env, args),
        Command::Characters(args) => characters(&env, args),
        Command::Place(s) => {
            let analysis = analyze(&env, &s.scene)?;
            print_json(&analysis.place)
        }
        Command::Graph { scene, out } => {
            let analysis = analyze(&env, &scene.scene)?;
            let json = serde_json::to_string_pretty(&analysis.graph)?;
            match out {
                Some(p) => fs::write(&p, json + "\n").with_context(|| format!("writing {}", p.display())),
                None => emit(&json),
            }
        }
        Command::Describe { scene, graph } => {
            let text = match (scene, graph) {
                (_, Some(p)) => {
                    let raw = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let g: SceneGraph =
                        serde_json::from_str(&raw).with_context(|| format!("parsing {}", p.display()))?;
                    g.validate()?;
                    generate_description(&g).text
                }
                (Some(id), None) => analyze(&env, &id)?.description.text,
                (None, None) => unreachable!("clap requires --scene or --graph"),
            };
            emit(&text)
        }
        Command::Recall(args) => recall(&env, args),
        Command::Fuse(args) => fuse_cmd(&env, args),
        Command::TrainFusion(args) => train_fusion(&env, args),
        Command::Synth(args) => synth(args),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

/// Writes one line to stdout; a closed pipe ends the process quietly.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
        r => Ok(r?),
    }
}

fn analyze(env: &Env, scene_id: &str) -> Result<roll_core::eval::SceneAnalysis> {
    let res = env.resources()?;
    let scene = res.scene(scene_id)?;
    Ok(analyze_scene(scene, &res.gallery, &res.places, &env.config)?)
}

/// Applies heads, fusion and branch flags on top of the loaded config.
fn model_setup(env: &Env, model: &ModelArgs) -> Result<(Option<BranchHeads>, EvalConfig)> {
    let mut cfg = env.config.clone();
    if let Some(b) = model.branches {
        cfg.branches = b;
    }
    if let Some(p) = &model.fusion_head {
        let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.fusion = serde_json::from_str(&raw).with_context(|| format!("parsing fusion head {}", p.display()))?;
    }
    if let Some(m) = model.fusion {
        cfg.fusion = match m {
            FusionMethod::Average => FusionHead::Average,
            FusionMethod::Maximum => FusionHead::Maximum,
            FusionMethod::Fc => FusionHead::uniform_fc(),
            other => bail!("{other} fusion has learned parameters; pass --fusion-head from train-fusion"),
        };
    }
    Ok((load_heads(model.heads.as_deref())?, cfg))
}

fn load_heads(dir: Option<&Path>) -> Result<Option<BranchHeads>> {
    dir.map(|d| BranchHeads::load_dir(d).with_context(|| format!("loading heads from {}", d.display())))
        .transpose()
}

/// Given heads, else the reference heads at the backend's dimension.
fn heads_for(backend: &dyn ScorerBackend, heads: Option<BranchHeads>) -> BranchHeads {
    heads.unwrap_or_else(|| BranchHeads::reference(backend.dim()))
}

fn eval(env: &Env, args: EvalArgs) -> Result<()> {
    if let Some(jobs) = args.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    let (heads, cfg) = model_setup(env, &args.model)?;
    let res = env.resources()?;
    let backend = env.backend()?;
    let heads = heads_for(backend.as_ref(), heads);
    let samples = env.dataset(args.dataset.as_deref())?;
    let pipeline = Pipeline::new(&res, backend.as_ref(), heads, cfg)?;
    info!("evaluating {} samples with {}", samples.len(), backend.name());

    if args.ablation {
        let reports = pipeline.ablation(&samples)?;
        let rows: Vec<(String, &EvalReport)> = reports.iter().map(|r| (r.branches.to_string(), r)).collect();
        emit_many(&args, &reports, grid_text(rows))?;
        return Ok(());
    }
    if args.compare_fusion {
        let (train, test) = match &args.train {
            Some(p) => (env.dataset(Some(p))?, samples),
            None => {
                let mut s = samples;
                let test = s.split_off(s.len() / 2);
                (s, test)
            }
        };
        if train.is_empty() || test.is_empty() {
            bail!("--compare-fusion needs non-empty training and evaluation sets");
        }
        let rows = pipeline.compare_fusion(&train, &test, &args.training.config())?;
        let text = grid_text(rows.iter().map(|r| (r.label.clone(), &r.report)));
        emit_many(&args, &rows, text)?;
        return Ok(());
    }

    let report = pipeline.evaluate(&samples)?;
    if let Some(p) = &args.out {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    if args.json {
        emit(&report.to_json())?;
    } else {
        emit(report.to_text().trim_end())?;
    }
    if let Some(min) = args.assert_min_accuracy {
        if report.accuracy() < min {
            bail!("accuracy {:.4} is below the required {min}", report.accuracy());
        }
    }
    Ok(())
}

fn emit_many<T: serde::Serialize>(args: &EvalArgs, value: &T, text: String) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    if let Some(p) = &args.out {
        fs::write(p, &json).with_context(|| format!("writing {}", p.display()))?;
    }
    if args.json {
        emit(&json)?;
    } else {
        emit(text.trim_end())?;
    }
    Ok(())
}

fn characters(env: &Env, args: CharacterArgs) -> Result<()> {
    let mut cfg = env.config.clone();
    let p = &mut cfg.characters;
    p.knn_threshold = args.knn_threshold.unwrap_or(p.knn_threshold);
    p.shot_threshold = args.shot_threshold.unwrap_or(p.shot_threshold);
    p.filter.dist_threshold = args.dist_threshold.unwrap_or(p.filter.dist_threshold);
    p.filter.majority = args.majority.unwrap_or(p.filter.majority);
    let res = env.resources()?;
    let scene = res.scene(&args.scene)?;
    let analysis = analyze_scene(scene, &res.gallery, &res.places, &cfg)?;
    print_json(&analysis.characters)
}

fn recall(env: &Env, args: RecallArgs) -> Result<()> {
    let mut cfg = env.config.clone();
    cfg.window.window = args.wl.unwrap_or(cfg.window.window);
    cfg.window.stride = args.stride.unwrap_or(cfg.window.stride);
    cfg.window.max_segments = args.max_segments.unwrap_or(cfg.window.max_segments);
    if args.include_own_scene {
        cfg.exclude_own_scene = false;
    }
    let res = env.resources()?;
    let scene = res.scene(&args.scene)?;
    let k = scene_knowledge(scene, &res.store, &res.kb, &cfg)?;
    print_json(&k)
}

fn fuse_cmd(env: &Env, args: FuseArgs) -> Result<()> {
    let (heads, cfg) = model_setup(env, &args.model)?;
    if let Some(p) = &args.scores {
        let raw = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let file: ScoreFile = serde_json::from_str(&raw).with_context(|| format!("parsing {}", p.display()))?;
        let fused = fuse(&file.scores, file.embeddings.as_ref(), &cfg.fusion)?;
        return print_json(&fused);
    }
    let id = args.sample.expect("clap requires --sample or --scores");
    let samples = env.dataset(args.dataset.as_deref())?;
    let sample = samples
        .iter()
        .find(|s| s.sample_id == id)
        .with_context(|| format!("no sample {id:?} in the dataset"))?;
    let res = env.resources()?;
    let backend = env.backend()?;
    let heads = heads_for(backend.as_ref(), heads);
    let pipeline = Pipeline::new(&res, backend.as_ref(), heads, cfg)?;
    print_json(&pipeline.score_sample(sample)?)
}

fn train_fusion(env: &Env, args: TrainArgs) -> Result<()> {
    let res = env.resources()?;
    let backend = env.backend()?;
    let heads = heads_for(backend.as_ref(), load_heads(args.heads.as_deref())?);
    let samples = env.dataset(args.dataset.as_deref())?;
    let pipeline = Pipeline::new(&res, backend.as_ref(), heads, env.config.clone())?;
    let cfg = args.training.config();
    let training: Vec<TrainingSample> = pipeline.training_samples(&samples)?;
    let outcome = match args.method {
        FusionMethod::Fc => roll_core::fusion::train_fc(&training, &pipeline.heads, &cfg)?,
        FusionMethod::SelfAtt | FusionMethod::QaAtt => {
            roll_core::fusion::train_attention(&training, &pipeline.heads, args.method, &cfg)?
        }
        other => bail!("{other} fusion has no parameters to train"),
    };
    outcome.heads.write_dir(&args.out)?;
    let fusion_path = args.out.join("fusion.json");
    fs::write(&fusion_path, serde_json::to_string_pretty(&outcome.fusion)? + "\n")
        .with_context(|| format!("writing {}", fusion_path.display()))?;
    for (epoch, loss) in outcome.epoch_loss.iter().enumerate() {
        emit(&format!("epoch {:>3}  loss {loss:.6}", epoch + 1))?;
    }
    emit(&format!("wrote {}", args.out.display()))?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: args.seed,
        episodes: args.episodes,
        scenes_per_episode: args.scenes_per_episode,
        questions_per_scene: args.questions_per_scene,
        stripped: args.stripped,
        ..SynthConfig::default()
    };
    let corpus = SyntheticCorpus::generate(&cfg)?;
    corpus.write_to(&args.out)?;
    emit(&format!(
        "wrote {} samples to {}",
        corpus.samples.len(),
        args.out.display()
    ))?;
    Ok(())
}
