use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use coma::agents::{self, default_vocabulary, load_vocabulary, ChatProvider, LiveProvider, ProviderConfig, ScriptedProvider};
use coma::editops::{blend, edit_bodypart, edit_inbetween, frame_span_to_tokens};
use coma::evalmetrics::{fid, mas, mean_mas, mm_dist, multimodality, r_precision, EmbeddingSet};
use coma::motiondata::{read_motion, synthetic_motion, write_motion, MotionSequence, Part};
use coma::orchestrator::{run_pipeline, Models, Providers, WorkflowConfig};
use coma::spamgen::{GenConfig, GenModel, HashEmbedder, Sample, TextBundle, TextEmbedder};
use coma::spamvq::{RvqConfig, RvqModel};
use coma::trajedit::{apply_trajectory, extract_code_block, profile_from_spec, TrajectoryProfile};

#[derive(Debug, Parser)]
#[command(name = "coma", version, about = "Text-to-motion generation, editing and agent workflow")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives every output.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for independent pipeline segments.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic training corpus.
    GenData {
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 64)]
        frames: usize,
    },
    /// Train the part-wise residual tokenizer on the corpus.
    TrainRvq {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the base and residual transformers on the tokenized corpus.
    TrainGen {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate a motion from text.
    Generate {
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 196)]
        frames: usize,
    },
    /// Edit an existing motion in token space.
    Edit(EditArgs),
    /// Join two motions with a generated transition.
    Blend {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "")]
        text: String,
    },
    /// Apply a trajectory to a motion.
    Traj(TrajArgs),
    /// Run the full agent workflow.
    Pipeline(PipelineArgs),
    /// Compute an embedding-space metric.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EditKind {
    Inbetween,
    Bodypart,
}

#[derive(Debug, Args)]
struct EditArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: EditKind,
    /// Frame range `a..b` for in-betweening.
    #[arg(long, value_parser = parse_range, required_if_eq("kind", "inbetween"))]
    range: Option<(usize, usize)>,
    /// Comma-separated parts among LU, RU, LL, RL for body-part edits.
    #[arg(long, value_delimiter = ',', value_parser = parse_part, required_if_eq("kind", "bodypart"))]
    parts: Vec<Part>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    text: String,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["spec", "from_llm"])))]
struct TrajArgs {
    /// Curve description file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Ask the trajectory agent for a curve; needs --transcript.
    #[arg(long, requires = "transcript")]
    from_llm: Option<String>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    #[arg(long, default_value_t = 196)]
    frames: usize,
    /// Motion to modify; a synthetic clip when absent.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["transcript", "live"])))]
struct PipelineArgs {
    #[arg(long)]
    prompt: String,
    /// Replay agent replies from a transcript.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Call the provider configured under `[provider]`.
    #[arg(long)]
    live: bool,
    /// Maximum correction rounds per segment.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Fid,
    RPrecision,
    MmDist,
    Mas,
    Multimodality,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    /// Embedding files; multimodality takes one file per group.
    #[arg(required = true, num_args = 1..)]
    files: Vec<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once("..").ok_or("expected a range `a..b`")?;
    let a: usize = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
    if a >= b {
        return Err("range must be non-empty".into());
    }
    Ok((a, b))
}

fn parse_part(s: &str) -> Result<Part, String> {
    s.trim().parse().map_err(|e| format!("{e}"))
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct Paths {
    rvq: Option<PathBuf>,
    gen: Option<PathBuf>,
    data: Option<PathBuf>,
    vocabulary: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct TrainConfig {
    rvq_steps: usize,
    gen_steps: usize,
    log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rvq_steps: 2000,
            gen_steps: 2000,
            log_every: 100,
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct MetricConfig {
    pool: usize,
    top_k: Vec<usize>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            pool: 32,
            top_k: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct AppConfig {
    seed: u64,
    paths: Paths,
    rvq: RvqConfig,
    gen: GenConfig,
    workflow: WorkflowConfig,
    provider: Option<ProviderConfig>,
    train: TrainConfig,
    metrics: MetricConfig,
}

struct Ctx {
    cfg: AppConfig,
    out: PathBuf,
    seed: u64,
}

impl Ctx {
    fn rvq_path(&self) -> PathBuf {
        self.cfg.paths.rvq.clone().unwrap_or_else(|| self.out.join("rvq.cmk"))
    }
    fn gen_path(&self) -> PathBuf {
        self.cfg.paths.gen.clone().unwrap_or_else(|| self.out.join("gen.cmk"))
    }
    fn data_dir(&self) -> PathBuf {
        self.cfg.paths.data.clone().unwrap_or_else(|| self.out.join("data"))
    }
    fn load_rvq(&self) -> Result<RvqModel> {
        let p = self.rvq_path();
        RvqModel::load(&p).with_context(|| format!("loading tokenizer {} (run train-rvq first)", p.display()))
    }
    fn load_gen(&self) -> Result<GenModel> {
        let p = self.gen_path();
        GenModel::load(&p).with_context(|| format!("loading generator {} (run train-gen first)", p.display()))
    }
    fn embedder(&self, gen: &GenModel) -> HashEmbedder {
        HashEmbedder::new(gen.cfg.text_dim)
    }
    fn write(&self, name: &str, m: &MotionSequence) -> Result<PathBuf> {
        let p = self.out.join(name);
        write_motion(m, &p).with_context(|| format!("writing {}", p.display()))?;
        println!("wrote {} ({} frames)", p.display(), m.len());
        Ok(p)
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    let Some(path) = path else {
        return Ok(AppConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: AppConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    cfg.rvq.validate()?;
    cfg.gen.validate()?;
    cfg.workflow.validate()?;
    for p in [&cfg.paths.vocabulary].into_iter().flatten() {
        if !p.exists() {
            bail!("configured file {} does not exist", p.display());
        }
    }
    if let Some(ProviderConfig::Scripted { transcript }) = &cfg.provider {
        if !transcript.exists() {
            bail!("configured transcript {} does not exist", transcript.display());
        }
    }
    Ok(cfg)
}

fn load_clips(dir: &Path) -> Result<Vec<MotionSequence>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus {} (run gen-data first)", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "motion"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .motion files in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| read_motion(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

fn gen_data(ctx: &Ctx, clips: usize, frames: usize) -> Result<()> {
    let dir = ctx.data_dir();
    std::fs::create_dir_all(&dir)?;
    for i in 0..clips {
        let m = synthetic_motion(ctx.seed.wrapping_add(i as u64), frames)?;
        write_motion(&m, &dir.join(format!("clip_{i:04}.motion")))?;
    }
    println!("wrote {clips} clips of {frames} frames to {}", dir.display());
    Ok(())
}

fn train_rvq(ctx: &Ctx, steps: usize) -> Result<()> {
    let clips = load_clips(&ctx.data_dir())?;
    let mut model = RvqModel::new(ctx.cfg.rvq.clone(), ctx.seed)?;
    let mut opt = model.new_optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    for s in 0..steps {
        let loss = model.train_step(&clips, &mut opt, &mut rng)?;
        if ctx.cfg.train.log_every > 0 && s % ctx.cfg.train.log_every == 0 {
            log::info!("rvq step {s}: {loss:?}");
        }
    }
    model.round_to_f32();
    let l1 = model.reconstruction_l1(&clips)?;
    model.save(&ctx.rvq_path())?;
    println!("rvq: {steps} steps, reconstruction L1 {l1:.5}, saved {}", ctx.rvq_path().display());
    Ok(())
}

fn train_gen(ctx: &Ctx, steps: usize) -> Result<()> {
    let clips = load_clips(&ctx.data_dir())?;
    let rvq = ctx.load_rvq()?;
    let mut cfg = ctx.cfg.gen.clone();
    cfg.codes = rvq.cfg.codes_per_book;
    cfg.quant_layers = rvq.cfg.num_layers;
    let mut model = GenModel::new(cfg, ctx.seed)?;
    let emb = ctx.embedder(&model);
    let samples = clips
        .iter()
        .map(|m| {
            let text = TextBundle::global(emb.embed(m.text.as_deref().unwrap_or(""))?);
            Ok(Sample {
                grid: rvq.tokenize(m)?,
                text,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut ob, mut or) = model.optimizers();
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    for s in 0..steps {
        let (loss, acc) = model.train_base_step(&samples, &mut ob, &mut rng)?;
        let res = model.train_res_step(&samples, &mut or, &mut rng)?;
        if ctx.cfg.train.log_every > 0 && s % ctx.cfg.train.log_every == 0 {
            log::info!("gen step {s}: base {loss:.4} (acc {acc:.3}), residual {res:.4}");
        }
    }
    let acc = model.masked_accuracy(&samples, 4, &mut ChaCha8Rng::seed_from_u64(ctx.seed))?;
    model.save(&ctx.gen_path())?;
    println!("gen: {steps} steps, masked accuracy {acc:.4}, saved {}", ctx.gen_path().display());
    Ok(())
}

fn generate(ctx: &Ctx, text: &str, frames: usize) -> Result<()> {
    let (rvq, gen) = (ctx.load_rvq()?, ctx.load_gen()?);
    let bundle = TextBundle::embed(text, [None; 4], &ctx.embedder(&gen))?;
    let grid = gen.generate(&bundle, rvq.cfg.tokens_for(frames), ctx.seed)?;
    let m = rvq.detokenize(&grid, ctx.cfg.workflow.fps)?.with_text(text);
    ctx.write("generated.motion", &m)?;
    Ok(())
}

fn edit(ctx: &Ctx, a: &EditArgs) -> Result<()> {
    let (rvq, gen) = (ctx.load_rvq()?, ctx.load_gen()?);
    let input = read_motion(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let grid = rvq.tokenize(&input)?;
    let emb = ctx.embedder(&gen);
    let out = match a.kind {
        EditKind::Inbetween => {
            let (alpha, beta) = a.range.expect("required by the parser");
            let (ta, tb) = frame_span_to_tokens(alpha, beta, rvq.cfg.downscale);
            let text = TextBundle::embed(&a.text, [None; 4], &emb)?;
            edit_inbetween(&grid, ta, tb.min(grid.n), &text, &gen, ctx.seed)?
        }
        EditKind::Bodypart => {
            let mut locals = [None; 4];
            for p in &a.parts {
                locals[p.index()] = Some(a.text.as_str());
            }
            let global = input.text.clone().unwrap_or_default();
            let text = TextBundle::embed(&global, locals, &emb)?;
            let rho = a.rho.unwrap_or(ctx.cfg.workflow.rho);
            edit_bodypart(&grid, &a.parts, &text, rho, &gen, ctx.seed)?
        }
    };
    ctx.write("edited.motion", &rvq.detokenize(&out, input.fps)?)?;
    Ok(())
}

fn blend_cmd(ctx: &Ctx, a: &Path, b: &Path, text: &str) -> Result<()> {
    let (rvq, gen) = (ctx.load_rvq()?, ctx.load_gen()?);
    let ma = read_motion(a).with_context(|| format!("reading {}", a.display()))?;
    let mb = read_motion(b).with_context(|| format!("reading {}", b.display()))?;
    let (ga, gb) = (rvq.tokenize(&ma)?, rvq.tokenize(&mb)?);
    let w = &ctx.cfg.workflow;
    let n_ctx = w.n_ctx.min(ga.n).min(gb.n);
    let bundle = TextBundle::embed(text, [None; 4], &ctx.embedder(&gen))?;
    let out = blend(&ga, &gb, w.n_trans, n_ctx, &bundle, &gen, ctx.seed)?;
    ctx.write("blended.motion", &rvq.detokenize(&out, ma.fps)?)?;
    Ok(())
}

#[derive(Serialize)]
struct ProfileFile<'a> {
    heading_delta: &'a [f64],
    speed: &'a [f64],
}

fn traj(ctx: &Ctx, a: &TrajArgs) -> Result<()> {
    let spec = match (&a.spec, &a.from_llm) {
        (Some(p), _) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(desc)) => {
            let provider = ScriptedProvider::load(a.transcript.as_deref().expect("required by the parser"))?;
            let prompt = agents::render_template(agents::template(agents::TRAJECTORY)?, &[("input_prompt", desc)])?;
            let msgs = [agents::ChatMessage::user(prompt)?];
            let reply = provider.chat(&agents::ChatRequest {
                template_id: agents::TRAJECTORY,
                messages: &msgs,
                segment: None,
            })?;
            extract_code_block(&reply.text)?
        }
        (None, None) => unreachable!("argument group requires a source"),
    };
    let input = match &a.input {
        Some(p) => read_motion(p).with_context(|| format!("reading {}", p.display()))?,
        None => synthetic_motion(ctx.seed, a.frames)?,
    };
    let v = coma::motiondata::mean_root_speed(&input);
    let profile: TrajectoryProfile = profile_from_spec(&spec, input.len(), if v > 0.0 { v } else { 1e-6 })?;
    let out = apply_trajectory(&input, &profile)?;
    ctx.write("traj.motion", &out)?;
    let p = ctx.out.join("traj_profile.json");
    let json = serde_json::to_string_pretty(&ProfileFile {
        heading_delta: &profile.heading_delta,
        speed: &profile.speed,
    })?;
    std::fs::write(&p, json)?;
    let total: f64 = profile.heading_delta.iter().sum();
    println!("wrote {} (total turning {total:.6} rad)", p.display());
    Ok(())
}

fn pipeline(ctx: &Ctx, a: &PipelineArgs) -> Result<()> {
    let (rvq, gen) = (ctx.load_rvq()?, ctx.load_gen()?);
    let provider: Box<dyn ChatProvider> = if a.live {
        match &ctx.cfg.provider {
            Some(ProviderConfig::Live(c)) => Box::new(LiveProvider::new(c.clone())?),
            _ => bail!("--live needs a [provider.live] section in the config"),
        }
    } else {
        Box::new(ScriptedProvider::load(a.transcript.as_deref().expect("required by the parser"))?)
    };
    let vocab = match &ctx.cfg.paths.vocabulary {
        Some(p) => load_vocabulary(p)?,
        None => default_vocabulary(),
    };
    let emb = ctx.embedder(&gen);
    let mut wf = ctx.cfg.workflow.clone();
    wf.seed = ctx.seed;
    wf.review_dir = ctx.out.join("review");
    if let Some(k) = a.k {
        wf.k = k;
    }
    let providers = Providers {
        llm: provider.as_ref(),
        vlm: provider.as_ref(),
        embedder: &emb,
        vocabulary: &vocab,
    };
    let models = Models { rvq: &rvq, gen: &gen };
    let trace_path = ctx.out.join("trace.jsonl");
    match run_pipeline(&a.prompt, &providers, &models, &wf) {
        Ok(out) => {
            out.trace.write(&trace_path)?;
            ctx.write("pipeline.motion", &out.motion.with_text(out.concrete_prompt))?;
            println!("wrote {} ({} events)", trace_path.display(), out.trace.events.len());
            Ok(())
        }
        Err(f) => {
            f.trace.write(&trace_path)?;
            eprintln!("partial trace written to {}", trace_path.display());
            Err(f.into())
        }
    }
}

#[derive(Serialize)]
struct EvalResult {
    metric: String,
    value: serde_json::Value,
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let sets = a
        .files
        .iter()
        .map(|p| EmbeddingSet::load(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let pair = || -> Result<(&EmbeddingSet, &EmbeddingSet)> {
        match sets.as_slice() {
            [x, y] => Ok((x, y)),
            _ => bail!("{:?} takes exactly two embedding files", a.metric),
        }
    };
    let value = match a.metric {
        Metric::Fid => {
            let (x, y) = pair()?;
            serde_json::json!(fid(x, y)?)
        }
        Metric::RPrecision => {
            let (x, y) = pair()?;
            let m = &ctx.cfg.metrics;
            let r = r_precision(x, y, m.pool, &m.top_k, ctx.seed)?;
            serde_json::json!(m.top_k.iter().zip(r).map(|(k, v)| (format!("top{k}"), serde_json::json!(v))).collect::<serde_json::Map<String, serde_json::Value>>())
        }
        Metric::MmDist => {
            let (x, y) = pair()?;
            serde_json::json!(mm_dist(x, y)?)
        }
        Metric::Mas => {
            let (x, y) = pair()?;
            if x.rows == 1 {
                serde_json::json!(mas(x.row(0), y.row(0))?)
            } else {
                serde_json::json!(mean_mas(x, y)?)
            }
        }
        Metric::Multimodality => serde_json::json!(multimodality(&sets)?),
    };
    let res = EvalResult {
        metric: format!("{:?}", a.metric),
        value,
    };
    println!("{}", serde_json::to_string(&res)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(cfg.seed);
    let mut cfg = cfg;
    if let Some(j) = cli.jobs {
        if j == 0 {
            bail!("--jobs must be positive");
        }
        cfg.workflow.jobs = j;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        seed,
    };
    match &cli.command {
        Command::GenData { clips, frames } => gen_data(&ctx, *clips, *frames),
        Command::TrainRvq { steps } => train_rvq(&ctx, steps.unwrap_or(ctx.cfg.train.rvq_steps)),
        Command::TrainGen { steps } => train_gen(&ctx, steps.unwrap_or(ctx.cfg.train.gen_steps)),
        Command::Generate { text, frames } => generate(&ctx, text, *frames),
        Command::Edit(a) => edit(&ctx, a),
        Command::Blend { a, b, text } => blend_cmd(&ctx, a, b, text),
        Command::Traj(a) => traj(&ctx, a),
        Command::Pipeline(a) => pipeline(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
