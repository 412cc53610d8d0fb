//! The `cmir` command line.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::checkpoint::{self, narrow_embed, Stage1Checkpoint, Stage2Checkpoint};
use crate::dataio::{
    load_feature_file, save_feature_file, synth_generate, DataError, FeatureSet, SynthRegime,
    SynthSpec,
};
use crate::error::TrainError;
use crate::pipeline::{
    effective_embed_config, embed, evaluate_directions, extract_split, normalize_split,
    pretrain_both, split_domains, DirectionReport, PipelineConfig, PipelineError, SplitSet,
};
use crate::retrieval::{query_topk, Gallery, RetrievalError};
use crate::stage1::{extract_intermediate, Stage1Epoch};
use crate::stage2::{project, train_embedding, write_history_csv, Domain, EmbedEpoch};
use config::{parse_entries, RunConfig};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  bad command line
  3  invalid configuration or inputs that violate a precondition
  4  file missing or unreadable / output not writable
  5  corrupt CMFV, CMM1 or CMM2 file
  6  training failed (non-finite loss, no pairs)
  7  retrieval failed (bad K, query id out of range, no relevant items)";

#[derive(Parser, Debug)]
#[command(name = "cmir", version, about = "Cross-modal retrieval with pretrained domain classifiers and a shared embedding", after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-modality dataset as a.cmfv and b.cmfv.
    Synth(SynthArgs),
    /// Train both stage-1 classifiers.
    Pretrain(PretrainArgs),
    /// Train one embedding model per d_v.
    Train(TrainArgs),
    /// Evaluate trained models in every retrieval direction.
    Eval(EvalArgs),
    /// Rank a gallery for one query.
    Retrieve(RetrieveArgs),
    /// pretrain, train and eval into one directory.
    Run(RunArgs),
}

#[derive(Args, Debug)]
#[command(after_help = EXIT_HELP)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    da: usize,
    #[arg(long, default_value_t = 16)]
    db: usize,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// paired (single-label pairs) or unpaired (multi-label A, single-label B).
    #[arg(long, default_value = "paired")]
    regime: String,
    /// Most labels per A-sample in the unpaired regime.
    #[arg(long, default_value_t = 3)]
    max_labels: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by the training and evaluation commands.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// dsrsid-like or merced-like.
    #[arg(long)]
    preset: Option<String>,
    /// paired or unpaired.
    #[arg(long)]
    regime: Option<String>,
    /// Embedding width; repeatable.
    #[arg(long = "dv")]
    dv: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch budget for both stages.
    #[arg(long)]
    epochs: Option<usize>,
    /// K values for P@K, comma separated; for `retrieve`, the list length.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// train or heldout.
    #[arg(long)]
    gallery: Option<String>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Domain A feature file (CMFV).
    #[arg(long)]
    a: PathBuf,
    /// Domain B feature file (CMFV).
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_help = EXIT_HELP)]
struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_help = EXIT_HELP)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory holding stage1_a.cmm1 and stage1_b.cmm1; unused when end_to_end.
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(after_help = EXIT_HELP)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// Directory holding embed_dv<d>.cmm2 for every requested d_v.
    #[arg(long)]
    models: PathBuf,
    /// Report directory; defaults to the models directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(after_help = EXIT_HELP)]
struct RetrieveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    pretrained: Option<PathBuf>,
    /// A CMM2 checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Row of the query domain's test split.
    #[arg(
        long,
        conflicts_with = "query_file",
        required_unless_present = "query_file"
    )]
    query_id: Option<usize>,
    /// CMFV file of raw query-domain features; every row is a query.
    #[arg(long)]
    query_file: Option<PathBuf>,
    /// A2B, B2A, A2A or B2B.
    #[arg(long, default_value = "A2B")]
    direction: String,
    /// Also write the ranking as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(after_help = EXIT_HELP)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(DataError),
    Train(TrainError),
    Retrieval(RetrievalError),
    Output(PathBuf, String),
}

fn data_code(e: &DataError) -> u8 {
    match e {
        DataError::Io { .. } => 4,
        DataError::BadMagic { .. }
        | DataError::VersionMismatch { .. }
        | DataError::Truncated { .. }
        | DataError::TrailingBytes { .. }
        | DataError::InvalidHeader(_)
        | DataError::Csv(_) => 5,
        _ => 3,
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 3,
            CliError::Output(..) => 4,
            CliError::Data(e) | CliError::Train(TrainError::Data(e)) => data_code(e),
            CliError::Train(TrainError::Config(_)) => 3,
            CliError::Train(_) => 6,
            CliError::Retrieval(_) => 7,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Train(e) => write!(f, "training: {e}"),
            CliError::Retrieval(e) => write!(f, "retrieval: {e}"),
            CliError::Output(p, m) => write!(f, "cannot write {}: {m}", p.display()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        CliError::Retrieval(e)
    }
}

impl From<crate::diffmath::MathError> for CliError {
    fn from(e: crate::diffmath::MathError) -> Self {
        CliError::Train(TrainError::Math(e))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(e) => CliError::Data(e),
            PipelineError::Train(e) => CliError::Train(e),
            PipelineError::Retrieval(e) => CliError::Retrieval(e),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Parses `std::env::args`, runs the command and maps failures to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => with_jobs(&a.cfg, || cmd_pretrain(&a)),
        Command::Train(a) => with_jobs(&a.cfg, || cmd_train(&a)),
        Command::Eval(a) => with_jobs(&a.cfg, || cmd_eval(&a)),
        Command::Retrieve(a) => with_jobs(&a.cfg, || cmd_retrieve(&a)),
        Command::Run(a) => with_jobs(&a.cfg, || cmd_run(&a)),
    }
}

fn with_jobs(cfg: &ConfigArgs, f: impl FnOnce() -> Result<()> + Send) -> Result<()> {
    match cfg.jobs {
        None => f(),
        Some(0) => Err(CliError::Config("--jobs must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(f),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output(dir.to_path_buf(), e.to_string()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Output(path.to_path_buf(), e.to_string()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let regime = match a.regime.as_str() {
        "paired" => SynthRegime::PairedSingle,
        "unpaired" => SynthRegime::UnpairedMulti {
            max_labels: a.max_labels,
        },
        other => {
            return Err(CliError::Config(format!(
                "unknown regime {other:?} (expected paired or unpaired)"
            )))
        }
    };
    let spec = SynthSpec {
        classes: a.classes,
        per_class: a.per_class,
        dim_a: a.da,
        dim_b: a.db,
        separation: a.sep,
        seed: a.seed,
        regime,
    };
    let (fa, fb) = synth_generate(&spec)?;
    ensure_dir(&a.out)?;
    save_feature_file(&fa, a.out.join("a.cmfv"))?;
    save_feature_file(&fb, a.out.join("b.cmfv"))?;
    println!(
        "wrote {}: A {}×{}, B {}×{}, {} classes, {}",
        a.out.display(),
        fa.len(),
        fa.dim(),
        fb.len(),
        fb.dim(),
        fa.classes(),
        if fa.labels.is_multi() {
            "multi-label A"
        } else {
            "single-label"
        }
    );
    Ok(())
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| DataError::Io {
                path: p.clone(),
                source,
            })?;
            parse_entries(&text).map_err(|m| CliError::Config(format!("{}: {m}", p.display())))?
        }
        None => Vec::new(),
    };
    let mut overrides = Vec::new();
    for s in &args.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            overrides.push((k.to_string(), v));
        }
    };
    flag("preset", args.preset.clone());
    flag("regime", args.regime.clone());
    flag("seed", args.seed.map(|s| s.to_string()));
    flag("epochs", args.epochs.map(|e| e.to_string()));
    flag("gallery", args.gallery.clone());
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    flag("dv", (!args.dv.is_empty()).then(|| join(&args.dv)));
    flag("k", (!args.k.is_empty()).then(|| join(&args.k)));
    let mut cfg = RunConfig::default();
    cfg.resolve(&file, &overrides).map_err(CliError::Config)?;
    cfg.validate().map_err(CliError::Config)?;
    Ok(cfg)
}

fn write_resolved(dir: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    write_text(&dir.join(format!("{command}.conf")), &cfg.to_text())
}

fn load_pair(data: &DataArgs) -> Result<(FeatureSet, FeatureSet)> {
    Ok((load_feature_file(&data.a)?, load_feature_file(&data.b)?))
}

/// Normalized split plus the fitted statistics.
fn normalized(a: &FeatureSet, b: &FeatureSet, p: &PipelineConfig) -> Result<(SplitSet, SplitSet)> {
    let (sa, sb) = split_domains(a, b, p.regime, p.split_fraction, p.split_seed)?;
    Ok((normalize_split(&sa)?.0, normalize_split(&sb)?.0))
}

fn stage1_path(dir: &Path, d: Domain) -> PathBuf {
    dir.join(match d {
        Domain::A => "stage1_a.cmm1",
        Domain::B => "stage1_b.cmm1",
    })
}

fn model_path(dir: &Path, d_v: usize) -> PathBuf {
    dir.join(format!("embed_dv{d_v}.cmm2"))
}

fn write_stage1_history(h: &[Stage1Epoch], path: &Path) -> Result<()> {
    let fail = |e: csv::Error| CliError::Output(path.to_path_buf(), e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for rec in h {
        w.serialize(rec).map_err(fail)?;
    }
    w.flush()
        .map_err(|e| CliError::Output(path.to_path_buf(), e.to_string()))
}

fn pretrain(a: &FeatureSet, b: &FeatureSet, cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = cfg.pipeline();
    if p.end_to_end {
        return Err(CliError::Config(
            "end_to_end = true trains without stage 1".into(),
        ));
    }
    let (sa, sb) = split_domains(a, b, p.regime, p.split_fraction, p.split_seed)?;
    let (na, stats_a) = normalize_split(&sa)?;
    let (nb, stats_b) = normalize_split(&sb)?;
    let ((net_a, ha), (net_b, hb)) = pretrain_both(&na.train, &nb.train, &p.stage1)?;
    ensure_dir(out)?;
    for (net, stats, hist, d, name) in [
        (net_a, stats_a, ha, Domain::A, "a"),
        (net_b, stats_b, hb, Domain::B, "b"),
    ] {
        checkpoint::save_stage1(&Stage1Checkpoint { net, norm: stats }, stage1_path(out, d))?;
        write_stage1_history(&hist, &out.join(format!("stage1_{name}_history.csv")))?;
        if let Some(last) = hist.last() {
            println!(
                "stage 1 {name}: {} epochs, ce {:.4}, ortho {:.4}",
                hist.len(),
                last.ce,
                last.ortho
            );
        }
    }
    write_resolved(out, "pretrain", cfg)
}

/// Stage-2 inputs for both domains: `Z` from saved stage-1 checkpoints, or
/// normalized raw features in end-to-end mode.
struct Inputs {
    za: SplitSet,
    zb: SplitSet,
    nets: Option<(Stage1Checkpoint, Stage1Checkpoint)>,
}

fn inputs(
    a: &FeatureSet,
    b: &FeatureSet,
    cfg: &RunConfig,
    pretrained: Option<&Path>,
) -> Result<Inputs> {
    let p = cfg.pipeline();
    if p.end_to_end {
        let (za, zb) = normalized(a, b, &p)?;
        return Ok(Inputs { za, zb, nets: None });
    }
    let dir = pretrained.ok_or_else(|| {
        CliError::Config("--pretrained is required unless end_to_end = true".into())
    })?;
    let ca = checkpoint::load_stage1(stage1_path(dir, Domain::A))?;
    let cb = checkpoint::load_stage1(stage1_path(dir, Domain::B))?;
    let (sa, sb) = split_domains(a, b, p.regime, p.split_fraction, p.split_seed)?;
    let z = |c: &Stage1Checkpoint, s: &SplitSet| -> Result<SplitSet> {
        if c.net.input_dim() != s.train.dim() {
            return Err(CliError::Config(format!(
                "stage-1 checkpoint expects {} features, data has {}",
                c.net.input_dim(),
                s.train.dim()
            )));
        }
        let n = SplitSet {
            train: c.norm.apply_set(&s.train)?,
            test: c.norm.apply_set(&s.test)?,
        };
        Ok(extract_split(&c.net, &n)?)
    };
    Ok(Inputs {
        za: z(&ca, &sa)?,
        zb: z(&cb, &sb)?,
        nets: Some((ca, cb)),
    })
}

/// Trains every requested width in parallel and saves checkpoints and
/// histories; the returned models carry the stored (f32) weights.
fn train(inp: &Inputs, cfg: &RunConfig, out: &Path) -> Result<Vec<Stage2Checkpoint>> {
    let p = cfg.pipeline();
    ensure_dir(out)?;
    let trained: Vec<(usize, Stage2Checkpoint, Vec<EmbedEpoch>)> = cfg
        .d_v
        .par_iter()
        .map(|&d_v| -> Result<_> {
            let ec = effective_embed_config(&p, d_v);
            let (mut model, history) =
                train_embedding(&inp.za.train, &inp.zb.train, p.regime, &p.weights, &ec)?;
            narrow_embed(&mut model);
            Ok((
                d_v,
                Stage2Checkpoint {
                    model,
                    weights: p.weights,
                    terms: ec.terms,
                },
                history,
            ))
        })
        .collect::<Result<_>>()?;
    let mut models = Vec::with_capacity(trained.len());
    for (d_v, ckpt, history) in trained {
        checkpoint::save_stage2(&ckpt, model_path(out, d_v))?;
        let hp = out.join(format!("history_dv{d_v}.csv"));
        write_history_csv(&history, &hp)
            .map_err(|e| CliError::Output(hp.clone(), e.to_string()))?;
        if let Some(last) = history.last() {
            println!(
                "d_v {d_v}: {} epochs, total {:.6}",
                history.len(),
                last.total
            );
        }
        models.push(ckpt);
    }
    write_resolved(out, "train", cfg)?;
    Ok(models)
}

fn evaluate_models(
    inp: &Inputs,
    cfg: &RunConfig,
    models: &[Stage2Checkpoint],
) -> Result<Vec<DirectionReport>> {
    let settings = cfg.pipeline().eval;
    models
        .iter()
        .map(|c| {
            let ea = embed(&c.model, &inp.za, Domain::A)?;
            let eb = embed(&c.model, &inp.zb, Domain::B)?;
            Ok(evaluate_directions(c.model.d_v(), &ea, &eb, &settings)?)
        })
        .collect()
}

/// One row per d_v: mAP, chance and P@K for each direction.
fn report_csv(reports: &[DirectionReport], ks: &[usize]) -> String {
    let mut head = vec!["d_v".to_string(), "cross_map".into(), "mean_norm".into()];
    for (name, _) in reports
        .first()
        .map(|r| r.directions())
        .into_iter()
        .flatten()
    {
        head.push(format!("{name}_map"));
        head.push(format!("{name}_chance"));
        head.extend(ks.iter().map(|k| format!("{name}_p@{k}")));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&head).expect("in-memory csv");
    for r in reports {
        let mut row = vec![
            r.d_v.to_string(),
            r.cross_map().to_string(),
            r.mean_norm.to_string(),
        ];
        for (_, m) in r.directions() {
            row.push(m.map.to_string());
            row.push(m.chance.to_string());
            row.extend(m.precision.iter().map(|(_, p)| p.to_string()));
        }
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn write_reports(dir: &Path, reports: &[DirectionReport], cfg: &RunConfig) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("report.csv"), &report_csv(reports, &cfg.ks))?;
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    write_text(&dir.join("report.json"), &(json + "\n"))?;
    for r in reports {
        println!(
            "d_v {}: A2B {:.4}  B2A {:.4}  A2A {:.4}  B2B {:.4}  (chance {:.4})",
            r.d_v,
            r.a2b.map,
            r.b2a.map,
            r.a2a.map,
            r.b2b.map,
            r.cross_chance()
        );
    }
    Ok(())
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let (fa, fb) = load_pair(&a.data)?;
    pretrain(&fa, &fb, &cfg, &a.out)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let (fa, fb) = load_pair(&a.data)?;
    let inp = inputs(&fa, &fb, &cfg, a.pretrained.as_deref())?;
    train(&inp, &cfg, &a.out).map(drop)
}

fn load_models(dir: &Path, cfg: &RunConfig) -> Result<Vec<Stage2Checkpoint>> {
    cfg.d_v
        .iter()
        .map(|&d| {
            let c = checkpoint::load_stage2(model_path(dir, d))?;
            Ok(c)
        })
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let (fa, fb) = load_pair(&a.data)?;
    let inp = inputs(&fa, &fb, &cfg, a.pretrained.as_deref())?;
    let models = load_models(&a.models, &cfg)?;
    let reports = evaluate_models(&inp, &cfg, &models)?;
    let out = a.out.as_deref().unwrap_or(&a.models);
    write_reports(out, &reports, &cfg)?;
    write_resolved(out, "eval", &cfg)
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let (fa, fb) = load_pair(&a.data)?;
    if !cfg.end_to_end {
        pretrain(&fa, &fb, &cfg, &a.out)?;
    }
    let inp = inputs(&fa, &fb, &cfg, Some(&a.out))?;
    let models = train(&inp, &cfg, &a.out)?;
    let reports = evaluate_models(&inp, &cfg, &models)?;
    write_reports(&a.out, &reports, &cfg)?;
    write_resolved(&a.out, "run", &cfg)
}

fn parse_direction(s: &str) -> Result<(Domain, Domain)> {
    match s.to_ascii_uppercase().as_str() {
        "A2B" => Ok((Domain::A, Domain::B)),
        "B2A" => Ok((Domain::B, Domain::A)),
        "A2A" => Ok((Domain::A, Domain::A)),
        "B2B" => Ok((Domain::B, Domain::B)),
        _ => Err(CliError::Config(format!(
            "unknown direction {s:?} (expected A2B, B2A, A2A or B2B)"
        ))),
    }
}

fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg)?;
    let (from, to) = parse_direction(&a.direction)?;
    let want = match a.cfg.k.as_slice() {
        [] => 10,
        [k] => *k,
        _ => return Err(CliError::Config("retrieve takes a single --k".into())),
    };
    let (fa, fb) = load_pair(&a.data)?;
    let inp = inputs(&fa, &fb, &cfg, a.pretrained.as_deref())?;
    let ckpt = checkpoint::load_stage2(&a.model)?;
    let pick = |d: Domain| match d {
        Domain::A => &inp.za,
        Domain::B => &inp.zb,
    };
    let target = pick(to);
    let gallery_set = match cfg.gallery {
        crate::pipeline::GalleryMode::Train => &target.train,
        crate::pipeline::GalleryMode::Heldout => &target.test,
    };
    let gallery = Gallery::new(
        project(&ckpt.model, &gallery_set.features, to)?,
        gallery_set.labels.clone(),
        &gallery_set.modality,
    )?;

    let (queries, labels, ids): (crate::diffmath::Matrix, Vec<Vec<usize>>, Vec<usize>) =
        match (&a.query_file, a.query_id) {
            (Some(path), _) => {
                let q = load_feature_file(path)?;
                let z = match &inp.nets {
                    Some((ca, cb)) => {
                        let c = if from == Domain::A { ca } else { cb };
                        extract_intermediate(&c.net, &c.norm.apply(&q.features)?)?
                    }
                    None => {
                        let split =
                            split_domains(&fa, &fb, cfg.regime, cfg.split_fraction, cfg.seed)?;
                        let s = if from == Domain::A { split.0 } else { split.1 };
                        normalize_split(&s)?.1.apply(&q.features)?
                    }
                };
                (z, q.labels.sets(), (0..q.len()).collect())
            }
            (None, Some(id)) => {
                let test = &pick(from).test;
                if id >= test.len() {
                    return Err(CliError::Retrieval(RetrievalError::Invalid(format!(
                        "query id {id} outside the {} test samples of domain {}",
                        test.len(),
                        if from == Domain::A { "A" } else { "B" }
                    ))));
                }
                let row = crate::diffmath::Matrix::from_rows(&[test.features.row(id)]);
                (row, vec![test.labels.set(id).to_vec()], vec![id])
            }
            (None, None) => unreachable!("clap requires one query source"),
        };
    let emb = project(&ckpt.model, &queries, from)?;
    let skip_self = from == to
        && cfg.gallery == crate::pipeline::GalleryMode::Heldout
        && a.query_file.is_none();
    let mut text = String::from("query,rank,id,distance,relevant\n");
    for (r, (&qid, qlabels)) in ids.iter().zip(&labels).enumerate() {
        let k = want + usize::from(skip_self);
        let list = query_topk(&gallery, emb.row(r), qlabels, k.min(gallery.len()))?;
        let mut rank = 0;
        for ((&id, &dist), &rel) in list.ids.iter().zip(&list.distances).zip(&list.relevant) {
            if skip_self && id == qid {
                continue;
            }
            if rank == want {
                break;
            }
            rank += 1;
            text.push_str(&format!("{qid},{rank},{id},{dist},{}\n", u8::from(rel)));
        }
    }
    print!("{text}");
    if let Some(out) = &a.out {
        write_text(out, &text)?;
    }
    Ok(())
}
