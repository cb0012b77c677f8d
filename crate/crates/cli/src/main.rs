//! `sparkee` command-line driver.

mod error;
mod run_config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sparkee::container;
use sparkee::engine::{generate, to_jsonl, RunHeader};
use sparkee::harness::{emit_report, prompt_sampling, render_report, run_benchmark, run_oracle_study, write_once, ReportFile, ReportFormat};
use sparkee::heads::curve_csv;
use sparkee::{Backbone, HeadSet, ModelConfig, SamplingConfig, ARTIFACT_VERSION};

use crate::error::{CliError, CliResult, Kind};
use crate::run_config::{HeadsSpec, ModelSpec, PolicySpec, RunConfig, TrainSpec};

#[derive(Parser)]
#[command(name = "sparkee", version, about = "Early-exit decoding for interleaved text/speech token streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a backbone and write it as `model.spkw`.
    BuildModel(Common),
    /// Distill per-layer heads and write `heads.spkw` plus `training_curve.csv`.
    TrainHeads {
        #[command(flatten)]
        common: Common,
        /// Comma-separated layers; defaults to every intermediate layer.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Decode every prompt under one policy into `generation.jsonl`.
    Generate(Common),
    /// Fixed-layer agreement study into `oracle.csv`.
    OracleStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<usize>,
    },
    /// Efficiency benchmark into `report.json` and `report.csv`.
    Bench(Common),
    /// Re-render a report file.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        /// Destination file; stdout when absent.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args, Default)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: toy, step-toy or glm-toy.
    #[arg(long)]
    preset: Option<String>,
    /// Container to load the backbone from.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Container with trained heads.
    #[arg(long)]
    heads: Option<PathBuf>,
    /// Policy in short form; repeat for a bench sweep.
    #[arg(long)]
    policy: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with_all = ["temperature", "top_p"])]
    greedy: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Use only the first N prompts.
    #[arg(long)]
    prompt_limit: Option<usize>,
    /// Output directory (env SPARKEE_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (env SPARKEE_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

/// Config after flags and environment variables have been applied.
struct Resolved {
    cfg: RunConfig,
    overrides: Vec<String>,
    out: PathBuf,
}

fn resolve(common: &Common) -> CliResult<Resolved> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    let mut note = |field: &str, value: String| overrides.push(format!("{field}={value} (flag)"));
    if let Some(p) = &common.preset {
        cfg.model = ModelSpec::Preset(p.clone());
        note("model", p.clone());
    }
    if let Some(p) = &common.model {
        cfg.model = ModelSpec::Artifact { path: p.clone() };
        note("model", p.display().to_string());
    }
    if let Some(p) = &common.heads {
        cfg.heads = HeadsSpec::Artifact { path: p.clone() };
        note("heads", p.display().to_string());
    }
    if let Some((first, rest)) = common.policy.split_first() {
        cfg.policy = PolicySpec::Short(first.clone());
        cfg.sweep = rest.iter().cloned().map(PolicySpec::Short).collect();
        note("policy", common.policy.join(","));
    }
    if common.greedy {
        cfg.sampling = SamplingConfig::Greedy;
        note("sampling", "greedy".into());
    }
    if common.temperature.is_some() || common.top_p.is_some() {
        let (t0, p0, s0) = match cfg.sampling {
            SamplingConfig::Nucleus { temperature, top_p, seed } => (temperature, top_p, seed),
            SamplingConfig::Greedy => (1.0, 1.0, 0),
        };
        let (t, p) = (common.temperature.unwrap_or(t0), common.top_p.unwrap_or(p0));
        cfg.sampling = SamplingConfig::nucleus(t, p, s0);
        note("sampling", format!("nucleus(temperature={t}, top_p={p})"));
    }
    if let Some(seed) = common.seed {
        cfg.sampling = cfg.sampling.reseeded(seed);
        if let HeadsSpec::Train { train } = &mut cfg.heads {
            train.hyper.seed = seed;
        }
        note("seed", seed.to_string());
    }
    if let Some(n) = common.max_new_tokens {
        cfg.max_new_tokens = n;
        note("max_new_tokens", n.to_string());
    }
    if let Some(n) = common.prompt_limit {
        cfg.prompts = match cfg.prompts {
            run_config::PromptSpec::Suite { suite, .. } => run_config::PromptSpec::Suite { suite, limit: Some(n) },
            _ => return Err(CliError::new(Kind::Usage, "--prompt-limit applies to suite prompts only")),
        };
        note("prompt_limit", n.to_string());
    }
    cfg.sampling.validate()?;

    // Output location and threads do not change results and are not recorded.
    let out = common
        .out
        .clone()
        .or_else(|| std::env::var_os("SPARKEE_OUT").map(PathBuf::from))
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let threads = match common.threads {
        Some(n) => Some(n),
        None => match std::env::var("SPARKEE_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| CliError::config(format!("SPARKEE_THREADS={v:?} is not a number")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(Resolved { cfg, overrides, out })
}

fn out_file(dir: &Path, name: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::new(Kind::Runtime, format!("create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    if path.exists() {
        return Err(CliError::new(Kind::AlreadyExists, format!("{} already exists; outputs are write-once", path.display())));
    }
    Ok(path)
}

fn announce(value: serde_json::Value) {
    println!("{value}");
}

fn build_model(common: &Common) -> CliResult<()> {
    let r = resolve(common)?;
    let backbone = r.cfg.backbone()?;
    let path = out_file(&r.out, "model.spkw")?;
    let mut buf = Vec::new();
    container::write_container(&mut buf, &backbone, None)?;
    write_bytes(&path, &buf)?;
    announce(serde_json::json!({
        "wrote": path,
        "config_digest": backbone.config().digest(),
        "backbone_digest": backbone.digest(),
    }));
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| CliError::new(Kind::AlreadyExists, format!("{}: {e}", path.display())))?;
    f.write_all(bytes).map_err(|e| CliError::new(Kind::Runtime, e.to_string()))
}

fn train_heads_cmd(common: &Common, layers: &[usize]) -> CliResult<()> {
    let r = resolve(common)?;
    let backbone = r.cfg.backbone()?;
    let l = backbone.num_layers();
    let train = match &r.cfg.heads {
        HeadsSpec::Train { train } => train.clone(),
        HeadsSpec::Artifact { .. } => TrainSpec::default(),
    };
    let layers: BTreeSet<usize> = if !layers.is_empty() {
        layers.iter().copied().collect()
    } else if let Some(ls) = &train.layers {
        ls.iter().copied().collect()
    } else {
        (1..l).collect()
    };
    if let Some(bad) = layers.iter().find(|&&x| x == 0 || x >= l) {
        return Err(CliError::config(format!("layer {bad} is not an intermediate layer of a {l}-layer model")));
    }
    let heads = run_config::train_on_suite(&backbone, &layers, &train)?;
    let path = out_file(&r.out, "heads.spkw")?;
    let curve = out_file(&r.out, "training_curve.csv")?;
    let mut buf = Vec::new();
    container::write_container(&mut buf, &backbone, Some(&heads))?;
    write_bytes(&path, &buf)?;
    write_once(&curve, &curve_csv(&heads.meta))?;
    announce(serde_json::json!({
        "wrote": path,
        "heads_digest": heads.digest(),
        "final_loss": heads.meta.final_loss,
    }));
    Ok(())
}

struct Loaded {
    backbone: Backbone,
    heads: HeadSet,
    prompts: Vec<Vec<sparkee::TokenId>>,
    config: ModelConfig,
}

fn load_for(r: &Resolved, needed: &BTreeSet<usize>) -> CliResult<Loaded> {
    let backbone = r.cfg.backbone()?;
    let config = backbone.config().clone();
    let heads = r.cfg.heads(&backbone, needed)?;
    let prompts = r.cfg.prompts(&config)?;
    Ok(Loaded { backbone, heads, prompts, config })
}

fn generate_cmd(common: &Common) -> CliResult<()> {
    let r = resolve(common)?;
    let policies = r.cfg.policies()?;
    let [policy] = policies.as_slice() else {
        return Err(CliError::new(Kind::Usage, "generate takes exactly one policy"));
    };
    let cfg = r.cfg.model_config()?;
    policy.validate(cfg.num_layers)?;
    let loaded = load_for(&r, &policy.head_layers(cfg.num_layers))?;
    let path = out_file(&r.out, "generation.jsonl")?;
    let mut out = String::new();
    for (i, prompt) in loaded.prompts.iter().enumerate() {
        let sampling = prompt_sampling(&r.cfg.sampling, i);
        let result = generate(&loaded.backbone, &loaded.heads, policy, prompt, &sampling, r.cfg.max_new_tokens)?;
        let header = RunHeader {
            artifact_version: ARTIFACT_VERSION.into(),
            config_digest: loaded.config.digest(),
            backbone_digest: loaded.backbone.digest().into(),
            heads_digest: loaded.heads.digest(),
            policy: policy.to_string(),
            sampling,
            prompt: prompt.clone(),
            max_new_tokens: r.cfg.max_new_tokens,
            stop_reason: result.stop_reason,
            overrides: r.overrides.clone(),
        };
        out.push_str(&to_jsonl(&header, &result)?);
    }
    write_once(&path, &out)?;
    announce(serde_json::json!({ "wrote": path, "runs": loaded.prompts.len() }));
    Ok(())
}

fn oracle_cmd(common: &Common, layers: &[usize]) -> CliResult<()> {
    let r = resolve(common)?;
    let l = r.cfg.model_config()?.num_layers;
    let layers: BTreeSet<usize> = layers.iter().copied().collect();
    if let Some(bad) = layers.iter().find(|&&x| x == 0 || x > l) {
        return Err(CliError::config(format!("probe layer {bad} outside 1..={l}")));
    }
    let loaded = load_for(&r, &layers)?;
    let path = out_file(&r.out, "oracle.csv")?;
    let study = run_oracle_study(&loaded.backbone, &loaded.heads, &loaded.prompts, &layers, &r.cfg.sampling, r.cfg.max_new_tokens)?;
    write_once(&path, &study.to_csv())?;
    announce(serde_json::json!({ "wrote": path, "prompt_digest": study.prompt_digest }));
    Ok(())
}

fn timestamp() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    secs.to_string()
}

fn bench_cmd(common: &Common) -> CliResult<()> {
    let r = resolve(common)?;
    let policies = r.cfg.policies()?;
    let l = r.cfg.model_config()?.num_layers;
    let mut needed = BTreeSet::new();
    for p in &policies {
        p.validate(l)?;
        needed.extend(p.head_layers(l));
    }
    let loaded = load_for(&r, &needed)?;
    let json_path = out_file(&r.out, "report.json")?;
    let csv_path = out_file(&r.out, "report.csv")?;
    let reports = run_benchmark(&loaded.backbone, &loaded.heads, &policies, &loaded.prompts, &r.cfg.sampling, r.cfg.max_new_tokens)?;
    let file = ReportFile {
        artifact_version: ARTIFACT_VERSION.into(),
        generated_at: timestamp(),
        config_digest: loaded.config.digest(),
        backbone_digest: loaded.backbone.digest().into(),
        heads_digest: loaded.heads.digest(),
        sampling: r.cfg.sampling.clone(),
        prompt_digest: sparkee::prompts::digest(&loaded.prompts),
        max_new_tokens: r.cfg.max_new_tokens,
        eos_placement: sparkee::interleave::EOS_PLACEMENT.into(),
        overrides: r.overrides.clone(),
        reports,
    };
    emit_report(&file, ReportFormat::Json, &json_path)?;
    emit_report(&file, ReportFormat::Csv, &csv_path)?;
    let summary: Vec<_> = file
        .reports
        .iter()
        .map(|rep| {
            serde_json::json!({
                "policy": rep.policy,
                "text_avg": rep.text.avg_exit_layer,
                "speech_avg": rep.speech.avg_exit_layer,
                "speech_speedup_pct": rep.speech.speedup_pct,
            })
        })
        .collect();
    announce(serde_json::json!({ "wrote": [json_path, csv_path], "reports": summary }));
    Ok(())
}

fn report_cmd(input: &Path, format: Format, file: Option<&Path>) -> CliResult<()> {
    let text = std::fs::read_to_string(input).map_err(|e| CliError::missing(format!("{}: {e}", input.display())))?;
    let report: ReportFile = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", input.display())))?;
    let format = match format {
        Format::Json => ReportFormat::Json,
        Format::Csv => ReportFormat::Csv,
    };
    match file {
        Some(path) => emit_report(&report, format, path)?,
        None => print!("{}", render_report(&report, format)?),
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::BuildModel(c) => build_model(c),
        Command::TrainHeads { common, layers } => train_heads_cmd(common, layers),
        Command::Generate(c) => generate_cmd(c),
        Command::OracleStudy { common, layers } => oracle_cmd(common, layers),
        Command::Bench(c) => bench_cmd(c),
        Command::Report { input, format, file } => report_cmd(input, *format, file.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError::new(Kind::Usage, e.kind().to_string());
            eprintln!("{}", err.to_line());
            return ExitCode::from(Kind::Usage.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_line());
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}
