use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use touchauth::config::{self, Overrides, PipelineConfig};
use touchauth::dataset::{self, DatasetSpec};
use touchauth::oneclass::ClassifierKind;
use touchauth::pipeline;
use touchauth::session::Label;
use touchauth::workflow;

#[derive(Parser, Debug)]
#[command(name = "touchauth", version, about = "Touch authentication from capacitive frames and device motion")]
struct Cli {
    /// JSON config file (falls back to $TOUCHAUTH_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; every command writes only below it.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. --set embed.epochs=20. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the embedding network.
    Pretrain(PretrainArgs),
    /// Fit per-user templates.
    Enroll(EnrollArgs),
    /// Score one session; exit 0 accept, 1 reject, 2 error.
    Verify(VerifyArgs),
    /// Score a manifest against enrolled templates.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    users: usize,
    /// Genuine sessions per user.
    #[arg(long, default_value_t = 40)]
    sessions: usize,
    /// Attack sessions per victim, e.g. --attack replica=20. Repeatable.
    #[arg(long = "attack", value_name = "KIND=N")]
    attacks: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pretrain_users: usize,
    #[arg(long, default_value_t = 40)]
    pretrain_sessions: usize,
    #[arg(long, default_value_t = 0.5)]
    enroll_fraction: f64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Defaults to manifest.json in paths.data_dir (or the output directory).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnrollArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Users to enrol; all users in the manifest when omitted.
    #[arg(long = "user")]
    users: Vec<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    kind: Option<ClassifierKind>,
    /// Manifest of impostor sessions for the grid search; defaults to the
    /// other users of --manifest.
    #[arg(long)]
    impostors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let file = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("TOUCHAUTH_CONFIG").map(PathBuf::from));
    let mut set = cli.set.clone();
    if let Some(w) = cli.workers {
        set.push(format!("workers={w}"));
    }
    let cfg = config::resolve(&Overrides {
        file,
        seed: cli.seed,
        out: cli.out.clone(),
        set,
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .context("starting worker pool")?;
    Ok(cfg)
}

fn parse_attack(text: &str) -> Result<(Label, usize)> {
    let (kind, n) = text
        .split_once('=')
        .with_context(|| format!("--attack '{text}' is not KIND=N"))?;
    let kind: Label = kind.trim().parse().map_err(anyhow::Error::msg)?;
    if !kind.is_attack() {
        bail!("'{kind}' is not an attack kind");
    }
    let n = n.trim().parse().with_context(|| format!("--attack '{text}': bad count"))?;
    Ok((kind, n))
}

fn prepare_out(cfg: &PipelineConfig) -> Result<&Path> {
    let out = cfg.paths.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    config::write_resolved(cfg, out)?;
    Ok(out)
}

fn cmd_synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        users: a.users,
        sessions: a.sessions,
        attacks: a.attacks.iter().map(|s| parse_attack(s)).collect::<Result<_>>()?,
        pretrain_users: a.pretrain_users,
        pretrain_sessions: a.pretrain_sessions,
        enroll_fraction: a.enroll_fraction,
        ..Default::default()
    };
    let out = prepare_out(cfg)?;
    let summary = dataset::write_dataset(out, &spec, &cfg.synth, cfg.seed)?;
    log::info!("wrote {} sessions to {}", summary.sessions, out.display());
    Ok(())
}

fn cmd_pretrain(cfg: &PipelineConfig, a: &PretrainArgs) -> Result<()> {
    let manifest = a.manifest.clone().unwrap_or_else(|| cfg.paths.manifest());
    let out = prepare_out(cfg)?;
    let settings = cfg.pretrain_settings();
    let prepared = pipeline::prepare_manifest(&manifest, &settings.preprocess)?;
    let (model, log) = pipeline::pretrain_from_prepared(&prepared, &settings)?;
    let path = out.join("model.json");
    let hash = model.save(&path)?;
    pipeline::write_training_log(&out.join("training_log.csv"), &log)?;
    if let Some(last) = log.last() {
        log::info!("final loss {:.4}, head accuracy {:.4}", last.loss, last.accuracy);
    }
    log::info!("model {} (sha256 {hash})", path.display());
    Ok(())
}

fn cmd_enroll(cfg: &PipelineConfig, a: &EnrollArgs) -> Result<()> {
    let manifest = a.manifest.clone().unwrap_or_else(|| cfg.paths.manifest());
    let model = a.model.clone().unwrap_or_else(|| cfg.paths.model());
    let mut oc = cfg.oneclass.clone();
    if let Some(kind) = a.kind {
        oc.kind = kind;
    }
    let out = prepare_out(cfg)?;
    let templates = workflow::enroll_users(&manifest, &a.users, &model, a.impostors.as_deref(), &oc)?;
    let dir = out.join("templates");
    for t in &templates {
        let p = workflow::save_template(&dir, t)?;
        log::info!("{}: {:?} val EER {:.4} -> {}", t.user_id, t.params, t.val_eer, p.display());
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, cfg: &PipelineConfig, a: &VerifyArgs) -> Result<bool> {
    // only a session-scoped run with an explicit --out leaves a config trail
    if cli.out.is_some() {
        prepare_out(cfg)?;
    }
    let model = a.model.clone().unwrap_or_else(|| cfg.paths.model());
    let d = workflow::verify_session(&a.session, &a.template, &model)?;
    println!("{}", serde_json::to_string(&d)?);
    Ok(d.accept)
}

fn cmd_evaluate(cfg: &PipelineConfig, a: &EvaluateArgs) -> Result<()> {
    let manifest = a.manifest.clone().unwrap_or_else(|| cfg.paths.manifest());
    let templates = a.templates.clone().unwrap_or_else(|| cfg.paths.templates());
    let model = a.model.clone().unwrap_or_else(|| cfg.paths.model());
    let out = prepare_out(cfg)?;
    let eval = workflow::evaluate(&manifest, &templates, &model)?;
    workflow::write_evaluation(out, &eval, cfg.evaluate.hist_bins, cfg.evaluate.per_user_roc)?;
    if let Some(p) = &eval.summary.pooled {
        log::info!("pooled EER {:.4} over {} genuine / {} impostor scores", p.eer, p.n_genuine, p.n_impostor);
    }
    for (kind, far) in &eval.summary.attack_far {
        log::info!("{kind} FAR {far:.4}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = resolve_config(cli)?;
    match &cli.cmd {
        Command::Synth(a) => cmd_synth(&cfg, a)?,
        Command::Pretrain(a) => cmd_pretrain(&cfg, a)?,
        Command::Enroll(a) => cmd_enroll(&cfg, a)?,
        Command::Verify(a) => {
            let accept = cmd_verify(cli, &cfg, a)?;
            return Ok(if accept { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Evaluate(a) => cmd_evaluate(&cfg, a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
