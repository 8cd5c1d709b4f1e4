//! `bidtune`: generate configs, collect data, train, evaluate, diagnose and
//! assemble reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bidtune::dataset::{collect, save_with_digest, validate, Dataset};
use bidtune::eval::{
    critic_diagnostics, learning_curve, write_curve_csv, write_curve_plot_data,
    write_diagnostic_csvs,
};
use bidtune::policy::{BasePolicy, BehaviorNoiseSpec};
use bidtune::sim::{sample_configs, ConfigRanges, ConfigSet};
use bidtune::trainer::{write_loss_csv, LossReport, TrainConfig, Trainer};
use bidtune::{Error, Result};

mod manifest;

#[derive(Parser, Debug)]
#[command(
    name = "bidtune",
    version,
    about = "Offline tuning of bid pacing controllers"
)]
struct Cli {
    /// Worker threads for parallel rollouts (default: all cores).
    #[arg(long, global = true, env = "BIDTUNE_WORKERS")]
    workers: Option<usize>,

    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, env = "BIDTUNE_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a set of campaign configurations.
    GenConfigs(GenConfigsArgs),
    /// Roll out the behavior policy and write a dataset file.
    Collect(CollectArgs),
    /// Train from a dataset, writing checkpoints and a loss log.
    Train(TrainArgs),
    /// Evaluate checkpoints against the default policy.
    Eval(EvalArgs),
    /// Compare critic predictions with realized returns.
    Diagnose(DiagnoseArgs),
    /// Collect CSVs and a digest manifest for a run directory.
    Report(ReportArgs),
    /// Dump a dataset as text, one record per line.
    Export(ExportArgs),
    /// Check a dataset file's checksum and record invariants.
    Validate(ValidateArgs),
}

#[derive(Args, Debug)]
struct GenConfigsArgs {
    /// Number of configurations.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// TOML file with sampling ranges (default: built-in ranges).
    #[arg(long)]
    ranges_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output TOML file.
    #[arg(long, default_value = "configs.toml")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Campaign config file written by gen-configs.
    #[arg(long)]
    configs: PathBuf,
    /// Number of episodes to roll out.
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: u64,
    /// Std of the multiplicative exploration noise.
    #[arg(long, default_value_t = 0.05)]
    sigma_beta: f64,
    /// Lower clip of the exploration noise.
    #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
    clip_lo: f64,
    /// Upper clip of the exploration noise.
    #[arg(long, default_value_t = 0.5)]
    clip_hi: f64,
    /// TOML file with the base policy (default: the built-in pacing controller).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset file.
    #[arg(long, default_value = "dataset.bin")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Profile {
    Paper,
    Desk,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Training config; either a flat table or `[profiles.<name>]` tables.
    #[arg(long)]
    train_config: Option<PathBuf>,
    /// Profile to use from the config file (or the built-in one when no file
    /// is given).
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Override the penalty weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Resume from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint files or directories containing `*.ckpt` files.
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    configs: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    episodes_per_config: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "eval")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    configs: PathBuf,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u64).range(1..))]
    episodes_per_config: u64,
    /// Config positions that get per-timestep curves.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1])]
    probes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "diagnose")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directory to scan.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Emit text (the only format).
    #[arg(long, default_value_t = true)]
    text: bool,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
}

struct Ctx {
    output_root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.output_root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    Ok(())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<fs::File> {
    ensure_parent(path)?;
    fs::File::create(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn gen_configs(ctx: &Ctx, a: &GenConfigsArgs) -> Result<()> {
    let ranges = match &a.ranges_file {
        Some(p) => ConfigRanges::load(p)?,
        None => ConfigRanges::default(),
    };
    let configs = sample_configs(a.n as usize, &ranges, a.seed)?;
    let out = ctx.out(&a.out);
    ensure_parent(&out)?;
    ConfigSet::new(configs).save(&out)?;
    println!("wrote {} configs to {}", a.n, out.display());
    Ok(())
}

fn load_policy(path: Option<&Path>) -> Result<BasePolicy> {
    match path {
        None => Ok(BasePolicy::default_pacing()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let policy: BasePolicy = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            policy.params.validate()?;
            Ok(policy)
        }
    }
}

fn cmd_collect(ctx: &Ctx, a: &CollectArgs) -> Result<()> {
    let configs = ConfigSet::load(&a.configs)?.configs;
    let policy = load_policy(a.policy.as_deref())?;
    let noise = BehaviorNoiseSpec {
        sigma_beta: a.sigma_beta,
        clip_lo: a.clip_lo,
        clip_hi: a.clip_hi,
    };
    let data = collect(&configs, &policy, &noise, a.episodes, a.seed)?;
    let out = ctx.out(&a.out);
    ensure_parent(&out)?;
    let digest = save_with_digest(&data, &out)?;
    println!(
        "wrote {} transitions from {} episodes to {} (sha256 {digest})",
        data.len(),
        a.episodes,
        out.display()
    );
    Ok(())
}

/// Reads a training config file. A file with a `profiles` table selects the
/// named profile; otherwise the whole file is one config. Missing keys fall
/// back to the built-in profile of the same name.
fn load_train_config(path: Option<&Path>, profile: Profile) -> Result<TrainConfig> {
    let (name, builtin) = match profile {
        Profile::Paper => ("paper", TrainConfig::paper()),
        Profile::Desk => ("desk", TrainConfig::desk()),
    };
    let Some(path) = path else {
        return Ok(builtin);
    };
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: toml::Table =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let table = match doc.get("profiles") {
        Some(toml::Value::Table(profiles)) => match profiles.get(name) {
            Some(toml::Value::Table(t)) => t.clone(),
            _ => {
                return Err(Error::Config(format!(
                    "{} has no [profiles.{name}] table",
                    path.display()
                )))
            }
        },
        _ => doc,
    };
    let mut merged: toml::Table =
        toml::from_str(&builtin.to_toml()?).expect("own serialization parses");
    for (k, v) in table {
        merged.insert(k, v);
    }
    TrainConfig::from_toml(&toml::to_string(&merged).map_err(|e| Error::Config(e.to_string()))?)
}

fn checkpoint_name(step: u64) -> String {
    format!("step-{step:09}.ckpt")
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let data = Dataset::load(&a.dataset)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            if a.alpha.is_some() || a.seed.is_some() || a.train_config.is_some() {
                return Err(Error::InvalidArgument(
                    "--resume continues with the checkpoint's own config; drop the overrides"
                        .into(),
                ));
            }
            Trainer::load_checkpoint(p)?
        }
        None => {
            let mut cfg = load_train_config(a.train_config.as_deref(), a.profile)?;
            if let Some(alpha) = a.alpha {
                cfg.cql_alpha = alpha;
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            Trainer::new(&data, cfg)?
        }
    };
    let out_dir = ctx.out(&a.out_dir);
    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| io_err(&ckpt_dir, e))?;
    write_text(
        &out_dir.join("train_config.toml"),
        &trainer.config.to_toml()?,
    )?;

    let loss_path = out_dir.join("losses.csv");
    let mut reports: Vec<LossReport> = if a.resume.is_some() && loss_path.exists() {
        bidtune::trainer::read_loss_csv(&loss_path)?
            .into_iter()
            .filter(|r| r.step <= trainer.step)
            .collect()
    } else {
        Vec::new()
    };
    let result = trainer.run(
        &data,
        |r| {
            reports.push(*r);
            Ok(())
        },
        |t| t.save_checkpoint(&ckpt_dir.join(checkpoint_name(t.step))),
    );
    write_loss_csv(create(&loss_path)?, &reports)?;
    result?;
    write_text(
        &out_dir.join("policy.txt"),
        &trainer.actor.base.params.to_text(),
    )?;
    println!(
        "trained {} steps; |w - w_default| = {:.6}; outputs in {}",
        trainer.step,
        trainer.displacement(),
        out_dir.display()
    );
    Ok(())
}

fn expand_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no checkpoint files found".into()));
    }
    Ok(out)
}

fn cmd_eval(ctx: &Ctx, a: &EvalArgs) -> Result<()> {
    let configs = ConfigSet::load(&a.configs)?.configs;
    let files = expand_checkpoints(&a.checkpoints)?;
    let mut policies = Vec::with_capacity(files.len());
    let mut baseline: Option<BasePolicy> = None;
    for f in &files {
        let t = Trainer::load_checkpoint(f)?;
        let mut default = t.actor.base.clone();
        default.params.values = t.default_params.clone();
        match &baseline {
            None => baseline = Some(default),
            Some(b) if *b != default => {
                return Err(Error::InvalidArgument(format!(
                    "{} was trained from a different default policy",
                    f.display()
                )))
            }
            _ => {}
        }
        policies.push((t.step, t.actor.base));
    }
    let baseline = baseline.expect("at least one checkpoint");
    let curve = learning_curve(
        &policies,
        &baseline,
        &configs,
        a.episodes_per_config as usize,
        a.seed,
    )?;
    let out_dir = ctx.out(&a.out_dir);
    write_curve_csv(create(&out_dir.join("learning_curve.csv"))?, &curve)?;
    write_curve_plot_data(create(&out_dir.join("learning_curve.dat"))?, &curve)?;
    for r in &curve {
        let ci = r
            .gain_ci
            .map(|(lo, hi)| format!("[{lo:+.3}%, {hi:+.3}%]"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "step {:>9}: mean return {:.3}, gain {:+.3}% (95% CI {ci})",
            r.checkpoint_id, r.pooled_mean, r.gain_pct
        );
    }
    Ok(())
}

fn cmd_diagnose(ctx: &Ctx, a: &DiagnoseArgs) -> Result<()> {
    let configs = ConfigSet::load(&a.configs)?.configs;
    let trainer = Trainer::load_checkpoint(&a.checkpoint)?;
    let d = critic_diagnostics(
        &trainer,
        &configs,
        a.episodes_per_config as usize,
        &a.probes,
        a.seed,
    )?;
    let out_dir = ctx.out(&a.out_dir);
    write_diagnostic_csvs(
        create(&out_dir.join("critic_campaigns.csv"))?,
        create(&out_dir.join("critic_curves.csv"))?,
        &d,
    )?;
    match d.pearson {
        Some(r) => println!(
            "pearson(Q(s0), return) = {r:.4} over {} campaigns",
            d.campaigns.len()
        ),
        None => println!("pearson not defined ({} campaigns)", d.campaigns.len()),
    }
    for &p in &a.probes {
        if let Some(f) = d.fraction_within(configs[p].id, 2.0) {
            println!(
                "config {}: {:.1}% of steps within 2 sd of return-to-go",
                configs[p].id,
                100.0 * f
            );
        }
    }
    Ok(())
}

fn cmd_export(ctx: &Ctx, a: &ExportArgs) -> Result<()> {
    if !a.text {
        return Err(Error::InvalidArgument(
            "only --text export is supported".into(),
        ));
    }
    let data = Dataset::load(&a.dataset)?;
    match &a.out {
        Some(p) => data.export_text(std::io::BufWriter::new(create(&ctx.out(p))?)),
        None => data.export_text(std::io::stdout().lock()),
    }
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let report = validate(&a.dataset)?;
    println!(
        "{} records, {} episodes, sha256 {}",
        report.records_read, report.episodes_seen, report.digest
    );
    if report.is_valid() {
        println!("ok");
        Ok(())
    } else {
        for v in &report.violations {
            println!("violation: {v}");
        }
        Err(Error::Contract(format!(
            "{} invariant violations",
            report.violations.len()
        )))
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidArgument("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    let ctx = Ctx {
        output_root: cli.output_root,
    };
    match &cli.command {
        Command::GenConfigs(a) => gen_configs(&ctx, a),
        Command::Collect(a) => cmd_collect(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Diagnose(a) => cmd_diagnose(&ctx, a),
        Command::Report(a) => manifest::report(&ctx.out(&a.run)),
        Command::Export(a) => cmd_export(&ctx, a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
