//! `adaor`: train, sample, evaluate and serve instruction-editing flows.
//!
//! Exit codes are 0 on success, 1 on usage errors and 2 on runtime errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use adaor_core::eval::{metrics_row, oracle_id, run_eval, EvalConfig};
use adaor_core::guidance::{Scheduler, Variant, DEFAULT_SCALE};
use adaor_core::metrics::CSV_HEADER;
use adaor_core::model::{default_architecture, DenoiserNet};
use adaor_core::sampler::relative_l2;
use adaor_core::flow::DEFAULT_STEPS;
use adaor_core::train::{train_with_progress, write_loss_csv, MixConfig, TrainConfig};
use adaor_core::TaskKind;
use adaor_service::{image, run_sweep, AppState, SweepFailure, SweepRequest};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

/// Coordinates perturbed per parameter tensor by `gradcheck`.
const GRADCHECK_COORDS: usize = 24;
const GRADCHECK_TOLERANCE: f64 = 1e-5;
const ORACLE_CASES: usize = 64;
const ORACLE_SEED: u64 = 0;

#[derive(Parser)]
#[command(name = "adaor", version, about = "Adaptive-origin guidance for instruction-conditioned flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser and write a checkpoint plus `<out>.loss.csv`.
    Train(TrainArgs),
    /// Sample one α-sweep and write a PNG grid and a per-α CSV.
    Sweep(SweepArgs),
    /// Evaluate sweep metrics over many cases and variants.
    Eval(EvalArgs),
    /// Compare the learned identity prediction with its closed form.
    OracleId(OracleArgs),
    /// Check autodiff against central differences on the full denoiser.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP API over a checkpoint.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    task: TaskKind,
    /// Defaults to 5000 for vec and 30000 for disc.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.10)]
    p_null: f64,
    #[arg(long, default_value_t = 0.10)]
    p_id: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    instruction: String,
    /// `START:END:COUNT` or a comma-separated list.
    #[arg(long, default_value = "0:1:6", value_parser = parse_alphas)]
    alphas: Alphas,
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    w: f64,
    #[arg(long, default_value = "sqrt")]
    scheduler: Scheduler,
    #[arg(long, default_value = "adaor")]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    case_seed: u64,
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 32)]
    n_cases: usize,
    /// Comma-separated variant names.
    #[arg(long, default_value = "adaor,cfg,cfgid", value_delimiter = ',')]
    variants: Vec<Variant>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "0.3,0.5,0.7,0.9", value_delimiter = ',')]
    t_grid: Vec<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
}

#[derive(Debug, Clone)]
struct Alphas(Vec<f64>);

fn parse_alphas(s: &str) -> Result<Alphas, String> {
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    let parts: Vec<&str> = s.split(':').collect();
    let alphas = match parts.as_slice() {
        [start, end, count] => {
            let (start, end) = (num(start)?, num(end)?);
            let count: usize = count.trim().parse().map_err(|e| format!("`{count}`: {e}"))?;
            match count {
                0 => return Err("count must be at least 1".into()),
                1 => vec![start],
                n => (0..n).map(|i| start + (end - start) * i as f64 / (n - 1) as f64).collect(),
            }
        }
        [list] => list.split(',').map(num).collect::<Result<_, _>>()?,
        _ => return Err("expected START:END:COUNT or a comma-separated list".into()),
    };
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(format!("alpha {a} is outside [0, 1]"));
    }
    if alphas.windows(2).any(|p| p[0] > p[1]) {
        return Err("alphas must be ascending".into());
    }
    Ok(Alphas(alphas))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load(path: &Path) -> Result<DenoiserNet> {
    DenoiserNet::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn print_config(lines: &[String]) {
    for l in lines {
        println!("{l}");
    }
}

fn list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::for_task(a.task);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch = a.batch;
    cfg.lr = a.lr;
    cfg.seed = a.seed;
    cfg.mix = MixConfig {
        p_null: a.p_null,
        p_id: a.p_id,
    };
    let (hidden, depth) = default_architecture(a.task);
    let config = vec![
        "# command=train".to_string(),
        format!("# task={}", a.task),
        format!("# steps={}", cfg.steps),
        format!("# batch={}", cfg.batch),
        format!("# lr={}", cfg.lr),
        format!("# seed={}", cfg.seed),
        format!("# p_null={}", cfg.mix.p_null),
        format!("# p_id={}", cfg.mix.p_id),
        format!("# hidden={hidden}"),
        format!("# depth={depth}"),
    ];
    print_config(&config);
    let every = (cfg.steps / 20).max(1);
    let outcome = train_with_progress(&cfg, |step, loss| {
        if step % every == 0 || step + 1 == cfg.steps {
            tracing::info!(step, loss, "train");
        }
    })?;
    outcome.net.save(&a.out)?;
    let mut loss_path = a.out.clone().into_os_string();
    loss_path.push(".loss.csv");
    let loss_path = PathBuf::from(loss_path);
    let mut w = create(&loss_path)?;
    for l in &config {
        writeln!(w, "{l}")?;
    }
    write_loss_csv(&mut w, &outcome.losses)?;
    w.flush()?;
    println!("wrote {} and {}", a.out.display(), loss_path.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let state = AppState::from_path(&a.ckpt)?;
    let task = state.net.task();
    let req = SweepRequest {
        instruction: a.instruction,
        variant: a.variant,
        w: a.w,
        scheduler: a.scheduler,
        alphas: a.alphas.0,
        seed: a.seed,
        case_seed: a.case_seed,
        steps: DEFAULT_STEPS,
    };
    let config = vec![
        "# command=sweep".to_string(),
        format!("# checkpoint={}", state.checkpoint_id),
        format!("# task={task}"),
        format!("# instruction={}", req.instruction),
        format!("# variant={}", req.variant),
        format!("# w={}", req.w),
        format!("# scheduler={}", req.scheduler.name()),
        format!("# alphas={}", list(&req.alphas)),
        format!("# seed={}", req.seed),
        format!("# case_seed={}", req.case_seed),
        format!("# steps={}", req.steps),
    ];
    print_config(&config);
    let resp = match run_sweep(&state.net, &req) {
        Ok(r) => r,
        Err(SweepFailure::Invalid(fields)) => {
            let msgs: Vec<String> = fields.iter().map(|f| format!("{}: {}", f.field, f.message)).collect();
            bail!("{}", msgs.join("; "))
        }
        Err(SweepFailure::Diverged { step, t, variant, alpha }) => {
            bail!("sampling diverged at step {step} (t = {t}) for {variant} at alpha {alpha}")
        }
        Err(SweepFailure::Internal(msg)) => bail!(msg),
    };
    let source = &resp.source.values;
    let mut rows = Vec::new();
    for (o, r) in resp.outputs.iter().zip(&resp.references) {
        let residual = match task {
            TaskKind::Disc => adaor_core::metrics::manifold_residual(&o.image.values),
            TaskKind::Vec => f64::NAN,
        };
        rows.push(format!(
            "{},{},{},{},{}",
            o.alpha,
            fmt(o.max_norm),
            fmt(relative_l2(&o.image.values, source)),
            fmt(relative_l2(&o.image.values, &r.image.values)),
            fmt(residual),
        ));
    }
    println!("alpha,max_norm,rel_l2_source,rel_l2_reference,residual");
    for r in &rows {
        println!("{r}");
    }
    if let Some(path) = &a.csv {
        let mut w = create(path)?;
        for l in &config {
            writeln!(w, "{l}")?;
        }
        writeln!(w, "alpha,max_norm,rel_l2_source,rel_l2_reference,residual")?;
        for r in &rows {
            writeln!(w, "{r}")?;
        }
        writeln!(w, "{CSV_HEADER}")?;
        writeln!(
            w,
            "{}",
            metrics_row(0, req.variant, req.scheduler, req.w, req.alphas.len(), resp.metrics.as_ref())
        )?;
        w.flush()?;
    }
    if let Some(path) = &a.png {
        let outputs: Vec<Vec<f64>> = resp.outputs.iter().map(|o| o.image.values.clone()).collect();
        let grid = image::sweep_grid(task, source, &outputs)?;
        std::fs::write(path, grid.to_png()?).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn fmt(x: f64) -> String {
    adaor_core::eval::fmt_f64(x)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let net = load(&a.ckpt)?;
    let cfg = EvalConfig {
        n_cases: a.n_cases,
        variants: a.variants,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    print_config(&cfg.comment_lines());
    let report = run_eval(&net, &cfg)?;
    print!("{}", report.summary());
    if let Some(path) = &a.report {
        let mut w = create(path)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_oracle(a: OracleArgs) -> Result<()> {
    let net = load(&a.ckpt)?;
    println!("# command=oracle-id");
    println!("# cases={ORACLE_CASES}");
    println!("# seed={ORACLE_SEED}");
    println!("# t_grid={}", list(&a.t_grid));
    let report = oracle_id(&net, ORACLE_CASES, &a.t_grid, ORACLE_SEED)?;
    print!("{}", report.summary());
    if let Some(path) = &a.report {
        let mut w = create(path)?;
        report.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let task = TaskKind::Disc;
    println!("# command=gradcheck");
    println!("# task={task}");
    println!("# seed={}", a.seed);
    println!("# coords_per_tensor={GRADCHECK_COORDS}");
    let mut net = DenoiserNet::init(a.seed, task);
    let report = net.gradcheck(a.seed, GRADCHECK_COORDS)?;
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {})",
        report.max_rel_error,
        report.coords_checked,
        report.worst_param.as_deref().unwrap_or("none")
    );
    if !(report.max_rel_error < GRADCHECK_TOLERANCE) {
        bail!("gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}", report.max_rel_error);
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let state = AppState::from_path(&a.ckpt)?;
    println!("# command=serve");
    println!("# checkpoint={}", state.checkpoint_id);
    println!("# host={}", a.host);
    println!("# port={}", a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(adaor_service::serve(Arc::new(state), SocketAddr::new(a.host, a.port)))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::OracleId(a) => cmd_oracle(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Serve(a) => cmd_serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_ranges_and_lists() {
        assert_eq!(parse_alphas("0:1:6").unwrap().0, adaor_core::sampler::uniform_alphas(6));
        assert_eq!(parse_alphas("0:0:1").unwrap().0, vec![0.0]);
        assert_eq!(parse_alphas("0.2,0.5,1").unwrap().0, vec![0.2, 0.5, 1.0]);
        assert!(parse_alphas("0:1:0").is_err());
        assert!(parse_alphas("0,1.5").is_err());
        assert!(parse_alphas("1,0").is_err());
        assert!(parse_alphas("a:b").is_err());
    }
}
