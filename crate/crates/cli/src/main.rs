use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mbd_core::certificate::{self, Certificate};
use mbd_core::pipeline::{self, DiagnosticsSummary, PipelineConfig, Profile, SweepAxis, SweepRow, Verdict};
use mbd_core::trainer::{self, EpochLog, Splits};
use mbd_core::{Dataset, MbdError, ParameterStore, ZcdpLedger};

mod config;

#[derive(Parser, Debug)]
#[command(name = "mbd", version, about = "Certifiable modality deletion pipeline")]
struct Cli {
    /// TOML file layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `workers` from the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Full,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Full => Profile::Full,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as annotated TOML.
    Config {
        /// Also write it to <out>/config.toml.
        #[arg(long)]
        write: bool,
    },
    /// Generate the synthetic dataset.
    Synth,
    /// Train the multimodal model.
    Train(DataArg),
    /// Train the reference model with the target modality absent everywhere.
    TrainRef(DataArg),
    /// Select, edit and certify.
    Surgery(SurgeryArgs),
    /// Check a certificate against a post-surgery store.
    Verify(VerifyArgs),
    /// Run the validation diagnostics.
    Diagnose(DiagnoseArgs),
    /// One-factor sweep over a surgery or budget knob.
    Sweep(SweepArgs),
    /// Regenerate CSV tables from stored JSON artifacts.
    Report,
}

#[derive(Args, Debug)]
struct DataArg {
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SurgeryArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prior ledger to compose onto; defaults to an empty ledger.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Record the current UTC time in the certificate and ledger.
    #[arg(long)]
    stamp: bool,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    cert: PathBuf,
    post: PathBuf,
    /// Pre-surgery store, enabling the checks that need it.
    #[arg(long)]
    pre: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference store for the reconstruction comparison.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// epsilon, r, eta_s or calib_size.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    MissingInput(PathBuf),
    Check(String),
    Core(MbdError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::MissingInput(p) => write!(f, "missing input: {}", p.display()),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Core(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<MbdError> for CliError {
    fn from(e: MbdError) -> Self {
        match e {
            MbdError::Validation(m) => CliError::Config(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Artifact file names inside the output directory.
mod names {
    pub const DATA: &str = "data.mbds";
    pub const MODEL: &str = "model.mbdp";
    pub const REFERENCE: &str = "reference.mbdp";
    pub const POST: &str = "post.mbdp";
    pub const CERT: &str = "cert.mdc.json";
    pub const PLAN: &str = "plan.json";
    pub const LEDGER: &str = "ledger.json";
    pub const SURGERY: &str = "surgery.json";
    pub const TRAIN_LOG: &str = "train_log.json";
    pub const REFERENCE_LOG: &str = "reference_log.json";
    pub const DIAGNOSTICS: &str = "diagnostics.json";
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&self, explicit: &Option<PathBuf>, default: &str) -> CliResult<PathBuf> {
        let p = explicit.clone().unwrap_or_else(|| self.path(default));
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::MissingInput(p))
        }
    }

    fn splits(&self, data: &Option<PathBuf>) -> CliResult<Splits> {
        let d = Dataset::read_file(&self.input(data, names::DATA)?)?;
        Ok(pipeline::split(&self.cfg, &d)?)
    }

    fn store(&self, explicit: &Option<PathBuf>, default: &str) -> CliResult<ParameterStore> {
        Ok(ParameterStore::read_file(&self.input(explicit, default)?)?)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(p)
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(p: &Path) -> CliResult<T> {
    let text = fs::read_to_string(p).map_err(|_| CliError::MissingInput(p.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Core(MbdError::Format(format!("{}: {e}", p.display()))))
}

#[derive(Debug, Serialize, Deserialize)]
struct SurgerySummary {
    modality: String,
    raw_candidates: usize,
    selected: usize,
    budget_k: usize,
    mode: String,
    sigma: f64,
    epsilon_reported: f64,
    degenerate_rows: usize,
    warnings: Vec<String>,
    pre_digest: String,
    post_digest: String,
    certificate_digest: String,
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn cmd_synth(ctx: &Ctx) -> CliResult<()> {
    let data = pipeline::synthesize(&ctx.cfg)?;
    let digest = data.write_file(&ctx.path(names::DATA))?;
    println!(
        "wrote {} ({} samples, sha256 {digest})",
        ctx.path(names::DATA).display(),
        data.len()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx, args: &DataArg, reference: bool) -> CliResult<()> {
    let splits = ctx.splits(&args.data)?;
    let (outcome, store_name, log_name) = if reference {
        (
            pipeline::train_reference(&ctx.cfg, &splits)?,
            names::REFERENCE,
            names::REFERENCE_LOG,
        )
    } else {
        (
            pipeline::train_model(&ctx.cfg, &splits)?,
            names::MODEL,
            names::TRAIN_LOG,
        )
    };
    let digest = outcome.store.write_file(&ctx.path(store_name))?;
    ctx.write_json(log_name, &outcome.log)?;
    let last = outcome.log.last().map(|e| e.loss.total).unwrap_or(f64::NAN);
    println!(
        "wrote {} ({} epochs, final total loss {last:.6}, sha256 {digest})",
        ctx.path(store_name).display(),
        ctx.cfg.train.epochs
    );
    Ok(())
}

fn cmd_surgery(ctx: &Ctx, args: &SurgeryArgs) -> CliResult<()> {
    let splits = ctx.splits(&args.data)?;
    let pre = ctx.store(&args.model, names::MODEL)?;
    let ledger: ZcdpLedger = match &args.ledger {
        Some(p) => read_json(p)?,
        None => ZcdpLedger::default(),
    };
    let stamp = args.stamp.then(now_utc);
    let out = pipeline::run_surgery(&ctx.cfg, &pre, &splits.calib, &ledger, stamp)?;
    let post_digest = out.post.write_file(&ctx.path(names::POST))?;
    out.certificate.write_file(&ctx.path(names::CERT))?;
    ctx.write_json(names::PLAN, &out.plan)?;
    ctx.write_json(names::LEDGER, &out.ledger)?;
    let mut warnings = out.candidates.warnings.clone();
    if out.candidates.raw.is_empty() {
        warnings.push("no coordinate passed both thresholds; certificate covers zero indices".into());
    }
    let summary = SurgerySummary {
        modality: out.plan.modality.to_string(),
        raw_candidates: out.candidates.raw.len(),
        selected: out.plan.indices.len(),
        budget_k: out.candidates.k,
        mode: format!("{:?}", out.plan.mode).to_lowercase(),
        sigma: out.plan.sigma,
        epsilon_reported: out.certificate.body.ledger.cumulative_epsilon,
        degenerate_rows: out.degenerate_rows,
        warnings,
        pre_digest: pre.digest().to_hex(),
        post_digest: post_digest.to_hex(),
        certificate_digest: out.certificate.body_sha256.clone(),
    };
    ctx.write_json(names::SURGERY, &summary)?;
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "modality {}: {} raw candidates, {} selected (budget {}), mode {}, sigma {}",
        summary.modality, summary.raw_candidates, summary.selected, summary.budget_k, summary.mode, summary.sigma
    );
    println!(
        "wrote {} and {}",
        ctx.path(names::POST).display(),
        ctx.path(names::CERT).display()
    );
    Ok(())
}

fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    for p in [&args.cert, &args.post].into_iter().chain(args.pre.as_ref()) {
        if !p.is_file() {
            return Err(CliError::MissingInput(p.clone()));
        }
    }
    let cert = Certificate::read_file(&args.cert)?;
    let post = ParameterStore::read_file(&args.post)?;
    let pre = args.pre.as_deref().map(ParameterStore::read_file).transpose()?;
    let report = certificate::verify(&cert, &post, pre.as_ref());
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failed();
        Err(CliError::Check(format!(
            "certificate rejected by {}",
            failed.join(", ")
        )))
    }
}

fn print_summary(s: &DiagnosticsSummary) {
    for (name, c) in &s.checks {
        let status = match c.status {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Skip => "SKIP",
        };
        println!("CHECK {name} {status} {}", c.detail);
    }
}

fn cmd_diagnose(ctx: &Ctx, args: &DiagnoseArgs) -> CliResult<()> {
    let splits = ctx.splits(&args.data)?;
    let pre = ctx.store(&args.model, names::MODEL)?;
    let reference = match &args.reference {
        Some(_) => Some(ctx.store(&args.reference, names::REFERENCE)?),
        None => {
            let p = ctx.path(names::REFERENCE);
            p.is_file().then(|| ParameterStore::read_file(&p)).transpose()?
        }
    };
    let out = pipeline::run_surgery(&ctx.cfg, &pre, &splits.calib, &ZcdpLedger::default(), None)?;
    let summary = pipeline::run_diagnostics(&ctx.cfg, &pre, &out, &splits, reference.as_ref())?;
    ctx.write_json(names::DIAGNOSTICS, &summary)?;
    write_diagnostic_tables(ctx, &summary)?;
    print_summary(&summary);
    if summary.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = summary
            .checks
            .iter()
            .filter(|(_, c)| c.status == Verdict::Fail)
            .map(|(n, _)| n.as_str())
            .collect();
        Err(CliError::Check(format!("diagnostics failed: {}", failed.join(", "))))
    }
}

fn write_diagnostic_tables(ctx: &Ctx, s: &DiagnosticsSummary) -> CliResult<()> {
    if let Some(o) = &s.oracle {
        pipeline::write_oracle_csv(o, &ctx.path("oracle.csv"))?;
    }
    pipeline::write_concentration_csv(&s.concentration, &ctx.path("concentration.csv"))?;
    Ok(())
}

fn sweep_name(axis: SweepAxis) -> String {
    format!("sweep_{}", axis.name())
}

fn cmd_sweep(ctx: &Ctx, args: &SweepArgs) -> CliResult<()> {
    let axis: SweepAxis = args
        .axis
        .parse()
        .map_err(|e: MbdError| CliError::Usage(e.to_string()))?;
    let splits = ctx.splits(&args.data)?;
    let pre = ctx.store(&args.model, names::MODEL)?;
    let reference = args
        .reference
        .as_ref()
        .map(|_| ctx.store(&args.reference, names::REFERENCE))
        .transpose()?;
    let rows = pipeline::sweep(&ctx.cfg, &pre, &splits, reference.as_ref(), axis, &args.values)?;
    let name = sweep_name(axis);
    ctx.write_json(&format!("{name}.json"), &rows)?;
    write_sweep_tables(ctx, axis, &rows)?;
    for r in &rows {
        println!("{}", r.record().join(","));
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("warning: {failed} of {} sweep points failed", rows.len());
    }
    Ok(())
}

fn write_sweep_tables(ctx: &Ctx, axis: SweepAxis, rows: &[SweepRow]) -> CliResult<()> {
    pipeline::write_sweep_csv(rows, &ctx.path(&format!("{}.csv", sweep_name(axis))))?;
    if axis == SweepAxis::Epsilon {
        pipeline::write_tradeoff_csv(rows, &ctx.path("tradeoff.csv"))?;
    }
    Ok(())
}

fn cmd_report(ctx: &Ctx) -> CliResult<()> {
    let mut written = Vec::new();
    for (log, csv) in [
        (names::TRAIN_LOG, "loss.csv"),
        (names::REFERENCE_LOG, "reference_loss.csv"),
    ] {
        let p = ctx.path(log);
        if p.is_file() {
            let entries: Vec<EpochLog> = read_json(&p)?;
            trainer::write_loss_csv(&entries, &ctx.path(csv))?;
            written.push(csv.to_string());
        }
    }
    for axis in [SweepAxis::Epsilon, SweepAxis::R, SweepAxis::EtaS, SweepAxis::CalibSize] {
        let p = ctx.path(&format!("{}.json", sweep_name(axis)));
        if p.is_file() {
            let rows: Vec<SweepRow> = read_json(&p)?;
            write_sweep_tables(ctx, axis, &rows)?;
            written.push(format!("{}.csv", sweep_name(axis)));
        }
    }
    let p = ctx.path(names::DIAGNOSTICS);
    if p.is_file() {
        let s: DiagnosticsSummary = read_json(&p)?;
        write_diagnostic_tables(ctx, &s)?;
        written.push("diagnostic tables".into());
    }
    if written.is_empty() {
        return Err(CliError::MissingInput(ctx.out.join("*.json")));
    }
    println!("regenerated {}", written.join(", "));
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = config::resolve(cli.profile.into(), cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.workers > 0 {
        // fails only if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let out = PathBuf::from(&cfg.output_dir);
    let ctx = Ctx { cfg, out };
    if let Command::Verify(args) = &cli.command {
        return cmd_verify(args);
    }
    fs::create_dir_all(&ctx.out)?;
    match &cli.command {
        Command::Config { write } => {
            let text = config::annotated(&ctx.cfg)?;
            if *write {
                fs::write(ctx.path("config.toml"), &text)?;
            }
            print!("{text}");
            Ok(())
        }
        Command::Synth => cmd_synth(&ctx),
        Command::Train(a) => cmd_train(&ctx, a, false),
        Command::TrainRef(a) => cmd_train(&ctx, a, true),
        Command::Surgery(a) => cmd_surgery(&ctx, a),
        Command::Verify(_) => unreachable!("handled above"),
        Command::Diagnose(a) => cmd_diagnose(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Report => cmd_report(&ctx),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
