use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use masktrack::crf::CrfParams;
use masktrack::eval::{emit_density, emit_group_csv, emit_report, Report, ReportFormat};
use masktrack::manifest::load_manifest;
use masktrack::pipeline::{self, corpus_items, RunConfig};
use masktrack::refiner::{serve, Refiner, RefinerSpec};
use masktrack::synth::DeformationParams;
use masktrack::synthetic::{generate_dataset, SyntheticConfig};
use masktrack::{Error, EvalProtocol, Result};

const ENV_ENDPOINT: &str = "MASKTRACK_ENDPOINT";
const ENV_OUT: &str = "MASKTRACK_OUT";

#[derive(Parser)]
#[command(name = "masktrack", version, about = "Guided mask propagation for video object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write preview grids of deformed training masks.
    Synth(CorpusArgs),
    /// Materialize the offline training corpus for an external backend.
    ExportTrain(CorpusArgs),
    /// Propagate first-frame annotations through every sequence.
    Run(RunArgs),
    /// Score a result tree against ground truth.
    Eval(EvalArgs),
    /// Accuracy against annotation density, with the copy baseline.
    Density(DensityArgs),
    /// Write the bundled synthetic dataset.
    GenSynthetic(GenArgs),
    /// Serve a built-in refiner over the wire protocol.
    Serve(ServeArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sequence-level workers.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    masks_per_image: Option<usize>,
    /// Switch every deformation stage off.
    #[arg(long)]
    no_deform: bool,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// identity, oracle, colormodel or external:<addr>.
    #[arg(long)]
    refiner: Option<RefinerSpec>,
    /// Fuse with a branch run on flow magnitudes.
    #[arg(long)]
    flow: bool,
    /// Dense CRF post-processing with default parameters unless the config sets them.
    #[arg(long)]
    crf: bool,
    /// Annotate with bounding boxes.
    #[arg(long)]
    boxes: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Result tree written by `run`.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides each sequence's protocol.
    #[arg(long)]
    protocol: Option<ProtocolArg>,
    /// Directory for report.csv, report.json and groups.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DensityArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 5, 10, 20, 30, 40])]
    strides: Vec<usize>,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    /// Accept TCP connections on this address, one at a time.
    #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
    listen: Option<String>,
    /// Serve a single conversation on stdin/stdout.
    #[arg(long)]
    stdio: bool,
    /// identity or colormodel.
    #[arg(long, default_value = "colormodel")]
    refiner: RefinerSpec,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Davis,
    FirstOnly,
}

impl From<ProtocolArg> for EvalProtocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Davis => EvalProtocol::DAVIS,
            ProtocolArg::FirstOnly => EvalProtocol::FIRST_ONLY,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Config file, then `MASKTRACK_*` variables, then flags.
fn base_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(addr) = std::env::var(ENV_ENDPOINT) {
        if !addr.is_empty() {
            config.refiner = RefinerSpec::External(addr);
        }
    }
    if let Ok(out) = std::env::var(ENV_OUT) {
        if !out.is_empty() {
            config.out = PathBuf::from(out);
        }
    }
    if let Some(m) = &common.manifest {
        config.manifest = Some(m.clone());
    }
    if let Some(o) = &common.out {
        config.out = o.clone();
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(config)
}

fn run_config(args: &RunArgs) -> Result<RunConfig> {
    let mut config = base_config(&args.common)?;
    if let Some(r) = &args.refiner {
        config.refiner = r.clone();
    }
    config.flow |= args.flow;
    config.boxes |= args.boxes;
    if args.crf && config.crf.is_none() {
        config.crf = Some(CrfParams::default());
    }
    config.validate()?;
    Ok(config)
}

fn corpus_config(args: &CorpusArgs) -> Result<RunConfig> {
    let mut config = base_config(&args.common)?;
    if let Some(k) = args.masks_per_image {
        config.masks_per_image = k;
    }
    if args.no_deform {
        config.deformation = DeformationParams::disabled();
    }
    config.validate()?;
    Ok(config)
}

fn corpus(config: &RunConfig, jobs: usize) -> Result<Vec<masktrack::synth::CorpusItem>> {
    let manifest = load_manifest(config.manifest_path()?)?;
    Ok(corpus_items(&pipeline::load_sequences(&manifest, jobs)?))
}

fn cmd_synth(args: CorpusArgs) -> Result<()> {
    let config = corpus_config(&args)?;
    let items = corpus(&config, args.common.jobs.unwrap_or_else(default_jobs))?;
    config.archive(&config.out)?;
    let ids = pipeline::write_previews(
        items,
        &config.deformation_seeded(config.seed),
        config.masks_per_image,
        &config.out,
    )?;
    println!("wrote {} preview grids to {}", ids.len(), config.out.display());
    Ok(())
}

fn cmd_export_train(args: CorpusArgs) -> Result<()> {
    let config = corpus_config(&args)?;
    let items = corpus(&config, args.common.jobs.unwrap_or_else(default_jobs))?;
    let index = pipeline::export_train(
        items,
        &config.deformation_seeded(config.seed),
        config.masks_per_image,
        &config.out,
    )?;
    config.archive(&config.out)?;
    println!(
        "exported {} samples ({} sources skipped) to {}",
        index.samples.len(),
        index.skipped.len(),
        config.out.display()
    );
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let config = run_config(&args)?;
    let summary = pipeline::run(&config, args.common.jobs.unwrap_or_else(default_jobs))?;
    for name in &summary.sequences {
        log::info!("wrote {name}");
    }
    println!("propagated {} sequences into {}", summary.sequences.len(), config.out.display());
    Ok(())
}

fn print_report(report: &Report) {
    for s in &report.sequences {
        println!("{:<32} {:>4} {:.6}", s.name, s.frames_evaluated(), s.mean);
    }
    if let Some(m) = report.mean {
        println!("{:<32} {:>4} {:.6}", "mean", "", m);
    }
    if let Some(m) = report.mean_per_class {
        println!("{:<32} {:>4} {:.6}", "mean per class", "", m);
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let report = pipeline::evaluate(
        &args.results,
        &manifest,
        args.protocol.map(Into::into),
        args.jobs.unwrap_or_else(default_jobs),
    )?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        emit_report(&report, ReportFormat::Csv, &out.join("report.csv"))?;
        emit_report(&report, ReportFormat::Json, &out.join("report.json"))?;
        emit_group_csv(&report, &out.join("groups.csv"))?;
    }
    print_report(&report);
    Ok(())
}

fn cmd_density(args: DensityArgs) -> Result<()> {
    let config = run_config(&args.run)?;
    let manifest = load_manifest(config.manifest_path()?)?;
    let jobs = args.run.common.jobs.unwrap_or_else(default_jobs);
    let sequences = pipeline::load_sequences(&manifest, jobs)?;
    config.archive(&config.out)?;
    let (format, ext) = match args.format {
        FormatArg::Csv => (ReportFormat::Csv, "csv"),
        FormatArg::Json => (ReportFormat::Json, "json"),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start {jobs} workers: {e}")))?;
    for (name, baseline) in [("density", false), ("baseline", true)] {
        let points = pool.install(|| pipeline::density_experiment(&sequences, &args.strides, &config, baseline))?;
        let path = config.out.join(format!("{name}.{ext}"));
        emit_density(&points, format, &path)?;
        for p in &points {
            println!(
                "{name:<8} stride {:>3} ({:6.2}% annotated) mean {:.6}",
                p.stride, p.percent_annotated, p.mean_iou
            );
        }
    }
    Ok(())
}

fn cmd_gen_synthetic(args: GenArgs) -> Result<()> {
    let d = SyntheticConfig::default();
    let config = SyntheticConfig {
        frames: args.frames.unwrap_or(d.frames),
        width: args.width.unwrap_or(d.width),
        height: args.height.unwrap_or(d.height),
        seed: args.seed.unwrap_or(d.seed),
        ..d
    };
    let manifest = generate_dataset(&config, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn serving_refiner(spec: &RefinerSpec) -> Result<Refiner> {
    match spec {
        RefinerSpec::Identity => Ok(Refiner::Identity),
        RefinerSpec::ColorModel => Refiner::color_model(Default::default()),
        other => Err(Error::InvalidParameter(format!("cannot serve the {other} refiner"))),
    }
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    serving_refiner(&args.refiner)?;
    if args.stdio {
        let mut refiner = serving_refiner(&args.refiner)?;
        let stdin = std::io::stdin();
        let stdout = std::io::stdout();
        return serve(&mut stdin.lock(), &mut stdout.lock(), &mut refiner);
    }
    let addr = args.listen.expect("clap requires --listen without --stdio");
    let listener = TcpListener::bind(&addr)?;
    eprintln!("listening on {}", listener.local_addr()?);
    for stream in listener.incoming() {
        let stream = stream?;
        let mut refiner = serving_refiner(&args.refiner)?;
        let mut reader = std::io::BufReader::new(stream.try_clone()?);
        let mut writer = std::io::BufWriter::new(stream);
        if let Err(e) = serve(&mut reader, &mut writer, &mut refiner) {
            log::warn!("connection ended with an error: {e}");
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::ExportTrain(a) => cmd_export_train(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Density(a) => cmd_density(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
