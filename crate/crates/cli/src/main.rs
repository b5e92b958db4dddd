use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use hlsqor::dataset::{generate, Dataset, SplitMode, Stage};
use hlsqor::dse::{explore, DseOptions, Objectives};
use hlsqor::features::{annotate_features, OpLibrary};
use hlsqor::gnn::{TrainConfig, Variant};
use hlsqor::graph::build_cdfg;
use hlsqor::hierarchy::{predict_hierarchical, train_hierarchical, HierConfig, ModelBundle, SupernodeLabels, TARGETS};
use hlsqor::ir::{enumerate_configs, parse_kernel, KernelSpec, PragmaConfig};
use hlsqor::oracle::{kernel_qor, QorEstimate};
use hlsqor::{corpus, Error};

/// Hierarchical QoR prediction for pragma-annotated loop kernels.
#[derive(Parser, Debug)]
#[command(name = "hlsqor", version)]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for dataset generation, splits and training.
    #[arg(long, global = true, env = "HLSQOR_SEED", default_value_t = 0)]
    seed: u64,

    /// Operation library JSON (defaults to the built-in table).
    #[arg(long, global = true, env = "HLSQOR_OPLIB")]
    oplib: Option<PathBuf>,

    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Parse and validate a kernel.
    Parse { kernel: PathBuf },
    /// Build the annotated graph of one design point.
    Graph(PointArgs),
    /// Label every design point of a corpus with the oracle.
    GenDataset(GenArgs),
    /// Train the three-stage model bundle on a dataset.
    Train(TrainArgs),
    /// Predict the QoR of one design point with a trained bundle.
    Predict {
        #[command(flatten)]
        point: PointArgs,
        /// Trained model bundle directory.
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Oracle QoR of one design point.
    Eval(PointArgs),
    /// Explore the design space of a kernel.
    Dse(DseArgs),
}

#[derive(Args, Debug, Serialize)]
struct PointArgs {
    /// Kernel DSL file.
    #[arg(long)]
    kernel: PathBuf,
    /// Pragma configuration JSON (all defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    /// Kernel files or directories of `.dsl` files (built-in training corpus when omitted).
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Unroll and partition factors to enumerate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    factors: Vec<u64>,
    /// Worker threads (all cores by default).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset directory written by gen-dataset.
    #[arg(long)]
    dataset: PathBuf,
    /// Training epochs per model.
    #[arg(long, default_value_t = 250)]
    epochs: usize,
    /// Hidden width.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Minibatch size.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// gcn or sage.
    #[arg(long, default_value = "sage")]
    variant: String,
    /// random (held-out configs) or kernel (held-out kernels).
    #[arg(long, default_value = "random")]
    split: String,
    /// Super node features for global training graphs: predicted or oracle.
    #[arg(long, default_value = "predicted")]
    supernode_labels: String,
    /// Stop when an inner stage's validation MAPE exceeds this percentage.
    #[arg(long)]
    abort_mape: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct DseArgs {
    /// Kernel DSL file.
    #[arg(long)]
    kernel: PathBuf,
    /// Trained model bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Unroll and partition factors to enumerate.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    factors: Vec<u64>,
    /// Also run the oracle over every config and report ADRS.
    #[arg(long)]
    exact: bool,
    /// 2d (latency, weighted resources) or 4d (latency, lut, dsp, ff).
    #[arg(long, default_value = "2d")]
    objectives: String,
    /// Point cloud CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Worker threads (all cores by default).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    /// Input path → sha256 of its contents.
    inputs: BTreeMap<String, String>,
    flags: serde_json::Value,
    /// Seconds since the Unix epoch.
    created: u64,
}

struct Ctx {
    json: bool,
    seed: u64,
    lib: OpLibrary,
    out: Option<PathBuf>,
}

fn sha256_file(p: &Path) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    if p.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        files.sort();
        for f in files.iter().filter(|f| f.is_file()) {
            h.update(f.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(std::fs::read(f)?);
        }
    } else {
        h.update(std::fs::read(p)?);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Run manifest next to an output: `<out>.run.json`.
fn write_manifest(ctx: &Ctx, out: &Path, sub: &str, inputs: &[&Path], flags: &impl Serialize) -> anyhow::Result<()> {
    let mut map = BTreeMap::new();
    for p in inputs {
        map.insert(p.display().to_string(), sha256_file(p)?);
    }
    let m = RunManifest {
        tool: "hlsqor",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: sub,
        seed: ctx.seed,
        inputs: map,
        flags: serde_json::to_value(flags)?,
        created: std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let mut name = out.as_os_str().to_owned();
    name.push(".run.json");
    std::fs::write(PathBuf::from(name), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn read_kernel(p: &Path) -> anyhow::Result<KernelSpec> {
    let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
    parse_kernel(&text).map_err(|e| anyhow::anyhow!("{}:{e}", p.display()))
}

fn read_config(p: Option<&Path>) -> anyhow::Result<PragmaConfig> {
    match p {
        None => Ok(PragmaConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
        }
    }
}

fn kernel_files(paths: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut fs: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|x| x == "dsl"))
                .collect();
            fs.sort();
            out.extend(fs);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn set_jobs(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

/// Write to `--out` when given, stdout otherwise.
fn emit(ctx: &Ctx, text: &str) -> anyhow::Result<()> {
    match &ctx.out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn qor_json(q: &QorEstimate) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(q)? + "\n")
}

fn cmd_parse(ctx: &Ctx, kernel: &Path) -> anyhow::Result<()> {
    let k = read_kernel(kernel)?;
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(&k)?);
    } else {
        println!(
            "{}: {} arrays, {} loops (depth {}), {} dependences, {} design points with factors 1,2,4,8",
            k.name,
            k.arrays.len(),
            k.loops().len(),
            k.max_depth(),
            k.deps.len(),
            enumerate_configs(&k, &[1, 2, 4, 8]).len()
        );
    }
    Ok(())
}

fn cmd_graph(ctx: &Ctx, a: &PointArgs) -> anyhow::Result<()> {
    let k = read_kernel(&a.kernel)?;
    let cfg = read_config(a.config.as_deref())?;
    let g = annotate_features(build_cdfg(&k, &cfg)?, &k, &cfg, &ctx.lib)?;
    emit(ctx, &(g.to_dump_json() + "\n"))?;
    if let Some(out) = &ctx.out {
        let mut inputs = vec![a.kernel.as_path()];
        inputs.extend(a.config.as_deref());
        write_manifest(ctx, out, "graph", &inputs, a)?;
    }
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: &PointArgs) -> anyhow::Result<()> {
    let k = read_kernel(&a.kernel)?;
    let cfg = read_config(a.config.as_deref())?;
    let q = QorEstimate::from(kernel_qor(&k, &cfg, &ctx.lib)?);
    emit(ctx, &qor_json(&q)?)?;
    if let Some(out) = &ctx.out {
        let mut inputs = vec![a.kernel.as_path()];
        inputs.extend(a.config.as_deref());
        write_manifest(ctx, out, "eval", &inputs, a)?;
    }
    Ok(())
}

fn cmd_predict(ctx: &Ctx, a: &PointArgs, bundle: &Path) -> anyhow::Result<()> {
    let k = read_kernel(&a.kernel)?;
    let cfg = read_config(a.config.as_deref())?;
    let b = ModelBundle::load(bundle)?;
    let q = predict_hierarchical(&k, &cfg, &b, &ctx.lib)?;
    emit(ctx, &qor_json(&q)?)?;
    if let Some(out) = &ctx.out {
        let mut inputs = vec![a.kernel.as_path(), bundle];
        inputs.extend(a.config.as_deref());
        write_manifest(ctx, out, "predict", &inputs, a)?;
    }
    Ok(())
}

fn cmd_gen(ctx: &Ctx, a: &GenArgs) -> anyhow::Result<()> {
    set_jobs(a.jobs)?;
    let out = ctx.out.as_deref().ok_or_else(|| anyhow::anyhow!("gen-dataset needs --out DIR"))?;
    let files = kernel_files(&a.corpus)?;
    let kernels = if files.is_empty() {
        corpus::training()?
    } else {
        files.iter().map(|f| read_kernel(f)).collect::<anyhow::Result<Vec<_>>>()?
    };
    let ds = generate(&kernels, &a.factors, &ctx.lib, ctx.seed)?;
    ds.write(out)?;
    let inputs: Vec<&Path> = files.iter().map(PathBuf::as_path).collect();
    write_manifest(ctx, out, "gen-dataset", &inputs, a)?;
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(&ds.manifest)?);
    } else {
        let counts: Vec<String> = Stage::ALL.iter().map(|s| format!("{s} {}", ds.stage(*s).len())).collect();
        println!(
            "{} kernels, {} configs ({} skipped): {} samples written to {}",
            kernels.len(),
            ds.manifest.configs,
            ds.manifest.skipped,
            counts.join(", "),
            out.display()
        );
    }
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> anyhow::Result<()> {
    let out = ctx.out.as_deref().ok_or_else(|| anyhow::anyhow!("train needs --out DIR"))?;
    let variant: Variant = a.variant.parse()?;
    let split_mode = match a.split.as_str() {
        "random" => SplitMode::Random,
        "kernel" => SplitMode::Kernel,
        s => return Err(Error::Invalid(format!("unknown split mode `{s}` (random or kernel)")).into()),
    };
    let supernode_labels: SupernodeLabels = a.supernode_labels.parse()?;
    let ds = Dataset::read(&a.dataset)?;
    let cfg = HierConfig {
        train: TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            seed: ctx.seed,
            batch_size: a.batch_size,
            hidden: a.hidden,
            variant,
            ..TrainConfig::default()
        },
        supernode_labels,
        split_mode,
        abort_mape: a.abort_mape,
    };
    let (bundle, report) = train_hierarchical(&ds, &cfg)?;
    bundle.save(out)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_manifest(ctx, out, "train", &[a.dataset.as_path()], a)?;
    if ctx.json {
        println!("{}", serde_json::to_string_pretty(&report.stages)?);
    } else {
        for s in &report.stages {
            let m: Vec<String> = TARGETS.iter().zip(s.test_mape).map(|(t, v)| format!("{t} {v:.2}%")).collect();
            println!(
                "{:9} {} train / {} val / {} test, test MAPE {} ({:.1}s)",
                s.stage.to_string(),
                s.train,
                s.val,
                s.test,
                m.join(", "),
                s.seconds
            );
        }
        println!("bundle written to {}", out.display());
    }
    Ok(())
}

fn cmd_dse(ctx: &Ctx, a: &DseArgs) -> anyhow::Result<()> {
    set_jobs(a.jobs)?;
    let k = read_kernel(&a.kernel)?;
    let b = ModelBundle::load(&a.bundle)?;
    let objectives: Objectives = a.objectives.parse()?;
    let opts = DseOptions { factors: a.factors.clone(), objectives, exact: a.exact };
    let r = explore(&k, &b, &ctx.lib, &opts)?;
    if let Some(p) = &a.csv {
        r.write_csv(std::fs::File::create(p)?)?;
    }
    let inputs = [a.kernel.as_path(), a.bundle.as_path()];
    match &ctx.out {
        Some(out) => {
            std::fs::write(out, serde_json::to_string_pretty(&r)? + "\n")?;
            write_manifest(ctx, out, "dse", &inputs, a)?;
        }
        None if ctx.json => println!("{}", serde_json::to_string_pretty(&r)?),
        None => {}
    }
    if !ctx.json {
        let t = r.timings.as_ref().expect("explore records timings");
        println!(
            "{}: {} configs, predicted frontier {} points, model pass {:.2}s",
            r.kernel,
            r.points.len(),
            r.predicted_front.configs.len(),
            t.model_seconds
        );
        if let (Some(ad), Some(g), Some(os)) = (r.adrs, &r.exact_front, t.oracle_seconds) {
            println!("exact frontier {} points, oracle pass {os:.2}s, ADRS {ad:.4}", g.configs.len());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let lib = match &cli.oplib {
        Some(p) => OpLibrary::load(p)?,
        None => OpLibrary::default(),
    };
    let ctx = Ctx { json: cli.json, seed: cli.seed, lib, out: cli.out };
    match &cli.cmd {
        Cmd::Parse { kernel } => cmd_parse(&ctx, kernel),
        Cmd::Graph(a) => cmd_graph(&ctx, a),
        Cmd::GenDataset(a) => cmd_gen(&ctx, a),
        Cmd::Train(a) => cmd_train(&ctx, a),
        Cmd::Predict { point, bundle } => cmd_predict(&ctx, point, bundle),
        Cmd::Eval(a) => cmd_eval(&ctx, a),
        Cmd::Dse(a) => cmd_dse(&ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
