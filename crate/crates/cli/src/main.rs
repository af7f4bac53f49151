use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agpis::model::{grad_check_report, ClassifierConfig, ImageClassifier, Muisc, MuiscConfig};
use agpis::pipeline::checkpoint::{self, ModelKind};
use agpis::pipeline::manifest::{self, SUBSETS_FILE};
use agpis::pipeline::{run_pipeline, Models, PipelineConfig, DEFAULT_THRESHOLD};
use agpis::stage1::Stage1Config;
use agpis::train::{
    ablation_suite, ablation_table, evaluate, noncompliant_examples, primary_examples, train, AdamWConfig, EvalSample,
    TrainConfig, TrainReport,
};
use agpis::world::{balanced_subsets, generate_dataset, Mixture, ReviewRecord, Split, Subsets, WorldConfig};
use agpis::{kv, vocab, Error, Image};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

#[derive(Parser, Debug)]
#[command(name = "agpis", about = "Product image sequence generation and review")]
struct Cli {
    /// key=value file overlaid on the default config of the command
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Submission threshold on the qualified probability
    #[arg(long, global = true, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Use the published model size (forward pass only)
    #[arg(long, global = true)]
    full_scale: bool,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a rule-world dataset directory
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Qualified,single,pair,multi proportions
        #[arg(long, value_delimiter = ',', num_args = 4)]
        mixture: Option<Vec<f64>>,
        /// Image file extension (ppm, or png when built with the png feature)
        #[arg(long, default_value = "ppm")]
        ext: String,
    },
    /// Train one model on the train split of a manifest
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
        /// Write the per-epoch loss curve as CSV
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Evaluate a sequence-classifier checkpoint on the test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train every ablation row and print the comparison table
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Run both stages on one product or on every record of a manifest
    Pipeline {
        #[arg(long)]
        muisc: PathBuf,
        #[arg(long)]
        primary: PathBuf,
        #[arg(long)]
        noncompliant: PathBuf,
        /// Directory of candidate images for one product
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        images: Option<PathBuf>,
        /// Product title words
        #[arg(long, requires = "images")]
        title: Option<String>,
        /// Process every record's candidate pool instead (JSON lines)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Finite-difference check over every parameter of tiny models
    GradCheck,
}

#[derive(Args, Debug, Clone)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train on the stored image order only.
    #[arg(long)]
    no_augment: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Kind {
    Muisc,
    Primary,
    Noncompliant,
}

type CliResult<T = ()> = Result<T, Error>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    if cli.full_scale && !matches!(cli.cmd, Command::GradCheck) {
        return Err(Error::Config(
            "--full-scale only supports a forward pass (use it with grad-check)".into(),
        ));
    }
    match &cli.cmd {
        Command::GenData { n, out, mixture, ext } => gen_data(cli, *n, out, mixture.as_deref(), ext),
        Command::Train {
            manifest,
            kind,
            out,
            opts,
            curve,
        } => train_cmd(cli, manifest, *kind, out, opts, curve.as_deref()),
        Command::Eval { checkpoint, manifest } => eval_cmd(cli, checkpoint, manifest),
        Command::Ablate { manifest, opts } => ablate_cmd(cli, manifest, opts),
        Command::Pipeline {
            muisc,
            primary,
            noncompliant,
            images,
            title,
            manifest,
        } => pipeline_cmd(
            cli,
            [muisc, primary, noncompliant],
            images.as_deref(),
            title.as_deref(),
            manifest.as_deref(),
        ),
        Command::GradCheck if cli.full_scale => full_forward(cli.seed),
        Command::GradCheck => grad_check(cli.seed),
    }
}

fn read_config(cli: &Cli) -> CliResult<Option<String>> {
    cli.config
        .as_ref()
        .map(|p| {
            std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })
        })
        .transpose()
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult {
    let s = serde_json::to_string(v).map_err(|e| Error::Contract(e.to_string()))?;
    emit(&format!("{s}\n"))
}

/// Writes to stdout. A closed pipe (`agpis ... | head`) is not an error.
fn emit(text: &str) -> CliResult {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn gen_data(cli: &Cli, n: usize, out: &Path, mixture: Option<&[f64]>, ext: &str) -> CliResult {
    if !matches!(ext, "ppm" | "png") || (ext == "png" && !cfg!(feature = "png")) {
        return Err(Error::Config(format!("unsupported image extension {ext:?}")));
    }
    let mixture = match mixture {
        Some(m) => Mixture {
            qualified: m[0],
            single: m[1],
            pair: m[2],
            multi: m[3],
        },
        None => Mixture::default(),
    };
    let world = match read_config(cli)? {
        Some(text) => kv::merge(&WorldConfig::default(), &text)?,
        None => WorldConfig::default(),
    };
    let records = generate_dataset(n, &mixture, cli.seed, &world)?;
    let subsets = balanced_subsets(records.iter().map(|r| (r.id, r.split, r.label)), cli.seed);
    manifest::write_dataset(out, &records, &subsets, ext)?;
    eprintln!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn train_config(cli: &Cli, opts: &TrainOpts) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: opts.epochs.unwrap_or(d.epochs),
        batch_size: opts.batch_size.unwrap_or(d.batch_size),
        seed: cli.seed,
        max_steps: opts.max_steps,
        augment: !opts.no_augment,
        optimizer: AdamWConfig {
            lr: opts.lr.unwrap_or(d.optimizer.lr),
            ..d.optimizer
        },
    }
}

fn split(records: &[ReviewRecord], s: Split) -> Vec<&ReviewRecord> {
    records.iter().filter(|r| r.split == s).collect()
}

fn write_curve(path: Option<&Path>, report: &TrainReport) -> CliResult {
    if let Some(p) = path {
        std::fs::write(p, report.to_csv()).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn train_cmd(
    cli: &Cli,
    manifest_path: &Path,
    kind: Kind,
    out: &Path,
    opts: &TrainOpts,
    curve: Option<&Path>,
) -> CliResult {
    let records = manifest::read_records(manifest_path)?;
    let tcfg = train_config(cli, opts);
    let config = read_config(cli)?;
    let owned = |s: Split| split(&records, s).into_iter().cloned().collect::<Vec<_>>();
    let (tr, va) = (owned(Split::Train), owned(Split::Val));
    match kind {
        Kind::Muisc => {
            let cfg = match &config {
                Some(t) => kv::merge(&MuiscConfig::desk(), t)?,
                None => MuiscConfig::desk(),
            };
            let mut model = Muisc::new(cfg)?;
            let report = train(
                &mut model,
                &tr.iter().map(|r| r.sample()).collect::<Vec<_>>(),
                &va.iter().map(|r| r.sample()).collect::<Vec<_>>(),
                &tcfg,
            )?;
            write_curve(curve, &report)?;
            checkpoint::save_muisc(&model, out)
        }
        Kind::Primary | Kind::Noncompliant => {
            let cfg = match &config {
                Some(t) => kv::merge(&ClassifierConfig::default(), t)?,
                None => ClassifierConfig::default(),
            };
            let mut model = ImageClassifier::new(cfg)?;
            let (ck, data, val) = if matches!(kind, Kind::Primary) {
                (ModelKind::Primary, primary_examples(&tr)?, primary_examples(&va)?)
            } else {
                (
                    ModelKind::Noncompliant,
                    noncompliant_examples(&tr),
                    noncompliant_examples(&va),
                )
            };
            let report = train(&mut model, &data, &val, &tcfg)?;
            write_curve(curve, &report)?;
            checkpoint::save_classifier(&model, ck, out)
        }
    }
}

fn test_set(cli: &Cli, manifest_path: &Path, records: &[ReviewRecord]) -> CliResult<(Vec<EvalSample>, Subsets)> {
    let test: Vec<EvalSample> = split(records, Split::Test).into_iter().map(EvalSample::from).collect();
    let sub_path = manifest_path.parent().unwrap_or(Path::new(".")).join(SUBSETS_FILE);
    let subsets = if sub_path.is_file() {
        manifest::read_subsets(&sub_path)?
    } else {
        balanced_subsets(records.iter().map(|r| (r.id, r.split, r.label)), cli.seed)
    };
    Ok((test, subsets))
}

fn eval_cmd(cli: &Cli, ckpt: &Path, manifest_path: &Path) -> CliResult {
    let model = checkpoint::load_muisc(ckpt)?;
    let records = manifest::read_records(manifest_path)?;
    let (test, subsets) = test_set(cli, manifest_path, &records)?;
    print_json(&evaluate(&model, &test, &subsets)?)
}

fn ablate_cmd(cli: &Cli, manifest_path: &Path, opts: &TrainOpts) -> CliResult {
    let records = manifest::read_records(manifest_path)?;
    let base = match read_config(cli)? {
        Some(t) => kv::merge(&MuiscConfig::desk(), &t)?,
        None => MuiscConfig::desk(),
    };
    let samples = |s: Split| split(&records, s).into_iter().map(|r| r.sample()).collect::<Vec<_>>();
    let (test, subsets) = test_set(cli, manifest_path, &records)?;
    let rows = ablation_suite(
        &base,
        &samples(Split::Train),
        &samples(Split::Val),
        &test,
        &subsets,
        &train_config(cli, opts),
    )?;
    emit(&ablation_table(&rows))
}

fn load_models(paths: [&PathBuf; 3]) -> CliResult<Models> {
    Ok(Models {
        muisc: checkpoint::load_muisc(paths[0])?,
        primary: checkpoint::load_classifier(paths[1], ModelKind::Primary)?,
        noncompliant: checkpoint::load_classifier(paths[2], ModelKind::Noncompliant)?,
    })
}

fn read_image_dir(dir: &Path) -> CliResult<Vec<Image>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Image::load(p)).collect()
}

fn pipeline_cmd(
    cli: &Cli,
    ckpts: [&PathBuf; 3],
    images: Option<&Path>,
    title: Option<&str>,
    manifest_path: Option<&Path>,
) -> CliResult {
    let models = load_models(ckpts)?;
    let stage1 = match read_config(cli)? {
        Some(t) => Stage1Config::from_kv(&t)?,
        None => Stage1Config::default(),
    };
    let cfg = PipelineConfig {
        stage1,
        threshold: cli.threshold,
    };
    if let Some(dir) = images {
        let words = title.unwrap_or("");
        let title =
            vocab::tokenize(words).ok_or_else(|| Error::Config(format!("title {words:?} has unknown words")))?;
        let result = run_pipeline(read_image_dir(dir)?, &title, &models, &cfg, cli.seed)?;
        return print_json(&result);
    }
    let path = manifest_path.expect("clap requires images or manifest");
    let base = path.parent().unwrap_or(Path::new("."));
    let entries = manifest::ManifestReader::open(path)?.collect::<Result<Vec<_>, _>>()?;
    let results: Vec<serde_json::Value> = entries
        .par_iter()
        .map(|m| {
            let r = m.load(base)?;
            let res = run_pipeline(r.pool, &r.title, &models, &cfg, cli.seed ^ r.id as u64)?;
            let mut v = serde_json::to_value(&res).map_err(|e| Error::Contract(e.to_string()))?;
            v["id"] = r.id.into();
            Ok(v)
        })
        .collect::<CliResult<_>>()?;
    for v in results {
        print_json(&v)?;
    }
    Ok(())
}

fn grad_check(seed: u64) -> CliResult {
    let report = grad_check_report(seed)?;
    let worst = report.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let mut text: String = report
        .iter()
        .map(|(name, err)| format!("{name}\t{err:.3e}\n"))
        .collect();
    text.push_str(&format!("max\t{worst:.3e}\n"));
    emit(&text)?;
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "gradient check failed: max relative error {worst:.3e}"
        )))
    }
}

fn full_forward(seed: u64) -> CliResult {
    let cfg = MuiscConfig {
        init_seed: seed,
        ..MuiscConfig::full()
    };
    let model = Muisc::new(cfg.clone())?;
    let images: Vec<Image> = (0..cfg.seq_len)
        .map(|k| Image::filled(cfg.image_height, cfg.image_width, [0.2 * k as f64 + 0.1, 0.5, 0.7]))
        .collect();
    let pred = model.predict(&images, &vocab::tokenize("large blue star lamp").expect("known words"))?;
    print_json(&serde_json::json!({
        "params": model.store().num_values(),
        "classes": pred.p_mcc.len(),
        "p_t": pred.p_t,
    }))
}
