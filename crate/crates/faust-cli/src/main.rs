//! Benchmark CLI: train the layer-local variants and baselines, evaluate
//! checkpoints, export embeddings, run config sweeps, and run the embedded
//! invariant suite.
//!
//! Exit codes are a stable contract:
//!   0 success, 2 config error, 3 data error, 4 checkpoint mismatch,
//!   5 property failure.

use clap::{Parser, Subcommand};
use faust_core::checkpoint::{self, Checkpoint};
use faust_core::config::{RunConfig, Variant};
use faust_core::dataset::representatives_from_indices;
use faust_core::error::Error;
use faust_core::infer::dump_predictions;
use faust_core::metrics::{export_embeddings, FisherReport};
use faust_core::train::{
    build_references, epoch_log_csv_header, epoch_log_csv_row, predict, train_with,
};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;
const EXIT_PROPERTY: u8 = 5;

#[derive(Parser)]
#[command(name = "faust", version, about = "Layer-local similarity learning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant; writes checkpoint, epoch CSV, resolved
    /// config, and a plain-text summary into the output directory.
    Train {
        /// JSON run configuration
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the weight-initialization seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the sampling seed
        #[arg(long)]
        sampling_seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Write 0.000 in the seconds column (byte-identical reruns)
        #[arg(long)]
        no_wallclock: bool,
    },
    /// Evaluate a checkpoint on the configured test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config supplying the dataset paths
        #[arg(long)]
        config: PathBuf,
        /// Layer subset like "1" or "1,2,3"; repeat the flag to report
        /// several subsets in one invocation. Default: all layers.
        #[arg(long = "layer-subset")]
        layer_subsets: Vec<String>,
        /// Also dump per-sample predictions to this CSV
        #[arg(long)]
        dump_predictions: Option<PathBuf>,
    },
    /// Export per-layer embeddings as CSV for external projection tools.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Samples to export (seeded subset of the test set)
        #[arg(long, default_value_t = 1000)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also print the per-layer Fisher scores of the exported split
        #[arg(long)]
        fisher: bool,
    },
    /// Train and evaluate several configs sequentially; emits one table.
    Compare {
        /// Config files, evaluated in order
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value = "runs/compare")]
        out_dir: PathBuf,
        /// Run independent jobs on separate threads (each job stays
        /// internally serial and deterministic)
        #[arg(long)]
        parallel: bool,
    },
    /// Run the embedded invariant suite (no datasets needed).
    Selftest,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Argument(_) => EXIT_CONFIG,
        Error::Format(_) | Error::Consistency(_) | Error::Dataset(_) | Error::Io(_) => EXIT_DATA,
        Error::Checkpoint(_) | Error::Dimension { .. } => EXIT_CHECKPOINT,
    }
}

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(exit_code_for(&err))
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    RunConfig::from_file(path).map_err(|e| match e {
        // a missing config file is a config problem, not a data problem
        Error::Io(io) => Error::Config {
            field: path.display().to_string(),
            message: io.to_string(),
        },
        other => other,
    })
}

fn parse_subset(text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| Error::Argument(format!(
                "layer subset `{text}` is not a comma-separated list of layer numbers"
            )))
        })
        .collect()
}

fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<faust_core::train::TrainOutput, Error> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.resolved.json"), cfg.to_json_pretty())?;

    // stream epoch rows so a long run can be tailed
    let loss_streams = if cfg.variant == Variant::Bp { 1 } else { cfg.hidden.len() };
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out_dir.join("epochs.csv"))?);
    writeln!(csv, "{}", epoch_log_csv_header(loss_streams))?;
    csv.flush()?;
    let out = train_with(cfg, |log| {
        let _ = writeln!(csv, "{}", epoch_log_csv_row(log));
        let _ = csv.flush();
    })?;
    drop(csv);
    checkpoint::save(&out.to_checkpoint(cfg), &out_dir.join("checkpoint.faust"))?;
    let summary = format!(
        "variant: {}\nhidden: {:?}\nemb_dim: {}\nepochs: {}\nbatch_size: {}\nlr: {}\n\
         final_train_acc: {:.4}\nfinal_test_acc: {:.4}\ntraining_forward_passes: {}\n",
        cfg.variant.as_str(),
        cfg.hidden,
        cfg.emb_dim,
        cfg.epochs,
        cfg.batch_size,
        cfg.lr,
        out.final_train_acc,
        out.final_test_acc,
        out.audit.total,
    );
    std::fs::write(out_dir.join("summary.txt"), summary)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: PathBuf,
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    sampling_seed: Option<u64>,
    out_dir: Option<PathBuf>,
    no_wallclock: bool,
) -> Result<(), Error> {
    let mut cfg = load_config(&config)?;
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = seed {
        cfg.init_seed = v;
    }
    if let Some(v) = sampling_seed {
        cfg.sampling_seed = v;
    }
    if no_wallclock {
        cfg.log_wallclock = false;
    }
    cfg.validate()?;
    let out_dir = out_dir
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| default_out_dir(&config, cfg.variant));

    let out = run_training(&cfg, &out_dir)?;
    println!(
        "{}: test accuracy {:.2}% after {} epochs ({} training forward passes)",
        cfg.variant.as_str(),
        out.final_test_acc * 100.0,
        cfg.epochs,
        out.audit.total
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn default_out_dir(config_path: &Path, variant: Variant) -> PathBuf {
    let stem = config_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| variant.as_str().to_string());
    PathBuf::from("runs").join(stem)
}

fn load_eval_parts(
    checkpoint_path: &Path,
    config_path: &Path,
) -> Result<(Checkpoint, RunConfig, faust_core::LabeledDataset, faust_core::LabeledDataset), Error> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let cfg = load_config(config_path)?;
    let (train_ds, test_ds) = cfg.data.load()?;
    if train_ds.input_dim() != ckpt.model.input_dim() {
        return Err(Error::Checkpoint(format!(
            "model expects input dim {}, dataset provides {}",
            ckpt.model.input_dim(),
            train_ds.input_dim()
        )));
    }
    Ok((ckpt, cfg, train_ds, test_ds))
}

fn references_for(
    ckpt: &Checkpoint,
    train_ds: &faust_core::LabeledDataset,
) -> Result<Option<faust_core::ReferenceSet>, Error> {
    let reps = match &ckpt.representative_indices {
        Some(idx) => Some(representatives_from_indices(train_ds, idx)?),
        None => None,
    };
    build_references(
        &ckpt.model,
        ckpt.variant,
        train_ds,
        reps.as_ref(),
        ckpt.centroid_k,
        ckpt.centroid_seed,
    )
}

fn cmd_eval(
    checkpoint_path: PathBuf,
    config_path: PathBuf,
    layer_subsets: Vec<String>,
    dump: Option<PathBuf>,
) -> Result<(), Error> {
    let (ckpt, cfg, train_ds, test_ds) = load_eval_parts(&checkpoint_path, &config_path)?;
    if ckpt.variant == Variant::Bp && !layer_subsets.is_empty() {
        return Err(Error::Argument(
            "the backprop baseline does not provide layer-wise predictions; drop --layer-subset"
                .into(),
        ));
    }
    let num_layers = ckpt.model.num_layers();
    let subsets: Vec<Vec<usize>> = if layer_subsets.is_empty() {
        vec![(1..=num_layers).collect()]
    } else {
        layer_subsets
            .iter()
            .map(|s| parse_subset(s))
            .collect::<Result<_, _>>()?
    };

    let refs = references_for(&ckpt, &train_ds)?;
    for subset in &subsets {
        let preds = predict(
            &ckpt.model,
            ckpt.variant,
            refs.as_ref(),
            &test_ds.images,
            subset,
            cfg.inference_distance,
        )?;
        let acc = faust_core::metrics::accuracy(&preds, &test_ds.labels)?;
        let subset_label: Vec<String> = subset.iter().map(|l| l.to_string()).collect();
        println!(
            "{} layers {{{}}}: accuracy {:.2}% ({} samples)",
            ckpt.variant.as_str(),
            subset_label.join(","),
            acc * 100.0,
            test_ds.len()
        );
    }
    if let Some(path) = dump {
        // dump uses the last requested subset
        let subset = subsets.last().unwrap();
        match ckpt.variant {
            Variant::Ff | Variant::Bp => {
                let preds = predict(
                    &ckpt.model,
                    ckpt.variant,
                    refs.as_ref(),
                    &test_ds.images,
                    subset,
                    cfg.inference_distance,
                )?;
                let scores = vec![0.0; preds.len()];
                dump_predictions(&path, &preds, &test_ds.labels, &scores)?;
            }
            _ => {
                let (preds, scores) = faust_core::infer::classify_scored(
                    &ckpt.model,
                    refs.as_ref().unwrap(),
                    &test_ds.images,
                    subset,
                    cfg.inference_distance,
                )?;
                dump_predictions(&path, &preds, &test_ds.labels, &scores)?;
            }
        }
        println!("predictions written to {}", path.display());
    }
    Ok(())
}

fn cmd_export(
    checkpoint_path: PathBuf,
    config_path: PathBuf,
    limit: usize,
    seed: u64,
    out: PathBuf,
    fisher: bool,
) -> Result<(), Error> {
    let (ckpt, _cfg, _train_ds, test_ds) = load_eval_parts(&checkpoint_path, &config_path)?;
    export_embeddings(&ckpt.model, &test_ds, limit, seed, &out)?;
    println!(
        "wrote {} samples x {} layers to {}",
        limit.min(test_ds.len()),
        ckpt.model.num_layers(),
        out.display()
    );
    if fisher {
        let report = FisherReport::compute(&ckpt.model, &test_ds, limit, seed)?;
        println!("fisher scores over {} samples:", report.sample_count);
        let mut table = String::from("layer,fisher,samples\n");
        for (l, f) in report.per_layer.iter().enumerate() {
            println!("  layer {}: F = {:.3}", l + 1, f);
            table.push_str(&format!("{},{f},{}\n", l + 1, report.sample_count));
        }
        let fisher_path = out.with_extension("fisher.csv");
        std::fs::write(&fisher_path, table)?;
        println!("fisher table written to {}", fisher_path.display());
    }
    Ok(())
}

type CompareRow = (String, String, String, String, String, String);

fn compare_one(path: &Path, out_dir: &Path) -> CompareRow {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| path.display().to_string());
    match load_config(path) {
        Ok(cfg) => {
            let run_dir = out_dir.join(&name);
            match run_training(&cfg, &run_dir) {
                Ok(out) => (
                    name,
                    cfg.variant.as_str().to_string(),
                    format!("{:?}", cfg.hidden),
                    format!("{:.4}", out.final_test_acc),
                    out.audit.total.to_string(),
                    "ok".to_string(),
                ),
                Err(e) => (
                    name,
                    cfg.variant.as_str().to_string(),
                    format!("{:?}", cfg.hidden),
                    String::new(),
                    String::new(),
                    format!("failed: {e}"),
                ),
            }
        }
        Err(e) => (
            name,
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            format!("failed: {e}"),
        ),
    }
}

fn cmd_compare(configs: Vec<PathBuf>, out_dir: PathBuf, parallel: bool) -> Result<(), Error> {
    std::fs::create_dir_all(&out_dir)?;
    let rows: Vec<CompareRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = configs
                .iter()
                .map(|path| scope.spawn(|| compare_one(path, &out_dir)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("job thread")).collect()
        })
    } else {
        configs.iter().map(|path| compare_one(path, &out_dir)).collect()
    };
    let table_path = out_dir.join("compare.csv");
    let mut csv = String::from("config,variant,arch,test_accuracy,forward_passes,status\n");
    for (name, variant, arch, acc, passes, status) in &rows {
        csv.push_str(&format!(
            "{name},{variant},\"{arch}\",{acc},{passes},{status}\n"
        ));
    }
    std::fs::write(&table_path, &csv)?;
    print!("{csv}");
    println!("table written to {}", table_path.display());
    Ok(())
}

fn cmd_selftest() -> ExitCode {
    let results = faust_core::selftest::run_all();
    let mut failed = 0;
    for r in &results {
        println!(
            "{} {} — {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} properties failed");
        ExitCode::from(EXIT_PROPERTY)
    } else {
        println!("all {} properties passed", results.len());
        ExitCode::SUCCESS
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            lr,
            batch_size,
            epochs,
            seed,
            sampling_seed,
            out_dir,
            no_wallclock,
        } => cmd_train(
            config,
            lr,
            batch_size,
            epochs,
            seed,
            sampling_seed,
            out_dir,
            no_wallclock,
        ),
        Command::Eval {
            checkpoint,
            config,
            layer_subsets,
            dump_predictions,
        } => cmd_eval(checkpoint, config, layer_subsets, dump_predictions),
        Command::ExportEmbeddings {
            checkpoint,
            config,
            limit,
            seed,
            out,
            fisher,
        } => cmd_export(checkpoint, config, limit, seed, out, fisher),
        Command::Compare {
            configs,
            out_dir,
            parallel,
        } => cmd_compare(configs, out_dir, parallel),
        Command::Selftest => return cmd_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
