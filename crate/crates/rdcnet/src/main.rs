//! Command-line front end: train, eval, verify, inspect.
//!
//! Exit codes: 0 on success, 1 when a run fails at runtime (diverged
//! training, checkpoint mismatch, failed checks), 2 for usage and
//! configuration errors.

use std::fs;
use std::io::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdcnet::blocks::{param_group_counts, Network};
use rdcnet::config::{DatasetKind, RunConfig};
use rdcnet::data::{
    compute_meta, load_cifar100_dir, load_cifar10_dir, synth_dataset, DatasetMeta, LabeledImage,
};
use rdcnet::tensor::{ParamStore, Tensor};
use rdcnet::train::{eval_metrics, train_loop};
use rdcnet::{streams, verify, Error, Mode, Result, Rng, Tape};

#[derive(Parser)]
#[command(
    name = "rdcnet",
    version,
    about = "Masked dilated-convolution image classifier"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write report, manifest and checkpoint to the
    /// configured output directory.
    Train {
        /// Flat-key config file; defaults apply for every omitted key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with CIFAR binary shards (cifar* datasets only).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Overrides the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the configured dataset's test split.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Checkpoint written by a previous training run.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run self-check suites (shapes, oracles, gradients, masks,
    /// schedule, attention, all).
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Print the architecture: shape trace, parameter counts, fusion
    /// gains and gate placements.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train {
            config,
            data_dir,
            seed,
        } => cmd_train(config.as_deref(), data_dir.as_deref(), seed),
        Cmd::Eval {
            config,
            data_dir,
            checkpoint,
            seed,
        } => cmd_eval(config.as_deref(), data_dir.as_deref(), &checkpoint, seed),
        Cmd::Verify { suite } => cmd_verify(&suite),
        Cmd::Inspect { config, seed } => cmd_inspect(config.as_deref(), seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn load_dataset(
    cfg: &RunConfig,
    data_dir: Option<&Path>,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>, DatasetMeta)> {
    let (train, eval) = match cfg.dataset {
        DatasetKind::Synthetic => synth_dataset(cfg.synth_size, cfg.synth_extent, cfg.seed),
        DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
            let dir = data_dir.ok_or_else(|| {
                Error::config(format!(
                    "--data-dir is required for the {} dataset",
                    cfg.dataset.as_str()
                ))
            })?;
            match cfg.dataset {
                DatasetKind::Cifar10 => load_cifar10_dir(dir)?,
                _ => load_cifar100_dir(dir)?,
            }
        }
    };
    let meta = compute_meta(
        cfg.dataset.as_str(),
        cfg.dataset.classes(),
        &train,
        eval.len(),
    )?;
    Ok((train, eval, meta))
}

fn build_network(cfg: &RunConfig) -> Result<(Network, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = Rng::stream(cfg.seed, streams::INIT);
    let net = Network::build(&cfg.arch, &mut store, &mut rng)?;
    Ok((net, store))
}

fn cmd_train(config: Option<&Path>, data_dir: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (train_set, eval_set, meta) = load_dataset(&cfg, data_dir)?;
    let (net, mut store) = build_network(&cfg)?;

    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("manifest.cfg"), cfg.render())?;
    let mut report = fs::File::create(out_dir.join("report.txt"))?;

    let mut io_err: Option<std::io::Error> = None;
    let outcome = train_loop(
        &net,
        &mut store,
        &train_set,
        &eval_set,
        &meta,
        &cfg.train,
        |rec| {
            println!("{rec}");
            if let Err(e) = writeln!(report, "{rec}") {
                io_err = Some(e);
                return ControlFlow::Break(());
            }
            ControlFlow::Continue(())
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    let mut ckpt = fs::File::create(out_dir.join("checkpoint.rdck"))?;
    store.save_checkpoint(&mut ckpt)?;
    let last = outcome.records.last().expect("at least one epoch");
    println!(
        "done: {} epochs, {} steps, final train_acc={}, artifacts in {}",
        outcome.records.len(),
        outcome.steps,
        last.train_acc,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    data_dir: Option<&Path>,
    checkpoint: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (_, eval_set, meta) = load_dataset(&cfg, data_dir)?;
    let (net, mut store) = build_network(&cfg)?;
    let mut f = fs::File::open(checkpoint).map_err(|e| {
        Error::config(format!(
            "cannot open checkpoint {}: {e}",
            checkpoint.display()
        ))
    })?;
    store.load_checkpoint(&mut f)?;
    let (top1, mean_loss) = eval_metrics(
        &net,
        &mut store,
        &eval_set,
        &meta,
        cfg.train.batch_size,
        0.0,
    )?;
    println!(
        "samples={} top1={top1} mean_loss={mean_loss}",
        eval_set.len()
    );
    Ok(())
}

fn cmd_verify(suite: &str) -> Result<()> {
    let results = verify::run(suite)?;
    let name_w = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut failed = 0usize;
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        println!(
            "{:<10} {:<name_w$}  {status}  {}",
            r.suite, r.name, r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} checks, {} failed", results.len(), failed);
    if failed > 0 {
        return Err(Error::contract(format!(
            "{failed} verification checks failed"
        )));
    }
    Ok(())
}

fn cmd_inspect(config: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let (net, mut store) = build_network(&cfg)?;
    let extent = match cfg.dataset {
        DatasetKind::Synthetic => cfg.synth_extent,
        _ => 32,
    };

    println!("shape trace ([n, c, h, w], input {extent}x{extent}):");
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, extent, extent]));
    let (_, trace) = net.forward_traced(&mut tape, &mut store, x, Mode::Eval, cfg.seed, 0)?;
    for (name, shape) in &trace {
        println!("  {name:<8} {shape:?}");
    }

    println!(
        "parameters by module ({} learnable scalars total):",
        store.scalar_count()
    );
    for (group, count) in param_group_counts(&store) {
        println!("  {group:<16} {count}");
    }

    let alphas = net.alpha_values(&store);
    if alphas.is_empty() {
        println!("fusion gains: none (plain main path)");
    } else {
        println!(
            "fusion gains ({}):",
            if cfg.arch.alpha_learnable {
                "learnable"
            } else {
                "frozen"
            }
        );
        for (name, a) in alphas {
            println!("  {name:<24} {a}");
        }
    }

    let ces = net.ce_stages();
    if ces.is_empty() {
        println!("context gates: none");
    } else {
        let list: Vec<String> = ces.iter().map(|s| format!("stage {s}")).collect();
        println!("context gates: {}", list.join(", "));
    }
    println!(
        "mask: strategy={} tau={}",
        cfg.arch.mask.strategy.as_str(),
        cfg.arch.mask.tau
    );
    Ok(())
}
