//! The `evidseg` command-line driver.
//!
//! Exit codes: 0 success, 1 bad input or configuration, 2 numerical failure.

use std::fmt::Display;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evidseg::backbone::BackboneError;
use evidseg::checkpoint::Checkpoint;
use evidseg::config::RunConfig;
use evidseg::dataset::{load_split, phantom_cohort, write_dataset};
use evidseg::evidential::decide;
use evidseg::gradcheck::{run_suite, SuiteConfig};
use evidseg::inference::{InferenceError, Model};
use evidseg::metrics::{binary_map, evaluate_cases};
use evidseg::phantom::PhantomParams;
use evidseg::trainer::{train, Control};
use evidseg::volume::{write_volume, Modality, PatientCase, Volume};
use evidseg::GraphError;

#[derive(Parser)]
#[command(name = "evidseg", version, about = "Evidential 3D lesion segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic PET/CT cohort with a train/val/test split.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value = "32,32,32", value_parser = parse_dims)]
        dims: [usize; 3],
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// split ratios are read from `data.ratios`
        #[arg(long)]
        config: Option<PathBuf>,
        /// write into a non-empty directory
        #[arg(long)]
        force: bool,
    },
    /// Train on the train split, select on val; writes best.ckpt and epochs.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// overrides `train.seed`
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment one case directory and write the decision and ignorance volumes.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split; prints a table and optionally writes metrics.json/metrics.txt.
    Eval {
        #[arg(long, required_unless_present = "mask_oracle")]
        ckpt: Option<PathBuf>,
        /// predict each case's own mask (sanity check of the metric pipeline)
        #[arg(long, conflicts_with = "ckpt")]
        mask_oracle: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// validated, then used for nothing else: the suite is self-contained
        #[arg(long)]
        config: Option<PathBuf>,
        /// corrupt the backward pass of the named op
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| "expected X,Y,Z".to_string())
}

struct Failure {
    code: u8,
    msg: String,
}

fn bad(e: impl Display) -> Failure {
    Failure {
        code: 1,
        msg: e.to_string(),
    }
}

fn numerical(e: impl Display) -> Failure {
    Failure {
        code: 2,
        msg: e.to_string(),
    }
}

fn inference_failure(e: InferenceError) -> Failure {
    match e {
        InferenceError::Backbone(BackboneError::Graph(g @ GraphError::NonFinite { .. })) => numerical(g),
        other => bad(other),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| bad(format!("{}: {e}", p.display()))),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| bad(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| bad(format!("{}: {e}", path.display())))
}

fn cmd_phantom(
    out: &Path,
    count: usize,
    dims: [usize; 3],
    seed: u64,
    config: Option<&Path>,
    force: bool,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let occupied = fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(bad(format!("{} is not empty; pass --force to write into it", out.display())));
    }
    let (cases, manifest) = phantom_cohort(count, dims, seed, &PhantomParams::default(), cfg.data.ratios).map_err(bad)?;
    write_dataset(out, &cases, &manifest).map_err(bad)?;
    println!(
        "wrote {count} cases to {} (train {}, val {}, test {})",
        out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let train_cases = load_split(data, "train").map_err(bad)?;
    let val_cases = load_split(data, "val").map_err(bad)?;
    create_dir(out)?;
    let log_path = out.join("epochs.jsonl");
    let mut log = File::create(&log_path).map_err(|e| bad(format!("{}: {e}", log_path.display())))?;
    let mut log_error = None;
    let outcome = train(&cfg, &train_cases, &val_cases, |r| {
        let line = r.to_json_line();
        println!("{line}");
        match writeln!(log, "{line}").and_then(|_| log.flush()) {
            Ok(()) => Control::Continue,
            Err(e) => {
                log_error = Some(e);
                Control::Stop
            }
        }
    })
    .map_err(|e| if e.is_numerical() { numerical(&e) } else { bad(&e) })?;
    if let Some(e) = log_error {
        return Err(bad(format!("{}: {e}", log_path.display())));
    }
    let ckpt = out.join("best.ckpt");
    outcome.best.save(&ckpt).map_err(bad)?;
    println!(
        "best epoch {} (val dice {:.4}) saved to {}",
        outcome.best.epoch,
        outcome.best.val_dice.unwrap_or(f64::NAN),
        ckpt.display()
    );
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<Model, Failure> {
    let ck = Checkpoint::load(ckpt).map_err(|e| bad(format!("{}: {e}", ckpt.display())))?;
    Ok(Model::from_checkpoint(ck))
}

fn cmd_predict(ckpt: &Path, case_dir: &Path, out: &Path) -> Result<(), Failure> {
    let model = load_model(ckpt)?;
    let case = PatientCase::read_dir(case_dir).map_err(bad)?;
    let map = model.predict_case(&case).map_err(inference_failure)?;
    let d = decide(&map, model.config.eval.decision);
    create_dir(out)?;
    let spacing = case.pet.spacing;
    let outputs = [
        ("binary.evol", Modality::Mask, d.binary.iter().map(|&b| b as f32).collect::<Vec<_>>()),
        ("three_way.evol", Modality::Map, d.three_way.iter().map(|&t| t as u8 as f32).collect()),
        ("uncertainty.evol", Modality::Map, d.uncertainty.iter().map(|&u| u as f32).collect()),
    ];
    for (name, modality, voxels) in outputs {
        let v = Volume::new(d.dims, spacing, modality, voxels).map_err(bad)?;
        write_volume(&v, out.join(name)).map_err(bad)?;
    }
    let lesion = d.binary.iter().filter(|&&b| b == 1).count();
    println!(
        "{}: {lesion} lesion voxels, mean ignorance {:.4}",
        case.id,
        map.mean_ignorance()
    );
    Ok(())
}

fn cmd_eval(ckpt: Option<&Path>, mask_oracle: bool, data: &Path, split: &str, out: Option<&Path>) -> Result<(), Failure> {
    let cases = load_split(data, split).map_err(bad)?;
    let report = if mask_oracle {
        evaluate_cases(&cases, |c| binary_map(&c.mask).map_err(|e| e.to_string()))
    } else {
        let model = load_model(ckpt.expect("clap requires --ckpt"))?;
        evaluate_cases(&cases, |c| model.segment(c).map(|d| d.binary).map_err(|e| e.to_string()))
    }
    .map_err(bad)?;
    let table = report.table();
    print!("{table}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("metrics.json"), &report.to_json())?;
        write_file(&dir.join("metrics.txt"), &table)?;
    }
    Ok(())
}

fn cmd_gradcheck(config: Option<&Path>, fault: Option<String>, seed: u64, instances: usize) -> Result<(), Failure> {
    load_config(config)?;
    if instances == 0 {
        return Err(bad("--instances must be positive"));
    }
    let report = run_suite(&SuiteConfig {
        instances,
        seed,
        fault,
        ..Default::default()
    })
    .map_err(numerical)?;
    print!("{}", report.render());
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|c| c.op.as_str()).collect();
        Err(numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Phantom {
            out,
            count,
            dims,
            seed,
            config,
            force,
        } => cmd_phantom(&out, count, dims, seed, config.as_deref(), force),
        Cmd::Train { config, data, out, seed } => cmd_train(config.as_deref(), &data, &out, seed),
        Cmd::Predict { ckpt, case, out } => cmd_predict(&ckpt, &case, &out),
        Cmd::Eval {
            ckpt,
            mask_oracle,
            data,
            split,
            out,
        } => cmd_eval(ckpt.as_deref(), mask_oracle, &data, &split, out.as_deref()),
        Cmd::Gradcheck {
            config,
            inject_fault,
            seed,
            instances,
        } => cmd_gradcheck(config.as_deref(), inject_fault, seed, instances),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("evidseg: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
