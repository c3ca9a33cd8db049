use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mildrop::data::{save_bags, synth_generate, Bag, Dataset, Standardizer, SynthSpec};
use mildrop::diagnostics::{landscape_slice, sharpness, LandscapeConfig, SharpnessConfig};
use mildrop::experiment::{run_ablation, run_folds};
use mildrop::metrics::{evaluate, CVReport, CSV_HEADER};
use mildrop::models::ModelParams;
use mildrop::optim::{self, GdeTracking, TrainConfig};
use mildrop::parallel::Parallelism;
use mildrop::{seed, Error, Result};

use crate::config::{ExperimentArgs, ExperimentConfig};
use crate::convert::{convert, SourceFormat};
use crate::{DiagnoseArgs, SynthArgs, Which};

const CHECKPOINT: &str = "model.ckpt";
const STANDARDIZER: &str = "standardizer.json";

fn output_dir(config: &ExperimentConfig, root: &Path, command: &str) -> Result<PathBuf> {
    let dir = config.out.clone().unwrap_or_else(|| root.join(command));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Run record; the only output that carries a timestamp.
fn write_manifest(dir: &Path, command: &str, status: &str, notes: &[String]) -> Result<()> {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = format!("command: {command}\nfinished_unix: {secs}\nstatus: {status}\n");
    for n in notes {
        text.push_str(&format!("note: {n}\n"));
    }
    fs::write(dir.join("MANIFEST"), text)?;
    Ok(())
}

fn load_standardized(config: &ExperimentConfig) -> Result<(Dataset, Option<Standardizer>)> {
    let data = config.dataset()?;
    data.check_trainable()?;
    if config.standardize {
        let st = Standardizer::fit(&data.bags);
        let bags = st.apply_all(&data.bags);
        Ok((Dataset { bags, ..data }, Some(st)))
    } else {
        Ok((data, None))
    }
}

fn train_model(config: &ExperimentConfig, bags: &[Bag], dim: usize, gde: Option<GdeTracking>) -> Result<(ModelParams, optim::History)> {
    let mut model = config.model.clone();
    model.input_dim = dim;
    model.validate()?;
    let init = ModelParams::init(&model, &mut seed::stream(config.seed, "init", &[]))?;
    let train_config = TrainConfig {
        dropout: config.dropout.clone(),
        seed: seed::derive(config.seed, "train", &[]),
        gde,
        ..config.train.clone()
    };
    optim::train(bags, init, &train_config)
}

pub fn train(args: &ExperimentArgs, root: &Path) -> Result<()> {
    let config = args.resolve()?;
    let dir = output_dir(&config, root, "train")?;
    write_json(&dir.join("config.json"), &config)?;
    let (data, st) = load_standardized(&config)?;
    let (params, history) = match train_model(&config, &data.bags, data.dim, None) {
        Ok(r) => r,
        Err(e) => {
            write_manifest(&dir, "train", "failed", &[e.to_string()])?;
            return Err(e);
        }
    };
    params.save(BufWriter::new(fs::File::create(dir.join(CHECKPOINT))?))?;
    if let Some(st) = &st {
        write_json(&dir.join(STANDARDIZER), st)?;
    }
    fs::write(dir.join("history.jsonl"), history.to_json_lines())?;
    let metrics = evaluate(&params, &data.bags)?;
    write_json(&dir.join("train_metrics.json"), &metrics)?;
    write_manifest(&dir, "train", "ok", &[])?;
    println!(
        "trained on {} bags; final loss {:.4}; training accuracy {:.3}; checkpoint {}",
        data.len(),
        history.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        metrics.accuracy,
        dir.join(CHECKPOINT).display()
    );
    Ok(())
}

pub fn cv(args: &ExperimentArgs, root: &Path, mode: Parallelism) -> Result<()> {
    let config = args.resolve()?;
    let dir = output_dir(&config, root, "cv")?;
    write_json(&dir.join("config.json"), &config)?;
    let data = config.dataset()?;
    let spec = config.cv_spec();
    let plan = mildrop::data::kfold_splits(&data.labels(), spec.folds, spec.repeats, spec.seed);
    if let Ok(plan) = &plan {
        write_json(&dir.join("splits.json"), plan)?;
    }
    let outputs = match run_folds(&data, &spec, mode) {
        Ok(o) => o,
        Err(e) => {
            write_manifest(&dir, "cv", "failed", &[e.to_string()])?;
            return Err(e);
        }
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut first_error = None;
    for out in outputs {
        match out {
            Ok(o) => {
                let fold_dir = dir
                    .join("folds")
                    .join(format!("r{}_f{}", o.record.repeat, o.record.fold));
                fs::create_dir_all(&fold_dir)?;
                fs::write(fold_dir.join("history.jsonl"), o.history.to_json_lines())?;
                write_json(&fold_dir.join("metrics.json"), &o.record)?;
                records.push(o.record);
            }
            Err(e) => {
                failures.push(e.to_string());
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_error {
        write_json(&dir.join("partial_folds.json"), &records)?;
        write_manifest(&dir, "cv", "failed", &failures)?;
        return Err(e);
    }
    let report = CVReport::new(spec.meta(), records, spec.std_convention)?;
    fs::write(dir.join("report.json"), report.to_json())?;
    fs::write(dir.join("summary.csv"), format!("{CSV_HEADER}\n{}\n", report.csv_row()))?;
    write_manifest(&dir, "cv", "ok", &[])?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &CVReport) {
    let s = &report.summary;
    let auc = s
        .auc
        .map(|a| format!("{:.3} ± {:.3}", a.mean, a.std))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "{} {} {}: accuracy {:.3} ± {:.3}, AUC {auc}, F1 {:.3} ± {:.3} over {} folds",
        report.meta.dataset,
        report.meta.model,
        report.meta.mechanism,
        s.accuracy.mean,
        s.accuracy.std,
        s.f1.mean,
        s.f1.std,
        report.fold_results.len()
    );
}

pub fn ablate(args: &ExperimentArgs, ks: &[usize], gs: &[usize], root: &Path, mode: Parallelism) -> Result<()> {
    let config = args.resolve()?;
    let dir = output_dir(&config, root, "ablate")?;
    write_json(&dir.join("config.json"), &config)?;
    let data = config.dataset()?;
    let cells = run_ablation(&data, &config.cv_spec(), ks, gs, mode)?;
    let mut summary = format!("{CSV_HEADER}\n");
    let mut long = String::from("K,G,status,metric,mean,std\n");
    let mut failures = Vec::new();
    let mut first_error = None;
    for cell in cells {
        match cell.result {
            Ok(report) => {
                summary.push_str(&report.csv_row());
                summary.push('\n');
                let s = &report.summary;
                let mut rows = vec![("accuracy", Some(s.accuracy)), ("auc", s.auc), ("f1", Some(s.f1))];
                for (name, m) in rows.drain(..) {
                    let (mean, std) = m.map(|m| (format!("{:.6}", m.mean), format!("{:.6}", m.std))).unwrap_or_default();
                    long.push_str(&format!("{},{},ok,{name},{mean},{std}\n", cell.k, cell.g));
                }
                let cell_dir = dir.join(format!("K{}_G{}", cell.k, cell.g));
                fs::create_dir_all(&cell_dir)?;
                fs::write(cell_dir.join("report.json"), report.to_json())?;
            }
            Err(e) => {
                long.push_str(&format!("{},{},failed,,,\n", cell.k, cell.g));
                failures.push(format!("K={} G={}: {e}", cell.k, cell.g));
                first_error.get_or_insert(e);
            }
        }
    }
    fs::write(dir.join("ablation.csv"), summary)?;
    fs::write(dir.join("ablation_long.csv"), long)?;
    let status = if failures.is_empty() { "ok" } else { "partial" };
    write_manifest(&dir, "ablate", status, &failures)?;
    println!("{} cells, {} failed; results in {}", ks.len() * gs.len(), failures.len(), dir.display());
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<Standardizer>)> {
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    let params = ModelParams::load(BufReader::new(fs::File::open(path)?))?;
    let st_path = path.with_file_name(STANDARDIZER);
    let st = if st_path.is_file() {
        let text = fs::read_to_string(&st_path)?;
        Some(serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", st_path.display())))?)
    } else {
        None
    };
    Ok((params, st))
}

pub fn diagnose(args: &DiagnoseArgs, root: &Path, mode: Parallelism) -> Result<()> {
    let config = args.experiment.resolve()?;
    let dir = output_dir(&config, root, "diagnose")?;
    match args.which {
        Which::Gde => {
            let (data, _) = load_standardized(&config)?;
            let tracking = GdeTracking {
                refresh_every: args.refresh_every,
            };
            let (_, history) = train_model(&config, &data.bags, data.dim, Some(tracking))?;
            let mut lines = String::new();
            for p in &history.gde_trace {
                lines.push_str(&serde_json::to_string(p).map_err(|e| Error::Io(e.into()))?);
                lines.push('\n');
            }
            fs::write(dir.join("gde.jsonl"), lines)?;
            fs::write(dir.join("history.jsonl"), history.to_json_lines())?;
            println!(
                "{} GDE windows, area {:.4}; trace in {}",
                history.gde_trace.len(),
                history.gde_area(),
                dir.join("gde.jsonl").display()
            );
        }
        Which::Sharpness | Which::Landscape => {
            let data = config.dataset()?;
            let (params, bags) = if args.train_first {
                let (data, _) = load_standardized(&config)?;
                let (params, _) = train_model(&config, &data.bags, data.dim, None)?;
                (params, data.bags)
            } else {
                let path = args
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| Error::Config("--checkpoint or --train-first is required".into()))?;
                let (params, st) = load_checkpoint(path)?;
                let bags = match st {
                    Some(st) => st.apply_all(&data.bags),
                    None => data.bags.clone(),
                };
                (params, bags)
            };
            if matches!(args.which, Which::Sharpness) {
                let report = sharpness(
                    &params,
                    &bags,
                    &SharpnessConfig {
                        epsilon: args.epsilon,
                        iterations: args.power_iters,
                        tol: args.tol,
                        seed: config.seed,
                    },
                    mode,
                )?;
                write_json(&dir.join("sharpness.json"), &report)?;
                println!(
                    "lambda_max {:.6e}, loss {:.4}, sharpness {:.6e} (residual {:.2e})",
                    report.lambda_max, report.loss, report.sharpness, report.residual
                );
            } else {
                let cfg = LandscapeConfig {
                    directions: args.directions,
                    grid: args.grid,
                    radius: args.radius,
                    seed: config.seed,
                };
                let land = landscape_slice(&params, &bags, &cfg, mode)?;
                fs::write(dir.join("landscape.csv"), land.to_csv())?;
                write_json(
                    &dir.join("landscape.json"),
                    &serde_json::json!({
                        "directions": cfg.directions,
                        "grid": cfg.grid,
                        "radius": cfg.radius,
                        "seed": cfg.seed,
                        "normalization": land.normalization,
                    }),
                )?;
                println!("{} cells written to {}", land.cells.len(), dir.join("landscape.csv").display());
            }
        }
    }
    write_manifest(&dir, "diagnose", "ok", &[])?;
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { spec.$field = v; })*};
    }
    set!(n_bags, min_instances, max_instances, dim, positive_fraction, separation, witness_rate, seed);
    let s = synth_generate(&spec)?;
    save_bags(&args.output, &s.dataset)?;
    if let Some(path) = &args.instance_labels {
        write_json(path, &s.instance_labels)?;
    }
    let d = &s.dataset;
    println!(
        "{} bags ({} positive, {} negative), {} instances, D={} -> {}",
        d.len(),
        d.num_positive(),
        d.len() - d.num_positive(),
        d.num_instances(),
        d.dim,
        args.output.display()
    );
    Ok(())
}

pub fn convert_musk(input: &Path, output: &Path, format: SourceFormat) -> Result<()> {
    let reader = BufReader::new(fs::File::open(input)?);
    let data = convert(reader, format, &input.display().to_string())?;
    let mut w = BufWriter::new(fs::File::create(output)?);
    mildrop::data::write_bags(&mut w, &data)?;
    w.flush()?;
    println!(
        "{} bags ({} positive), {} instances, D={}, bag sizes {}..={} -> {}",
        data.len(),
        data.num_positive(),
        data.num_instances(),
        data.dim,
        data.min_bag_size(),
        data.bags.iter().map(Bag::len).max().unwrap_or(0),
        output.display()
    );
    Ok(())
}
