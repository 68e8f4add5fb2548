use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use axial_core::analysis::{
    bench_runtime, cost_report, span_sweep, BenchKernel, BenchOptions, BenchPoint, CostReport, SweepResult, WindowCount,
};
use axial_core::error::{Error, Result};
use axial_core::io::{dump_attention, load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RunConfig};
use axial_core::model::{baseline_convnet, Model, ModelSpec};
use axial_core::oracle::{gradcheck_suite, verify_kernels, OracleReport, ShapeGrid};
use axial_core::tensor::{DType, Scalar};
use axial_core::train::{
    evaluate, generate_task, train, training_checkpoint, Dataset, OptimizerState, RunInfo, TrainRecord,
};
use serde_json::json;

use crate::render::{envelope, human, oracle_table, stamp};
use crate::{Command, Format, KernelArg, Precision, Preset, WindowArg};

pub fn run(command: Command) -> Result<bool> {
    match command {
        Command::Verify { seeds, config, format } => {
            let cfg = load_config(config.as_deref())?;
            oracle_output(&cfg, 0, &verify_kernels(seeds, &ShapeGrid::default()), format)
        }
        Command::Gradcheck { seed, config, format } => {
            let cfg = load_config(config.as_deref())?;
            oracle_output(&cfg, seed, &gradcheck_suite(seed)?, format)
        }
        Command::Count {
            config,
            model,
            multiplier,
            resolution,
            window_count,
            format,
        } => count(config.as_deref(), model, multiplier, resolution, window_count, format),
        Command::Sweep {
            config,
            resolution,
            spans,
            window_count,
            format,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = resolution {
                cfg.bench.sweep_resolution = r;
            }
            if let Some(s) = spans {
                cfg.bench.spans = s;
            }
            if let Some(w) = window_count {
                cfg.bench.window_count = window(w);
            }
            let b = &cfg.bench;
            let sweep = span_sweep(&b.layer, &b.spans, b.sweep_resolution, b.window_count)?;
            let (hash, seed) = (cfg.hash(), cfg.seeds.model);
            match format {
                Format::Json => println!("{}", envelope(&hash, seed, serde_json::to_value(&sweep)?)),
                Format::Csv => print!(
                    "{}\n{}\n{}",
                    stamp(&hash, seed),
                    series_csv(&sweep.axial),
                    series_csv(&sweep.local_2d)
                ),
                Format::Table => print!(
                    "{}\n# {1}x{1} input, {2:?} window count\n{3}\n{4}",
                    stamp(&hash, seed),
                    sweep.resolution,
                    sweep.count,
                    sweep.axial.to_table(),
                    sweep.local_2d.to_table()
                ),
            }
            Ok(true)
        }
        Command::Bench {
            kernel,
            extents,
            spans,
            repetitions,
            parallel,
            config,
            format,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(r) = repetitions {
                cfg.bench.repetitions = r;
            }
            cfg.bench.parallel |= parallel;
            cfg.validate()?;
            let spans = spans.unwrap_or_else(|| {
                cfg.bench
                    .spans
                    .iter()
                    .map(|&m| axial_core::attention::Span::Local(m))
                    .collect()
            });
            let points: Vec<BenchPoint> = extents
                .iter()
                .flat_map(|&extent| spans.iter().map(move |&span| BenchPoint { extent, span }))
                .collect();
            let opts = BenchOptions {
                repetitions: cfg.bench.repetitions,
                parallel: cfg.bench.parallel,
                ..BenchOptions::default()
            };
            let result = bench_runtime(bench_kernel(kernel), &cfg.bench.layer, &points, &opts)?;
            print_series(&cfg, &result, format)?;
            Ok(true)
        }
        Command::Train {
            config,
            out,
            baseline,
            data,
            validation,
            save_data,
            precision,
            format,
        } => {
            let cfg = load_config(config.as_deref())?;
            let job = TrainJob {
                cfg: &cfg,
                out: &out,
                baseline,
                data: data.as_deref(),
                validation: validation.as_deref(),
                save_data,
                format,
            };
            match precision {
                Precision::F32 => job.run::<f32>(),
                Precision::F64 => job.run::<f64>(),
            }
        }
        Command::Eval {
            checkpoint,
            config,
            data,
            resolutions,
            format,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(&ck, config.as_deref())?;
            let data = match data {
                Some(p) => load_checkpoint(&p)?.to_dataset()?,
                None => generate_task(&cfg.task, cfg.train.validation_samples, cfg.seeds.validation)?,
            };
            let resolutions = resolutions.unwrap_or_else(|| vec![data.resolution()]);
            let report = match checkpoint_dtype(&ck)? {
                DType::F32 => evaluate(&ck.to_model::<f32>()?, &data, &resolutions)?,
                DType::F64 => evaluate(&ck.to_model::<f64>()?, &data, &resolutions)?,
            };
            let (hash, seed) = (cfg.hash(), cfg.seeds.validation);
            if format == Format::Json {
                println!("{}", envelope(&hash, seed, serde_json::to_value(&report)?));
            } else {
                println!("{}\n# {} samples\nresolution,accuracy", stamp(&hash, seed), data.len());
                for r in &report.per_resolution {
                    println!("{},{:.4}", r.resolution, r.accuracy);
                }
            }
            Ok(true)
        }
        Command::DumpAttention {
            checkpoint,
            layer,
            heads,
            out,
            config,
            data,
            samples,
            format,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let cfg = checkpoint_config(&ck, config.as_deref())?;
            let data = match data {
                Some(p) => load_checkpoint(&p)?.to_dataset()?,
                None => generate_task(&cfg.task, samples.max(1), cfg.seeds.validation)?,
            };
            let picked: Vec<usize> = (0..samples.min(data.len())).collect();
            if picked.is_empty() {
                return Err(Error::Config("dump-attention needs at least one sample".into()));
            }
            let (hash, seed) = (cfg.hash(), cfg.seeds.validation);
            let run = Some((hash.as_str(), seed));
            fs::create_dir_all(&out)?;
            let index = match checkpoint_dtype(&ck)? {
                DType::F32 => {
                    let (x, _) = data.batch::<f32>(&picked)?;
                    dump_attention(&ck.to_model::<f32>()?, &x, &layer, heads.as_deref(), &out, run)?
                }
                DType::F64 => {
                    let (x, _) = data.batch::<f64>(&picked)?;
                    dump_attention(&ck.to_model::<f64>()?, &x, &layer, heads.as_deref(), &out, run)?
                }
            };
            if format == Format::Json {
                println!("{}", envelope(&hash, seed, serde_json::to_value(&index)?));
            } else {
                println!("{}", stamp(&hash, seed));
                println!(
                    "# {} ({} axis, span {}), {} lines of length {}",
                    index.layer, index.axis, index.span, index.lines, index.len
                );
                for h in &index.heads {
                    println!("head {}: {}", h.head, h.path.display());
                }
            }
            Ok(true)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// `--config` if given, else the config recorded by `train`.
fn checkpoint_config(ck: &Checkpoint, path: Option<&Path>) -> Result<RunConfig> {
    if let Some(p) = path {
        return RunConfig::load(p);
    }
    let stored = ck
        .metadata
        .get("extra")
        .and_then(|e| e.get("config"))
        .ok_or_else(|| Error::Config("checkpoint records no config; pass --config".into()))?;
    let cfg: RunConfig = serde_json::from_value(stored.clone()).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_dtype(ck: &Checkpoint) -> Result<DType> {
    ck.tensors
        .iter()
        .find(|(name, _)| name.starts_with("param/"))
        .map(|(_, t)| t.dtype())
        .ok_or_else(|| Error::Format("checkpoint holds no parameters".into()))
}

fn window(w: WindowArg) -> WindowCount {
    match w {
        WindowArg::Exact => WindowCount::Exact,
        WindowArg::Nominal => WindowCount::Nominal,
    }
}

fn bench_kernel(k: KernelArg) -> BenchKernel {
    match k {
        KernelArg::Axial => BenchKernel::Axial,
        KernelArg::Local2d => BenchKernel::Local2d,
        KernelArg::Global2d => BenchKernel::Global2d,
    }
}

fn preset(p: Preset, multiplier: f64) -> ModelSpec {
    match p {
        Preset::Resnet50 => ModelSpec {
            width_multiplier: multiplier,
            ..ModelSpec::resnet50()
        },
        Preset::AxialConvStem => ModelSpec::axial_conv_stem(multiplier),
        Preset::AxialFull => ModelSpec::axial_full(multiplier),
        Preset::Toy => ModelSpec {
            width_multiplier: multiplier,
            ..ModelSpec::toy(
                axial_core::model::MixerKind::Axial,
                axial_core::attention::Span::Global,
                32,
            )
        },
    }
}

fn count(
    config: Option<&Path>,
    model: Option<Preset>,
    multiplier: Option<f64>,
    resolution: Option<usize>,
    window_count: Option<WindowArg>,
    format: Format,
) -> Result<bool> {
    let mut cfg = load_config(config)?;
    if let Some(p) = model {
        cfg.model = preset(p, multiplier.unwrap_or(1.0));
    } else if let Some(m) = multiplier {
        cfg.model.width_multiplier = m;
    }
    if let Some(w) = window_count {
        cfg.bench.window_count = window(w);
    }
    cfg.validate()?;
    let resolution = resolution.unwrap_or(cfg.model.resolution);
    let report = cost_report(&cfg.model, resolution, cfg.bench.window_count)?;
    let (hash, seed) = (cfg.hash(), cfg.seeds.model);
    match format {
        Format::Json => {
            let mut value = serde_json::to_value(&report)?;
            value["totals"] = json!(totals(&report));
            println!("{}", envelope(&hash, seed, value));
        }
        Format::Csv => print!("{}\n{}", stamp(&hash, seed), report.to_csv()),
        Format::Table => println!(
            "{}\n{}total: {}",
            stamp(&hash, seed),
            report.to_table(),
            totals(&report)
        ),
    }
    Ok(true)
}

fn totals(report: &CostReport) -> String {
    format!("{} / {}", human(report.total_params), human(report.total_madds))
}

fn oracle_output(cfg: &RunConfig, seed: u64, reports: &[OracleReport], format: Format) -> Result<bool> {
    let passed = reports.iter().all(|r| r.passed);
    let hash = cfg.hash();
    match format {
        Format::Json => println!("{}", envelope(&hash, seed, serde_json::to_value(reports)?)),
        _ => {
            print!("{}\n{}", stamp(&hash, seed), oracle_table(reports));
            println!(
                "{}",
                if passed {
                    "all checks passed"
                } else {
                    "some checks FAILED"
                }
            );
        }
    }
    Ok(passed)
}

fn series_csv(s: &SweepResult) -> String {
    format!("# {}\n{}", s.label, s.to_csv())
}

fn print_series(cfg: &RunConfig, s: &SweepResult, format: Format) -> Result<()> {
    let (hash, seed) = (cfg.hash(), cfg.seeds.model);
    match format {
        Format::Json => println!("{}", envelope(&hash, seed, serde_json::to_value(s)?)),
        Format::Csv => print!("{}\n{}", stamp(&hash, seed), s.to_csv()),
        Format::Table => print!("{}\n{}", stamp(&hash, seed), s.to_table()),
    }
    Ok(())
}

struct TrainJob<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    baseline: bool,
    data: Option<&'a Path>,
    validation: Option<&'a Path>,
    save_data: bool,
    format: Format,
}

impl TrainJob<'_> {
    fn dataset(&self, stored: Option<&Path>, samples: usize, seed: u64) -> Result<Dataset> {
        match stored {
            Some(p) => load_checkpoint(p)?.to_dataset(),
            None => generate_task(&self.cfg.task, samples, seed),
        }
    }

    fn run<T: Scalar>(&self) -> Result<bool> {
        let cfg = self.cfg;
        let (hash, seed) = (cfg.hash(), cfg.seeds.train);
        let data = self.dataset(self.data, cfg.train.train_samples, cfg.seeds.data)?;
        let validation = match (self.validation, cfg.train.validation_samples) {
            (None, 0) => None,
            (p, n) => Some(self.dataset(p, n, cfg.seeds.validation)?),
        };
        fs::create_dir_all(self.out)?;
        if self.save_data {
            save_checkpoint(&Checkpoint::from_dataset(&data)?, &self.out.join("train-data.axck"))?;
            if let Some(v) = &validation {
                save_checkpoint(&Checkpoint::from_dataset(v)?, &self.out.join("validation-data.axck"))?;
            }
        }
        let mut model: Model<T> = if self.baseline {
            baseline_convnet(&cfg.model, cfg.seeds.model)?
        } else {
            Model::build(&cfg.model, cfg.seeds.model)?
        };
        let mut opt = OptimizerState::new(cfg.optimizer.clone(), &model.params)?;
        let run = RunInfo {
            seed,
            config_hash: hash.clone(),
        };
        let records = train(&mut model, &data, validation.as_ref(), &mut opt, &cfg.train, &run)?;
        let mut lines = String::new();
        for r in &records {
            let _ = writeln!(lines, "{}", serde_json::to_string(r)?);
        }
        write_atomic(&self.out.join("records.jsonl"), lines.as_bytes())?;
        let mut ck = training_checkpoint(&model, &opt, &run)?;
        ck.metadata["extra"]["config"] = serde_json::to_value(cfg)?;
        ck.metadata["extra"]["baseline"] = json!(self.baseline);
        let path = self.out.join("model.axck");
        save_checkpoint(&ck, &path)?;
        match self.format {
            Format::Json => {
                let report = json!({
                    "records": records.iter().filter(|r| r.val_accuracy.is_some()).collect::<Vec<&TrainRecord>>(),
                    "checkpoint": path,
                    "checkpoint_digest": ck.digest()?,
                    "parameters": model.param_count(),
                });
                println!("{}", envelope(&hash, seed, report));
            }
            _ => {
                println!("{}", stamp(&hash, seed));
                println!(
                    "{:>8}  {:>9}  {:>9}  {:>9}  {:>9}",
                    "step", "loss", "batch_acc", "val_acc", "seconds"
                );
                for r in records.iter().filter(|r| r.val_accuracy.is_some()) {
                    println!(
                        "{:>8}  {:>9.4}  {:>9.3}  {:>9.3}  {:>9.1}",
                        r.step,
                        r.loss,
                        r.accuracy,
                        r.val_accuracy.unwrap_or(f64::NAN),
                        r.wall_time
                    );
                }
                println!("# checkpoint {} ({})", path.display(), ck.digest()?);
            }
        }
        Ok(true)
    }
}
