use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use convstack_core::bench::{self, SweepConfig};
use convstack_core::compress::{self, CompressionResult, PruneKind, PruneLevel, PruneSchedule};
use convstack_core::graph::{self, Model, ScheduleMap, WorkloadConfig};
use convstack_core::kernels::{verify as kernel_verify, Algorithm, Schedule};
use convstack_core::tensor::Tensor4;
use convstack_core::tune::{self, TuneConfig};

use crate::{
    load_dataset, load_model, BenchArgs, GenWorkloadArgs, PruneArgs, PruneTechnique, QuantDtype, QuantizeArgs,
    SweepArgs, TuneArgs, TunedStates, VerifyArgs,
};

fn untuned(algorithm: Algorithm) -> ScheduleMap {
    ScheduleMap::Shared(Schedule::untuned(algorithm))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    graph::save_model(model, path).with_context(|| format!("saving model {}", path.display()))
}

/// First sample of `data`, or a seeded random input.
fn timing_input(model: &Model, data: Option<&Path>, seed: u64) -> Result<Tensor4> {
    match data {
        Some(p) => {
            let ds = load_dataset(p)?;
            ds.inputs.into_iter().next().context("dataset is empty")
        }
        None => Ok(bench::seeded_input(model.input, seed)),
    }
}

pub fn gen_workload(a: GenWorkloadArgs) -> Result<ExitCode> {
    let cfg = WorkloadConfig {
        classes: a.classes,
        size: a.size,
        noise: a.noise,
        train: a.train,
        test: a.test,
        seed: a.seed,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (model, train, test) = graph::generate_toy_workload(&cfg)?;
    save_model(&model, &a.out.join("model.json"))?;
    graph::save_dataset(&train, &a.out.join("train.json"))?;
    graph::save_dataset(&test, &a.out.join("test.json"))?;
    let top1 = graph::evaluate_top1(&model, &test, &untuned(Algorithm::Direct))?;
    println!("wrote {}/{{model,train,test}}.json", a.out.display());
    println!("baseline top-1: {top1:.3}");
    Ok(ExitCode::SUCCESS)
}

fn prune_at(model: &Model, kind: PruneKind, level: PruneLevel) -> Result<Model> {
    Ok(match kind {
        PruneKind::Weight => {
            let r = compress::prune_weights_global_l1(model, level)?;
            println!("zeroed {} of {} convolution weights", r.zeroed, r.total);
            for l in &r.empty_layers {
                eprintln!("warning: layer {l} has no nonzero weights left");
            }
            r.model.to_sparse()
        }
        PruneKind::Channel => {
            let r = compress::prune_channels_global_l1(model, level)?;
            println!(
                "removed {} of {} prunable channels (requested {})",
                r.removed_count(),
                r.prunable_total,
                r.requested
            );
            if r.shortfall() > 0 {
                eprintln!("warning: {} channels short, every layer keeps at least one", r.shortfall());
            }
            r.model
        }
    })
}

pub fn prune(a: PruneArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let kind = PruneKind::from(a.technique);
    let eval = untuned(Algorithm::Direct);
    let data = a.data.as_deref().map(load_dataset).transpose()?;
    let saves = !a.sweep || a.elbow;
    if saves && a.out.is_none() {
        bail!("-o/--out is required to save the pruned model");
    }

    let level = if a.sweep {
        let Some(data) = &data else { bail!("--sweep needs --data") };
        let schedule = PruneSchedule::default_for(kind);
        let points = bench::emit_accuracy_curves(std::slice::from_ref(&schedule), &model, data, &eval)?;
        let csv = bench::accuracy_curve_csv(&points);
        match &a.curve {
            Some(p) => write(p, &csv)?,
            None => print!("{csv}"),
        }
        if !a.elbow {
            return Ok(ExitCode::SUCCESS);
        }
        let curve: Vec<(f64, f64)> = points[1..].iter().map(|p| (p.level, p.accuracy)).collect();
        let elbow = compress::select_elbow(&curve, points[0].accuracy, a.drop)?;
        let level = schedule.levels[elbow.index];
        if elbow.flagged {
            eprintln!("warning: no level within {} of the baseline; using {level}", a.drop);
        }
        println!("elbow at level {level}, top-1 {:.3}", elbow.accuracy);
        level
    } else {
        PruneLevel::from_fraction(a.fraction.context("--fraction is required")?)?
    };

    let out = a.out.as_deref().expect("checked above");
    let pruned = prune_at(&model, kind, level)?;
    let accuracy = data.as_ref().map(|d| graph::evaluate_top1(&pruned, d, &eval)).transpose()?;
    let name = match a.technique {
        PruneTechnique::Weight => "weight-prune",
        PruneTechnique::Channel => "channel-prune",
    };
    let result = CompressionResult::new(name, Some(level.fraction()), &model, &pruned, accuracy)?;
    println!("{}\n{}", CompressionResult::CSV_HEADER, result.csv_row());
    save_model(&pruned, out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn quantize(a: QuantizeArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let (name, quantized) = match a.dtype {
        QuantDtype::F16 => ("f16", compress::quantize_model_f16(&model)?),
        QuantDtype::I8 => match &a.calibrate {
            Some(p) => {
                let params = compress::calibrate_i8(&model, &load_dataset(p)?)?;
                ("i8-calibrated", compress::quantize_model_i8(&model, &params)?)
            }
            None => ("i8-uncalibrated", compress::quantize_model_i8(&model, &compress::uncalibrated_params(&model))?),
        },
    };
    let eval = untuned(Algorithm::Direct);
    let accuracy = match &a.data {
        Some(p) => {
            let d = load_dataset(p)?;
            println!("top-1 before: {:.3}", graph::evaluate_top1(&model, &d, &eval)?);
            Some(graph::evaluate_top1(&quantized, &d, &eval)?)
        }
        None => None,
    };
    let result = CompressionResult::new(name, None, &model, &quantized, accuracy)?;
    println!("compression_ratio {:.2}", result.compression_ratio);
    println!("{}\n{}", CompressionResult::CSV_HEADER, result.csv_row());
    save_model(&quantized, &a.out)?;
    Ok(ExitCode::SUCCESS)
}

pub fn bench(a: BenchArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let schedules = match &a.schedules {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing schedules {}", p.display()))?
        }
        None => untuned(a.algorithm),
    };
    let input = timing_input(&model, a.data.as_deref(), a.seed)?;
    let mut timer = a.timing.timer()?;
    let m = bench::measure(&model, &schedules, &input, a.runs, timer.as_mut(), None)?;
    println!("median_ns {:.1}", m.median_ns);
    println!("runs {} min_ns {} max_ns {} iqr_ns {}", m.runs(), m.min_ns(), m.max_ns(), m.iqr_ns());
    Ok(ExitCode::SUCCESS)
}

pub fn tune(a: TuneArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let cfg = TuneConfig {
        budget: a.budget,
        early_stop: a.early_stop,
        runs: a.runs,
        seed: a.seed,
        max_tile: a.max_tile,
        allow_parallel: !a.no_parallel,
    };
    let input = timing_input(&model, a.data.as_deref(), a.seed)?;
    let mut timer = a.timing.timer()?;
    let tuning = tune::tune_model(&model, &input, a.algorithm, &cfg, timer.as_mut())?;
    let layers: Vec<usize> = model.conv_layers().map(|(i, _)| i).collect();
    for (layer, s) in layers.iter().zip(tuning.schedules.expand(layers.len())?) {
        let measured = tuning.trace.iter().filter(|r| r.layer == *layer).count();
        println!(
            "layer {layer}: tile_oc {} tile_h {} tile_w {} unroll {} parallel {} ({measured} measured)",
            s.tile_oc, s.tile_h, s.tile_w, s.unroll, s.parallel
        );
    }
    write(&a.out, &serde_json::to_string_pretty(&tuning.schedules)?)?;
    if let Some(p) = &a.trace {
        write(p, &tune::trace_csv(&tuning.trace))?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(a: SweepArgs) -> Result<ExitCode> {
    let model = load_model(&a.model)?;
    let train = load_dataset(&a.train)?;
    let test = load_dataset(&a.test)?;
    let cfg = SweepConfig {
        techniques: a.techniques,
        algorithms: a.algorithms,
        tuned: match a.tuned {
            TunedStates::Both => vec![false, true],
            TunedStates::Untuned => vec![false],
            TunedStates::Tuned => vec![true],
        },
        runs: a.runs,
        tune: TuneConfig {
            budget: a.budget,
            early_stop: a.early_stop,
            runs: a.tune_runs,
            seed: a.seed,
            ..TuneConfig::default()
        },
        drop_threshold: a.drop,
        weight_level: a.weight_level,
        channel_level: a.channel_level,
        ..SweepConfig::default()
    };
    let mut timer = a.timing.timer()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = bench::run_sweep(&model, &train, &test, &cfg, timer.as_mut())?;
    let summary = bench::summarize(&report);
    write(&a.out.join("results.csv"), &summary.csv)?;
    write(&a.out.join("report.md"), &summary.markdown)?;
    write(&a.out.join("curves.csv"), &summary.curves_csv)?;
    for e in &report.errors {
        eprintln!("failed cell {} / {} / tuned={}: {}", e.variant, e.algorithm, e.tuned, e.reason);
    }
    println!(
        "{} cells measured, {} failed; results in {}",
        report.records.len(),
        report.errors.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn verify(a: VerifyArgs) -> Result<ExitCode> {
    let report = kernel_verify::run(a.cases, a.seed);
    for (kernel, n) in &report.checks {
        println!("{kernel}: {n} checks");
    }
    if report.passed() {
        println!("all {} cases passed", report.cases);
        return Ok(ExitCode::SUCCESS);
    }
    for f in &report.failures {
        eprintln!("FAIL {f}");
    }
    eprintln!("{} failures", report.failures.len());
    Ok(ExitCode::FAILURE)
}
