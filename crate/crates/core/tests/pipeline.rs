use convstack_core::bench::{self, CostModelTimer};
use convstack_core::compress::{self, PruneLevel};
use convstack_core::graph::{self, evaluate_top1, forward, generate_toy_workload, Model, ScheduleMap, WorkloadConfig};
use convstack_core::kernels::{Algorithm, Schedule};
use convstack_core::tune::{self, TuneConfig};
use convstack_core::DType;

fn workload() -> (Model, graph::LabeledDataset, graph::LabeledDataset) {
    let cfg = WorkloadConfig { classes: 5, size: 8, train: 40, test: 40, seed: 3, ..WorkloadConfig::default() };
    generate_toy_workload(&cfg).unwrap()
}

fn variants(model: &Model, train: &graph::LabeledDataset) -> Vec<(&'static str, Model)> {
    let level = PruneLevel::from_fraction(0.6).unwrap();
    let params = compress::calibrate_i8(model, train).unwrap();
    vec![
        ("dense", model.clone()),
        ("weight", compress::prune_weights_global_l1(model, level).unwrap().model.to_sparse()),
        ("channel", compress::prune_channels_global_l1(model, level).unwrap().model),
        ("f16", compress::quantize_model_f16(model).unwrap()),
        ("i8", compress::quantize_model_i8(model, &params).unwrap()),
    ]
}

#[test]
fn compressed_models_survive_save_and_load() {
    let (model, train, test) = workload();
    let dir = tempfile::tempdir().unwrap();
    let x = &test.inputs[0];
    for (name, m) in variants(&model, &train) {
        let path = dir.path().join(format!("{name}.json"));
        graph::save_model(&m, &path).unwrap();
        let back = graph::load_model(&path).unwrap();
        assert_eq!(back, m, "{name}");
        for a in Algorithm::ALL {
            let sched = ScheduleMap::Shared(Schedule::untuned(a));
            assert_eq!(forward(&back, x, &sched).unwrap(), forward(&m, x, &sched).unwrap(), "{name} {a}");
        }
    }
}

#[test]
fn algorithms_agree_on_every_variant() {
    let (model, train, test) = workload();
    for (name, m) in variants(&model, &train) {
        let accs: Vec<f64> = Algorithm::ALL
            .iter()
            .map(|&a| evaluate_top1(&m, &test, &ScheduleMap::Shared(Schedule::untuned(a))).unwrap())
            .collect();
        assert!(accs.windows(2).all(|w| w[0] == w[1]), "{name}: {accs:?}");
    }
}

#[test]
fn dataset_round_trip() {
    let (_, train, _) = workload();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.json");
    graph::save_dataset(&train, &path).unwrap();
    assert_eq!(graph::load_dataset(&path).unwrap(), train);
}

#[test]
fn tuned_schedules_run_every_dtype() {
    let (model, train, test) = workload();
    let cfg = TuneConfig { budget: 10, early_stop: 5, ..TuneConfig::default() };
    let x = &test.inputs[0];
    for (name, m) in variants(&model, &train) {
        for a in Algorithm::ALL {
            let t = tune::tune_model(&m, x, a, &cfg, &mut CostModelTimer::default()).unwrap();
            let untuned = ScheduleMap::Shared(Schedule::untuned(a));
            let want = forward(&m, x, &untuned).unwrap();
            let got = forward(&m, x, &t.schedules).unwrap();
            if m.dtype == DType::F32 {
                assert_eq!(got, want, "{name} {a}");
            }
            let mut timer = CostModelTimer::default();
            let tuned = bench::measure(&m, &t.schedules, x, 3, &mut timer, None).unwrap();
            let base = bench::measure(&m, &untuned, x, 3, &mut timer, None).unwrap();
            assert!(tuned.median_ns <= base.median_ns, "{name} {a}");
        }
    }
}

#[test]
fn compression_accounting_is_consistent() {
    let (model, train, _) = workload();
    let params = compress::count_params(&model);
    let macs = compress::count_macs(&model).unwrap();
    for (name, m) in variants(&model, &train) {
        let r = compress::CompressionResult::new(name, None, &model, &m, None).unwrap();
        assert_eq!(r.params_before, params);
        assert_eq!(r.macs_before, macs);
        assert!(r.params_after <= params && r.macs_after <= macs, "{name}");
        let expected = match name {
            "f16" => Some(0.5),
            "i8" => Some(0.75),
            "dense" => Some(0.0),
            _ => None,
        };
        if let Some(e) = expected {
            assert_eq!(r.compression_ratio, e, "{name}");
        }
    }
}
