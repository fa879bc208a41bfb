mod common;

use std::path::Path;

use common::*;
use dssfn::data::{synthetic_blobs, whole};
use dssfn::harness::{run_experiment, sweep_degree, trace_dir, ExperimentSpec, Mode};
use dssfn::model::accuracy;
use dssfn::{
    load_csv, train_centralized, train_decentralized, CsvOptions, Error, Graph, LayerSolver,
    LayerStack, SolverConfig, SsfnConfig,
};

fn small_cfg(q: usize, seed: u64) -> SsfnConfig {
    SsfnConfig {
        max_layers: 4,
        hidden_width: 2 * q + 40,
        seed,
        ..SsfnConfig::for_targets(q)
    }
}

fn blob_files(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let train = dir.join("train.csv");
    let test = dir.join("test.csv");
    write_csv(&train, &synthetic_blobs(6, 3, 240, 0.6, 1).unwrap());
    write_csv(&test, &synthetic_blobs(6, 3, 90, 0.6, 1).unwrap());
    (train, test)
}

fn small_spec(dir: &Path, mode: Mode) -> ExperimentSpec {
    let (train, test) = blob_files(dir);
    let mut s = ExperimentSpec::new(train, mode);
    s.test_path = Some(test);
    s.nodes = 4;
    s.degree = 2;
    s.iters = 60;
    s.layers = 3;
    s.width_extra = 30;
    s.gamma = 0.5;
    s.staleness = 2;
    s
}

#[test]
fn central_training_learns_blobs_and_costs_fall() {
    let d = synthetic_blobs(5, 3, 300, 0.3, 7).unwrap();
    let run = train_centralized(d.features(), d.targets(), &small_cfg(3, 0)).unwrap();
    for w in run.layer_costs.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{:?}", run.layer_costs);
    }
    let acc = accuracy(
        &run.stack.predict(d.features(), run.stack.depth()).unwrap(),
        d.labels(),
    );
    assert!(acc > 90.0, "train accuracy {acc}");
}

#[test]
fn one_node_decentralised_equals_central_ridge_project() {
    // A lone node has no edges, so each update is projected least squares:
    // the same readouts as the ridge-then-project solver with μ = 0.
    // Once a readout fits the nonnegative targets, rows of ReLU(−O y)
    // vanish; both sides drop them.
    let d = synthetic_blobs(5, 3, 200, 0.3, 8).unwrap();
    let cfg = SsfnConfig {
        solver: LayerSolver::RidgeProject,
        ..small_cfg(3, 4)
    };
    let central = train_centralized(d.features(), d.targets(), &cfg).unwrap();
    let dec = train_decentralized(
        &whole(&d),
        &Graph::single(),
        &cfg,
        &SolverConfig::synchronous(0.1, 3),
    )
    .unwrap();
    for (a, b) in dec.stack.readouts().iter().zip(central.stack.readouts()) {
        assert!(rel_dist(a, b) < 1e-8);
    }
    let dead: usize = central
        .stack
        .readouts()
        .iter()
        .map(|o| {
            (0..o.cols())
                .filter(|&i| (0..3).all(|q| o.get(q, i) == 0.0))
                .count()
        })
        .sum();
    assert!(dead > 0, "instance should exercise dead units");
}

#[test]
fn model_round_trips_through_bytes() {
    let d = synthetic_blobs(4, 2, 80, 0.5, 9).unwrap();
    let run = train_centralized(d.features(), d.targets(), &small_cfg(2, 1)).unwrap();
    let mut buf = Vec::new();
    run.stack.save(&mut buf).unwrap();
    let back = LayerStack::load(buf.as_slice()).unwrap();
    assert_eq!(
        back.predict(d.features(), back.depth()).unwrap(),
        run.stack.predict(d.features(), run.stack.depth()).unwrap()
    );
    assert!(LayerStack::load(&buf[..buf.len() - 8]).is_err());
}

#[test]
fn compare_mode_runs_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::Compare);
    spec.iters = 300;
    let res = run_experiment(&spec).unwrap();
    let modes: Vec<Mode> = res.runs.iter().map(|r| r.mode).collect();
    assert_eq!(modes, vec![Mode::Central, Mode::Sync, Mode::Async]);
    assert!(res.equivalence_gap.unwrap() < 1e-2);
}

#[test]
fn compare_mode_fails_loudly_past_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::Compare);
    spec.iters = 2;
    spec.layers = 1;
    spec.out = Some(dir.path().join("res.json"));
    match run_experiment(&spec) {
        Err(Error::Equivalence { gap, tol }) => assert!(gap > tol),
        other => panic!("expected an equivalence failure, got {other:?}"),
    }
    assert!(
        dir.path().join("res.json").exists(),
        "result still written for inspection"
    );
}

#[test]
fn outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::Compare);
    spec.timing = false;
    spec.equivalence_tol = None;
    spec.out = Some(dir.path().join("out/res.json"));
    let snapshot = |spec: &ExperimentSpec| {
        run_experiment(spec).unwrap();
        let out = spec.out.as_ref().unwrap();
        let mut files = vec![std::fs::read(out).unwrap()];
        for mode in [Mode::Sync, Mode::Async] {
            let tdir = trace_dir(out, mode, 0);
            for l in 0..=spec.layers {
                files.push(std::fs::read(tdir.join(format!("layer_{l:02}.csv"))).unwrap());
            }
        }
        std::fs::remove_dir_all(dir.path().join("out")).unwrap();
        files
    };
    let a = snapshot(&spec);
    assert_eq!(a, snapshot(&spec));
    let header = String::from_utf8(a[1].clone()).unwrap();
    assert!(header.starts_with("k,node,local_cost,consensus_error,wall_ns\n"));
}

#[test]
fn degree_sweep_counts_messages() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::Sync);
    spec.nodes = 8;
    spec.layers = 1;
    spec.iters = 20;
    let table = sweep_degree(&spec, &[2, 4]).unwrap();
    for r in &table.rows {
        let want = if r.mode == Mode::Sync {
            r.nodes * r.degree
        } else {
            r.degree
        };
        assert_eq!(r.messages_per_step, want as f64, "{r:?}");
    }
    assert!(sweep_degree(&spec, &[2, 3]).is_err());
}

#[test]
fn csv_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "0.1,0.2,0\n0.3,oops,1\n").unwrap();
    let err = load_csv(&p, &CsvOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    let missing = load_csv(dir.path().join("none.csv"), &CsvOptions::default()).unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
}

#[test]
fn decentralised_run_beats_chance_on_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(dir.path(), Mode::Async);
    spec.iters = 400;
    let res = run_experiment(&spec).unwrap();
    assert!(res.runs[0].test_accuracy.unwrap() > 80.0);
}
