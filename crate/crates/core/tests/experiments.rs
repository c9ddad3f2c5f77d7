use cprop::experiments::{
    run_experiment, DataSchedule, DegreeMeasure, EigenMethod, ExperimentConfig, ExperimentKind,
};
use cprop::kv::KvConfig;
use cprop::Error;
use tempfile::TempDir;

fn small(kind: ExperimentKind, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(kind, seed);
    match kind {
        ExperimentKind::DynData => {
            cfg.n = 60;
            cfg.rounds = 6000;
            cfg.perturb_round = 2000;
        }
        ExperimentKind::DynNetwork => {
            cfg.pairs = vec![(20, 8.0), (30, 6.0)];
            cfg.ensemble = 2;
            cfg.rounds = 4000;
            cfg.perturb_round = 50;
            cfg.resample_period = 2000;
        }
        ExperimentKind::InitCompare => {
            cfg.n = 30;
            cfg.c = 5.0;
            cfg.tol = 1e-6;
            cfg.trace_rounds = 50;
        }
        ExperimentKind::Scaling => {
            cfg.n_list = vec![20, 40];
            cfg.ensemble = 6;
        }
        ExperimentKind::Degree => {
            cfg.c_list = vec![4.0, 8.0, 12.0];
            cfg.ensemble = 4;
        }
        ExperimentKind::AbTable => {
            cfg.pairs = vec![(20, 8.0), (24, 6.0)];
            cfg.ensemble = 2;
        }
    }
    cfg.validate().unwrap();
    cfg
}

#[test]
fn every_kind_runs_and_is_bit_reproducible() {
    for kind in ExperimentKind::ALL {
        let cfg = small(kind, 3);
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert!(a.same_results(&b), "{kind} differs between identical runs");
        assert!(a.summary_line().starts_with(&format!("kind={kind} ")));
        assert!(!a.tables.is_empty(), "{kind} wrote no tables");
    }
}

#[test]
fn ensembles_do_not_depend_on_jobs() {
    for kind in [ExperimentKind::Scaling, ExperimentKind::Degree, ExperimentKind::AbTable, ExperimentKind::DynNetwork] {
        let mut cfg = small(kind, 4);
        let seq = run_experiment(&cfg).unwrap();
        cfg.jobs = 4;
        let par = run_experiment(&cfg).unwrap();
        assert!(seq.same_results(&par), "{kind} depends on jobs");
    }
}

#[test]
fn seeds_change_results() {
    let a = run_experiment(&small(ExperimentKind::Scaling, 1)).unwrap();
    let b = run_experiment(&small(ExperimentKind::Scaling, 2)).unwrap();
    assert_ne!(a.get("lambda_mean_n20"), b.get("lambda_mean_n20"));
}

#[test]
fn outputs_follow_the_naming_scheme() {
    let tmp = TempDir::new().unwrap();
    let record = run_experiment(&small(ExperimentKind::InitCompare, 5)).unwrap();
    let written = record.write_outputs(tmp.path()).unwrap();
    let names: Vec<String> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert!(names.contains(&"config.txt".to_owned()));
    assert!(names.contains(&"summary.json".to_owned()));
    assert!(names.contains(&"init_compare_iterations.csv".to_owned()));
    assert!(names.contains(&"init_compare_errors.csv".to_owned()));
    assert!(names.contains(&"init_compare_edge_zero.csv".to_owned()));
    // the config echo reproduces the run
    let echoed = KvConfig::load(tmp.path().join("config.txt")).unwrap();
    let again = run_experiment(&ExperimentConfig::from_kv(None, &echoed).unwrap()).unwrap();
    assert!(record.same_results(&again));
}

#[test]
fn dyn_data_follows_the_affine_map_after_the_change() {
    let record = run_experiment(&small(ExperimentKind::DynData, 6)).unwrap();
    assert!(record.get("replay_max_diff").unwrap() <= 1e-10);
    assert!(record.get("q_post_minus_lambda_a").unwrap().abs() <= 1e-3);
    let t = record.table("trajectory").unwrap();
    assert_eq!(t.rows.len(), 6001);
    assert_eq!(
        t.columns,
        ["round", "y_mean", "belief_tracked", "err_tracked", "err_mean_max", "err_mode_max", "change"]
    );
}

#[test]
fn dyn_data_noise_schedules_run() {
    for schedule in [DataSchedule::Noise, DataSchedule::Walk] {
        let mut cfg = small(ExperimentKind::DynData, 7);
        cfg.rounds = 2500;
        cfg.schedule = schedule;
        let record = run_experiment(&cfg).unwrap();
        assert!(record.get("replay_max_diff").is_none());
        assert!(!record.notes.is_empty());
    }
}

#[test]
fn topology_errors_halve_before_local_state_errors() {
    let record = run_experiment(&small(ExperimentKind::DynNetwork, 8)).unwrap();
    assert_eq!(record.flags.get("k_halves_first"), Some(&true));
    let t = record.table("manifold").unwrap();
    let k = t.column("k_half_rounds").unwrap();
    let mu = t.column("mu_half_rounds").unwrap();
    assert!(k.iter().zip(&mu).all(|(a, b)| a < b));
}

#[test]
fn degree_study_with_measured_ratio() {
    let mut cfg = small(ExperimentKind::Degree, 9);
    cfg.measure = DegreeMeasure::Q;
    let record = run_experiment(&cfg).unwrap();
    let means = record.table("means").unwrap().column("mean").unwrap();
    assert_eq!(means.len(), 3);
    assert!(means.iter().all(|q| (0.99..1.0).contains(q)));
    assert!(record.get("fit_slope").unwrap() > 0.0);
}

#[test]
fn ab_table_dense_and_power_agree() {
    let mut cfg = small(ExperimentKind::AbTable, 10);
    let power = run_experiment(&cfg).unwrap();
    cfg.method = EigenMethod::Dense;
    let dense = run_experiment(&cfg).unwrap();
    for col in ["lambda_a", "lambda_b"] {
        let p = power.table("eigen").unwrap().column(col).unwrap();
        let d = dense.table("eigen").unwrap().column(col).unwrap();
        for (x, y) in p.iter().zip(&d) {
            assert!((x - y).abs() <= 1e-8, "{col}: {x} vs {y}");
        }
    }
}

#[test]
fn config_errors_name_the_field() {
    let kv = KvConfig::parse("n_list = 20\n").unwrap();
    match ExperimentConfig::from_kv(Some(ExperimentKind::Scaling), &kv) {
        Err(Error::Config(msg)) => assert!(msg.contains("`seed`"), "{msg}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    let kv = KvConfig::parse("seed = 1\nc = 25\nn = 20\n").unwrap();
    assert!(ExperimentConfig::from_kv(Some(ExperimentKind::Degree), &kv).is_err());
    let kv = KvConfig::parse("seed = 1\nkind = scaling\n").unwrap();
    assert!(ExperimentConfig::from_kv(Some(ExperimentKind::Degree), &kv).is_err());
}
