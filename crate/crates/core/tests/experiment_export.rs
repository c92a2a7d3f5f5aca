//! End-to-end experiment runs, exported tables and the results schema.

use liveval::baselines::BaselineMethod;
use liveval::experiment::{
    export_results, run_experiment, DataSource, ExperimentConfig, ExportFormat, RESULTS_SCHEMA,
};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seeds = vec![11, 12];
    c.data.source = DataSource::Blobs { n_per_class: 80, n_classes: 2, dim: 5, separation: 3.0 };
    c.data.holdout = 16;
    c.corruption.count = 10;
    c.pool_size = 30;
    c.train.epochs = 3;
    c.baselines.methods = vec![BaselineMethod::Gradnd, BaselineMethod::If, BaselineMethod::Loo];
    c.baselines.loo_pool = None;
    c
}

fn read_csv(path: &std::path::Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn exported_tables_round_trip_and_match_schema() {
    let outcome = run_experiment(&small_config()).unwrap();
    assert!(outcome.failure.is_none(), "{:?}", outcome.failure);
    assert_eq!(outcome.detections.len(), 2 * 4);
    let dir = tempfile::tempdir().unwrap();
    let files = export_results(&outcome, dir.path(), ExportFormat::All).unwrap();
    for name in ["detection.csv", "detection_summary.csv", "resources.csv", "results.json", "manifest.json", "early_detection.csv"] {
        assert!(files.iter().any(|f| f.ends_with(name)), "missing {name}");
    }
    for m in ["liveval", "gradnd", "if", "loo"] {
        assert!(dir.path().join(format!("values_{m}.csv")).exists());
    }

    let (header, rows) = read_csv(&dir.path().join("detection.csv"));
    assert_eq!(header, ["method", "k", "seed", "detected"]);
    for (row, d) in rows.iter().zip(&outcome.detections) {
        assert_eq!(row[0], d.method);
        assert_eq!(row[1].parse::<usize>().unwrap(), d.k);
        assert_eq!(row[2].parse::<u64>().unwrap(), d.seed);
        assert_eq!(row[3].parse::<usize>().unwrap(), d.detected);
    }

    let (header, rows) = read_csv(&dir.path().join("detection_summary.csv"));
    assert_eq!(header[0], "k");
    let summary = outcome.summary();
    for s in &summary {
        let col = header.iter().position(|h| *h == format!("{}_mean", s.method)).unwrap();
        assert_eq!(rows[0][col].parse::<f64>().unwrap(), s.mean);
        assert_eq!(rows[0][col + 1].parse::<f64>().unwrap(), s.std);
    }

    let (header, rows) = read_csv(&dir.path().join("values_liveval.csv"));
    assert_eq!(header, ["seed", "sample_id", "value", "corrupted", "in_pool"]);
    let first = &outcome.values[0];
    for (row, (_, id, v)) in rows.iter().zip(&first.values) {
        assert_eq!(row[1].parse::<u64>().unwrap(), *id);
        assert_eq!(row[2].parse::<f64>().unwrap(), *v);
    }
    let in_pool = rows.iter().filter(|r| r[0] == "11" && r[4] == "1").count();
    assert_eq!(in_pool, 30);

    let schema: serde_json::Value = serde_json::from_str(RESULTS_SCHEMA).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap()).unwrap();
    let errors: Vec<String> = validator.iter_errors(&results).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");
    let mut broken = results.clone();
    broken["detections"][0]["detected"] = serde_json::json!(-1);
    assert!(!validator.is_valid(&broken));

    // The manifest alone reproduces the run.
    let again = ExperimentConfig::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(again, small_config());
}

#[test]
fn failing_stage_keeps_earlier_results() {
    let mut c = small_config();
    c.baselines.methods = vec![BaselineMethod::Gradnd, BaselineMethod::If];
    c.baselines.influence.max_iterations = 1;
    c.baselines.influence.tolerance = 1e-14;
    let outcome = run_experiment(&c).unwrap();
    let failure = outcome.failure.as_ref().expect("solver should fail");
    assert_eq!((failure.seed, failure.stage.as_str()), (11, "if"));
    let methods: Vec<&str> = outcome.detections.iter().map(|d| d.method.as_str()).collect();
    assert_eq!(methods, ["liveval", "gradnd"]);
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let mut c = small_config();
    c.pool_size = 5;
    assert!(run_experiment(&c).is_err());
    let mut c = small_config();
    c.seeds.clear();
    assert!(run_experiment(&c).is_err());
}
