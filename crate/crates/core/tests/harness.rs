use std::collections::BTreeMap;
use std::fs;

use serde_json::Value;

use tokalign::decode::TreeConfig;
use tokalign::harness::{
    read_ablation_csv, run_ablation, speedup_ratio, write_ablation_csv, AblationAxis, ExperimentConfig, LatencyModel,
    Preset, Stage, Workspace, ABLATION_CSV, CONFIG_VERSION, MISALIGNMENT_CSV, TRACE_FILE, TRAINING_LOG,
};
use tokalign::training::TopK;
use tokalign::Error;

fn lat(target_ms: f64, draft_ms: f64, depth: f64, tau: f64) -> LatencyModel {
    LatencyModel {
        target_ms,
        draft_ms,
        depth,
        tau,
    }
}

#[test]
fn speedup_ratio_examples() {
    let sr = speedup_ratio(&lat(25.0, 1.5, 6.0, 5.0)).unwrap();
    assert!((sr - 3.68).abs() < 0.005, "{sr}");
    assert_eq!(speedup_ratio(&lat(25.0, 0.0, 6.0, 4.2)).unwrap(), 4.2);
    assert!((speedup_ratio(&lat(10.0, 1.0, 5.0, 4.0)).unwrap() - 10.0 / 15.0 * 4.0).abs() < 1e-12);
    for bad in [
        lat(0.0, 1.0, 5.0, 4.0),
        lat(10.0, -1.0, 5.0, 4.0),
        lat(10.0, 1.0, 0.0, 4.0),
        lat(10.0, 1.0, 5.0, -4.0),
        lat(f64::NAN, 1.0, 5.0, 4.0),
    ] {
        assert!(speedup_ratio(&bad).is_err());
    }
}

fn config_key(text: &str) -> String {
    match ExperimentConfig::from_toml_str(text) {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn presets_round_trip_through_toml() {
    for preset in Preset::ALL {
        let c = ExperimentConfig::preset(preset);
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert_eq!(preset.name().parse::<Preset>().unwrap(), preset);
    }
    let paper = ExperimentConfig::preset(Preset::PaperFaithful);
    assert_eq!(paper.train.optimizer.lr, 3e-5);
    assert_eq!(paper.train.optimizer.warmup, 2000);
    assert_eq!(paper.train.epochs, 20);
    assert_eq!((paper.train.topk, paper.train.steps), (TopK::K(3), 3));
    assert_eq!(paper.decode.tree, TreeConfig::default());
    assert_ne!(paper.fingerprint(), ExperimentConfig::default().fingerprint());
    assert!("huge".parse::<Preset>().is_err());
}

#[test]
fn config_errors_name_the_key() {
    let base = ExperimentConfig::default().to_toml_string();
    let cases = [
        ("lr = 0.001", "lr = \"fast\"", "train.optimizer.lr"),
        ("budget = 60", "budget = 60\nwidth = 2", "decode.tree.width"),
        ("topk = 3", "topk = 0", "train.topk"),
        ("steps = 3", "steps = 0", "train.steps"),
        ("version = 1", "version = 9", "version"),
        ("prompt_len = 16", "prompt_len = 200", "decode.prompt_len"),
        ("draft_ms = 1.5", "draft_ms = -1.5", "latency.draft_ms"),
        ("[probe]\nforwards = 5", "[probe]\nforwards = 0", "probe.forwards"),
        ("d_model = 32", "d_model = 30", "target"),
    ];
    for (from, to, key) in cases {
        assert!(base.contains(from), "{from}");
        assert_eq!(config_key(&base.replacen(from, to, 1)), key, "{to}");
    }
    let na = ExperimentConfig::from_toml_str(&base.replace("topk = 3", "topk = \"NA\"")).unwrap();
    assert_eq!(na.train.topk, TopK::Na);
    assert!(config_key("version = 1").starts_with('<'));
    assert!(matches!(ExperimentConfig::from_toml_str("[[["), Err(Error::Config { .. })));
    assert_eq!(CONFIG_VERSION, 1);
}

/// A pipeline small enough to run in a couple of seconds.
fn tiny(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.corpus.markov.vocab_size = 16;
    c.corpus.train_sequences = 24;
    c.corpus.eval_sequences = 6;
    c.corpus.seq_len = 16;
    c.target.d_model = 16;
    c.target.n_layers = 1;
    c.target.n_heads = 2;
    c.target.max_seq = 40;
    c.target.epochs = 1;
    c.train.epochs = 1;
    c.train.steps = 2;
    c.train.max_sequences = None;
    c.decode.prompts = 3;
    c.decode.prompt_len = 6;
    c.decode.max_new_tokens = 10;
    c.decode.tree = TreeConfig {
        budget: 10,
        max_depth: 3,
        branch_k: 2,
    };
    c.probe.forwards = 3;
    c.probe.sequences = 3;
    c.validate().unwrap();
    c
}

#[test]
fn pipeline_is_deterministic_and_writes_all_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let wa = Workspace::open(a.path(), tiny(4)).unwrap();
    let ra = wa.pipeline(true).unwrap();
    let rb = Workspace::open(b.path(), tiny(4)).unwrap().pipeline(false).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(
        fs::read(a.path().join("report.json")).unwrap(),
        fs::read(b.path().join("report.json")).unwrap()
    );
    assert_eq!(ra.config_fingerprint, tiny(4).fingerprint());
    assert!(ra.mean_tau >= 1.0);
    assert_eq!(ra.lossless, Some(true));
    assert_eq!(ra.tau_histogram.len(), 4);
    let tau_sum: usize = ra.tau_histogram.iter().enumerate().map(|(i, n)| (i + 1) * n).sum();
    assert!((ra.mean_tau - tau_sum as f64 / ra.cycles as f64).abs() < 1e-12);
    assert_eq!(ra.generated_tokens, 30);
    assert_eq!(ra.misalignment.len(), 3);
    assert_eq!(ra.final_epoch.len(), 2);
    let sr = speedup_ratio(&ra.latency).unwrap();
    assert_eq!(ra.speedup_ratio, sr);

    for stage in Stage::ALL {
        assert!(wa.is_done(stage), "{}", stage.name());
    }
    let training: Vec<Value> = fs::read_to_string(a.path().join(TRAINING_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(training.len(), 2);
    for key in ["epoch", "pass", "loss", "masked_fraction", "wall_time_s"] {
        assert!(training[1].get(key).is_some(), "{key}");
    }
    let trace: Vec<Value> = fs::read_to_string(a.path().join(TRACE_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(trace.len(), ra.cycles);
    for line in &trace {
        let tau = line["tau"].as_u64().unwrap() as usize;
        assert!((1..=4).contains(&tau));
        assert_eq!(line["accepted"].as_array().unwrap().len() + 1, tau);
        assert_eq!(line["tree_tokens"].as_array().unwrap().len(), line["tree_parents"].as_array().unwrap().len());
    }
    assert!(!b.path().join(TRACE_FILE).exists());
    let csv = fs::read_to_string(a.path().join(MISALIGNMENT_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("forward,rate"));

    let other = Workspace::open(b.path(), tiny(5)).err().unwrap();
    assert!(other.to_string().contains("different config"));
}

#[test]
fn stages_require_their_inputs_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path(), tiny(1)).unwrap();
    match ws.run_stage(Stage::TrainDraft, false) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "precompute"),
        other => panic!("{other:?}"),
    }
    match ws.run_stage(Stage::TrainTarget, false) {
        Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "corpus"),
        other => panic!("{other:?}"),
    }
    ws.ensure(Stage::TrainDraft, false).unwrap();
    fs::remove_file(dir.path().join("dataset.bin")).unwrap();
    match ws.run_stage(Stage::TrainDraft, false) {
        Err(e @ Error::MissingStage { .. }) => assert!(e.to_string().contains("`precompute`")),
        other => panic!("{other:?}"),
    }
    let ckpt = fs::read(dir.path().join("target.ckpt")).unwrap();
    let report = ws.pipeline(false).unwrap();
    assert_eq!(fs::read(dir.path().join("target.ckpt")).unwrap(), ckpt);
    let fresh = tempfile::tempdir().unwrap();
    assert_eq!(Workspace::open(fresh.path(), tiny(1)).unwrap().pipeline(false).unwrap(), report);
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn changed_keys(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a).unwrap(), &mut fa);
    flatten("", &serde_json::to_value(b).unwrap(), &mut fb);
    let keys: std::collections::BTreeSet<_> = fa.keys().chain(fb.keys()).cloned().collect();
    keys.into_iter().filter(|k| fa.get(k) != fb.get(k)).collect()
}

#[test]
fn ablation_cells_differ_only_in_the_swept_key() {
    let base = ExperimentConfig::default();
    let swept = |axis: AblationAxis| match axis {
        AblationAxis::Topk => vec![".train.topk"],
        AblationAxis::Steps => vec![".train.steps"],
        AblationAxis::TgfVariant => vec![".draft.use_tgf", ".draft.tgf_second_input"],
        AblationAxis::Teh => vec![".draft.use_teh"],
        AblationAxis::ExpansionDim => vec![".draft.expansion_dim"],
    };
    for axis in AblationAxis::ALL {
        assert_eq!(axis.name().parse::<AblationAxis>().unwrap(), axis);
        let grid = axis.default_grid(&base);
        assert!(grid.len() >= 2);
        let mut prints = Vec::new();
        for setting in &grid {
            let cell = axis.apply(&base, setting).unwrap();
            for key in changed_keys(&base, &cell) {
                assert!(swept(axis).contains(&key.as_str()), "{axis}: {key}");
            }
            prints.push(cell.fingerprint());
        }
        prints.sort();
        prints.dedup();
        assert_eq!(prints.len(), grid.len(), "{axis}");
    }
    assert!(AblationAxis::Topk.default_grid(&base).contains(&"NA".to_string()));
    assert!(matches!("width".parse::<AblationAxis>(), Err(Error::Config { .. })));
    assert!(AblationAxis::Steps.apply(&base, "many").is_err());
    assert!(AblationAxis::Steps.apply(&base, "0").is_err());
    assert!(AblationAxis::TgfVariant.apply(&base, "deep").is_err());
}

#[test]
fn ablation_runs_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path(), tiny(2)).unwrap();
    let grid = vec!["NA".to_string(), "3".to_string()];
    let rows = run_ablation(&ws, AblationAxis::Topk, &grid).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r.cell_seed).collect::<Vec<_>>(), vec![2, 3]);
    for (row, setting) in rows.iter().zip(&grid) {
        assert_eq!(&row.setting, setting);
        assert!(row.mean_tau >= 1.0 && row.speedup_ratio > 0.0);
    }
    let path = dir.path().join(ABLATION_CSV);
    write_ablation_csv(&path, &rows).unwrap();
    assert_eq!(read_ablation_csv(&path).unwrap(), rows);
    assert!(fs::read_to_string(&path).unwrap().starts_with("axis,setting,mean_tau,speedup_ratio"));
    assert_eq!(run_ablation(&ws, AblationAxis::Topk, &grid).unwrap(), rows);
    assert!(run_ablation(&ws, AblationAxis::Topk, &[]).is_err());

    let d = ws.config().target.d_model;
    let grid = vec![d.to_string(), (4 * d).to_string()];
    let rows = run_ablation(&ws, AblationAxis::ExpansionDim, &grid).unwrap();
    assert_eq!(rows[1].draft_params - rows[0].draft_params, 3 * d * (3 * d + 1));
    assert_eq!(rows[1].tgf_params - rows[0].tgf_params, 3 * d * (3 * d + 1));
}
