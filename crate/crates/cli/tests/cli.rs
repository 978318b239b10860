//! End-to-end tests of the depthscope binary: flag handling, file
//! outputs, exit codes, and determinism of emitted artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_depthscope")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env("DEPTHSCOPE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_corpus(dir: &Path, name: &str, prompts: &[(&str, usize, usize)]) -> PathBuf {
    let mut lines = String::new();
    for (i, (text, start, end)) in prompts.iter().enumerate() {
        lines.push_str(&format!(
            "{}\n",
            serde_json::json!({
                "id": format!("p{i}"),
                "text": text,
                "answer_start": start,
                "answer_end": end,
                "dataset": "demo",
            })
        ));
    }
    let path = dir.join(name);
    std::fs::write(&path, lines).unwrap();
    path
}

fn demo_corpus(dir: &Path) -> PathBuf {
    // Byte tokenization surrounds text with markers, so spans sit well
    // inside each sequence.
    write_corpus(
        dir,
        "corpus.jsonl",
        &[
            ("the cat sat", 8, 12),
            ("2+2 equals 4", 9, 13),
            ("a quick test", 9, 13),
            ("hello charts", 8, 13),
        ],
    )
}

#[test]
fn init_model_presets_write_expected_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "init-model", "--preset", "14B-shape", "--scale-factor", "0.125", "--seed", "3",
            "--out", "m14.dsw",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("layers=48"), "{stdout}");
    assert!(stdout.contains("heads=40/8"), "{stdout}");

    let loaded = depthscope_core::container::load_weights(&dir.path().join("m14.dsw")).unwrap();
    assert_eq!(loaded.config.n_layers, 48);
    assert_eq!(loaded.config.n_q_heads, 40);
    assert_eq!(loaded.config.n_kv_heads, 8);

    let out = run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "3", "--out", "tiny.dsw"],
    );
    assert!(out.status.success());
    let loaded = depthscope_core::container::load_weights(&dir.path().join("tiny.dsw")).unwrap();
    assert_eq!(loaded.config.n_layers, 8);
    assert_eq!(loaded.config.d_model, 64);
    assert_eq!((loaded.config.n_q_heads, loaded.config.n_kv_heads), (4, 2));
}

#[test]
fn init_model_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.dsw", "b.dsw"] {
        let out = run_in(
            dir.path(),
            &["init-model", "--preset", "tiny", "--seed", "9", "--out", name],
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a.dsw")).unwrap();
    let b = std::fs::read(dir.path().join("b.dsw")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_preset_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["init-model", "--preset", "huge", "--out", "x.dsw"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_emits_one_curve_file_per_probe() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    assert!(out.status.success());
    demo_corpus(dir.path());

    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "corpus.jsonl", "--probes", "all",
            "--seed", "5", "--out", "curves",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("curves"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec![
            "attribution.json",
            "cosine.json",
            "erasure.json",
            "lens.json",
            "skip.json"
        ]
    );
}

#[test]
fn rerun_with_same_inputs_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    demo_corpus(dir.path());
    for out_dir in ["c1", "c2"] {
        let out = run_in(
            dir.path(),
            &[
                "run", "--model", "model.dsw", "--corpus", "corpus.jsonl", "--probes",
                "cosine,lens,skip", "--seed", "5", "--out", out_dir,
            ],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["cosine.json", "lens.json", "skip.json"] {
        let a = std::fs::read(dir.path().join("c1").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("c2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
}

#[test]
fn missing_corpus_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "nowhere.jsonl", "--out", "curves",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nowhere.jsonl"), "{stderr}");
}

#[test]
fn probe_failure_aborts_with_probe_name() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    // No answer spans: erasure cannot score anything.
    let path = dir.path().join("nospan.jsonl");
    std::fs::write(
        &path,
        format!("{}\n", serde_json::json!({"id": "a", "text": "word salad", "dataset": "d"})),
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "nospan.jsonl", "--probes", "erasure",
            "--out", "curves",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("erasure"), "{stderr}");
}

fn write_planted_cosine(dir: &Path) -> PathBuf {
    let curves_dir = dir.join("planted");
    std::fs::create_dir_all(&curves_dir).unwrap();
    let mut curve = vec![0.0f64; 16];
    for v in curve.iter_mut().take(11).skip(4) {
        *v = -0.3;
    }
    for v in curve.iter_mut().skip(11) {
        *v = 0.3;
    }
    let cs = serde_json::json!({
        "probe": "cosine",
        "dataset": "planted",
        "n_layers": 16,
        "prompts": 1,
        "series": {"avg": curve},
    });
    std::fs::write(curves_dir.join("cosine.json"), format!("{cs}")).unwrap();
    curves_dir
}

#[test]
fn detect_recovers_planted_crossing() {
    let dir = tempfile::tempdir().unwrap();
    write_planted_cosine(dir.path());
    let out = run_in(
        dir.path(),
        &["detect", "--curves", "planted", "--out", "report.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    let table = report["table"].as_array().unwrap();
    assert_eq!(table.len(), 1);
    assert_eq!(table[0]["ed"], 10);
    assert_eq!(table[0]["ratio"].as_f64().unwrap(), 0.6875);
}

#[test]
fn detect_leaves_missing_detector_columns_absent() {
    let dir = tempfile::tempdir().unwrap();
    let curves_dir = dir.path().join("curves");
    std::fs::create_dir_all(&curves_dir).unwrap();
    let cs = serde_json::json!({
        "probe": "lens",
        "dataset": "demo",
        "n_layers": 4,
        "prompts": 1,
        "series": {"overlap": [0.0, 0.1, 0.6, 1.0]},
    });
    std::fs::write(curves_dir.join("lens.json"), format!("{cs}")).unwrap();
    let out = run_in(
        dir.path(),
        &["detect", "--curves", "curves", "--out", "report.json"],
    );
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    let table = report["table"].as_array().unwrap();
    assert_eq!(table.len(), 1);
    assert_eq!(table[0]["method"], "overlap-threshold");
}

#[test]
fn detect_with_no_curves_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("empty")).unwrap();
    let out = run_in(
        dir.path(),
        &["detect", "--curves", "empty", "--out", "report.json"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn detect_table_cells_respect_ratio_identity() {
    let dir = tempfile::tempdir().unwrap();
    let curves_dir = dir.path().join("curves");
    std::fs::create_dir_all(&curves_dir).unwrap();
    let cs = serde_json::json!({
        "probe": "lens",
        "dataset": "demo",
        "n_layers": 6,
        "prompts": 2,
        "series": {
            "kl": [7.0, 6.0, 3.0, 1.0, 0.5, 0.0],
            "overlap": [0.0, 0.0, 0.2, 0.4, 0.8, 1.0],
        },
    });
    std::fs::write(curves_dir.join("lens.json"), format!("{cs}")).unwrap();
    let out = run_in(
        dir.path(),
        &["detect", "--curves", "curves", "--out", "report.json"],
    );
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    for cell in report["table"].as_array().unwrap() {
        let ed = cell["ed"].as_u64().unwrap();
        let layers = cell["n_layers"].as_u64().unwrap();
        let ratio = cell["ratio"].as_f64().unwrap();
        assert!((ratio - (ed + 1) as f64 / layers as f64).abs() < 1e-9);
    }
}

#[test]
fn report_renders_one_svg_per_probe() {
    let dir = tempfile::tempdir().unwrap();
    let curves_dir = dir.path().join("curves");
    std::fs::create_dir_all(&curves_dir).unwrap();
    for (probe, series) in [
        ("cosine", serde_json::json!({"avg": [-0.1, -0.2, 0.3, 0.4]})),
        ("lens", serde_json::json!({"kl": [5.0, 3.0, 1.0, 0.0], "overlap": [0.0, 0.2, 0.6, 1.0]})),
    ] {
        let cs = serde_json::json!({
            "probe": probe,
            "dataset": "demo",
            "n_layers": 4,
            "prompts": 1,
            "series": series,
        });
        std::fs::write(curves_dir.join(format!("{probe}.json")), format!("{cs}")).unwrap();
    }
    let out = run_in(
        dir.path(),
        &["detect", "--curves", "curves", "--out", "report.json"],
    );
    assert!(out.status.success());
    let out = run_in(
        dir.path(),
        &["report", "--report", "report.json", "--format", "svg", "--out", "charts"],
    );
    assert!(out.status.success());
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("charts"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, vec!["cosine.svg", "lens.svg"]);
}

#[test]
fn report_csv_round_trips_through_the_curve_parser() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    demo_corpus(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "corpus.jsonl", "--probes",
            "cosine,lens", "--seed", "5", "--out", "curves",
        ],
    );
    assert!(out.status.success());
    let out = run_in(
        dir.path(),
        &["detect", "--curves", "curves", "--out", "report.json"],
    );
    assert!(out.status.success());
    let out = run_in(
        dir.path(),
        &["report", "--report", "report.json", "--format", "csv", "--out", "csvout"],
    );
    assert!(out.status.success());

    // The emitted CSV parses back to the same numeric curves.
    let parsed =
        depthscope_core::report::load_curves(&dir.path().join("csvout/curves.csv")).unwrap();
    let report =
        depthscope_core::report::load_report(&dir.path().join("report.json")).unwrap();
    for cs in &report.curves {
        let back = parsed.iter().find(|p| p.probe == cs.probe).unwrap();
        for (name, values) in &cs.series {
            assert_eq!(&back.series[name], values, "{} {name}", cs.probe);
        }
    }
}

#[test]
fn report_with_empty_probe_annotates_no_data_and_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let report = serde_json::json!({
        "manifest": {"tool_version": "0.1.0", "inputs": []},
        "curves": [
            {"probe": "cosine", "dataset": "demo", "n_layers": 4, "prompts": 1,
             "series": {"avg": [-0.1, -0.2, 0.3, 0.4]}},
            {"probe": "lens", "dataset": "demo", "n_layers": 0, "prompts": 0, "series": {}},
        ],
        "table": [
            {"method": "cosine-transition", "dataset": "demo", "ed": 1, "ratio": 0.5,
             "n_layers": 4},
        ],
    });
    std::fs::write(dir.path().join("report.json"), format!("{report}")).unwrap();
    let out = run_in(
        dir.path(),
        &["report", "--report", "report.json", "--format", "svg", "--out", "charts"],
    );
    assert_eq!(out.status.code(), Some(0));
    let lens = std::fs::read_to_string(dir.path().join("charts/lens.svg")).unwrap();
    assert!(lens.contains("no data"));
}

#[test]
fn unknown_report_format_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("report.json"), "{}").unwrap();
    let out = run_in(
        dir.path(),
        &["report", "--report", "report.json", "--format", "pdf", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validate_zero_noise_exits_0_with_full_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["validate", "--seeds", "5", "--out", "validation.json"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("validation.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["cosine"]["recovery_rate"], 1.0);
    assert_eq!(report["kl"]["recovery_rate"], 1.0);
    assert_eq!(report["overlap"]["recovery_rate"], 1.0);
}

#[test]
fn validate_single_seed_reports_one_case_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["validate", "--seeds", "1", "--layer-counts", "8", "--out", "v.json"],
    );
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap())
            .unwrap();
    assert_eq!(report["cases"], 1);
}

#[test]
fn validate_noise_sweep_includes_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "validate", "--seeds", "3", "--layer-counts", "8,16", "--noise-sweep",
            "0.0,0.05", "--out", "sweep.json",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap())
            .unwrap();
    let sweeps = report["sweeps"].as_array().unwrap();
    assert_eq!(sweeps.len(), 2);
    for sweep in sweeps {
        assert!(!sweep["cosine"]["off_by"].as_object().unwrap().is_empty());
    }
}

#[test]
fn curve_manifest_digests_match_rehashing() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    demo_corpus(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "corpus.jsonl", "--probes", "cosine",
            "--seed", "2", "--out", "curves",
        ],
    );
    assert!(out.status.success());
    let sets =
        depthscope_core::report::load_curves(&dir.path().join("curves/cosine.json")).unwrap();
    let manifest = sets[0].manifest.as_ref().unwrap();
    assert_eq!(
        manifest.model.sha256,
        depthscope_core::report::sha256_hex(&dir.path().join("model.dsw")).unwrap()
    );
    assert_eq!(
        manifest.corpus.sha256,
        depthscope_core::report::sha256_hex(&dir.path().join("corpus.jsonl")).unwrap()
    );
    assert_eq!(manifest.model.sha256.len(), 64);
}

#[test]
fn baseline_can_be_saved_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    run_in(
        dir.path(),
        &["init-model", "--preset", "tiny", "--seed", "1", "--out", "model.dsw"],
    );
    demo_corpus(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "corpus.jsonl", "--probes", "erasure",
            "--seed", "2", "--out", "c1", "--save-baseline", "baseline.dsw",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("baseline.dsw").exists());

    let out = run_in(
        dir.path(),
        &[
            "run", "--model", "model.dsw", "--corpus", "corpus.jsonl", "--probes", "erasure",
            "--seed", "2", "--out", "c2", "--baseline", "baseline.dsw",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a = std::fs::read(dir.path().join("c1/erasure.json")).unwrap();
    let b = std::fs::read(dir.path().join("c2/erasure.json")).unwrap();
    assert_eq!(a, b);
}
