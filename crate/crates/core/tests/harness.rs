mod common;

use std::fs;

use common::texture_manifest;
use histobench::harness::*;
use histobench::imagecore::load_image;
use histobench::latte::{encode_class_texts, encode_images, zero_shot_predict, AdaptationConfig, TemplateSet};
use histobench::{CorruptionKind, CorruptionSpec, ImageTensor};
use tempfile::tempdir;

fn write(dir: &std::path::Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn small_config() -> BenchmarkConfig {
    BenchmarkConfig {
        adaptation: AdaptationConfig {
            iterations: 2,
            batch_size: 4,
            ..AdaptationConfig::default()
        },
        templates: Some(TemplateSource::Inline(
            TemplateSet::default_set().take(2).unwrap().templates().to_vec(),
        )),
        ..BenchmarkConfig::default()
    }
}

#[test]
fn manifest_validation_names_the_entry() {
    let dir = tempdir().unwrap();
    texture_manifest(dir.path(), 2, 1);
    let m = load_manifest(dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m.num_classes(), 2);
    assert_eq!(m.len(), 2);

    let header = r#"{"class_names": ["checker", "blob"]}"#;
    let dup = format!(
        "{header}\n{{\"id\": \"a\", \"path\": \"img00000.png\", \"label\": 0}}\n{{\"id\": \"a\", \"path\": \"img00001.png\", \"label\": 1}}\n"
    );
    let err = load_manifest(write(dir.path(), "dup.jsonl", &dup))
        .unwrap_err()
        .to_string();
    assert!(err.contains("duplicate id 'a'"), "{err}");

    let bad = format!("{header}\n{{\"id\": \"b\", \"path\": \"img00000.png\", \"label\": 2}}\n");
    let err = load_manifest(write(dir.path(), "label.jsonl", &bad))
        .unwrap_err()
        .to_string();
    assert!(err.contains("'b'") && err.contains("[0, 2)"), "{err}");

    let missing = format!("{header}\n{{\"id\": \"c\", \"path\": \"nope.png\", \"label\": 0}}\n");
    let err = load_manifest(write(dir.path(), "missing.jsonl", &missing))
        .unwrap_err()
        .to_string();
    assert!(err.contains("'c'") && err.contains("nope.png"), "{err}");

    let err = load_manifest(write(dir.path(), "junk.jsonl", "{\"classes\": 1}\n"))
        .unwrap_err()
        .to_string();
    assert!(err.contains("line 1"), "{err}");
}

#[test]
fn clean_stream_is_the_loaded_images() {
    let dir = tempdir().unwrap();
    let m = texture_manifest(dir.path(), 5, 2);
    let items: Vec<Sample> = corrupt_stream(&m, CorruptionSpec::new(CorruptionKind::None, 9))
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(items.len(), 5);
    for (s, e) in items.iter().zip(&m.entries) {
        assert_eq!(s.id, e.id);
        assert_eq!(s.label, e.label);
        assert_eq!(s.image, load_image(m.resolve(e)).unwrap());
    }
}

#[test]
fn streams_are_deterministic_and_seeded() {
    let dir = tempdir().unwrap();
    let m = texture_manifest(dir.path(), 20, 3);
    let run = |seed| -> Vec<ImageTensor> {
        corrupt_stream(&m, CorruptionSpec::new(CorruptionKind::GaussianNoise, seed))
            .unwrap()
            .map(|s| s.unwrap().image)
            .collect()
    };
    assert_eq!(run(42), run(42));
    let (a, b) = (run(42), run(43));
    assert!(a.iter().zip(&b).all(|(x, y)| x != y));
}

#[test]
fn unreadable_items_do_not_stop_the_stream() {
    let dir = tempdir().unwrap();
    let mut m = texture_manifest(dir.path(), 3, 4);
    fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    m.entries.insert(
        1,
        ManifestEntry {
            id: "broken".into(),
            path: "broken.png".into(),
            label: 0,
        },
    );
    let items: Vec<StreamItem> = corrupt_stream(&m, CorruptionSpec::new(CorruptionKind::Brightness, 1))
        .unwrap()
        .collect();
    assert_eq!(items.len(), 4);
    assert_eq!(items.iter().filter(|i| i.is_err()).count(), 1);
    assert_eq!(items[1].as_ref().unwrap_err().id, "broken");
}

#[test]
fn evaluate_scores_micro_accuracy() {
    let dir = tempdir().unwrap();
    let m = texture_manifest(dir.path(), 10, 5);
    let labels: Vec<usize> = m.entries.iter().map(|e| e.label).collect();
    let stream = || corrupt_stream(&m, CorruptionSpec::new(CorruptionKind::None, 0)).unwrap();

    let mut seen = 0;
    let oracle = evaluate(stream(), 2, 3, |imgs| {
        let out = labels[seen..seen + imgs.len()].to_vec();
        seen += imgs.len();
        Ok(out)
    })
    .unwrap();
    assert_eq!(oracle.accuracy, 1.0);
    assert_eq!(oracle.evaluated, 10);

    let constant = evaluate(stream(), 2, 4, |imgs| Ok(vec![0; imgs.len()])).unwrap();
    assert_eq!(constant.accuracy, 0.5);
    assert_eq!(constant.per_class_accuracy, vec![Some(1.0), Some(0.0)]);

    let by_brightness = |imgs: &[&ImageTensor]| Ok(imgs.iter().map(|i| usize::from(i.mean() > 0.6)).collect());
    let reference = evaluate(stream(), 2, 1, by_brightness).unwrap().accuracy;
    for b in [2, 3, 7, 10, 64] {
        assert_eq!(evaluate(stream(), 2, b, by_brightness).unwrap().accuracy, reference);
    }

    assert!(evaluate(std::iter::empty(), 2, 4, |imgs| Ok(vec![0; imgs.len()])).is_err());
    assert!(evaluate(stream(), 2, 0, |imgs| Ok(vec![0; imgs.len()])).is_err());
}

#[test]
fn clean_source_cell_equals_evaluate() {
    let dir = tempdir().unwrap();
    let m = texture_manifest(dir.path(), 6, 6);
    let config = small_config();
    let plan = BenchmarkPlan {
        manifest: dir.path().join("manifest.jsonl"),
        corruptions: vec![CorruptionSpec::new(CorruptionKind::None, 0).into()],
        methods: vec![Method::Source],
        config: config.clone(),
    };
    let report = run_benchmark(&m, &plan, 0).unwrap();
    assert_eq!(report.cells.len(), 1);

    let model = config.build_model(&m.class_names).unwrap();
    let set = config.template_set().unwrap();
    let z_t = encode_class_texts(&model, &set, &m.class_names).unwrap();
    let stream = corrupt_stream(&m, CorruptionSpec::new(CorruptionKind::None, 0)).unwrap();
    let direct = evaluate(stream, 2, 4, |imgs| {
        Ok(zero_shot_predict(&encode_images(&model, imgs)?, &z_t, 0.07)?.predictions)
    })
    .unwrap();
    let cell = &report.cells[0];
    assert_eq!(cell.accuracy, Some(direct.accuracy));
    assert_eq!(cell.per_class_accuracy, direct.per_class_accuracy);
    assert_eq!(cell.images, 6);
    assert!(cell.loss_trace.is_empty());
}

#[test]
fn reports_replay_exactly() {
    let dir = tempdir().unwrap();
    let m = texture_manifest(dir.path(), 8, 7);
    let plan = BenchmarkPlan {
        manifest: dir.path().join("manifest.jsonl"),
        corruptions: vec![
            CorruptionChain::parse("none", 42).unwrap(),
            CorruptionChain::parse("stain-heavy+gaussian-noise", 42).unwrap(),
        ],
        methods: Method::ALL.to_vec(),
        config: small_config(),
    };
    let report = run_benchmark(&m, &plan, 42).unwrap();
    assert_eq!(report.cells.len(), 6);
    assert!(!report.has_failures());
    for c in &report.cells {
        let acc = c.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        let expected_trace = if c.method == Method::Source { 0 } else { 2 };
        assert_eq!(c.loss_trace.len(), expected_trace);
    }

    let path = dir.path().join("report.json");
    report.write(&path).unwrap();
    let loaded = RunReport::load(&path).unwrap();
    assert_eq!(loaded, report);
    let again = replay(&loaded).unwrap();
    assert!(again.same_results(&report));

    let text = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    fs::write(
        dir.path().join("manifest.jsonl"),
        text.replace("\"label\":1", "\"label\":0"),
    )
    .unwrap();
    assert!(replay(&loaded).unwrap_err().to_string().contains("changed"));
}

#[test]
fn failing_cells_are_isolated() {
    let dir = tempdir().unwrap();
    let mut m = texture_manifest(dir.path(), 4, 8);
    fs::write(dir.path().join("broken.png"), b"\x89PNG garbage").unwrap();
    m.entries.push(ManifestEntry {
        id: "broken".into(),
        path: "broken.png".into(),
        label: 1,
    });
    let bad = CorruptionChain::from(CorruptionSpec::new(CorruptionKind::Contrast, 0).with_param("factor", -1.0));
    let plan = BenchmarkPlan {
        manifest: dir.path().join("manifest.jsonl"),
        corruptions: vec![CorruptionChain::parse("brightness", 1).unwrap(), bad],
        methods: vec![Method::Source, Method::Latte],
        config: small_config(),
    };
    let report = run_benchmark(&m, &plan, 1).unwrap();
    assert!(report.has_failures());
    let ok = report.cell("brightness", Method::Latte).unwrap();
    assert_eq!(ok.images, 4);
    assert!(ok.accuracy.is_some());
    assert_eq!(ok.item_errors.len(), 1);
    assert_eq!(ok.item_errors[0].id, "broken");
    let failed = report.cell("contrast", Method::Source).unwrap();
    assert!(failed.accuracy.is_none());
    assert!(failed.error.as_ref().unwrap().contains("factor"));

    let table = render(&report, ReportFormat::Table);
    assert!(table.contains("failures:") && table.contains("error"));
}

#[test]
fn config_round_trips() {
    let dir = tempdir().unwrap();
    let config = BenchmarkConfig {
        calibration: Some(CalibrationSetup {
            manifest: "cal/manifest.jsonl".into(),
            fit: Default::default(),
        }),
        ..small_config()
    };
    let text = serde_json::to_string(&config).unwrap();
    assert_eq!(serde_json::from_str::<BenchmarkConfig>(&text).unwrap(), config);

    write(dir.path(), "templates.txt", "# comment\na {class} slide\nthe {class}\n");
    let path = write(
        dir.path(),
        "c.json",
        r#"{"adaptation": {"iterations": 3}, "templates": "templates.txt"}"#,
    );
    let loaded = BenchmarkConfig::load(&path).unwrap();
    assert_eq!(loaded.adaptation.iterations, 3);
    assert_eq!(loaded.adaptation.batch_size, 128);
    assert_eq!(loaded.template_set().unwrap().len(), 2);
    let resolved = loaded.resolved().unwrap();
    assert_eq!(
        resolved.templates,
        Some(TemplateSource::Inline(vec![
            "a {class} slide".into(),
            "the {class}".into()
        ]))
    );

    let typo = write(dir.path(), "t.json", r#"{"adaptation": {"iteration": 3}}"#);
    assert!(BenchmarkConfig::load(typo).is_err());
}

#[test]
fn csv_grid_has_mean_row() {
    let dir = tempdir().unwrap();
    let m = texture_manifest(dir.path(), 4, 9);
    let plan = BenchmarkPlan {
        manifest: dir.path().join("manifest.jsonl"),
        corruptions: vec![
            CorruptionChain::parse("none", 0).unwrap(),
            CorruptionChain::parse("contrast", 0).unwrap(),
        ],
        methods: vec![Method::Source],
        config: small_config(),
    };
    let report = run_benchmark(&m, &plan, 0).unwrap();
    let csv = render(&report, ReportFormat::Csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "corruption,source");
    assert!(lines[1].starts_with("none,"));
    assert!(lines[2].starts_with("contrast,"));
    let mean = method_mean(&report, Method::Source).unwrap();
    assert_eq!(lines[3], format!("mean,{:.2}", mean * 100.0));
}
