mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acrnn_core::audio::write_clip;
use acrnn_core::store::{StoreMeta, StoreWriter};

const TINY: &str = "\
[model]
conv_widths = [2, 2, 4, 4]
gru_hidden = 4
attention_hidden = 4
dropout_p = 0.0
bn_momentum = 0.9

[train]
epochs = 2
batch_size = 4
";

fn acrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acrnn")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    store: PathBuf,
    config: PathBuf,
}

/// Two clips per class over two folds, prepared into a store.
fn fixture(extra_config: &str) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    common::write_toy_dataset(&root, 2, 2, 1);
    let store = tmp.path().join("store");
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, format!("{TINY}{extra_config}")).unwrap();
    ok(acrnn(&[
        "prepare",
        "--dataset",
        s(&root),
        "--out",
        s(&store),
        "--jobs",
        "2",
    ]));
    Fixture {
        root,
        store,
        config,
        _tmp: tmp,
    }
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn prepare_counts_then_reports_up_to_date() {
    let f = fixture("");
    let again = ok(acrnn(&["prepare", "--dataset", s(&f.root), "--out", s(&f.store)]));
    assert!(again.contains("up to date"), "{again}");

    // Different inputs need --force.
    let o = acrnn(&["prepare", "--dataset", s(&f.root), "--out", s(&f.store), "--augment"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let aug = ok(acrnn(&[
        "prepare",
        "--dataset",
        s(&f.root),
        "--out",
        s(&f.store),
        "--augment",
        "--force",
    ]));
    // 4 classes x 1 clip per fold, one segment each, two copies per clip;
    // copies sped up below 1.5 s hold no segment.
    for fold in 1..=2 {
        let line = aug
            .lines()
            .find(|l| l.starts_with(&format!("fold {fold}: 4 segments (+")))
            .expect(&aug);
        let n: usize = line
            .split("(+")
            .nth(1)
            .unwrap()
            .split(' ')
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!((1..=8).contains(&n), "{line}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.store.join("store.json")).unwrap()).unwrap();
    let clips = meta["clips"].as_array().unwrap();
    assert_eq!(clips.len(), 8 * 3);
    for c in clips.iter().filter(|c| !c["origin_clip"].is_null()) {
        let origin = c["origin_clip"].as_u64().unwrap();
        let src = clips.iter().find(|o| o["clip_id"].as_u64() == Some(origin)).unwrap();
        assert!(src["origin_clip"].is_null());
        assert_eq!(c["fold"], src["fold"]);
        assert!(c["provenance"]
            .as_str()
            .unwrap()
            .starts_with(&format!("origin {origin}: ")));
    }
}

#[test]
fn prepare_output_does_not_depend_on_jobs() {
    let f = fixture("");
    let other = f.store.with_file_name("store_one_job");
    ok(acrnn(&[
        "prepare",
        "--dataset",
        s(&f.root),
        "--out",
        s(&other),
        "--jobs",
        "1",
    ]));
    for file in ["features.lgt", "store.json"] {
        assert_eq!(
            std::fs::read(f.store.join(file)).unwrap(),
            std::fs::read(other.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn prepare_path_errors_come_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let o = acrnn(&[
        "prepare",
        "--dataset",
        s(&tmp.path().join("nope")),
        "--out",
        s(&tmp.path().join("st")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("dataset root not found"));
    assert!(!tmp.path().join("st").exists());
}

#[test]
fn failing_clip_is_named_and_store_stays_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("data");
    common::write_toy_dataset(&root, 2, 2, 1);
    let bad = std::fs::read_dir(root.join("audio"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::write(&bad, b"RIFF garbage").unwrap();
    let store = tmp.path().join("store");
    let o = acrnn(&["prepare", "--dataset", s(&root), "--out", s(&store)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let name = bad.file_name().unwrap().to_str().unwrap();
    assert!(stderr(&o).contains(name), "{}", stderr(&o));
    assert!(store.join("PARTIAL").exists());
    let o = acrnn(&["cv", "--store", s(&store), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_is_reproducible_and_guards_outputs() {
    let f = fixture("");
    let out_a = f.store.with_file_name("a");
    let out_b = f.store.with_file_name("b");
    for out in [&out_a, &out_b] {
        let text = ok(acrnn(&[
            "train",
            "--config",
            s(&f.config),
            "--store",
            s(&f.store),
            "--fold",
            "1",
            "--seed",
            "7",
            "--out",
            s(out),
        ]));
        assert!(text.contains("fold 1: accuracy"), "{text}");
    }
    for file in ["fold1.acrn", "fold1.json", "fold1_confusion.csv"] {
        assert_eq!(
            std::fs::read(out_a.join(file)).unwrap(),
            std::fs::read(out_b.join(file)).unwrap(),
            "{file}"
        );
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("fold1.json")).unwrap()).unwrap();
    assert_eq!(report["loss_trace"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(out_a.join("fold1_confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let again = acrnn(&[
        "train",
        "--config",
        s(&f.config),
        "--store",
        s(&f.store),
        "--fold",
        "1",
        "--out",
        s(&out_a),
    ]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));

    let bad = acrnn(&[
        "train",
        "--config",
        s(&f.config),
        "--store",
        s(&f.store),
        "--fold",
        "3",
        "--out",
        s(&out_a),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("out of range"));

    let eval = ok(acrnn(&[
        "eval",
        "--checkpoint",
        s(&out_a.join("fold1.acrn")),
        "--store",
        s(&f.store),
        "--fold",
        "1",
    ]));
    assert!(eval.contains("fold 1: accuracy"), "{eval}");
    let wav = std::fs::read_dir(f.root.join("audio"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let eval = ok(acrnn(&[
        "eval",
        "--checkpoint",
        s(&out_a.join("fold1.acrn")),
        "--store",
        s(&f.store),
        s(&wav),
    ]));
    assert!(eval.contains(": class "), "{eval}");
}

#[test]
fn cv_reports_every_fold() {
    let f = fixture("");
    let out = f.store.with_file_name("cv");
    let text = ok(acrnn(&[
        "cv",
        "--config",
        s(&f.config),
        "--store",
        s(&f.store),
        "--out",
        s(&out),
    ]));
    assert!(text.contains("mean"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("cv.json")).unwrap()).unwrap();
    let folds = report["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    assert_ne!(folds[0]["norm"], folds[1]["norm"]);
    let mean =
        (folds[0]["report"]["accuracy"].as_f64().unwrap() + folds[1]["report"]["accuracy"].as_f64().unwrap()) / 2.0;
    assert!((report["mean_accuracy"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(out.join("fold1.acrn").is_file() && out.join("fold2.acrn").is_file());
}

#[test]
fn ablation_grid_writes_table() {
    let f = fixture("");
    let out = f.store.with_file_name("abl");
    ok(acrnn(&[
        "cv",
        "--config",
        s(&f.config),
        "--store",
        s(&f.store),
        "--out",
        s(&out),
        "--ablation",
        "--epochs",
        "1",
    ]));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,fold1,fold2,mean");
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        [
            "none",
            "l2-softmax",
            "l2-sigmoid",
            "l4-softmax",
            "l4-sigmoid",
            "l6-softmax",
            "l6-sigmoid",
            "l8-softmax",
            "l8-sigmoid",
            "l10-softmax",
            "l10-linear"
        ]
    );
}

#[test]
fn cv_rejects_empty_store() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("empty");
    StoreWriter::create(&store)
        .unwrap()
        .finish(StoreMeta {
            format_version: 1,
            sample_rate_hz: 44_100,
            num_classes: 4,
            num_folds: 2,
            class_names: vec![],
            num_records: 0,
            clips: vec![],
        })
        .unwrap();
    let o = acrnn(&[
        "cv",
        "--store",
        s(&store),
        "--out",
        s(&tmp.path().join("r")),
        "--epochs",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("empty"));
}

fn parse_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let text_end = bytes.iter().enumerate().filter(|(_, &b)| b == b'\n').nth(2).unwrap().0;
    let header = std::str::from_utf8(&bytes[..text_end]).unwrap();
    let fields: Vec<&str> = header.split_whitespace().collect();
    assert_eq!(fields[0], "P5");
    assert_eq!(fields[3], "255");
    (
        fields[1].parse().unwrap(),
        fields[2].parse().unwrap(),
        bytes[text_end + 1..].to_vec(),
    )
}

#[test]
fn attention_export_round_trips() {
    let f = fixture("");
    let out = f.store.with_file_name("t");
    ok(acrnn(&[
        "train",
        "--config",
        s(&f.config),
        "--store",
        s(&f.store),
        "--fold",
        "1",
        "--out",
        s(&out),
    ]));
    let wav = out.join("probe.wav");
    // Two segments: 3 s of audio.
    let mut clip = common::silence_then_event(0, common::TOY_LEN / 2, 3);
    clip.samples.extend(clip.samples.clone());
    write_clip(&wav, &clip).unwrap();
    let viz = out.join("viz");
    ok(acrnn(&[
        "attn-viz",
        "--checkpoint",
        s(&out.join("fold1.acrn")),
        s(&wav),
        "--out",
        s(&viz),
    ]));

    let csv = std::fs::read_to_string(viz.join("probe_attention.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("segment_id,t,weight"));
    let mut sums = std::collections::BTreeMap::<usize, f64>::new();
    for l in lines {
        let v: Vec<&str> = l.split(',').collect();
        *sums.entry(v[0].parse().unwrap()).or_default() += v[2].parse::<f64>().unwrap();
    }
    assert_eq!(sums.len(), 3);
    for (_, total) in sums {
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }
    let (w, h, pixels) = parse_pgm(&std::fs::read(viz.join("probe_attention.pgm")).unwrap());
    assert_eq!((w, h), (3 * 128, 128 + 2 + 16));
    assert_eq!(pixels.len(), w * h);

    let o = acrnn(&[
        "attn-viz",
        "--checkpoint",
        s(&out.join("fold1.acrn")),
        s(&wav),
        "--out",
        s(&viz),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn attention_export_refuses_plain_model() {
    let f = fixture("");
    let cfg = write_config(
        f.store.parent().unwrap(),
        "plain.toml",
        &TINY.replace("[model]\n", "[model]\nattention_site = \"none\"\n"),
    );
    let out = f.store.with_file_name("plain");
    ok(acrnn(&[
        "train",
        "--config",
        s(&cfg),
        "--store",
        s(&f.store),
        "--fold",
        "2",
        "--out",
        s(&out),
    ]));
    let wav = std::fs::read_dir(f.root.join("audio"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let o = acrnn(&[
        "attn-viz",
        "--checkpoint",
        s(&out.join("fold2.acrn")),
        s(&wav),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nothing to visualize"), "{}", stderr(&o));
}

fn complexity_rows(text: &str) -> (Vec<(String, u64, u64)>, (u64, u64)) {
    let mut rows = Vec::new();
    let mut total = None;
    for line in text.lines().skip(2) {
        let v: Vec<&str> = line.split_whitespace().collect();
        if v.len() != 3 {
            continue;
        }
        let (Ok(p), Ok(f)) = (v[1].parse::<u64>(), v[2].parse::<u64>()) else {
            continue;
        };
        if v[0] == "total" {
            total = Some((p, f));
        } else {
            rows.push((v[0].to_string(), p, f));
        }
    }
    (rows, total.unwrap())
}

#[test]
fn complexity_table_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(acrnn(&["complexity"]));
    let (rows, (params, flops)) = complexity_rows(&text);
    assert_eq!(rows.iter().map(|r| r.1).sum::<u64>(), params);
    assert_eq!(rows.iter().map(|r| r.2).sum::<u64>(), flops);
    assert!(
        text.lines().any(|l| l.starts_with("published") && l.contains("3.81 M")),
        "{text}"
    );

    let none = write_config(tmp.path(), "none.toml", "[model]\nattention_site = \"none\"\n");
    let (_, (params_none, _)) = complexity_rows(&ok(acrnn(&["complexity", "--config", s(&none)])));
    // U (2H x Ha), b (Ha), w (Ha x 1) with H = 256, Ha = 128.
    let (h, ha) = (256u64, 128u64);
    assert_eq!(params - params_none, 2 * h * ha + ha + ha);
}

#[test]
fn config_errors_exit_with_usage_status() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), "bad.toml", "[train]\nepochs = 3\nlr_initial = \"fast\"\n");
    let o = acrnn(&["complexity", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
    let o = acrnn(&["complexity", "--config", s(&tmp.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(3));
    let o = acrnn(&["train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augment_command_is_seeded() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("in.wav");
    write_clip(&wav, &common::toy_clip(2, 5)).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let text = ok(acrnn(&["augment", s(&wav), "--seed", "3", "--out", s(out)]));
        assert!(text.contains("stretch") && text.contains("pitch"), "{text}");
    }
    for name in ["in.aug0.wav", "in.aug1.wav"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
}
