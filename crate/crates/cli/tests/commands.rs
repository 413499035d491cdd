mod common;

use std::fs;
use std::process::Command;

use artigen_cli::commands::{
    assemble_cmd, column, evaluate_cmd, generate_cmd, load_objects, pose_cmd, synth_corpus, GENERATION_SUMMARY,
};
use artigen_core::corpus::{load_corpus, load_object, save_object};
use artigen_core::exec::Execution;
use artigen_core::generate::GenerateRequest;
use artigen_core::mesh::TriMesh;
use artigen_core::metrics::{Distance, MetricConfig};
use artigen_core::schema::Attribute;

fn fast_metrics() -> MetricConfig {
    MetricConfig {
        points_per_part: 64,
        viou_samples: 200,
        ..MetricConfig::default()
    }
}

#[test]
fn fully_conditioned_generation_returns_the_object() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    common::write_checkpoint(&ckpt);
    for obj in common::objects(4) {
        let req = GenerateRequest::from_object(&obj, &Attribute::ALL, 2, 9);
        let out = dir.path().join(&obj.id);
        let generated = generate_cmd(&ckpt, &req, &out, None, 10).unwrap();
        assert_eq!(generated.len(), 2);
        for g in &generated {
            assert_eq!(g.object.parts, obj.parts);
            assert_eq!(g.object.graph, obj.graph);
            let on_disk = load_object(&out.join("objects").join(format!("{}.json", g.object.id))).unwrap();
            assert_eq!(on_disk.parts, obj.parts);
        }
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join(GENERATION_SUMMARY)).unwrap()).unwrap();
        assert_eq!(summary["samples"][1]["seed"], 10);
    }
}

#[test]
fn generation_assembles_against_a_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    let objs = common::write_corpus(&corpus_dir, 8);
    let ckpt = dir.path().join("model.ckpt");
    common::write_checkpoint(&ckpt);
    let req = GenerateRequest::from_object(&objs[0], &Attribute::ALL, 1, 0);
    let out = dir.path().join("gen");
    let g = generate_cmd(&ckpt, &req, &out, Some(&corpus_dir), 5).unwrap();
    let assembled = out.join("assembled").join(&g[0].object.id);
    for node in 0..objs[0].parts.len() {
        assert!(assembled.join(format!("part_{node}.obj")).exists());
    }
}

#[test]
fn evaluating_a_set_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    common::write_corpus(dir.path(), 6);
    let out = dir.path().join("report.csv");
    let both = [Distance::Id, Distance::Aid];
    let report = evaluate_cmd(
        dir.path(),
        dir.path(),
        &out,
        &both,
        &fast_metrics(),
        Execution::Parallel,
    )
    .unwrap();
    assert_eq!(column(&report, "cov_id"), Some(1.0));
    assert_eq!(column(&report, "cov_aid"), Some(1.0));
    assert!(column(&report, "mmd_id").unwrap() < 1e-9, "{report:?}");
    assert!(column(&report, "mmd_aid").unwrap() < 1e-9, "{report:?}");
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("mmd_id,"));
    assert_eq!(lines.next().unwrap().split(',').count(), 7);
    let summary = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(
        summary
            .lines()
            .any(|l| l.starts_with("cov_aid") && l.ends_with("1.0000")),
        "{summary}"
    );

    // selecting one distance drops the other's columns
    let id_only = evaluate_cmd(
        dir.path(),
        dir.path(),
        &out,
        &[Distance::Id],
        &fast_metrics(),
        Execution::Parallel,
    )
    .unwrap();
    assert!(column(&id_only, "mmd_aid").is_none());
    assert_eq!(column(&id_only, "cov_id"), Some(1.0));
    assert!(fs::read_to_string(&out).unwrap().starts_with("mmd_id,cov_id,mean_aor"));
}

#[test]
fn flat_directories_load_like_corpora() {
    let dir = tempfile::tempdir().unwrap();
    let objs = common::objects(3);
    for o in &objs {
        save_object(o, &dir.path().join(format!("{}.json", o.id))).unwrap();
    }
    let loaded = load_objects(dir.path()).unwrap();
    assert_eq!(loaded.len(), 3);
    assert!(load_objects(&dir.path().join("absent")).is_err());
}

#[test]
fn assembling_a_corpus_object_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    synth_corpus(&corpus_dir, 8, "", 2, 1.0).unwrap();
    let corpus = load_corpus(&corpus_dir).unwrap();
    let target = &corpus.entries[5].object;
    let file = dir.path().join("target.json");
    save_object(target, &file).unwrap();
    let (assembled, selection) = assemble_cmd(&file, &corpus_dir, &dir.path().join("out")).unwrap();
    assert_eq!(selection.top[0].id, target.id);
    for part in &assembled.parts {
        assert_eq!(part.source_id, target.id);
        let reference = corpus.load_mesh(target.mesh_refs[part.node].as_ref().unwrap()).unwrap();
        assert_eq!(part.mesh.vertices.len(), reference.vertices.len());
        for (a, b) in part.mesh.vertices.iter().zip(&reference.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-4);
            }
        }
    }
    assert!(dir.path().join("out/retrieval.json").exists());
}

#[test]
fn binary_reports_structured_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("request.json");
    fs::write(&bad, r#"{"category": "Storage", "nodes": [], "count": 0}"#).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    common::write_checkpoint(&ckpt);
    let out = Command::new(env!("CARGO_BIN_EXE_artigen"))
        .args(["generate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--request")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("gen"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    let fields: Vec<&str> = v["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert!(fields.contains(&"count"), "{v}");
    assert!(fields.contains(&"nodes"), "{v}");

    let missing = Command::new(env!("CARGO_BIN_EXE_artigen"))
        .args([
            "assemble",
            "--abstraction",
            "/nonexistent.json",
            "--corpus",
            "/nonexistent",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8(missing.stderr).unwrap().contains("\"error\""));
}

#[test]
fn binary_synthesizes_and_trains() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let status = Command::new(env!("CARGO_BIN_EXE_artigen"))
        .args([
            "synth-corpus",
            "--count",
            "6",
            "--seed",
            "1",
            "--mix",
            "Storage=1,Table=1",
            "--out",
        ])
        .arg(&corpus)
        .status()
        .unwrap();
    assert!(status.success());
    let run = dir.path().join("run");
    let config = dir.path().join("train.toml");
    fs::write(
        &config,
        format!(
            "[corpus]\ndir = {:?}\n[model]\npreset = \"tiny\"\nslots = 32\n[train]\nepochs = 2\nwarmup_epochs = 1\nbatch = 4\n[output]\ndir = {:?}\n",
            corpus, run
        ),
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_artigen"))
        .args(["train", "--config"])
        .arg(&config)
        .env("CAGE_TRAIN__EPOCHS", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("model.ckpt").exists());
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    // header plus one row per epoch, the env override wins over the file
    assert_eq!(log.lines().count(), 4, "{log}");
}

#[test]
fn pose_exports_one_mesh_per_state() {
    let dir = tempfile::tempdir().unwrap();
    let obj = &common::objects(1)[0];
    let file = dir.path().join("obj.json");
    save_object(obj, &file).unwrap();
    let files = pose_cmd(&file, &dir.path().join("posed"), &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(files.len(), 3);
    for f in &files {
        let mesh = TriMesh::read_obj(f).unwrap();
        // eight corners per box
        assert_eq!(mesh.vertices.len(), 8 * obj.parts.len());
    }
    assert!(pose_cmd(&file, &dir.path().join("bad"), &[1.5]).is_err());
}
