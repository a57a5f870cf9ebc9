mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use pareto_debias::io::{self, Dtype};
use pareto_debias::prototypes::{text_id, VariantGroup, VariantSetFile};
use pareto_debias::{Embedding, Modality};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pareto-debias"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn oracle_check_reports_agreement() {
    let out = run(&["oracle", "check", "--trials", "10000", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let line = stdout.lines().find(|l| l.starts_with("max |delta alpha|")).unwrap();
    let value: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value <= 1e-9, "{value}");
}

#[test]
fn oracle_check_rejects_coarse_grid_as_usage_error() {
    let out = run(&["oracle", "check", "--trials", "10", "--grid", "10"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metric_sp_prints_distance_from_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("counts.csv");
    std::fs::write(&counts, "prompt_id,group,count\ndoctor,male,100\ndoctor,female,0\n").unwrap();
    let out = run(&["metric", "sp", "--counts", s(&counts)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "doctor\t0.70711");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let embs = dir.path().join("e.jsonl");
    let mut r = rng(1);
    let e = vec![Embedding::new("a", unit(&mut r, 4), Modality::Text).unwrap()];
    io::save_embeddings(&embs, &e, Dtype::F64).unwrap();
    let out_file = dir.path().join("out.jsonl");
    let missing = dir.path().join("nope.json");

    let out = run(&["debias", "run", "--embeddings", s(&embs), "--subspace", s(&missing), "--out", s(&out_file)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8(out.stderr).unwrap().is_empty());
    assert!(out.stdout.is_empty());

    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["debias", "run", "--embeddings", s(&embs)]).status.code(), Some(1));
    assert_eq!(run(&["synth", "generate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

fn variant_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut r = rng(2);
    let mut file = VariantSetFile { attribute: "gender".into(), groups: vec![] };
    let mut embs = Vec::new();
    for name in ["male", "female", "other"] {
        let anchor = format!("a photo of a {name} person");
        let variants: Vec<String> = (0..3).map(|i| format!("{anchor} #{i}")).collect();
        for t in std::iter::once(&anchor).chain(&variants) {
            embs.push(Embedding::new(text_id(t), unit(&mut r, 32), Modality::Text).unwrap());
        }
        file.groups.push(VariantGroup { name: name.into(), anchor, variants });
    }
    let v = dir.join("variants.json");
    let e = dir.join("variant_texts.jsonl");
    io::write_json(&v, &file).unwrap();
    io::save_embeddings(&e, &embs, Dtype::F64).unwrap();
    (v, e)
}

/// Runs every file-producing command into `dir` and returns the payload files.
fn pipeline(dir: &Path, fixtures: &Path) -> Vec<PathBuf> {
    let ok = |args: &[&str]| {
        let out = run(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let synth = dir.join("synth");
    ok(&["synth", "generate", "--samples-per-cell", "40", "--noise-sigma", "0.2", "--seed", "5", "--out", s(&synth)]);
    let (variants, texts) = (fixtures.join("variants.json"), fixtures.join("variant_texts.jsonl"));
    let protos = dir.join("protos.jsonl");
    ok(&["prototypes", "build", "--variants", s(&variants), "--embeddings", s(&texts), "--out", s(&protos)]);
    let sub = dir.join("sub.json");
    ok(&["subspace", "build", "--prototypes", s(&protos), "--reference", "female", "--out", s(&sub)]);
    let synth_sub = dir.join("synth_sub.json");
    ok(&["subspace", "build", "--prototypes", s(&synth.join("prototypes.jsonl")), "--out", s(&synth_sub)]);
    let debiased = dir.join("debiased.embf");
    ok(&["debias", "run", "--embeddings", s(&synth.join("images.jsonl")), "--subspace", s(&synth_sub), "--out", s(&debiased)]);
    let (images, synth_texts) = (synth.join("images.jsonl"), synth.join("texts.jsonl"));
    let (class_prompts, qrels) = (synth.join("class_prompts.json"), synth.join("qrels.csv"));
    let ws = |extra: &[&str], cmd: &[&str], out: &Path| {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend([
            "--images", s(&images),
            "--texts", s(&synth_texts),
            "--class-prompts", s(&class_prompts),
            "--subspace", s(&synth_sub),
            "--qrels", s(&qrels),
            "--m", "20",
        ]);
        args.extend(extra);
        args.extend(["--out", s(out)]);
        ok(&args);
    };
    let classify = dir.join("classify.json");
    ws(&[], &["eval", "classify"], &classify);
    let retrieve = dir.join("retrieve.json");
    ws(&["--mode", "full_projection_both"], &["eval", "retrieve"], &retrieve);
    let report = dir.join("report.json");
    ws(&["--threads", "2"], &["report"], &report);
    let counts = fixtures.join("counts.csv");
    let sp = dir.join("sp.json");
    ok(&["metric", "sp", "--counts", s(&counts), "--out", s(&sp)]);
    let oracle = dir.join("oracle.json");
    ok(&["oracle", "check", "--trials", "200", "--seed", "3", "--out", s(&oracle)]);

    let mut files = vec![protos, sub, synth_sub, debiased.clone(), classify, retrieve, report, sp, oracle];
    let mut results = debiased.into_os_string();
    results.push(".results.jsonl");
    files.push(results.into());
    for name in ["spec.json", "images.jsonl", "texts.jsonl", "prototypes.jsonl", "subspace.json", "class_prompts.json", "qrels.csv"] {
        files.push(synth.join(name));
    }
    files
}

#[test]
fn every_command_is_byte_deterministic() {
    let fixtures = tempfile::tempdir().unwrap();
    variant_fixture(fixtures.path());
    std::fs::write(fixtures.path().join("counts.csv"), "prompt_id,group,count\na,m,3\na,f,1\nb,m,0\nb,f,2\n").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path(), fixtures.path());
    let fb = pipeline(b.path(), fixtures.path());
    for (x, y) in fa.iter().zip(&fb) {
        let bx = std::fs::read(x).unwrap();
        assert!(!bx.is_empty(), "{}", x.display());
        assert_eq!(bx, std::fs::read(y).unwrap(), "{}", x.display());
    }
    let mut meta = fa[0].clone().into_os_string();
    meta.push(".meta.json");
    let meta: serde_json::Value = io::read_json(Path::new(&meta)).unwrap();
    assert!(meta["created_unix_ms"].is_number());

    let report: serde_json::Value = io::read_json(&a.path().join("report.json")).unwrap();
    assert_eq!(report["config"]["max_skew_log_base"], "e");
    assert_eq!(report["bound_check"]["theorem1_pass"], true);
}
