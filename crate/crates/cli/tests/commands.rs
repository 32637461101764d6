use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use fmerge_cli::{
    cmd_eval, cmd_extract, cmd_lab, cmd_merge, cmd_sweep, run, LabManifest, Method, ModeArg,
    PipelineConfig, RouterArg, EVAL_HEADER,
};
use fmerge_core::expert::load_bundle;
use fmerge_core::lab::Lab;
use fmerge_core::merge::fr_merge;
use fmerge_core::store::load_checkpoint;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    lab: PathBuf,
    manifest: LabManifest,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let lab = root.join("lab");
    let manifest = cmd_lab(&PipelineConfig {
        out: Some(lab.clone()),
        seed: Some(4),
        ..Default::default()
    })
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        lab,
        manifest,
    }
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn merge_fr(f: &Fixture, name: &str) -> PathBuf {
    let out = f.root.join(name);
    cmd_merge(&PipelineConfig {
        lab: Some(f.lab.clone()),
        out: Some(out.clone()),
        method: Some(Method::Fr),
        rho: Some(0.3),
        ..Default::default()
    })
    .unwrap();
    out
}

#[test]
fn lab_writes_every_artifact_reproducibly() {
    let f = fixture();
    assert_eq!(f.manifest.tasks.len(), 3);
    assert!(f.lab.join(&f.manifest.pretrained).exists());
    for t in &f.manifest.tasks {
        for p in [&t.checkpoint, &t.train_csv, &t.test_csv] {
            assert!(f.lab.join(p).exists(), "{}", p.display());
        }
        assert!(t.finetuned_accuracy >= 0.9, "{}", t.finetuned_accuracy);
    }
    let again = f.root.join("lab2");
    cmd_lab(&PipelineConfig {
        out: Some(again.clone()),
        seed: Some(4),
        ..Default::default()
    })
    .unwrap();
    for name in [
        "pretrained.safetensors",
        "task0.safetensors",
        "task2.safetensors",
    ] {
        assert_eq!(
            fs::read(f.lab.join(name)).unwrap(),
            fs::read(again.join(name)).unwrap(),
            "{name}"
        );
    }
    let header = fs::read_to_string(f.lab.join(&f.manifest.tasks[0].test_csv)).unwrap();
    assert!(header.starts_with("x0,x1,label\n"));
}

#[test]
fn merge_writes_backbone_and_report() {
    let f = fixture();
    let out = merge_fr(&f, "backbone.safetensors");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("backbone.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["method"], "fr");
    assert_eq!(report["task_count"], 3);
    let lambdas: f64 = report["lambdas"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((lambdas - 1.0).abs() < 1e-9);

    // Same result as the library call, and byte-identical on a rerun.
    let lab = Lab::build(&f.manifest.config, 4).unwrap();
    let (expected, _) = fr_merge(lab.pre(), &lab.task_vectors().unwrap(), 0.3).unwrap();
    let written = load_checkpoint(&out).unwrap();
    for ((_, a), (_, b)) in written.iter().zip(expected.iter()) {
        assert_eq!(a.data(), b.data());
    }
    let rerun = merge_fr(&f, "rerun.safetensors");
    assert_eq!(fs::read(&out).unwrap(), fs::read(rerun).unwrap());
}

#[test]
fn every_baseline_runs() {
    let f = fixture();
    for method in [Method::Avg, Method::Ta, Method::Ties, Method::Dare] {
        let out = f.root.join(format!("{}.safetensors", method.name()));
        let o = cmd_merge(&PipelineConfig {
            lab: Some(f.lab.clone()),
            out: Some(out.clone()),
            method: Some(method),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(o.report.method, method.name());
        assert!(out.exists());
    }
}

#[test]
fn single_task_zero_rho_reproduces_the_input() {
    let f = fixture();
    let fine = f.lab.join(&f.manifest.tasks[1].checkpoint);
    let out = f.root.join("one.safetensors");
    cmd_merge(&PipelineConfig {
        pre: Some(f.lab.join(&f.manifest.pretrained)),
        fine: Some(vec![fine.clone()]),
        out: Some(out.clone()),
        rho: Some(0.0),
        ..Default::default()
    })
    .unwrap();
    let a = load_checkpoint(&out).unwrap();
    let b = load_checkpoint(&fine).unwrap();
    for (x, y) in a.flat_values().zip(b.flat_values()) {
        assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
    }
}

#[test]
fn spectrum_dump_covers_every_tensor() {
    let f = fixture();
    let dump = f.root.join("spectra");
    cmd_merge(&PipelineConfig {
        lab: Some(f.lab.clone()),
        out: Some(f.root.join("b.safetensors")),
        dump_spectrum: Some(dump.clone()),
        ..Default::default()
    })
    .unwrap();
    // 3 tasks x 6 tensors.
    assert_eq!(fs::read_dir(&dump).unwrap().count(), 18);
    let csv = fs::read_to_string(dump.join("task0__layer1.weight.csv")).unwrap();
    assert!(csv.starts_with("flat_index,radius,re,im\n"));
    assert_eq!(csv.lines().count(), 1 + 32 * 32);
}

#[test]
fn extract_counts_and_inert_full_density() {
    let f = fixture();
    let backbone = merge_fr(&f, "backbone.safetensors");
    let bundle = f.root.join("experts.bin");
    let o = cmd_extract(&PipelineConfig {
        lab: Some(f.lab.clone()),
        backbone: Some(backbone.clone()),
        out: Some(bundle.clone()),
        d: Some(0.1),
        ..Default::default()
    })
    .unwrap();
    let m = load_checkpoint(&backbone).unwrap().param_count();
    let want = (0.1 * m as f64).ceil() as usize;
    for e in o.experts.experts() {
        assert_eq!(e.entry_count(), want);
    }
    assert_eq!(load_bundle(&bundle).unwrap(), o.experts);

    let full = cmd_extract(&PipelineConfig {
        lab: Some(f.lab.clone()),
        backbone: Some(backbone),
        out: Some(f.root.join("full.bin")),
        d: Some(1.0),
        ..Default::default()
    })
    .unwrap();
    for e in full.experts.experts() {
        assert_eq!(e.mu, 0.0);
        assert_eq!(e.entry_count(), m);
    }
}

#[test]
fn eval_with_inert_bundle_matches_backbone() {
    let f = fixture();
    let backbone = merge_fr(&f, "backbone.safetensors");
    let bundle = f.root.join("full.bin");
    cmd_extract(&PipelineConfig {
        lab: Some(f.lab.clone()),
        backbone: Some(backbone.clone()),
        out: Some(bundle.clone()),
        d: Some(1.0),
        ..Default::default()
    })
    .unwrap();
    let out = f.root.join("eval.csv");
    let report = cmd_eval(&PipelineConfig {
        lab: Some(f.lab.clone()),
        backbone: Some(backbone),
        bundle: Some(bundle),
        router: Some(RouterArg::Perfect),
        out: Some(out.clone()),
        ..Default::default()
    })
    .unwrap();
    let (base, free): (Vec<_>, Vec<_>) = report.rows.iter().partition(|r| r.method == "backbone");
    assert_eq!(base.len(), 3);
    for (b, r) in base.iter().zip(&free) {
        assert_eq!(b.task_id, r.task_id);
        assert_eq!(b.accuracy, r.accuracy);
        assert_eq!(r.router_mode, "perfect");
    }
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().next().unwrap(), EVAL_HEADER);
    assert_eq!(csv.lines().count(), 1 + 6);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 6);
}

#[test]
fn perfect_routing_beats_random_routing() {
    let f = fixture();
    let backbone = merge_fr(&f, "backbone.safetensors");
    let bundle = f.root.join("experts.bin");
    cmd_extract(&PipelineConfig {
        lab: Some(f.lab.clone()),
        backbone: Some(backbone.clone()),
        out: Some(bundle.clone()),
        ..Default::default()
    })
    .unwrap();
    let mean_free = |router: RouterArg, seeds: usize| {
        let r = cmd_eval(&PipelineConfig {
            lab: Some(f.lab.clone()),
            backbone: Some(backbone.clone()),
            bundle: Some(bundle.clone()),
            router: Some(router),
            seeds: Some(seeds),
            out: Some(f.root.join(format!("{router:?}.csv"))),
            ..Default::default()
        })
        .unwrap();
        let free: Vec<f64> = r
            .rows
            .iter()
            .filter(|r| r.method == "free")
            .map(|r| r.accuracy)
            .collect();
        assert_eq!(free.len(), 3 * seeds);
        free.iter().sum::<f64>() / free.len() as f64
    };
    assert!(mean_free(RouterArg::Perfect, 1) >= mean_free(RouterArg::Random, 10));
}

#[test]
fn checksum_mismatch_fails_without_output() {
    let f = fixture();
    let backbone = merge_fr(&f, "backbone.safetensors");
    let bundle = f.root.join("experts.bin");
    cmd_extract(&PipelineConfig {
        lab: Some(f.lab.clone()),
        backbone: Some(backbone),
        out: Some(bundle.clone()),
        ..Default::default()
    })
    .unwrap();
    let other = f.lab.join(&f.manifest.pretrained);
    let out = f.root.join("eval.csv");
    let code = run([
        "fmerge",
        "eval",
        "--lab",
        &s(&f.lab),
        "--backbone",
        &s(&other),
        "--bundle",
        &s(&bundle),
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 1);
    assert!(!out.exists());
    let leftovers: Vec<_> = fs::read_dir(&f.root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn sweep_is_full_factorial() {
    let f = fixture();
    let out = f.root.join("sweep.csv");
    let rows = cmd_sweep(&PipelineConfig {
        lab: Some(f.lab.clone()),
        rhos: Some(vec![0.0, 0.3]),
        modes: Some(vec![ModeArg::High, ModeArg::Low, ModeArg::Band]),
        seeds: Some(2),
        out: Some(out.clone()),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(rows.len(), 2 * 3 * 2);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "rho,mode,mean_accuracy,task0,task1,task2,seed"
    );
    assert_eq!(csv.lines().count(), 1 + rows.len());

    // At rho 0 high and band keep everything; low keeps nothing.
    let lab = Lab::build(&f.manifest.config, 4).unwrap();
    let (plain, _) = fr_merge(lab.pre(), &lab.task_vectors().unwrap(), 0.0).unwrap();
    let unfiltered = lab.accuracies(&plain).unwrap();
    let backbone = lab.accuracies(lab.pre()).unwrap();
    for r in rows.iter().filter(|r| r.rho == 0.0 && r.seed == 4) {
        let want = if r.mode == "low_pass" {
            &backbone
        } else {
            &unfiltered
        };
        assert_eq!(&r.task_accuracy, want, "{}", r.mode);
    }
}

#[test]
fn usage_errors_exit_two() {
    let f = fixture();
    let out = f.root.join("x.safetensors");
    let lab = s(&f.lab);
    let o = s(&out);
    assert_eq!(
        run(["fmerge", "merge", "--lab", &lab, "--method", "bogus", "--out", &o]),
        2
    );
    assert_eq!(
        run(["fmerge", "merge", "--lab", &lab, "--rho", "1.5", "--out", &o]),
        2
    );
    assert_eq!(run(["fmerge", "merge", "--lab", &lab]), 2);
    let missing = s(&f.root.join("nope.safetensors"));
    assert_eq!(
        run([
            "fmerge",
            "extract",
            "--lab",
            &lab,
            "--backbone",
            &missing,
            "--out",
            &o
        ]),
        2
    );
    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"rho": "high"}"#).unwrap();
    assert_eq!(
        run([
            "fmerge",
            "merge",
            "--lab",
            &lab,
            "--out",
            &o,
            "--config",
            &s(&bad)
        ]),
        2
    );
    assert!(!out.exists());

    // The JSON report would overwrite the CSV table.
    let pre = s(&f.lab.join("pretrained.safetensors"));
    let table = s(&f.root.join("eval.json"));
    assert_eq!(
        run([
            "fmerge",
            "eval",
            "--lab",
            &lab,
            "--backbone",
            &pre,
            "--out",
            &table
        ]),
        2
    );
}

#[test]
fn flags_override_config_file() {
    let f = fixture();
    let cfg = f.root.join("cfg.json");
    fs::write(&cfg, r#"{"method": "avg", "rho": 0.9}"#).unwrap();
    let out = f.root.join("m.safetensors");
    let code = run([
        "fmerge",
        "merge",
        "--config",
        &s(&cfg),
        "--lab",
        &s(&f.lab),
        "--method",
        "fr",
        "--rho",
        "0.2",
        "--out",
        &s(&out),
    ]);
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("m.report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "fr");
    assert_eq!(report["rho"], 0.2);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_fmerge");
    let help = Process::new(bin).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("merge"));
    let bad = Process::new(bin)
        .args(["merge", "--method", "bogus"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let missing = Process::new(bin)
        .args([
            "extract",
            "--backbone",
            "/nonexistent/b.safetensors",
            "--out",
            "/tmp/x",
        ])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
}
