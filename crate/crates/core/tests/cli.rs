use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vodkit::runner::RunManifest;

fn vodkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vodkit")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vodkit(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn map_line(stdout: &str) -> String {
    stdout.lines().find(|l| l.starts_with("mAP@")).unwrap().to_string()
}

#[test]
fn chained_subcommands_equal_run_for_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth-gen",
            "--preset",
            "degradation",
            "--seeds",
            "2",
            "--out-gt",
            "gt.jsonl",
            "--out-dets",
            "dets.jsonl",
            "--out-spec",
            "spec.toml",
        ],
    );
    ok(
        d,
        &[
            "tfd",
            "--dets",
            "dets.jsonl",
            "--oracle",
            "--gt",
            "gt.jsonl",
            "--out",
            "merged.jsonl",
            "--out-preds",
            "preds.jsonl",
        ],
    );
    let chains: [(&str, Vec<&str>); 4] = [
        ("detector", vec!["link", "--dets", "dets.jsonl", "--mode", "none", "--out", "out.jsonl"]),
        ("seqnms", vec!["link", "--dets", "dets.jsonl", "--mode", "seqnms", "--out", "out.jsonl"]),
        ("tfd+seqnms", vec!["link", "--dets", "merged.jsonl", "--mode", "seqnms", "--out", "out.jsonl"]),
        (
            "tfd+seqtracknms",
            vec![
                "link",
                "--dets",
                "merged.jsonl",
                "--preds",
                "preds.jsonl",
                "--mode",
                "seqtrack",
                "--out",
                "out.jsonl",
            ],
        ),
    ];
    for (variant, link) in chains {
        ok(d, &link);
        let chained = map_line(&ok(d, &["eval", "--preds", "out.jsonl", "--gt", "gt.jsonl"]));
        let run_dir = format!("run-{variant}");
        let stdout = ok(d, &["run", "--spec", "spec.toml", "--variant", variant, "--out-dir", &run_dir]);
        assert_eq!(map_line(&stdout), chained, "{variant}");
        let run_out = Path::new(&run_dir).join("output.jsonl");
        assert_eq!(fs::read(d.join("out.jsonl")).unwrap(), fs::read(d.join(run_out)).unwrap(), "{variant}");
        assert_eq!(fs::read(d.join("gt.jsonl")).unwrap(), fs::read(d.join(&run_dir).join("gt.jsonl")).unwrap());
    }
    assert_eq!(fs::read(d.join("merged.jsonl")).unwrap(), fs::read(d.join("run-tfd+seqnms/merged.jsonl")).unwrap());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["synth-gen", "--preset", "degradation", "--seeds", "5", "--out-gt", "gt.jsonl", "--out-dets", "dets.jsonl"],
    );
    let out = ok(d, &["eval", "--preds", "gt.jsonl", "--gt", "gt.jsonl", "--iou", "0.5"]);
    assert_eq!(map_line(&out), "mAP@0.5 = 1.000000");
}

#[test]
fn detector_on_the_noiseless_scenario_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["run", "--preset", "noiseless", "--variant", "detector", "--out-dir", "o"]);
    assert_eq!(map_line(&out), "mAP@0.5 = 1.000000");
}

#[test]
fn failures_name_the_stage_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = vodkit(d, &["link", "--dets", "missing.jsonl", "--mode", "seqnms", "--out", "r.jsonl"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("link: read detections"), "{err}");
    assert!(!d.join("r.jsonl").exists());

    fs::write(d.join("bad.jsonl"), "{\"video\":\"v\",\"frame\":0}\n").unwrap();
    let out = vodkit(d, &["eval", "--preds", "bad.jsonl", "--gt", "bad.jsonl", "--out", "e.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl:1"));
    assert!(!d.join("e.json").exists());

    ok(d, &["synth-gen", "--preset", "noiseless", "--out-gt", "gt.jsonl", "--out-dets", "dets.jsonl"]);
    let out = vodkit(d, &["link", "--dets", "dets.jsonl", "--mode", "seqtrack", "--out", "r.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs --preds"));

    let out =
        vodkit(d, &["run", "--preset", "noiseless", "--variant", "tfd+seqnms", "--t-merge", "1.5", "--out-dir", "o"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("run: config"));
    assert!(!d.join("o").exists());
}

#[test]
fn flags_override_the_config_file_and_land_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), "T_merge = 0.5\nfinal_nms_iou = 0.4\n").unwrap();
    ok(
        d,
        &[
            "run",
            "--preset",
            "noiseless",
            "--variant",
            "tfd+seqnms",
            "--config",
            "c.toml",
            "--t-merge",
            "0.3",
            "--out-dir",
            "o",
        ],
    );
    let m = RunManifest::load(d.join("o/manifest.json")).unwrap();
    assert_eq!(m.config.pipeline.t_merge, 0.3);
    assert_eq!(m.config.pipeline.final_nms_iou, 0.4);
    assert_eq!(m.seeds, vec![0]);
    assert!(m.timings_ms.contains_key("pipeline"));
}

#[test]
fn plot_collects_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for v in ["detector", "seqnms"] {
        ok(d, &["run", "--preset", "degradation", "--seeds", "0..2", "--variant", v, "--out-dir", v, "--jobs", "2"]);
    }
    ok(d, &["plot", "--results", "detector/eval.json", "seqnms/eval.json", "--out", "maps.csv"]);
    let csv = fs::read_to_string(d.join("maps.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,map");
    assert!(lines[1].starts_with("detector,0."));
    assert!(lines[2].starts_with("seqnms,0."));
}

#[test]
fn learned_head_runs_on_rendered_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("s.toml"),
        vodkit::synth::ScenarioSpec { frames: 3, ..vodkit::synth::ScenarioSpec::noiseless() }.to_toml(),
    )
    .unwrap();
    ok(
        d,
        &[
            "synth-gen",
            "--spec",
            "s.toml",
            "--out-gt",
            "gt.jsonl",
            "--out-dets",
            "dets.jsonl",
            "--out-features",
            "feat",
            "--feature-channels",
            "2",
        ],
    );
    ok(d, &["init-weights", "--out", "w.bin", "--channels", "4", "--head-filters", "8"]);
    ok(d, &["track", "--dets", "dets.jsonl", "--features-dir", "feat", "--weights", "w.bin", "--out", "p.jsonl"]);
    let preds = vodkit::evalio::load_predictions(d.join("p.jsonl")).unwrap();
    // three boxes in each of the first two frames; the last has no successor
    assert_eq!(preds[0].records.len(), 6);
    ok(d, &["tfd", "--dets", "dets.jsonl", "--preds", "p.jsonl", "--out", "m.jsonl"]);

    // a smaller search region and a two-frame gap
    ok(d, &["init-weights", "--out", "w2.bin", "--channels", "4", "--head-filters", "8", "--k", "2"]);
    let head = ["--features-dir", "feat", "--weights", "w2.bin", "--k", "2", "--tau", "2"];
    ok(d, &[&["track", "--dets", "dets.jsonl", "--out", "p2.jsonl"][..], &head].concat());
    assert_eq!(vodkit::evalio::load_predictions(d.join("p2.jsonl")).unwrap()[0].records.len(), 3);
    let out = vodkit(d, &[&["tfd", "--dets", "dets.jsonl", "--out", "m2.jsonl"][..], &head].concat());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--tau"));
    // weights sized for k = 3 do not fit a k = 2 head
    let out = vodkit(
        d,
        &[
            "track",
            "--dets",
            "dets.jsonl",
            "--features-dir",
            "feat",
            "--weights",
            "w.bin",
            "--k",
            "2",
            "--out",
            "p3.jsonl",
        ],
    );
    assert!(!out.status.success());
}
