use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use plumecast::models::{build_crnn, CrnnConfig};

const SMALL: &str = "\
rows = 6
cols = 6
steps = 60
spinup = 10
window = 4
horizon = 12
blocks = 1
filters = 2
penultimate = 2
epochs = 2
batch_size = 8
sensors = 25
noise_seeds = 2
eval_stride = 4
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_plumecast"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.cfg"), SMALL).unwrap();
    ok(
        dir.path(),
        &["synth", "--config", "c.cfg", "--out", "data", "--seed", "4"],
    );
    ok(
        dir.path(),
        &[
            "rasterize",
            "--config",
            "c.cfg",
            "--records",
            "data/sensors.csv",
            "--out",
            "frames",
        ],
    );
    dir
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        "synth",
        "ingest",
        "rasterize",
        "train",
        "predict",
        "eval",
        "robustness",
        "compare",
        "export-maps",
        "config-template",
    ] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in ["--config", "--seed", "--threads", "--deterministic", "--out"] {
            assert!(text.contains(flag), "{sub} help lacks {flag}");
        }
    }
    assert!(bin().arg("--help").output().unwrap().status.success());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(run(p, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(p, &["synth", "--no-such-flag"]).status.code(), Some(1));
    fs::write(p.join("bad.cfg"), "colour = blue\n").unwrap();
    let out = run(p, &["synth", "--config", "bad.cfg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
    assert_eq!(run(p, &["synth"]).status.code(), Some(1), "missing --out");
    assert_eq!(
        run(p, &["train", "--frames", "missing", "--out", "m.bin"])
            .status
            .code(),
        Some(2)
    );
    fs::write(p.join("junk.csv"), "node_id,lat,lon,timestamp,pm25\nn,24.5,121,abc,3\n").unwrap();
    assert_eq!(
        run(p, &["ingest", "--records", "junk.csv", "--out", "s.csv"])
            .status
            .code(),
        Some(2)
    );
    fs::write(p.join("fast.cfg"), "wind_speed = 2\n").unwrap();
    let out = run(p, &["synth", "--config", "fast.cfg", "--out", "d"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CFL"));
}

#[test]
fn non_finite_model_output_exits_with_numeric_failure() {
    let dir = prepared();
    let p = dir.path();
    let cfg = CrnnConfig {
        rows: 6,
        cols: 6,
        window: 4,
        blocks: 1,
        filters: 2,
        penultimate: 2,
        kernel: 3,
    };
    let mut model = build_crnn(cfg, None, 0).unwrap();
    for (_, t) in model.params.iter_mut() {
        t.data_mut().fill(f64::NAN);
    }
    model.save(&p.join("nan.bin")).unwrap();
    let out = run(
        p,
        &["predict", "--model", "nan.bin", "--frames", "frames", "--out", "pred"],
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not finite"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = prepared();
    let p = dir.path();
    assert_eq!(fs::read_dir(p.join("data/truth")).unwrap().count(), 60);
    assert!(p.join("frames/geography.csv").exists());
    ok(
        p,
        &[
            "ingest",
            "--config",
            "c.cfg",
            "--records",
            "data/sensors.csv",
            "--out",
            "series.csv",
        ],
    );
    let series = fs::read_to_string(p.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 25 * 60);

    ok(
        p,
        &[
            "train",
            "--config",
            "c.cfg",
            "--frames",
            "frames",
            "--out",
            "m.bin",
            "--deterministic",
        ],
    );
    let history = fs::read_to_string(p.join("m.bin.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    ok(
        p,
        &[
            "eval",
            "--config",
            "c.cfg",
            "--model",
            "m.bin",
            "--frames",
            "frames",
            "--horizons",
            "12",
            "--out",
            "metrics.txt",
        ],
    );
    let metrics = fs::read_to_string(p.join("metrics.txt")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("model,sigma,horizon,nrmse,accuracy,n"));
    for sigma in ["0", "0.1", "0.2"] {
        let rows = metrics
            .lines()
            .filter(|l| l.starts_with(&format!("crnn,{sigma},")))
            .count();
        assert_eq!(rows, 12, "sigma {sigma}");
    }

    ok(
        p,
        &[
            "predict",
            "--config",
            "c.cfg",
            "--model",
            "m.bin",
            "--frames",
            "frames",
            "--horizon",
            "3",
            "--out",
            "pred",
        ],
    );
    assert_eq!(fs::read_dir(p.join("pred")).unwrap().count(), 3);

    let out = ok(
        p,
        &[
            "compare", "--config", "c.cfg", "--models", "m.bin", "--frames", "frames",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("persistence") && text.contains("crnn"));

    let out = ok(
        p,
        &[
            "robustness",
            "--config",
            "c.cfg",
            "--models",
            "m.bin",
            "--frames",
            "frames",
        ],
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 1 + 3);

    ok(
        p,
        &[
            "export-maps",
            "--config",
            "c.cfg",
            "--model",
            "m.bin",
            "--frames",
            "frames",
            "--out",
            "maps",
        ],
    );
    assert_eq!(fs::read_dir(p.join("maps")).unwrap().count(), 36);
    let pgm = fs::read(p.join("maps/h01_truth.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n6 6\n255\n"));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = prepared();
    let p = dir.path();
    for name in ["a.bin", "b.bin"] {
        ok(
            p,
            &[
                "train",
                "--config",
                "c.cfg",
                "--frames",
                "frames",
                "--out",
                name,
                "--seed",
                "8",
                "--deterministic",
            ],
        );
    }
    assert_eq!(fs::read(p.join("a.bin")).unwrap(), fs::read(p.join("b.bin")).unwrap());
    ok(
        p,
        &[
            "train",
            "--config",
            "c.cfg",
            "--frames",
            "frames",
            "--out",
            "c.bin",
            "--seed",
            "9",
            "--deterministic",
        ],
    );
    assert_ne!(fs::read(p.join("a.bin")).unwrap(), fs::read(p.join("c.bin")).unwrap());
}

#[test]
fn config_template_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["config-template"]);
    fs::write(dir.path().join("t.cfg"), out.stdout).unwrap();
    fs::write(
        dir.path().join("t2.cfg"),
        "steps = 20\nspinup = 0\nrows = 4\ncols = 4\n",
    )
    .unwrap();
    ok(dir.path(), &["synth", "--config", "t2.cfg", "--out", "d"]);
    let out = run(dir.path(), &["synth", "--config", "t.cfg", "--out", "full"]);
    assert!(out.status.success());
}
