//! End-to-end drives of the installed binary: every subcommand, exit-code
//! discipline, seed precedence, and rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_checkerboard"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("checkerboard_cli_{tag}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout_of(cmd: &mut Command) -> String {
    String::from_utf8(run_ok(cmd).stdout).unwrap()
}

/// One `error:` line on stderr and a nonzero exit.
fn expect_one_line_error(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got: {stderr:?}");
    assert!(lines[0].starts_with("error: "), "unexpected error line: {stderr:?}");
}

fn micro_config(dir: &Path, name: &str) -> PathBuf {
    let config = format!(
        r#"{{
  "name": "{name}",
  "model": {{
    "layers": 2, "dim": 16, "heads": 2, "vocab": 2, "classes": 2,
    "embed_dim": 6, "mlp_factor": 2, "mix_layers": 1, "ratio": "x2", "side": 2
  }},
  "train": {{
    "steps": 40,
    "optimizer": {{ "lr": 0.003, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.01 }},
    "parallelism_candidates": [1, 2],
    "label_dropout": 0.1,
    "seed": 7,
    "log_every": 20
  }},
  "sampler": {{ "parallelism": 2, "cfg_scale": 1.0, "cfg_warmup_steps": 0, "temperature": 1.0, "seed": 11 }},
  "distribution": {{
    "kind": "coupled", "side": 2, "vocab": 2, "coupling": 0.4,
    "field": [[0.3, -0.3], [-0.3, 0.3]]
  }},
  "train_examples": 16,
  "eval_samples": 120,
  "data_seed": 5,
  "gibbs": null,
  "checkpoint_every": 0
}}
"#
    );
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    path
}

#[test]
fn order_gen_and_check_round_trip() {
    let dir = temp_dir("order");
    let out = dir.join("order.json");
    run_ok(bin().args(["order", "gen", "--side", "8", "--out"]).arg(&out));
    let text = stdout_of(bin().args(["order", "check", "--in"]).arg(&out));
    assert!(text.starts_with("ok (64 cells"), "unexpected: {text}");

    // A duplicated cell is no longer a permutation: check must fail.
    let mut pairs: Vec<[usize; 2]> =
        serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    pairs[1] = pairs[0];
    let bad = dir.join("bad.json");
    fs::write(&bad, serde_json::to_vec(&pairs).unwrap()).unwrap();
    expect_one_line_error(bin().args(["order", "check", "--in"]).arg(&bad));
}

#[test]
fn order_gen_rectangular() {
    let dir = temp_dir("order_rect");
    let out = dir.join("order.json");
    let text = stdout_of(
        bin()
            .args(["order", "gen", "--side", "8", "--height", "3", "--width", "5", "--out"])
            .arg(&out),
    );
    assert!(text.contains("(15 cells, 3x5)"), "unexpected: {text}");
    run_ok(bin().args(["order", "check", "--in"]).arg(&out));
}

#[test]
fn schedule_show_reports_seventeen_steps() {
    for (ratio, p) in [("x2", "4"), ("x4", "8")] {
        let text = stdout_of(bin().args([
            "schedule", "show", "--ratio", ratio, "--side", "16", "--p", p,
        ]));
        let view: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(view["total_steps"], 17, "ratio {ratio} p {p}: {text}");
    }
}

#[test]
fn mask_dump_emits_visible_ranges() {
    let dir = temp_dir("mask");
    let out = dir.join("mask.json");
    run_ok(
        bin()
            .args(["mask", "dump", "--ratio", "x2", "--side", "4", "--p", "4", "--out"])
            .arg(&out),
    );
    let rows: Vec<[usize; 2]> = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    // Class token, then scales of sides 1, 2, 4.
    assert_eq!(rows.len(), 1 + 1 + 4 + 16);
    assert_eq!(rows[0], [0, 1]);
    for pair in rows.windows(2) {
        assert!(pair[0][1] <= pair[1][1], "visible ends must be nondecreasing");
    }
    assert_eq!(rows.last().unwrap()[1], rows.len());
}

#[test]
fn train_sample_rope_and_oracle_chain() {
    let dir = temp_dir("chain");
    let config = micro_config(&dir, "chain");
    let train_out = dir.join("run");
    run_ok(bin().args(["train", "--config"]).arg(&config).arg("--out").arg(&train_out));
    let ckpt = train_out.join("model.ckbd");
    assert!(ckpt.exists());
    assert!(train_out.join("loss.csv").exists());

    // Sample a grid with a trace.
    let grid_path = dir.join("grid.json");
    let trace_path = dir.join("trace.csv");
    run_ok(
        bin()
            .args(["sample", "--checkpoint"])
            .arg(&ckpt)
            .args(["--class", "1", "--p", "2", "--cfg", "1.5", "--seed", "3", "--out"])
            .arg(&grid_path)
            .arg("--trace")
            .arg(&trace_path),
    );
    let grid: serde_json::Value = serde_json::from_slice(&fs::read(&grid_path).unwrap()).unwrap();
    assert_eq!(grid["side"], 2);
    assert_eq!(grid["tokens"].as_array().unwrap().len(), 4);
    let trace = fs::read_to_string(&trace_path).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "step,scale,block,x,y,token,entropy_nats");
    // One row per generated cell: the 1x1 scale plus the 2x2 scale.
    assert_eq!(lines.len(), 1 + 1 + 4);

    // Mixing weights: header plus one row per (mixing layer, head).
    let rope = stdout_of(bin().args(["rope", "inspect", "--checkpoint"]).arg(&ckpt));
    let rope_lines: Vec<&str> = rope.lines().collect();
    assert_eq!(rope_lines[0], "layer,head,alpha");
    assert_eq!(rope_lines.len(), 3);
    for line in &rope_lines[1..] {
        let alpha: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(alpha > 0.0 && alpha < 1.0);
    }

    // Full run reuses the trained artifacts, then the oracle scores them.
    let run_dir = dir.join("run");
    run_ok(
        bin()
            .args(["experiment", "run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&run_dir),
    );
    let table = dir.join("table.json");
    run_ok(
        bin()
            .args(["oracle", "enumerate", "--kind", "ising", "--side", "2", "--j", "0.4", "--h", "0.3", "--out"])
            .arg(&table),
    );
    let eval = stdout_of(
        bin()
            .args(["oracle", "eval", "--samples"])
            .arg(run_dir.join("samples_class0.json"))
            .arg("--table")
            .arg(&table)
            .args(["--class", "0"]),
    );
    assert!(eval.starts_with("tv="), "unexpected: {eval}");
    assert!(eval.contains("ci95="), "unexpected: {eval}");
    let tv: f64 = eval
        .split_whitespace()
        .next()
        .unwrap()
        .trim_start_matches("tv=")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&tv));

    // Plot data over the finished run.
    let runs_root = dir.join("sweep");
    fs::create_dir_all(&runs_root).unwrap();
    fs::rename(&run_dir, runs_root.join("chain")).unwrap();
    let plots = dir.join("plots");
    run_ok(bin().args(["plots", "emit", "--runs"]).arg(&runs_root).arg("--out").arg(&plots));
    for name in ["tv_vs_total_steps.dat", "tv_vs_steps_per_scale.dat", "entropy_by_step.dat"] {
        assert!(plots.join(name).exists(), "missing {name}");
    }
}

#[test]
fn experiment_rerun_is_byte_identical() {
    let dir = temp_dir("determinism");
    let config = micro_config(&dir, "determinism");
    let (a, b) = (dir.join("a"), dir.join("b"));
    run_ok(bin().args(["experiment", "run", "--config"]).arg(&config).arg("--out").arg(&a));
    run_ok(bin().args(["experiment", "run", "--config"]).arg(&config).arg("--out").arg(&b));
    let ma = fs::read(a.join("manifest.json")).unwrap();
    let mb = fs::read(b.join("manifest.json")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, mb, "fresh reruns must produce identical artifact hashes");
}

#[test]
fn seed_precedence_flag_env_config() {
    let dir = temp_dir("seeds");
    let config = micro_config(&dir, "seeds");

    let run = |tag: &str, env: Option<&str>, flag: Option<&str>| -> Vec<u8> {
        let out = dir.join(tag);
        let mut cmd = bin();
        cmd.args(["train", "--config"]).arg(&config).arg("--out").arg(&out);
        if let Some(seed) = env {
            cmd.env("CHECKERBOARD_SEED", seed);
        }
        if let Some(seed) = flag {
            cmd.args(["--seed", seed]);
        }
        run_ok(&mut cmd);
        fs::read(out.join("loss.csv")).unwrap()
    };

    let base = run("base", None, None); // config seed 7
    let env_override = run("env", Some("123"), None); // env beats config
    let flag_beats_env = run("flag", Some("123"), Some("7")); // flag beats env
    assert_ne!(base, env_override, "CHECKERBOARD_SEED must change the training stream");
    assert_eq!(base, flag_beats_env, "--seed must take precedence over the environment");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = temp_dir("errors");
    expect_one_line_error(bin().args(["order", "check", "--in", "/nonexistent.json"]));
    expect_one_line_error(
        bin().args(["sample", "--checkpoint", "/nonexistent.ckbd", "--class", "0", "--out"])
            .arg(dir.join("g.json")),
    );
    expect_one_line_error(
        bin()
            .args(["oracle", "enumerate", "--kind", "bogus", "--side", "2", "--out"])
            .arg(dir.join("t.json")),
    );
    // Oversized state spaces are refused, not attempted.
    expect_one_line_error(
        bin()
            .args(["oracle", "enumerate", "--kind", "ising", "--side", "6", "--out"])
            .arg(dir.join("t.json")),
    );

    // Usage errors exit 2; help exits 0.
    let usage = bin().args(["schedule", "show", "--side", "16"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    assert!(bin().arg("--help").output().unwrap().status.success());
}
