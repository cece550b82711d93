use std::path::Path;

use constrained_backprop::harness::checkpoint::{self, Checkpoint, VERSION};
use constrained_backprop::harness::cli::run;
use constrained_backprop::quantizer::quantize_matrix;

fn cbp(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["cbp"];
    argv.extend_from_slice(args);
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn small(dir: &Path) -> Vec<String> {
    [
        format!("output_dir={}", dir.display()),
        "n_train=300".into(),
        "n_eval=100".into(),
        "pretrain_epochs=20".into(),
        "epochs=10".into(),
    ]
    .into_iter()
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

// subcommand first, then the shared settings, then per-test overrides
fn with<'a>(base: &'a [String], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v: Vec<&str> = extra[..1].to_vec();
    v.extend(base.iter().map(String::as_str));
    v.extend_from_slice(&extra[1..]);
    v
}

#[test]
fn pretrain_then_inspect_shows_initial_multiplier_state() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    let (code, out, err) = cbp(&with(&base, &["pretrain"]));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("pretrain.ckpt"));
    let ckpt = dir.path().join("pretrain.ckpt");
    let (code, out, _) = cbp(&["inspect", ckpt.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.lines().any(|l| l == "g 1"), "{out}");
    assert!(out.lines().any(|l| l == "lambda_l1 0"), "{out}");
}

#[test]
fn train_with_ternary_then_inspect_reports_levels() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    let (code, _, err) = cbp(&with(&base, &["train", "--set", "constraint=ternary"]));
    assert_eq!(code, 0, "{err}");
    for f in ["metrics.csv", "histograms.csv", "summary.json", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let ckpt = dir.path().join("final.ckpt");
    let (code, out, _) = cbp(&["inspect", "--set", &format!("checkpoint={}", ckpt.display())]);
    assert_eq!(code, 0);
    let layers: Vec<&str> = out.lines().filter(|l| l.starts_with("layer ")).collect();
    assert_eq!(layers.len(), 3);
    assert!(layers[0].ends_with("exempt") && layers[2].ends_with("exempt"));
    assert!(layers[1].contains("ternary 3 levels"), "{}", layers[1]);
    assert!(out.contains("histogram"));

    // resume from the final checkpoint with a larger budget
    let (code, out, err) = cbp(&with(
        &base,
        &["train", "--set", &format!("checkpoint={}", ckpt.display()), "--set", "epochs=12"],
    ));
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("epochs 12"), "{out}");
    let rows = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2);
}

#[test]
fn eval_on_grid_weights_gives_equal_accuracies() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path());
    assert_eq!(cbp(&with(&base, &["train"])).0, 0);
    let path = dir.path().join("final.ckpt");
    let mut ck = checkpoint::load(&path).unwrap();
    let grids = ck.state.grids.clone();
    for (l, g) in ck.state.network.layers_mut().iter_mut().zip(&grids) {
        if let Some(g) = g {
            l.weights = quantize_matrix(&l.weights, g);
        }
    }
    let on_grid = dir.path().join("on_grid.ckpt");
    checkpoint::save(&on_grid, &ck).unwrap();
    let (code, out, err) = cbp(&with(&base, &["eval", on_grid.to_str().unwrap()]));
    assert_eq!(code, 0, "{err}");
    let nums: Vec<&str> = out.split_whitespace().collect();
    let q = nums[nums.iter().position(|w| *w == "quantized").unwrap() + 1];
    let f = nums[nums.iter().position(|w| *w == "full-precision").unwrap() + 1];
    assert_eq!(q, f, "{out}");
}

#[test]
fn usage_errors_exit_with_one() {
    let (code, _, err) = cbp(&["train", "--set", "not_a_key=3"]);
    assert_eq!(code, 1);
    assert!(err.contains("valid keys") && err.contains("lr_lambda"), "{err}");
    assert_eq!(cbp(&["frobnicate"]).0, 1);
    assert_eq!(cbp(&["train", "--set", "novalue"]).0, 1);
    assert_eq!(cbp(&["inspect"]).0, 1);
    let (code, out, _) = cbp(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("kinetics"));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let (code, _, err) = cbp(&["inspect", missing.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.ckpt"));

    // a checkpoint from a newer format is refused
    let base = small(dir.path());
    assert_eq!(cbp(&with(&base, &["pretrain"])).0, 0);
    let path = dir.path().join("pretrain.ckpt");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let newer = dir.path().join("newer.ckpt");
    std::fs::write(&newer, bytes).unwrap();
    let (code, _, err) = cbp(&["inspect", newer.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("version"), "{err}");
    let _: Checkpoint = checkpoint::load(&path).unwrap();
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# kinetics demo\nkinetics_scenario = equilibrium\nkinetics_method = rk4\ntau_lambda = 50\noutput_dir = {}\n",
            dir.path().display()
        ),
    )
    .unwrap();
    let (code, out, err) = cbp(&["kinetics", "--config", cfg.to_str().unwrap(), "--set", "kinetics_t_end=1000"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("0.150000"), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("kinetics.csv")).unwrap();
    assert!(csv.starts_with("t,w_0,lambda_0,g,L,descent_term,ascent_term\n"));
}

#[test]
fn help_config_lists_every_key() {
    let (code, out, _) = cbp(&["inspect", "--help-config"]);
    assert_eq!(code, 0);
    for (key, _) in constrained_backprop::harness::config::KEYS {
        assert!(out.contains(key), "{key}");
    }
}
