use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pdefm(args: &[&str], data_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdefm")).args(args).env("PDEFM_DATA_DIR", data_dir).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const NANO_CFG: &str = r#"
seed = 3

[model]
preset = "nano"

[train]
epochs = 2
steps_per_epoch = 3
batch_size = 4
warmup_epochs = 1.0

[[datasets]]
name = "burgers1d"
generate = { pde = "burgers1d", n = 10, steps = 4, grid = [1, 1, 32], t_end = 0.2 }

[[datasets]]
name = "diffreact1d"
generate = { pde = "diffreact1d", n = 10, steps = 4, grid = [1, 1, 16], t_end = 0.05 }

[[datasets]]
name = "fhn2d"
generate = { pde = "fhn2d", n = 10, steps = 4, grid = [1, 8, 8], t_end = 0.2 }
"#;

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pdefm(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(pdefm(&["gen-data", "--pde", "navier"], dir.path()).status.code(), Some(2));
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let out = pdefm(&["pretrain", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    let out = pdefm(&["pretrain", "--set", "model.heads=5"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_data_inspect_and_stats() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    let o = out.to_str().unwrap();
    ok(&pdefm(&["gen-data", "--pde", "burgers1d", "--n", "5", "--steps", "3", "--grid", "32", "--nu", "0.01", "--seed", "4", "--out", o], dir.path()));
    let first = fs::read(out.join("data.bin")).unwrap();
    let text = ok(&pdefm(&["inspect", o], dir.path()));
    assert!(text.contains("(b,t,1,1,1,1,32)"), "{text}");
    assert!(text.contains("u[0] mean"), "{text}");
    ok(&pdefm(&["stats", o], dir.path()));
    // same seed, same bytes
    ok(&pdefm(&["gen-data", "--pde", "burgers1d", "--n", "5", "--steps", "3", "--grid", "32", "--nu", "0.01", "--seed", "4", "--out", o], dir.path()));
    assert_eq!(first, fs::read(out.join("data.bin")).unwrap());
    // default location comes from the environment
    ok(&pdefm(&["gen-data", "--pde", "heat3d", "--n", "2", "--steps", "2", "--grid", "8x8x8", "--t-end", "0.01"], dir.path()));
    assert!(dir.path().join("heat3d/meta.json").exists());
    let bad = pdefm(&["gen-data", "--pde", "fhn2d", "--grid", "32"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn pretrain_finetune_evaluate_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("nano.toml");
    fs::write(&cfg, NANO_CFG).unwrap();
    let c = cfg.to_str().unwrap();
    let run = d.join("run");
    let r = run.to_str().unwrap();
    ok(&pdefm(&["pretrain", "--config", c, "--out", r], d));
    for f in ["best.ckpt", "last.ckpt", "curves.csv", "manifest.json", "config.resolved.toml", "run.log"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,split,loss,lr\n"));
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["summary"]["epochs"], 2);
    let log = fs::read_to_string(run.join("run.log")).unwrap();
    assert!(log.contains("seed=3") && log.contains("[model]"));

    // a second run with the same seed reproduces the checkpoint
    let run2 = d.join("run2");
    ok(&pdefm(&["pretrain", "--config", c, "--out", run2.to_str().unwrap()], d));
    assert_eq!(fs::read(run.join("last.ckpt")).unwrap(), fs::read(run2.join("last.ckpt")).unwrap());

    let ck = run.join("best.ckpt");
    let ckp = ck.to_str().unwrap();
    let text = ok(&pdefm(&["inspect", ckp], d));
    assert!(text.contains("embed = 32"), "{text}");

    let ft = d.join("ft");
    let text = ok(&pdefm(
        &["finetune", "--config", c, "--checkpoint", ckp, "--level", "1", "--lora-r-attn", "16", "--lora-r-mlp", "12", "--out", ft.to_str().unwrap()],
        d,
    ));
    // adapters 16*(32+32)*16 + 12*((32+64)+(64+32)), position table 2*64*32,
    // two layer norms 2*2*32
    let trainable = 16 * 64 * 16 + 12 * 192 + 2 * 64 * 32 + 128;
    assert!(text.contains(&format!("trainable {trainable} / total")), "{text}");
    assert!(ft.join("last.ckpt").exists());

    let ev = d.join("eval");
    let text = ok(&pdefm(&["evaluate", "--checkpoint", ckp, "--config", c, "--out", ev.to_str().unwrap()], d));
    assert!(text.contains("burgers1d: nrmse"), "{text}");
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("persistence,fhn2d,v,")), "{csv}");

    let ro = d.join("ro");
    let text = ok(&pdefm(
        &["rollout", "--checkpoint", ckp, "--data", d.join("fhn2d").to_str().unwrap(), "--split", "train", "--steps", "3", "--out", ro.to_str().unwrap()],
        d,
    ));
    let steps: Vec<usize> = text.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, vec![1, 2, 3]);
    assert!(ro.join("rollout.csv").exists());
    let frames = ok(&pdefm(&["inspect", ro.join("frames").to_str().unwrap()], d));
    assert!(frames.contains("trajectories 1 steps 3"), "{frames}");
}
