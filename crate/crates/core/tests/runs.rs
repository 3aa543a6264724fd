use std::fs;
use std::path::Path;
use std::process::Command;

use molf::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, BLOB_FILE};
use molf::harness::config::RunConfig;
use molf::harness::trace::{export_traces, read_traces};
use molf::harness::train::{checkpoint_dir, train_run, Trainer};
use molf::model::{LoraExpert, MolfModule, Network};
use molf::numerics::Rng;
use molf::scoring::score_experts;
use molf::Error;

fn small(dir: &Path, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(&format!(
        "task.d_out = 10\ntask.d_in = 8\nnet.ranks = 2,4\nrun.batch = 16\nrun.steps = 40\n{extra}"
    ))
    .unwrap();
    cfg.out_dir = dir.to_path_buf();
    cfg
}

#[test]
fn repeated_runs_write_identical_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&dir.path().join("run"), "net.dropout = 0.2\n");
    train_run(&cfg).unwrap();
    let first = fs::read(cfg.out_dir.join("traces.jsonl")).unwrap();
    let first_metrics = fs::read(cfg.out_dir.join("metrics.csv")).unwrap();
    fs::remove_dir_all(&cfg.out_dir).unwrap();
    train_run(&cfg).unwrap();
    assert_eq!(first, fs::read(cfg.out_dir.join("traces.jsonl")).unwrap());
    assert_eq!(
        first_metrics,
        fs::read(cfg.out_dir.join("metrics.csv")).unwrap()
    );
}

#[test]
fn full_top_k_equals_dense_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let dense = small(&dir.path().join("dense"), "opt.scoring = DENSE\n");
    let topk = small(&dir.path().join("topk"), "opt.k_top = 3\n");
    train_run(&dense).unwrap();
    train_run(&topk).unwrap();
    let blob = |c: &RunConfig| fs::read(checkpoint_dir(&c.out_dir, 40).join(BLOB_FILE)).unwrap();
    assert_eq!(blob(&dense), blob(&topk));
}

#[test]
fn molf_e_selection_fractions_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(
        "task.regime = concentrated\ntask.rank = 8\nnet.mode = molf-e\nnet.ranks = 8,128\n",
    )
    .unwrap();
    cfg.set_steps(60);
    cfg.out_dir = dir.path().to_path_buf();
    let summary = train_run(&cfg).unwrap();
    for sel in &summary.selection {
        assert_eq!(sel.fractions.len(), 2);
        assert!((sel.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let exported = export_traces(dir.path()).unwrap();
    assert_eq!(exported.records, 60);
    assert_eq!(summary.class_fractions["fft"], 0.0);
}

#[test]
fn replayed_scores_match_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "run.checkpoint_every = 1\nnet.hidden = 6\n");
    train_run(&cfg).unwrap();
    let records = read_traces(&dir.path().join("traces.jsonl")).unwrap();
    assert_eq!(records.len(), 40 * 2);
    for rec in &records {
        assert!(rec.winners.iter().all(|&w| w < rec.scores.len()));
        let ckpt = load_checkpoint(&checkpoint_dir(dir.path(), rec.step + 1)).unwrap();
        let mi = ckpt
            .network
            .modules
            .iter()
            .position(|m| m.name == rec.module_name)
            .unwrap();
        let states = &ckpt.optimizer.as_ref().unwrap()[mi];
        let scores = score_experts(states, &rec.lr_used, rec.scoring_mode, cfg.optimizer.eps);
        for (s, r) in scores.iter().zip(&rec.scores) {
            let tol = 1e-12 * r.abs().max(f64::MIN_POSITIVE);
            assert!(
                (s.score - r).abs() <= tol,
                "step {} {}: {} vs {r}",
                rec.step,
                rec.module_name,
                s.score
            );
        }
    }
}

#[test]
fn grid_has_modules_by_traced_steps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "net.hidden = 6,5\nrun.trace_every = 4\n");
    train_run(&cfg).unwrap();
    let grid = fs::read_to_string(dir.path().join("winner_grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().collect();
    assert_eq!(rows.len(), 1 + 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 10));
}

#[test]
fn truncated_checkpoint_leaves_trainer_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    trainer.run_until(5, |_| Ok(())).unwrap();
    let path = dir.path().join("c");
    save_checkpoint(&trainer.checkpoint(), &path).unwrap();
    let before = trainer.network.clone();
    let blob = fs::read(path.join(BLOB_FILE)).unwrap();
    fs::write(path.join(BLOB_FILE), &blob[..blob.len() - 3]).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Checkpoint { .. })
    ));
    assert!(trainer.network.modules[0]
        .base
        .bitwise_eq(&before.modules[0].base));
    assert_eq!(trainer.step_index(), 5);
}

fn molf() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_molf"));
    cmd.env_remove("MOLF_SEED").env("RUST_LOG", "error");
    cmd
}

#[test]
fn cli_exit_codes() {
    assert_eq!(molf().arg("check").output().unwrap().status.code(), Some(0));
    assert_eq!(
        molf().arg("frobnicate").output().unwrap().status.code(),
        Some(2)
    );
    assert_eq!(
        molf()
            .args(["train", "--bogus"])
            .output()
            .unwrap()
            .status
            .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "opt.nonsense = 1\n").unwrap();
    let out = molf()
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("opt.nonsense"));
}

#[test]
fn cli_train_is_reproducible_and_seed_precedence_holds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "seed = 3\ntask.d_out = 6\ntask.d_in = 6\nnet.ranks = 2\nrun.steps = 10\nrun.batch = 8\n",
    )
    .unwrap();
    let run = |name: &str, seed: Option<&str>, env: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = molf();
        cmd.args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("MOLF_SEED", e);
        }
        assert!(cmd.status().unwrap().success());
        let echoed = RunConfig::load(&out.join("config")).unwrap();
        (
            echoed.seed,
            fs::read(out.join("traces.jsonl")).unwrap(),
            fs::read(out.join("metrics.csv")).unwrap(),
        )
    };
    let a = run("a", None, None);
    let b = run("b", None, None);
    assert_eq!(a.0, 3);
    assert_eq!((&a.1, &a.2), (&b.1, &b.2));
    assert_eq!(run("c", None, Some("11")).0, 11);
    assert_eq!(run("d", Some("12"), Some("11")).0, 12);
}

#[test]
fn cli_fuse_on_fresh_experts_returns_base() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(2);
    let mut module = MolfModule::new(
        "layer0",
        rng.gaussian_matrix(5, 4, 1.0),
        Some(rng.gaussian_matrix(5, 1, 1.0)),
        vec![
            LoraExpert::new(2, 16.0, 4, 5).unwrap(),
            LoraExpert::new(3, 16.0, 4, 5).unwrap(),
        ],
        0.0,
        true,
    )
    .unwrap();
    module.init_experts(&mut rng, 1.0);
    let base = module.base.clone();
    let ckpt = Checkpoint {
        step: 0,
        network: Network::single(module),
        optimizer: None,
    };
    save_checkpoint(&ckpt, &dir.path().join("in")).unwrap();
    let out = molf()
        .args(["fuse", "--ckpt"])
        .arg(dir.path().join("in"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative deviation 0.000e0"));
    let fused = load_checkpoint(&dir.path().join("out")).unwrap();
    assert!(fused.network.modules[0].base.bitwise_eq(&base));
    assert!(fused.network.modules[0].experts.is_empty());
    assert!(fused.optimizer.is_none());
}

#[test]
fn cli_trace_rebuilds_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), "");
    train_run(&cfg).unwrap();
    fs::remove_file(dir.path().join("winner_grid.csv")).unwrap();
    let status = molf()
        .args(["trace", "--run"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("winner_grid.csv").exists());
}
