use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &[&str] = &["--set", "channels=4", "--set", "num_blocks=1", "--set", "n_state=4"];

fn glsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glsr"))
        .args(args)
        .env_remove("GLSR_SEED")
        .output()
        .expect("spawn glsr")
}

fn ok(args: &[&str]) -> String {
    let o = glsr(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Asserts a single-line `error: <command>: ...` on stderr and a nonzero exit.
fn fails(args: &[&str], command: &str) -> String {
    let o = glsr(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error: {command}: ")), "{err}");
    err
}

fn gen(dir: &Path, count: &str, seed: &str) {
    ok(&["gen-data", "--out", s(dir), "--count", count, "--size", "32", "--seed", seed]);
}

#[test]
fn gen_data_writes_the_dataset_layout() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("data");
    gen(&d, "3", "5");
    assert_eq!(read(d.join("manifest.txt")), "00000\n00001\n00002\n");
    assert!(read(d.join("spec.txt")).contains("seed = 5"));
    for id in ["00000", "00001", "00002"] {
        for kind in ["hr", "ref", "lr"] {
            assert!(d.join("pairs").join(format!("{id}_{kind}.png")).is_file());
        }
    }
    assert!(read(d.join("run.log")).contains("count = 3"));
}

#[test]
fn same_seed_gives_identical_files_and_env_seed_overrides_config() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "2", "9");
    gen(&b, "2", "9");
    let png = |d: &Path| std::fs::read(d.join("pairs/00001_hr.png")).unwrap();
    assert_eq!(png(&a), png(&b));

    let cfg = t.path().join("gen.cfg");
    std::fs::write(&cfg, "# generator\nseed = 9\ncount = 2\nsize = 32\n").unwrap();
    let c = t.path().join("c");
    let o = Command::new(env!("CARGO_BIN_EXE_glsr"))
        .args(["gen-data", "--config", s(&cfg), "--out", s(&c)])
        .env("GLSR_SEED", "10")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(read(c.join("spec.txt")).contains("seed = 10"));
    assert_ne!(png(&a), png(&c));
}

#[test]
fn train_with_zero_steps_writes_an_initial_checkpoint() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("data");
    gen(&d, "2", "1");
    let out = t.path().join("run");
    let mut args = vec!["train", "--data", s(&d), "--out", s(&out), "--steps", "0"];
    args.extend_from_slice(TINY);
    ok(&args);
    assert_eq!(read(out.join("loss.csv")), "step,loss,l1_sr,l1_ref,celoss\n");
    let bytes = std::fs::read(out.join("checkpoint.glck")).unwrap();
    assert_eq!(&bytes[..4], b"GLCK");
    assert!(read(out.join("run.log")).contains("wrote"));
}

#[test]
fn config_file_is_overridden_by_flags_and_echoed() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("data");
    gen(&d, "2", "1");
    let cfg = t.path().join("train.cfg");
    std::fs::write(&cfg, "channels = 4\nnum_blocks = 1\nn_state = 4\nsteps = 5  # overridden below\nlr = 0.001\n").unwrap();
    let out = t.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&d), "--out", s(&out), "--steps", "2"]);
    let log = read(out.join("run.log"));
    assert!(log.contains("steps = 2") && log.contains("lr = 0.001"), "{log}");
    assert_eq!(read(out.join("loss.csv")).lines().count(), 3);
}

#[test]
fn train_eval_infer_pipeline_is_reproducible() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("data");
    gen(&d, "3", "2");
    let run = |tag: &str| {
        let out = t.path().join(format!("run_{tag}"));
        let mut args = vec!["train", "--data", s(&d), "--out", s(&out), "--steps", "4", "--every", "2"];
        args.extend_from_slice(TINY);
        ok(&args);
        let ev = t.path().join(format!("eval_{tag}"));
        let ck = out.join("checkpoint.glck");
        let stdout = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&d), "--out", s(&ev)]);
        assert!(stdout.contains("bicubic psnr"));
        (read(out.join("loss.csv")), read(ev.join("metrics.csv")), out, ev)
    };
    let (loss_a, metrics_a, out, ev) = run("a");
    let (loss_b, metrics_b, _, _) = run("b");
    assert_eq!(loss_a, loss_b);
    assert_eq!(metrics_a, metrics_b);

    assert_eq!(loss_a.lines().count(), 5);
    assert!(out.join("checkpoint_000002.glck").is_file());
    let rows: Vec<&str> = metrics_a.lines().collect();
    assert_eq!(rows[0], "image_id,psnr_db,ssim");
    let ids: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["00000", "00001", "00002"]);
    for id in ids {
        assert!(ev.join("error_maps").join(format!("{id}_err.png")).is_file());
    }
    assert!(read(ev.join("bicubic.csv")).starts_with("image_id,psnr_db,ssim\n"));

    let inf = t.path().join("infer");
    let ck = out.join("checkpoint.glck");
    let lr = d.join("pairs/00000_lr.png");
    let rf = d.join("pairs/00000_ref.png");
    ok(&["infer", "--checkpoint", s(&ck), "--lr-image", s(&lr), "--ref-image", s(&rf), "--out", s(&inf)]);
    for f in ["sr.png", "rec_ref.png"] {
        let img = glmamba::io::read_png(inf.join(f)).unwrap();
        assert_eq!(img.shape().0, [1, 1, 32, 32]);
    }
}

#[test]
fn resume_continues_the_step_count() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("data");
    gen(&d, "2", "4");
    let a = t.path().join("a");
    let mut args = vec!["train", "--data", s(&d), "--out", s(&a), "--steps", "2"];
    args.extend_from_slice(TINY);
    ok(&args);
    let b = t.path().join("b");
    let ck = a.join("checkpoint.glck");
    let mut args = vec!["train", "--data", s(&d), "--out", s(&b), "--steps", "2", "--resume", s(&ck)];
    args.extend_from_slice(TINY);
    ok(&args);
    let rows = read(b.join("loss.csv"));
    assert!(rows.lines().nth(1).unwrap().starts_with("2,"), "{rows}");

    // A straight four-step run logs the same rows.
    let c = t.path().join("c");
    let mut args = vec!["train", "--data", s(&d), "--out", s(&c), "--steps", "4"];
    args.extend_from_slice(TINY);
    ok(&args);
    let full = read(c.join("loss.csv"));
    assert_eq!(full.lines().skip(3).collect::<Vec<_>>(), rows.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn failures_print_one_error_line() {
    let t = TempDir::new().unwrap();
    let missing = t.path().join("nope");
    let err = fails(&["train", "--data", s(&missing), "--out", s(&t.path().join("o"))], "train");
    assert!(err.contains("manifest.txt"), "{err}");
    fails(&["train", "--set", "chanels=4"], "train");
    fails(&["eval", "--data", s(&missing), "--out", s(&missing)], "eval");
    fails(&["gen-data", "--out", s(&missing), "--size", "48"], "gen-data");
    fails(&["train", "--bogus"], "usage");
    let bad = t.path().join("bad.glck");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let err = fails(&["eval", "--checkpoint", s(&bad), "--data", s(&missing), "--out", s(&missing)], "eval");
    assert!(err.contains("bad magic"), "{err}");
    let o = Command::new(env!("CARGO_BIN_EXE_glsr"))
        .args(["gen-data", "--out", s(&missing)])
        .env("GLSR_SEED", "x")
        .output()
        .unwrap();
    assert!(!o.status.success());
}

#[test]
fn check_runs_the_full_suite_and_passes() {
    let stdout = ok(&["check"]);
    for name in glmamba::suite::CHECKS.iter().map(|c| c.0) {
        assert!(stdout.lines().any(|l| l.starts_with("PASS") && l.contains(name)), "{name} missing:\n{stdout}");
    }
    assert!(stdout.contains("0 failed"));
}

#[test]
fn check_filter_and_empty_selection() {
    let stdout = ok(&["check", "--filter", "celoss"]);
    assert!(stdout.contains("PASS celoss_values"));
    assert!(stdout.contains("1 passed, 0 failed"));
    fails(&["check", "--filter", "no_such_check"], "check");
}

#[test]
fn bench_writes_csv() {
    let t = TempDir::new().unwrap();
    let stdout = ok(&["bench", "--out", s(t.path()), "--grids", "4,8", "--reps", "1"]);
    assert!(stdout.contains("log-log slope"));
    let csv = read(t.path().join("bench.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "grid,tokens,ss2d_seconds,attention_seconds");
    assert!(lines[1].starts_with("4,16,") && lines[2].starts_with("8,64,"));
}
