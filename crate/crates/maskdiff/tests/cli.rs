//! End-to-end runs of the binary: toy data generation, the two-stage
//! pretrain → finetune path, sampling (masked and unmasked) and eval-fd.

use std::fs;
use std::path::Path;
use std::process::Command;

fn maskdiff(args: &[&str], cwd: &Path) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_maskdiff"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn maskdiff");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = maskdiff(&["frobnicate"], dir.path());
    assert_eq!(code, 2);
    assert!(err.contains("usage:"), "{err}");
    let (code, _, _) = maskdiff(&[], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn make_toy_then_two_stage_training_and_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let (code, out, err) = maskdiff(
        &["make-toy", "--dataset", "swissroll", "--n", "256", "--seed", "3", "--out", "toy.mdtn"],
        d,
    );
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("256"));

    fs::write(
        d.join("run.cfg"),
        "model = tiny\npatch = 1\ndataset = toy.mdtn\nseed = 5\nout_dir = out\ntimesteps = 20\n\
         [stage 1]\nmask = patch:0.5\nsteps = 4\nbatch_size = 8\nlr = 1e-3\nschedule = cosine\n\
         [stage 2]\nsteps = 4\nbatch_size = 8\nlr = 1e-3\nschedule = cosine\n",
    )
    .unwrap();

    let (code, _, err) = maskdiff(&["pretrain", "--config", "run.cfg"], d);
    assert_eq!(code, 0, "pretrain failed: {err}");
    assert!(d.join("out/stage1.mdmc").exists());
    assert!(d.join("out/config.echo.cfg").exists());
    assert!(d.join("out/metrics.csv").exists());

    let metrics = fs::read_to_string(d.join("out/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "step,loss,lr,grad_norm");
    assert_eq!(metrics.lines().count(), 5); // header + 4 steps

    // the echoed config re-parses to the same echo
    let echo = fs::read_to_string(d.join("out/config.echo.cfg")).unwrap();
    let reparsed = maskdiff::config::RunConfig::parse(&echo).unwrap();
    assert_eq!(reparsed.echo(), echo);

    let (code, _, err) =
        maskdiff(&["finetune", "--config", "run.cfg", "--init", "out/stage1.mdmc"], d);
    assert_eq!(code, 0, "finetune failed: {err}");
    assert!(d.join("out/stage2.mdmc").exists());

    let (code, _, err) = maskdiff(
        &[
            "sample", "--ckpt", "out/stage2.mdmc", "--sampler", "ddim", "--steps", "10",
            "--n", "3", "--seed", "7", "--out", "samples",
        ],
        d,
    );
    assert_eq!(code, 0, "sample failed: {err}");
    for i in 0..3 {
        assert!(d.join(format!("samples/sample_{i:05}.ppm")).exists());
    }

    // masked (marginal) sampling renders too
    let (code, _, err) = maskdiff(
        &[
            "sample", "--ckpt", "out/stage2.mdmc", "--sampler", "ddpm", "--n", "1",
            "--seed", "7", "--mask", "patch:0.5", "--out", "marg",
        ],
        d,
    );
    assert_eq!(code, 0, "masked sample failed: {err}");

    // determinism: byte-identical outputs for a repeated run
    let (code, _, _) = maskdiff(
        &[
            "sample", "--ckpt", "out/stage2.mdmc", "--sampler", "ddim", "--steps", "10",
            "--n", "3", "--seed", "7", "--out", "samples2",
        ],
        d,
    );
    assert_eq!(code, 0);
    for i in 0..3 {
        let a = fs::read(d.join(format!("samples/sample_{i:05}.ppm"))).unwrap();
        let b = fs::read(d.join(format!("samples2/sample_{i:05}.ppm"))).unwrap();
        assert_eq!(a, b, "sample {i} differs between runs");
    }
}

#[test]
fn eval_fd_of_identical_sets_prints_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, _, err) = maskdiff(
        &["make-toy", "--dataset", "textures", "--n", "32", "--side", "8", "--classes", "2",
          "--seed", "1", "--out", "tex.mdtn"],
        d,
    );
    assert_eq!(code, 0, "{err}");
    let (code, out, err) = maskdiff(
        &["eval-fd", "--set-a", "tex.mdtn", "--set-b", "tex.mdtn", "--extractor", "pixel:16",
          "--seed", "7"],
        d,
    );
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.trim(), "0.000000");
}

#[test]
fn eval_fd_with_external_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // two small feature matrices with different means
    let a = maskdiff::compute::Tensor::new(vec![4, 2], vec![0.0f32; 8]).unwrap();
    let b = maskdiff::compute::Tensor::new(vec![4, 2], vec![1.0f32; 8]).unwrap();
    maskdiff::data::write_raw_tensor(&d.join("a.mdtn"), &a).unwrap();
    maskdiff::data::write_raw_tensor(&d.join("b.mdtn"), &b).unwrap();
    let (code, out, err) = maskdiff(
        &["eval-fd", "--set-a", "a.mdtn", "--set-b", "b.mdtn", "--extractor",
          "external-features"],
        d,
    );
    assert_eq!(code, 0, "{err}");
    // zero covariance both sides, mean offset (1,1) -> FD = 2
    assert_eq!(out.trim(), "2.000000");
}

#[test]
fn pretrain_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    maskdiff(
        &["make-toy", "--dataset", "swissroll", "--n", "128", "--seed", "2", "--out", "toy.mdtn"],
        d,
    );
    let cfg = |out: &str, every: &str| {
        format!(
            "model = tiny\npatch = 1\ndataset = toy.mdtn\nseed = 11\nout_dir = {out}\n\
             timesteps = 10\ncheckpoint_every = {every}\n\
             [stage 1]\nmask = patch:0.5\nsteps = 6\nbatch_size = 4\nlr = 1e-3\n",
        )
    };
    fs::write(d.join("a.cfg"), cfg("outa", "0")).unwrap();
    fs::write(d.join("b.cfg"), cfg("outb", "4")).unwrap();
    fs::write(d.join("c.cfg"), cfg("outc", "0")).unwrap();

    let (code, _, err) = maskdiff(&["pretrain", "--config", "a.cfg"], d);
    assert_eq!(code, 0, "{err}");

    // run b with a rolling checkpoint every 4 steps (so latest.mdmc holds
    // step 4 of 6), then finish the remaining steps from that checkpoint
    let (code, _, err) = maskdiff(&["pretrain", "--config", "b.cfg"], d);
    assert_eq!(code, 0, "{err}");
    let (code, _, err) =
        maskdiff(&["pretrain", "--config", "c.cfg", "--resume", "outb/latest.mdmc"], d);
    assert_eq!(code, 0, "{err}");

    let a = fs::read(d.join("outa/stage1.mdmc")).unwrap();
    let b = fs::read(d.join("outb/stage1.mdmc")).unwrap();
    let c = fs::read(d.join("outc/stage1.mdmc")).unwrap();
    assert_eq!(a, b, "checkpoint bytes differ between cadenced and plain runs");
    assert_eq!(a, c, "resumed run does not reproduce the uninterrupted checkpoint");
}
