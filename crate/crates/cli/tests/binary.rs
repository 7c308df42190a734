use std::process::Command;

fn mvdistill(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mvdistill")).args(args).output().unwrap()
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[refine]\nsigma = 2.0\n").unwrap();
    let out = mvdistill(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&cfg, "[refine]\nunknown_key = 1\n").unwrap();
    assert_eq!(mvdistill(&["refine", "-c", cfg.to_str().unwrap()]).status.code(), Some(2));

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = mvdistill(&["eval", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("metrics.jsonl"));

    let out = mvdistill(&["refine", "--output", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn synth_then_refine_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    std::fs::write(
        &cfg,
        "[scene]\ngrid_size = 6\n[camera]\nviews = 2\nresolution = 8\nfocal = 9.6\n[render]\nsamples = 8\n[refine]\nsteps = 3\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("run");
    let common = ["--config", cfg.to_str().unwrap(), "--output", out_dir.to_str().unwrap()];
    assert!(mvdistill(&[&["synth"][..], &common].concat()).status.success());
    assert!(mvdistill(&[&["refine"][..], &common, &["--seed", "3"]].concat()).status.success());
    let out = mvdistill(&["eval", out_dir.join("refine").to_str().unwrap(), "--plot"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("metric,value\niterations,3\nviews,2\n"));
    assert!(out_dir.join("refine/scores.png").exists());
}
