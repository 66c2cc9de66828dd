use std::process::Command;

fn placerec(args: &[&str], dir: &std::path::Path) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_placerec"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn unknown_config_key_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "train.lr = 0.1\ntrain.bogus = 3\n").unwrap();
    let (code, _) = placerec(&["--config", conf.to_str().unwrap(), "gen-data"], dir.path());
    assert_eq!(code, 2);
}

#[test]
fn invalid_values_and_usage_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("neg.conf");
    std::fs::write(&conf, "train.margin = -1\n").unwrap();
    assert_eq!(placerec(&["--config", conf.to_str().unwrap(), "gen-data"], dir.path()).0, 2);
    assert_eq!(placerec(&["--config", "/no/such/file", "gen-data"], dir.path()).0, 2);
    assert_eq!(placerec(&["no-such-verb"], dir.path()).0, 2);
}

#[test]
fn gradcheck_reports_each_case() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = placerec(&["gradcheck", "--filter", "softmax"], dir.path());
    assert_eq!(code, 0);
    assert!(out.contains("softmax_rows\t") && out.contains("0 failed"));
    let (code, out) = placerec(&["gradcheck", "--filter", "relu", "--tolerance", "0"], dir.path());
    assert_eq!(code, 3, "{out}");
}

#[test]
fn missing_dataset_is_an_ordinary_failure() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(placerec(&["train"], dir.path()).0, 1);
}

#[test]
fn seed_flag_changes_generated_data() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let conf = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.conf");
    assert_eq!(placerec(&["--config", conf, "--seed", "1", "gen-data"], a.path()).0, 0);
    assert_eq!(placerec(&["--config", conf, "--seed", "2", "gen-data"], b.path()).0, 0);
    let read = |d: &std::path::Path| std::fs::read(d.join("data/scans/p0000_t0.pcf")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}
