use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use vine::config::Config;

fn vine() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vine"));
    cmd.env_remove("VINE_SEED");
    cmd
}

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tiny() -> PathBuf {
    configs().join("tiny.conf")
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("spawn vine")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<_> = err.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {err}");
    assert!(lines[0].starts_with("error: "), "stderr: {err}");
}

#[test]
fn shipped_configs_match_builtin_presets() {
    let default = Config::load(&configs().join("default.conf")).unwrap();
    assert_eq!(default, Config::default());
    assert_eq!(Config::load(&tiny()).unwrap(), Config::tiny());
}

#[test]
fn help_lists_every_config_key_with_default() {
    let o = run(vine().arg("--help"));
    assert!(o.status.success());
    let help = stdout(&o);
    for (key, default, _) in Config::documented_defaults() {
        let line = help
            .lines()
            .find(|l| l.split_whitespace().next() == Some(key))
            .unwrap_or_else(|| panic!("{key} missing from help"));
        if !default.is_empty() {
            assert!(line.contains(&format!("= {default}")), "{line}");
        }
    }
    let listed = help.lines().filter(|l| l.starts_with("  ") && l.contains(" = ")).count();
    assert_eq!(listed, Config::KEYS.len());
}

#[test]
fn gradcheck_passes_on_tiny() {
    let o = run(vine().arg("gradcheck").arg("--config").arg(tiny()));
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains(" 0 failed"));
}

#[test]
fn training_twice_gives_identical_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let ckpt = dir.path().join(format!("run{i}.ckpt"));
        let log = dir.path().join(format!("run{i}.log"));
        let o = run(vine()
            .arg("train")
            .arg("--config")
            .arg(tiny())
            .arg("--out-checkpoint")
            .arg(&ckpt)
            .arg("--log")
            .arg(&log));
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((fs::read(&ckpt).unwrap(), fs::read_to_string(&log).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let log = &outputs[0].1;
    assert_eq!(log.lines().count(), Config::tiny().train_episodes);
    for line in log.lines() {
        assert_eq!(line.split_whitespace().count(), 6, "{line}");
    }
}

#[test]
fn seed_env_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for seed in ["0", "7"] {
        let ckpt = dir.path().join(format!("s{seed}.ckpt"));
        let o = run(vine()
            .env("VINE_SEED", seed)
            .arg("train")
            .arg("--config")
            .arg(tiny())
            .arg("--out-checkpoint")
            .arg(&ckpt));
        assert!(o.status.success(), "{}", stderr(&o));
        bytes.push(fs::read(&ckpt).unwrap());
    }
    assert_ne!(bytes[0], bytes[1]);
}

#[test]
fn eval_reports_metrics_and_dumps_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    let o = run(vine()
        .arg("train")
        .arg("--config")
        .arg(tiny())
        .arg("--out-checkpoint")
        .arg(&ckpt));
    assert!(o.status.success(), "{}", stderr(&o));

    let dump = dir.path().join("masks");
    let o = run(vine()
        .arg("eval")
        .arg("--config")
        .arg(tiny())
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--episodes")
        .arg("3")
        .arg("--dump-masks")
        .arg(&dump));
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let miou: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("miou\t"))
        .expect("miou line")
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&miou));
    for i in 0..3 {
        let pred = fs::read(dump.join(format!("{i:05}_pred.pgm"))).unwrap();
        assert!(pred.starts_with(b"P"));
        assert!(dump.join(format!("{i:05}_prior.pgm")).exists());
    }
}

#[test]
fn eval_rejects_checkpoint_from_other_config() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("tiny.ckpt");
    let o = run(vine()
        .arg("train")
        .arg("--config")
        .arg(tiny())
        .arg("--out-checkpoint")
        .arg(&ckpt));
    assert!(o.status.success());
    let o = run(vine().arg("eval").arg("--checkpoint").arg(&ckpt).arg("--episodes").arg("1"));
    assert_one_line_error(&o);
}

#[test]
fn gen_data_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = run(vine()
        .arg("gen-data")
        .arg("--config")
        .arg(tiny())
        .arg("--out")
        .arg(&out)
        .arg("--count")
        .arg("2")
        .arg("--split")
        .arg("novel")
        .arg("--pgm"));
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(!manifest.is_empty());
    for name in ["00000_query.pgm", "00000_query_mask.pgm", "00001_support0.pgm", "00001_support0_mask.pgm"] {
        assert!(out.join(name).exists(), "{name}");
    }

    let again = dir.path().join("again");
    let o = run(vine()
        .arg("gen-data")
        .arg("--config")
        .arg(tiny())
        .arg("--out")
        .arg(&again)
        .arg("--count")
        .arg("2")
        .arg("--split")
        .arg("novel"));
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(again.join("manifest.txt")).unwrap(), manifest);
}

#[test]
fn unknown_config_key_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "model.channels = 8\nmodel.widht = 3\n").unwrap();
    let o = run(vine().arg("gradcheck").arg("--config").arg(&cfg));
    assert_one_line_error(&o);
    assert!(stderr(&o).contains("model.widht"));
}

#[test]
fn invalid_value_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "data.image_size = 18\n").unwrap();
    let o = run(vine().arg("gradcheck").arg("--config").arg(&cfg));
    assert_one_line_error(&o);
}

#[test]
fn missing_files_are_one_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(vine().arg("train").arg("--config").arg(dir.path().join("nope.conf")).arg("--out-checkpoint").arg(dir.path().join("x")));
    assert_one_line_error(&o);
    let o = run(vine().arg("eval").arg("--config").arg(tiny()).arg("--checkpoint").arg(dir.path().join("nope.ckpt")));
    assert_one_line_error(&o);
}

#[test]
fn bad_seed_env_is_rejected() {
    let o = run(vine().env("VINE_SEED", "abc").arg("gradcheck").arg("--config").arg(tiny()));
    assert_one_line_error(&o);
}
