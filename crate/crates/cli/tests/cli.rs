use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kgvem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgvem")).args(args).output().expect("spawn kgvem")
}

fn ok(args: &[&str]) -> String {
    let out = kgvem(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    let data = dir.join("data");
    fs::write(
        &path,
        format!(
            "# small run\n\
             train_path = {d}/train.tsv\n\
             valid_path = {d}/valid.tsv\n\
             test_path = {d}/test.tsv\n\
             space = real\n\
             dim = 4\n\
             p = 2\n\
             lambda = 0.02\n\
             max_epochs = 4\n\
             patience = 2\n\
             batch_size = 64\n\
             em_estep_steps = 10\n\
             em_steps = 20\n\
             em_batch_size = 64\n\
             lr_mu = 1e-4\n\
             lr_xi = 1e-4\n\
             elbo_every = 10\n\
             elbo_samples = 2\n",
            d = data.display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

fn synth(dir: &Path) {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out-dir",
        data.to_str().unwrap(),
        "--entities",
        "20",
        "--relations",
        "2",
        "--facts",
        "500",
        "--space",
        "real",
        "--dim",
        "4",
        "--lambda",
        "1",
    ]);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "truth.ckpt", "planted_entity_lambdas.csv"] {
        assert!(data.join(f).is_file(), "synth did not write {f}");
    }
}

#[test]
fn phases_run_one_after_another() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("out");
    let out = out.to_str().unwrap();
    let common = ["--config", cfg.as_str(), "--out-dir", out];
    for phase in ["preprocess", "pretrain", "em", "retrain"] {
        let mut args = vec![phase];
        args.extend(common);
        ok(&args);
    }
    for f in ["entities.tsv", "pretrain.ckpt", "em.ckpt", "retrain.ckpt", "em_log.tsv"] {
        assert!(Path::new(out).join(f).is_file(), "missing {f}");
    }

    let ranks = tmp.path().join("ranks.tsv");
    let mut args = vec!["eval", "--split", "valid", "--ranks", ranks.to_str().unwrap()];
    args.extend(common);
    let report = ok(&args);
    assert!(report.contains("mrr\t"), "{report}");
    let dump = fs::read_to_string(&ranks).unwrap();
    assert!(dump.lines().count() > 1);
    assert!(dump.lines().all(|l| l.split('\t').count() == 4));

    let mut args = vec!["export-lambdas"];
    args.extend(common);
    ok(&args);
    let csv = fs::read_to_string(Path::new(out).join("entity_lambdas.csv")).unwrap();
    assert!(csv.starts_with("entity_name,frequency,lambda"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn pipeline_honours_overrides_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let cfg = write_config(tmp.path());
    let run = |name: &str, extra: &[&str]| {
        let out = tmp.path().join(name);
        let mut args = vec!["pipeline", "--config", cfg.as_str(), "--out-dir", out.to_str().unwrap(), "--seed", "5"];
        args.extend(extra);
        ok(&args);
        out
    };
    let a = run("a", &["--dim=3"]);
    let b = run("b", &["--dim", "3", "--sequential"]);
    let saved = fs::read_to_string(a.join("config.txt")).unwrap();
    assert!(saved.lines().any(|l| l.replace(' ', "") == "dim=3"), "{saved}");
    for f in ["report.txt", "em_log.tsv", "retrain_log.tsv", "entity_lambdas.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn errors_name_the_failing_phase() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("out");
    let res = kgvem(&["pipeline", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("startup phase failed"), "{err}");
    assert!(!out.exists());

    synth(tmp.path());
    let res = kgvem(&["em", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("em phase failed"));

    let res = kgvem(&["pretrain", "--no-such-flag", "1"]);
    assert_eq!(res.status.code(), Some(2));
}
