use std::path::Path;
use std::process::{Command, Output};

use eegvit::data::TrialSet;
use eegvit::gradcheck::CASES;
use eegvit::tensor::Tensor;
use eegvit::weights::write_archive;

fn eegvit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eegvit"))
        .args(args)
        .current_dir(dir)
        .env_remove("EEGVIT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, out: &str, n: &str, subjects: &str) {
    let o = eegvit(dir, &["synth", "--n", n, "--subjects", subjects, "--seed", "7", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synth_writes_a_loadable_deterministic_file() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a.evtd", "100", "5");
    synth(dir.path(), "b.evtd", "100", "5");
    let set = TrialSet::load(&dir.path().join("a.evtd")).unwrap();
    assert_eq!(set.len(), 100);
    assert_eq!(set.subject_ids().len(), 5);
    let a = std::fs::read(dir.path().join("a.evtd")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.evtd")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = eegvit(d, &["synth", "--noise-std", "-1", "--out", "x.evtd"]);
    assert_eq!(code(&o), 2);
    assert!(!d.join("x.evtd").exists());
    assert_eq!(code(&eegvit(d, &["synth", "--frobnicate", "--out", "x.evtd"])), 2);
    assert_eq!(code(&eegvit(d, &["gradcheck", "--dtype", "real32"])), 2);
    assert_eq!(code(&eegvit(d, &["synth", "--out", "no/such/dir/x.evtd"])), 2);
    assert_eq!(code(&eegvit(d, &["--help"])), 0);
    assert_eq!(code(&eegvit(d, &["train", "--help"])), 0);
    assert!(!stdout(&eegvit(d, &["gradcheck", "--help"])).contains("inject"));
}

#[test]
fn thread_cap_must_be_a_positive_integer() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_eegvit"))
        .args(["inspect", "--weights", "none.evtw"])
        .current_dir(dir.path())
        .env("EEGVIT_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("EEGVIT_THREADS"));
}

#[test]
fn config_file_values_yield_to_flags_and_unknown_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# synthetic set\nn = 30\nsubjects=3\nseed=1\nout=cfg.evtd\n").unwrap();
    let o = eegvit(d, &["synth", "--config", "run.cfg", "--n", "12"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echo = stderr(&o);
    assert!(echo.contains("n=12\n") && echo.contains("subjects=3\n") && echo.contains("noise-std=5\n"), "{echo}");
    assert_eq!(TrialSet::load(&d.join("cfg.evtd")).unwrap().len(), 12);

    std::fs::write(d.join("bad.cfg"), "n=3\nepochz=2\n").unwrap();
    let o = eegvit(d, &["synth", "--config", "bad.cfg", "--out", "y.evtd"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epochz"));
    assert!(!d.join("y.evtd").exists());
}

#[test]
fn weights_flag_pairs_with_pretrained_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.evtd", "30", "3");
    let o = eegvit(d, &["train", "--data", "s.evtd", "--variant", "eegvit-pre"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--weights"));
    let o = eegvit(d, &["train", "--data", "s.evtd", "--variant", "vit", "--weights", "w.evtw"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&eegvit(d, &["train", "--data", "s.evtd", "--variant", "vit-base"])), 2);
}

#[test]
fn reduced_train_eval_inspect_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.evtd", "60", "4");
    let train = [
        "train", "--data", "s.evtd", "--arch", "reduced", "--epochs", "2", "--batch", "16", "--lr", "1e-3",
        "--seed", "3",
    ];
    let mut args = train.to_vec();
    args.extend(["--out-model", "m.evtw", "--report", "r.txt"]);
    let o = eegvit(d, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(d.join("r.txt")).unwrap();
    assert!(stdout(&o).contains(&report));
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("epoch=0 lr=0.001 train_mse="));
    assert!(lines[3].starts_with("test_rmse_px=") && lines[3].ends_with("seed=3 variant=eegvit"));

    let mut again = train.to_vec();
    again.extend(["--report", "r2.txt"]);
    assert_eq!(code(&eegvit(d, &again)), 0);
    assert_eq!(std::fs::read_to_string(d.join("r2.txt")).unwrap(), report);

    let o = eegvit(d, &["eval", "--data", "s.evtd", "--model", "m.evtw", "--baseline", "naive"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["model", "naive"] {
        let row = out.lines().find(|l| l.starts_with(name)).unwrap();
        let v: Vec<f64> = row.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 4);
        assert!((v[1] - v[0] / 2.0).abs() < 1e-4 && (v[3] - v[2] / 2.0).abs() < 1e-4, "{row}");
    }

    let o = eegvit(d, &["inspect", "--weights", "m.evtw"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("encoder.1.mlp.fc2.weight"));
    assert!(stdout(&o).contains("49 tensors, 150362 parameters"));

    // A model file carries encoder.* tensors, so it can seed a pretrained run.
    let o = eegvit(
        d,
        &[
            "train", "--data", "s.evtd", "--arch", "reduced", "--epochs", "1", "--batch", "32", "--variant",
            "eegvit-pre", "--weights", "m.evtw",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("imported 34 tensors"));
    assert!(stdout(&o).contains("variant=eegvit-pre"));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.evtd", "60", "4");
    let o = eegvit(
        d,
        &["train", "--data", "s.evtd", "--arch", "reduced", "--epochs", "2", "--batch", "32", "--lr", "1e30"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn eval_rejects_mismatched_archives() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "s.evtd", "30", "3");
    let t = Tensor::<f32>::scalar(1.0);
    write_archive(&d.join("odd.evtw"), [("x", &t)]).unwrap();
    assert_eq!(code(&eegvit(d, &["eval", "--data", "s.evtd", "--model", "odd.evtw"])), 2);
}

#[test]
fn inspect_empty_and_truncated_archives() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_archive(&d.join("e.evtw"), std::iter::empty::<(&str, &Tensor<f32>)>()).unwrap();
    let o = eegvit(d, &["inspect", "--weights", "e.evtw"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 tensors"));

    let t = Tensor::new(&[4, 4], vec![0.5f32; 16]).unwrap();
    write_archive(&d.join("f.evtw"), [("w", &t)]).unwrap();
    let bytes = std::fs::read(d.join("f.evtw")).unwrap();
    std::fs::write(d.join("cut.evtw"), &bytes[..bytes.len() - 3]).unwrap();
    assert_eq!(code(&eegvit(d, &["inspect", "--weights", "cut.evtw"])), 2);
}

#[test]
fn gradcheck_lists_every_case_once_and_names_faults() {
    let dir = tempfile::tempdir().unwrap();
    let o = eegvit(dir.path(), &["gradcheck", "--seed", "0", "--dtype", "real64"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for case in CASES {
        let n = out.lines().filter(|l| l.split_whitespace().next() == Some(case)).count();
        assert_eq!(n, 1, "{case}");
    }

    let o = eegvit(dir.path(), &["gradcheck", "--inject-fault", "gelu"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("gelu"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("gelu") && l.ends_with("FAIL")));
}
