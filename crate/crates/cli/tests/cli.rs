use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "hmm_components=1",
    "ubm_components=8",
    "pgmm_components=1",
    "em_iterations=2",
    "pgmm_em_passes=1",
    "mlp_hidden=32",
    "mlp_epochs=2",
    "ivector_rank=5",
    "tv_iterations=2",
    "lda_dim=3",
    "plda_iterations=2",
];

fn dpsv(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpsv"));
    cmd.current_dir(dir).args(args);
    for s in SMALL {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dpsv(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpsv(dir.path(), &["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_flag_value_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpsv(dir.path(), &["align", "--source", "xyz", "--out-dir", "a"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--source"));
    let out = dpsv(dir.path(), &["train-hmm", "--set", "relevance=zero"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("relevance"));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpsv(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("score-content"));
}

#[test]
fn missing_or_corrupt_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&dpsv(dir.path(), &["train-hmm"])), 2);
    std::fs::write(dir.path().join("bad.cfg"), "bogus = 1\n").unwrap();
    assert_eq!(code(&dpsv(dir.path(), &["--config", "bad.cfg", "train-hmm"])), 2);
    std::fs::write(dir.path().join("s.txt"), "a b c 1.0\n").unwrap();
    assert_eq!(code(&dpsv(dir.path(), &["evaluate", "--scores", "s.txt", "--trials", "s.txt"])), 2);
}

#[test]
fn stages_run_end_to_end_from_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(d, &["synth", "--speakers", "3", "--background-speakers", "6"]);
    assert!(out.starts_with("utterances="));
    let n_trials = std::fs::read_to_string(d.join("corpus/trials/trials.txt")).unwrap().lines().count();

    ok(d, &["train-hmm"]);
    ok(d, &["train-ubm"]);
    ok(d, &["train-mlp"]);
    ok(d, &["train-pgmm", "--source", "dnn"]);
    for f in ["hmm", "ubm", "mlp", "pgmm_dnn"] {
        assert!(d.join(format!("models/{f}.dvmd")).exists(), "{f}");
    }

    // a rerun of a stage from the same inputs is bit-identical
    ok(d, &["train-hmm", "--out", "hmm2.dvmd"]);
    assert_eq!(std::fs::read(d.join("models/hmm.dvmd")).unwrap(), std::fs::read(d.join("hmm2.dvmd")).unwrap());

    let aligned = ok(d, &["align", "--source", "dnn", "--role", "test", "--out-dir", "post"]);
    assert!(aligned.lines().count() > 0);
    ok(d, &["align", "--source", "gmm-hmm", "--mode", "viterbi", "--role", "enroll", "--out-dir", "vit"]);

    for role in ["background", "enroll", "test"] {
        ok(d, &["accumulate-stats", "--system", "gmm-hmm", "--role", role, "--out-dir", "stats"]);
    }
    let enrolled = ok(d, &["enroll-map", "--system", "gmm-hmm", "--stats-dir", "stats"]);
    assert_eq!(enrolled.lines().count(), 3);
    ok(d, &["score-speaker", "--system", "gmm-hmm", "--speakers-dir", "models/map_gmm-hmm", "--out", "map.txt"]);
    let scores = std::fs::read_to_string(d.join("map.txt")).unwrap();
    assert_eq!(scores.lines().count(), n_trials);

    let report = ok(d, &["evaluate", "--scores", "map.txt", "--condition", "TC-IC", "--dcf", "sre08", "--dcf", "sre10"]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 2, "{report}");
    assert!(lines[0].contains("minDCF08") && lines[0].contains("minDCF10"));
    assert!(lines[1].starts_with("map") && lines[1].contains("TC-IC"));

    ok(d, &["train-tv", "--system", "gmm-hmm", "--stats-dir", "stats"]);
    ok(d, &["extract-ivector", "--system", "gmm-hmm", "--stats-dir", "stats", "--out", "bg.dviv"]);
    ok(d, &["extract-ivector", "--system", "gmm-hmm", "--stats-dir", "stats", "--role", "enroll", "--out", "en.dviv"]);
    ok(d, &["train-backend", "--ivectors", "bg.dviv", "--out", "models/plda_gmm-hmm.dvmd"]);
    let iv = ok(
        d,
        &[
            "score-speaker",
            "--system",
            "gmm-hmm",
            "--backend",
            "ivector",
            "--tv",
            "models/tv_gmm-hmm.dvmd",
            "--plda",
            "models/plda_gmm-hmm.dvmd",
            "--enroll-ivectors",
            "en.dviv",
        ],
    );
    assert_eq!(iv.lines().count(), n_trials);

    let content = ok(d, &["score-content", "--level", "digit", "--epsilon", "1e-5"]);
    assert_eq!(content.lines().count(), n_trials);
    assert!(content.lines().all(|l| l.split_whitespace().count() == 4));
    // external classifier posteriors give the same scores as the classifier itself
    let external = ok(d, &["score-content", "--level", "digit", "--epsilon", "1e-5", "--dnn-posteriors", "post"]);
    let parse = |t: &str| -> Vec<f64> { t.lines().map(|l| l.rsplit(' ').next().unwrap().parse().unwrap()).collect() };
    for (a, b) in parse(&content).iter().zip(parse(&external)) {
        assert!((a - b).abs() < 1e-3 * (1.0 + a.abs()), "{a} vs {b}");
    }

    let bad = dpsv(d, &["score-content", "--epsilon", "0"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn config_file_then_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--speakers", "2", "--background-speakers", "3"]);
    std::fs::write(d.join("p.cfg"), "model_dir = elsewhere\nhmm_components = 1\n").unwrap();
    ok(d, &["--config", "p.cfg", "train-hmm"]);
    assert!(d.join("elsewhere/hmm.dvmd").exists());
    ok(d, &["--config", "p.cfg", "--model-dir", "flagged", "train-hmm"]);
    assert!(d.join("flagged/hmm.dvmd").exists());
}
