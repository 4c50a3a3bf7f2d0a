//! Runs the `vstain` binary end to end on a tiny profile.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vstain_cli::{read_sweep_csv, read_trace, Manifest};
use vstain_core::metrics::MetricsReport;

const TINY: &str = r#"
[paths]
run_dir = "run"

[data]
n_train_source = 2
n_train_target = 8
n_eval = 3

[schedule]
steps = 100

[score.arch]
base_width = 8
time_embed_dim = 16

[score.train]
iterations = 6
batch_size = 2
lr = 1e-3

[critic]
iterations = 5
pairs = 16
images_per_iteration = 1
augment_max_t = 20

[guidance]
start_step = 12
guided_steps = 12
t0_prime = 3

[guidance.info]
pairs = 16

[guidance.refine]
num_patches = 8
head_width = 16

[sweep]
guided_steps = [8, 12]
t0_prime = [3, 5]
"#;

fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn vstain(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vstain"))
        .current_dir(dir)
        .args(["--config", "tiny.toml"])
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = vstain(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run(dir: &Path) -> PathBuf {
    dir.join("run")
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(run(dir).join("manifest.json")).unwrap()).unwrap()
}

fn trained(dir: &Path, extra: &[&str]) {
    for cmd in ["gen-data", "train-score", "train-mi"] {
        let mut args = vec![cmd];
        args.extend_from_slice(extra);
        ok(dir, &args);
    }
}

fn pngs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names
}

#[test]
fn gen_data_writes_splits_and_repeats_under_a_seed() {
    let (a, b, c) = (workdir(), workdir(), workdir());
    ok(a.path(), &["gen-data", "--seed", "3"]);
    ok(b.path(), &["gen-data", "--seed", "3"]);
    ok(c.path(), &["gen-data", "--seed", "4"]);
    let data = run(a.path()).join("data");
    for split in ["train_source", "train_target", "eval/source", "eval/target", "eval/masks"] {
        assert!(data.join(split).is_dir(), "{split}");
    }
    assert_eq!(pngs(&data.join("eval/source")).len(), 3);
    let tsv = |d: &Path| fs::read(run(d).join("data/manifest.tsv")).unwrap();
    assert_eq!(tsv(a.path()), tsv(b.path()));
    assert_ne!(tsv(a.path()), tsv(c.path()));
    assert_eq!(manifest(a.path()), manifest(b.path()));
}

#[test]
fn effective_config_reproduces_the_run() {
    let (a, b) = (workdir(), workdir());
    ok(a.path(), &["gen-data", "--seed", "9"]);
    let emitted = run(a.path()).join("config.toml");
    assert!(fs::read_to_string(&emitted).unwrap().contains("seed = 9"));
    let out = Command::new(env!("CARGO_BIN_EXE_vstain"))
        .current_dir(b.path())
        .args(["--config", emitted.to_str().unwrap(), "gen-data"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(manifest(a.path())["gen-data"].outputs, manifest(b.path())["gen-data"].outputs);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = workdir();
    fs::write(dir.path().join("tiny.toml"), format!("{TINY}\n[metrics]\nod_treshold = 0.3\n")).unwrap();
    let out = vstain(dir.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("od_treshold"), "{}", stderr(&out));

    let dir = workdir();
    fs::write(dir.path().join("tiny.toml"), TINY.replace("t0_prime = 3", "t0_prime = 7")).unwrap();
    let out = vstain(dir.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("t0_prime"), "{}", stderr(&out));
}

#[test]
fn training_without_a_corpus_fails() {
    let dir = workdir();
    let out = vstain(dir.path(), &["train-score"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gen-data"), "{}", stderr(&out));
}

#[test]
fn training_traces_count_iterations_and_resume_continues_numbering() {
    let dir = workdir();
    trained(dir.path(), &[]);
    let score = read_trace(&run(dir.path()).join("logs/score_loss.tsv")).unwrap();
    assert_eq!(score.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    let bound = read_trace(&run(dir.path()).join("logs/critic_bound.tsv")).unwrap();
    assert_eq!(bound.len(), 5);

    ok(dir.path(), &["train-score", "--resume"]);
    let resumed = read_trace(&run(dir.path()).join("logs/score_loss.tsv")).unwrap();
    assert_eq!(resumed.iter().map(|r| r.0).collect::<Vec<_>>(), (1..=12).collect::<Vec<_>>());
    assert_eq!(resumed[..6], score[..]);
    let (_, it) = vstain_core::score::ScoreNet::load(&run(dir.path()).join("checkpoints/score.ckpt")).unwrap();
    assert_eq!(it, 12);
}

#[test]
fn stain_skips_a_corrupt_input_and_reports_it() {
    let dir = workdir();
    trained(dir.path(), &[]);
    let input = dir.path().join("in");
    fs::create_dir(&input).unwrap();
    for name in pngs(&run(dir.path()).join("data/eval/source")) {
        fs::copy(run(dir.path()).join("data/eval/source").join(&name), input.join(name)).unwrap();
    }
    fs::write(input.join("0001b_broken.png"), b"not a png").unwrap();

    let out = vstain(dir.path(), &["stain", "--input", "in", "--output", "out", "--trace", "traces"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("0001b_broken.png"), "{}", stderr(&out));
    assert_eq!(pngs(&dir.path().join("out")), ["0000.png", "0001.png", "0002.png"]);
    let trace = fs::read_to_string(dir.path().join("traces/0001.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 12);
}

#[test]
fn guidance_changes_the_output() {
    let dir = workdir();
    trained(dir.path(), &[]);
    ok(dir.path(), &["stain", "--output", "guided"]);
    fs::write(
        dir.path().join("tiny.toml"),
        TINY.replace("t0_prime = 3\n", "t0_prime = 3\nguidance_scale = 0.0\n"),
    )
    .unwrap();
    ok(dir.path(), &["stain", "--output", "plain"]);
    for name in pngs(&dir.path().join("guided")) {
        let a = fs::read(dir.path().join("guided").join(&name)).unwrap();
        let b = fs::read(dir.path().join("plain").join(&name)).unwrap();
        assert_ne!(a, b, "{name}");
    }
}

#[test]
fn eval_identity_and_mismatched_names() {
    let dir = workdir();
    ok(dir.path(), &["gen-data"]);
    let gt = run(dir.path()).join("data/eval/target");
    let gt_arg = gt.to_str().unwrap();
    ok(dir.path(), &["eval", "--gen", gt_arg, "--gt", gt_arg]);
    let report = MetricsReport::load_csv(&run(dir.path()).join("eval/metrics.csv")).unwrap();
    assert_eq!(report.records.len(), 3);
    for r in &report.records {
        assert_eq!((r.psnr, r.hist, r.iod_dev), (99.0, 1.0, 0.0), "{r:?}");
        assert!((r.vif - 1.0).abs() < 1e-9, "{r:?}");
    }
    assert_eq!(report.mean.hist, 1.0);

    let gen = dir.path().join("gen");
    fs::create_dir(&gen).unwrap();
    for name in ["0000.png", "0001.png"] {
        fs::copy(gt.join(name), gen.join(name)).unwrap();
    }
    fs::copy(gt.join("0002.png"), gen.join("extra.png")).unwrap();
    let out = vstain(dir.path(), &["eval", "--gen", "gen", "--gt", gt_arg]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("extra.png") && err.contains("0002.png"), "{err}");
}

#[test]
fn sweep_covers_the_grid_and_matches_a_standalone_run() {
    let dir = workdir();
    trained(dir.path(), &[]);
    ok(dir.path(), &["sweep"]);
    let rows = read_sweep_csv(&run(dir.path()).join("sweep/sweep.csv")).unwrap();
    let cells: Vec<(usize, usize, &str)> = rows.iter().map(|r| (r.guided_steps, r.t0_prime, r.status.as_str())).collect();
    // 2 * t0' must stay below S = N.
    assert_eq!(cells, [(8, 3, "ok"), (8, 5, "invalid"), (12, 3, "ok"), (12, 5, "ok")]);
    assert!(rows.iter().filter(|r| r.status == "ok").all(|r| r.pairs == 3 && r.hist.is_finite()));
    let table = fs::read_to_string(run(dir.path()).join("sweep/sweep.txt")).unwrap();
    assert_eq!(table.lines().count(), 4);

    // The tiny profile's own guidance settings are the (12, 3) cell.
    ok(dir.path(), &["stain"]);
    ok(dir.path(), &["eval"]);
    let standalone = fs::read(run(dir.path()).join("eval/metrics.csv")).unwrap();
    let cell = fs::read(run(dir.path()).join("sweep/N12_t3/metrics.csv")).unwrap();
    assert_eq!(standalone, cell);
}

#[test]
fn every_command_is_byte_reproducible() {
    let (a, b) = (workdir(), workdir());
    for d in [a.path(), b.path()] {
        trained(d, &["--deterministic", "--seed", "11"]);
        for cmd in ["stain", "eval", "sweep"] {
            ok(d, &[cmd, "--deterministic", "--seed", "11"]);
        }
    }
    let (ma, mb) = (manifest(a.path()), manifest(b.path()));
    assert_eq!(ma.keys().collect::<Vec<_>>(), ["eval", "gen-data", "stain", "sweep", "train-mi", "train-score"]);
    assert_eq!(ma, mb);
    assert!(ma["stain"].outputs.len() == 3 && ma["sweep"].outputs.len() > 3);
}
