//! End-to-end exercises of the `tfad` binary: exit codes, artifact
//! layout, resume semantics, and the evaluator's file contract. A
//! pocket-sized training configuration (two epochs per stage, coarse
//! window stride) keeps the whole suite in seconds.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use tfad::cli::RunMeta;
use tfad::config::RunConfig;
use tfad::nn::Checkpointer;

struct CliRun {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str]) -> CliRun {
    let output = Command::new(env!("CARGO_BIN_EXE_tfad"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tfad");
    CliRun {
        code: output.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn expect_ok(dir: &Path, args: &[&str]) -> CliRun {
    let r = run(dir, args);
    assert_eq!(
        r.code, 0,
        "tfad {args:?} exited {}\nstdout:\n{}\nstderr:\n{}",
        r.code, r.stdout, r.stderr
    );
    r
}

/// Pocket config: desk geometry, two epochs per stage, stride 32.
fn micro_config(root: &Path) -> RunConfig {
    let mut config = RunConfig::desk();
    config.paths.data_dir = root.join("data");
    config.paths.period_csv = root.join("data").join("periods.csv");
    config.paths.out_dir = root.join("out");
    config.paths.checkpoint_dir = root.join("checkpoints");
    config.train.stage1_epochs = 2;
    config.train.stage2_epochs = 2;
    config.train.train_stride = 32;
    config
}

struct Fixture {
    _temp: tempfile::TempDir,
    dir: PathBuf,
    config: PathBuf,
    /// Full archive stem of the trained spike00 dataset.
    spike: String,
    /// Full archive stem of the clean extra dataset (noiseless test split).
    clean: String,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let temp = tempfile::tempdir().unwrap();
        let dir = temp.path().to_path_buf();
        let config_path = dir.join("micro.toml");
        micro_config(&dir).write_toml_file(&config_path).unwrap();
        let cfg = config_path.to_str().unwrap().to_string();
        expect_ok(&dir, &["synth", "--config", &cfg]);

        // An extra series whose training half carries noise but whose
        // test half is a clean sinusoid: scored under a high quantile
        // threshold, nothing in the test split gets flagged.
        let clean = "900_UCR_Anomaly_clean00_1280_1500_1501".to_string();
        let mut rng_state = 0x2545F4914F6CDD1Du64;
        let mut noise = move || {
            // xorshift* keeps the fixture free of extra dependencies.
            rng_state ^= rng_state >> 12;
            rng_state ^= rng_state << 25;
            rng_state ^= rng_state >> 27;
            (rng_state.wrapping_mul(0x2545F4914F6CDD1D) >> 40) as f64 / (1u64 << 24) as f64 - 0.5
        };
        let series: String = (0..1920)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
                let base = phase.sin() + 0.3 * (3.0 * phase).sin();
                let v = if i < 1280 { base + 0.16 * noise() } else { base };
                format!("{v}\n")
            })
            .collect();
        std::fs::write(dir.join("data").join(format!("{clean}.txt")), series).unwrap();
        let periods = dir.join("data").join("periods.csv");
        let mut table = std::fs::read_to_string(&periods).unwrap();
        table.push_str("clean00,64\n");
        std::fs::write(&periods, table).unwrap();

        expect_ok(&dir, &["train", "--dataset", "spike00", "--config", &cfg]);
        expect_ok(&dir, &["train", "--dataset", "clean00", "--config", &cfg]);
        let spike = std::fs::read_dir(dir.join("checkpoints"))
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .find(|n| n.contains("_spike00_"))
            .expect("spike00 checkpoint");
        Fixture {
            _temp: temp,
            dir,
            config: config_path,
            spike,
            clean,
        }
    })
}

fn cfg_arg(f: &Fixture) -> &str {
    f.config.to_str().unwrap()
}

#[test]
fn train_writes_checkpoint_loss_logs_and_config() {
    let f = fixture();
    let ckpt = f.dir.join("checkpoints").join(&f.spike);
    for file in [
        "checkpoint.toml",
        "stage1.safetensors",
        "stage2.safetensors",
        "stage1_loss.csv",
        "stage2_loss.csv",
        "config.toml",
    ] {
        assert!(ckpt.join(file).exists(), "missing {file}");
    }
    let meta = Checkpointer::open(&ckpt).unwrap();
    assert_eq!(meta.meta().stage1_epochs_done, 2);
    assert_eq!(meta.meta().stage2_epochs_done, 2);
    let loss = std::fs::read_to_string(ckpt.join("stage1_loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines.len(), 3, "expected header + 2 epochs, got {lines:?}");
    assert_eq!(lines[0], "epoch,train_loss,holdout_loss,codes_used");
}

#[test]
fn completed_resume_is_a_no_op_and_fresh_retrain_reproduces_logs() {
    let f = fixture();
    let ckpt = f.dir.join("checkpoints").join(&f.spike);
    let before = std::fs::read(ckpt.join("stage1_loss.csv")).unwrap();
    expect_ok(&f.dir, &["train", "--dataset", "spike00", "--config", cfg_arg(f), "--resume"]);
    assert_eq!(
        before,
        std::fs::read(ckpt.join("stage1_loss.csv")).unwrap(),
        "resuming a finished run must not grow the loss log"
    );

    // A from-scratch rerun into a separate checkpoint directory
    // reproduces the loss history bit for bit.
    expect_ok(
        &f.dir,
        &["train", "--dataset", "spike00", "--config", cfg_arg(f), "--checkpoint", "ck2"],
    );
    for file in ["stage1_loss.csv", "stage2_loss.csv"] {
        assert_eq!(
            std::fs::read(ckpt.join(file)).unwrap(),
            std::fs::read(f.dir.join("ck2").join(&f.spike).join(file)).unwrap(),
            "{file} differs between identically seeded runs"
        );
    }
}

#[test]
fn resume_refuses_a_changed_configuration() {
    let f = fixture();
    let mut other = micro_config(&f.dir);
    other.train.stage1_epochs = 3;
    let path = f.dir.join("micro3.toml");
    other.write_toml_file(&path).unwrap();
    let r = run(
        &f.dir,
        &["train", "--dataset", "spike00", "--config", path.to_str().unwrap(), "--resume"],
    );
    assert_eq!(r.code, 2, "stderr: {}", r.stderr);
    assert!(
        r.stderr.contains("different configuration"),
        "unexpected stderr: {}",
        r.stderr
    );
}

#[test]
fn wall_clock_interrupt_exits_5_and_resume_completes() {
    let f = fixture();
    let mut interrupted = micro_config(&f.dir);
    interrupted.train.stage1_epochs = 8;
    interrupted.train.wall_clock_secs = 2;
    interrupted.paths.checkpoint_dir = f.dir.join("ckwall");
    let path = f.dir.join("micro_wall.toml");
    interrupted.write_toml_file(&path).unwrap();
    let cfg = path.to_str().unwrap();

    let first = run(&f.dir, &["train", "--dataset", "spike00", "--config", cfg]);
    assert_eq!(first.code, 5, "expected a wall-clock interrupt\nstderr: {}", first.stderr);
    let ckpt_dir = f.dir.join("ckwall").join(&f.spike);
    let partial = Checkpointer::open(&ckpt_dir).unwrap().meta().stage1_epochs_done;
    assert!(partial < 8, "interrupted run claims all epochs done");

    let mut codes = vec![first.code];
    for _ in 0..10 {
        let r = run(&f.dir, &["train", "--dataset", "spike00", "--config", cfg, "--resume"]);
        codes.push(r.code);
        if r.code == 0 {
            break;
        }
        assert_eq!(r.code, 5, "unexpected exit during resume\nstderr: {}", r.stderr);
    }
    assert_eq!(*codes.last().unwrap(), 0, "training never completed: exits {codes:?}");
    let meta = Checkpointer::open(&ckpt_dir).unwrap();
    assert_eq!(meta.meta().stage1_epochs_done, 8);
    assert_eq!(meta.meta().stage2_epochs_done, 2);
}

#[test]
fn score_and_plot_write_self_describing_artifacts() {
    let f = fixture();
    expect_ok(&f.dir, &["score", "--dataset", "spike00", "--config", cfg_arg(f)]);
    let out = f.dir.join("out").join(&f.spike);
    let scores = std::fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(scores.starts_with("timestep,a_final,abar,abarbar,band_0"));
    // Scores cover the test split: first column starts at train_end.
    assert!(scores.lines().nth(1).unwrap().starts_with("1280,"));
    let meta = RunMeta::load(&out.join("run.toml")).unwrap();
    assert!(meta.runtime_s > 0.0);
    assert_eq!(meta.checkpoint_hash.len(), 64);
    assert!(out.join("config.toml").exists());

    expect_ok(&f.dir, &["plot", "--dataset", "spike00", "--config", cfg_arg(f)]);
    let svg = std::fs::read_to_string(out.join("figure.svg")).unwrap();
    assert!(svg.starts_with("<svg"), "not an SVG: {}", &svg[..40.min(svg.len())]);
}

#[test]
fn counterfactual_with_nothing_flagged_succeeds_with_a_notice() {
    let f = fixture();
    let r = expect_ok(
        &f.dir,
        &["counterfactual", "--dataset", "clean00", "--config", cfg_arg(f), "--quantile", "0.995"],
    );
    assert!(
        r.stdout.contains("nothing to resample"),
        "expected the empty-case notice, got:\n{}",
        r.stdout
    );
    let out = f.dir.join("out").join(&f.clean);
    assert!(out.join("scores.csv").exists());
    assert!(!out.join("counterfactuals.csv").exists());
}

#[test]
fn unknown_dataset_is_a_data_error_listing_what_exists() {
    let f = fixture();
    let r = run(&f.dir, &["score", "--dataset", "nosuch", "--config", cfg_arg(f)]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("nosuch"), "stderr: {}", r.stderr);
    assert!(r.stderr.contains("spike00"), "stderr should list available sets: {}", r.stderr);
}

#[test]
fn scoring_before_training_points_at_train() {
    let f = fixture();
    let r = run(&f.dir, &["score", "--dataset", "pattern_swap00", "--config", cfg_arg(f)]);
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("tfad train"), "stderr: {}", r.stderr);
}

#[test]
fn conflicting_presets_and_bad_overrides_exit_2() {
    let f = fixture();
    let r = run(&f.dir, &["train", "--desk", "--full"]);
    assert_eq!(r.code, 2, "stderr: {}", r.stderr);
    let r = run(&f.dir, &["score", "--quantile", "1.5", "--config", cfg_arg(f)]);
    assert_eq!(r.code, 2, "stderr: {}", r.stderr);
    let r = run(&f.dir, &["score", "--stride-rate", "0.0", "--config", cfg_arg(f)]);
    assert_eq!(r.code, 2, "stderr: {}", r.stderr);
}

#[test]
fn evaluate_without_scores_is_an_input_error() {
    let f = fixture();
    let r = run(
        &f.dir,
        &["evaluate", "--config", cfg_arg(f), "--out", f.dir.join("empty_out").to_str().unwrap()],
    );
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("tfad score"), "stderr: {}", r.stderr);
}

#[test]
fn evaluate_names_datasets_missing_labels() {
    let f = fixture();
    let ghost = f.dir.join("out_ghost").join("999_UCR_Anomaly_ghost00_10_20_30");
    std::fs::create_dir_all(&ghost).unwrap();
    std::fs::write(ghost.join("scores.csv"), "timestep,a_final\n10,1.0\n").unwrap();
    let r = run(
        &f.dir,
        &["evaluate", "--config", cfg_arg(f), "--out", f.dir.join("out_ghost").to_str().unwrap()],
    );
    assert_eq!(r.code, 3);
    assert!(r.stderr.contains("ghost00"), "stderr: {}", r.stderr);
}

/// Plant score vectors with known peaks under three real datasets and
/// check the protocol verdicts field by field.
#[test]
fn evaluate_reproduces_hand_planted_verdicts() {
    let f = fixture();
    let out = f.dir.join("out_planted");
    // (name fragment, peaks as (timestep, height), expected verdicts)
    // Labels come from the archive filenames: spike00 [1400,1403],
    // spike04 [1756,1759], level_shift00 [1400,1463].
    let cases: [(&str, Vec<(usize, f64)>, (u8, u8, u8), usize); 3] = [
        // Single peak dead on the label: every k hits.
        ("_spike00_", vec![(1400, 5.0)], (1, 1, 1), 1400),
        // Five well-spaced peaks, none within ±100 of [1756, 1759]:
        // all five slots fill with misses.
        (
            "_spike04_",
            vec![(1290, 9.0), (1390, 8.0), (1490, 7.0), (1590, 6.0), (1919, 5.0)],
            (0, 0, 0),
            1290,
        ),
        // Peak exactly at end + 100: the boundary is inclusive.
        ("_level_shift00_", vec![(1563, 5.0)], (1, 1, 1), 1563),
    ];
    let mut stems = Vec::new();
    for (fragment, peaks, _, _) in &cases {
        let stem = std::fs::read_dir(f.dir.join("data"))
            .unwrap()
            .filter_map(|e| e.ok())
            .map(|e| e.path().file_stem().unwrap().to_string_lossy().into_owned())
            .find(|s| s.contains(fragment))
            .unwrap_or_else(|| panic!("no dataset matching {fragment}"));
        let dir = out.join(&stem);
        std::fs::create_dir_all(&dir).unwrap();
        let mut csv = String::from("timestep,a_final\n");
        for t in 1280..1920usize {
            let v = peaks.iter().find(|(p, _)| *p == t).map_or(0.0, |(_, h)| *h);
            csv.push_str(&format!("{t},{v}\n"));
        }
        std::fs::write(dir.join("scores.csv"), csv).unwrap();
        RunMeta {
            dataset: stem.clone(),
            config_hash: "planted".into(),
            checkpoint_hash: "planted".into(),
            runtime_s: 1.5,
        }
        .save(&dir.join("run.toml"))
        .unwrap();
        stems.push(stem);
    }
    expect_ok(&f.dir, &["evaluate", "--config", cfg_arg(f), "--out", out.to_str().unwrap()]);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for ((_, _, (top1, top3, top5), pred1), stem) in cases.iter().zip(&stems) {
        let row = rows
            .iter()
            .find(|r| r.starts_with(stem.as_str()))
            .unwrap_or_else(|| panic!("no summary row for {stem}"));
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields[1], top1.to_string(), "top1 for {stem}: {row}");
        assert_eq!(fields[2], top3.to_string(), "top3 for {stem}: {row}");
        assert_eq!(fields[3], top5.to_string(), "top5 for {stem}: {row}");
        assert_eq!(fields[4], pred1.to_string(), "pred1 for {stem}: {row}");
        assert_eq!(fields[9], "1.500", "runtime for {stem}: {row}");
    }
}

#[test]
fn synth_reruns_are_byte_identical() {
    let f = fixture();
    let manifest = f.dir.join("data").join("manifest.csv");
    let sample = f.dir.join("data").join(format!("{}.txt", f.spike));
    let manifest_before = std::fs::read(&manifest).unwrap();
    let sample_before = std::fs::read(&sample).unwrap();
    expect_ok(&f.dir, &["synth", "--config", cfg_arg(f)]);
    assert_eq!(manifest_before, std::fs::read(&manifest).unwrap());
    assert_eq!(sample_before, std::fs::read(&sample).unwrap());
}
