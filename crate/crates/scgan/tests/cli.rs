//! End-to-end tests of the `scgan` binary: exit codes, output layout, and
//! stream formats for every subcommand.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use ndarray::Array3;
use scgan::data::{load_image_native, save_image, ImageTensor, ValueRange};
use scgan::vgg::write_reference_weights;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn scgan(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scgan"));
    cmd.args(args);
    cmd.env_remove("SCGAN_EXTRACTOR_WEIGHTS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8(out.stdout).expect("utf8 stdout"),
        stderr: String::from_utf8(out.stderr).expect("utf8 stderr"),
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    train_out: PathBuf,
    checkpoint: PathBuf,
    vgg_weights: PathBuf,
    big_image: PathBuf,
}

fn checker_image(size: usize, phase: usize) -> ImageTensor {
    let data = Array3::from_shape_fn((3, size, size), |(c, i, j)| {
        let cell = (i / 4 + j / 4 + phase + c) % 3;
        -0.8 + 0.7 * cell as f32
    });
    ImageTensor::new(data, ValueRange::default()).unwrap()
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let base = dir.path().to_path_buf();
        let root = base.join("corpus");
        std::fs::create_dir_all(root.join("trainA")).unwrap();
        std::fs::create_dir_all(root.join("trainB")).unwrap();
        for k in 0..2 {
            save_image(&checker_image(32, k), &root.join(format!("trainA/a{k}.png"))).unwrap();
            save_image(&checker_image(32, k + 5), &root.join(format!("trainB/b{k}.png"))).unwrap();
        }
        let big_image = base.join("big.png");
        save_image(&checker_image(64, 1), &big_image).unwrap();

        let vgg_weights = base.join("vgg.bin");
        write_reference_weights(&vgg_weights, 9).unwrap();

        let train_out = base.join("train-out");
        let config = base.join("config.toml");
        std::fs::write(&config, config_toml(&root, &train_out)).unwrap();

        let run = scgan(
            &["train", "--config", config.to_str().unwrap()],
            &[],
        );
        assert_eq!(run.code, 0, "fixture training failed: {}", run.stderr);
        let line: serde_json::Value = serde_json::from_str(run.stdout.trim()).unwrap();
        let checkpoint = PathBuf::from(line["checkpoint"].as_str().unwrap());
        assert!(checkpoint.is_file(), "checkpoint missing");

        Fixture {
            _dir: dir,
            root,
            config,
            train_out,
            checkpoint,
            vgg_weights,
            big_image,
        }
    })
}

fn config_toml(root: &Path, out: &Path) -> String {
    format!(
        r#"data_root = "{root}"
out = "{out}"

[train]
total_steps = 2
image_size = 32
seed = 3
checkpoint_interval = 0

[train.generator]
depth = 2
base_channels = 8
in_channels = 3
out_channels = 3
skip_connections = true

[train.discriminator]
num_layers = 2
base_channels = 8
in_channels = 3
"#,
        root = root.display(),
        out = out.display(),
    )
}

#[test]
fn aggregate_survey_prints_bundled_averages() {
    let run = scgan(&["aggregate-survey"], &[]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert_eq!(
        run.stdout,
        "Binarization,2.46\nNST,1.78\nCartoonGAN,1.76\nUNIT,3.21\nCycleGAN,2.90\nOur method,3.74\n"
    );
}

#[test]
fn aggregate_survey_reads_a_custom_table() {
    let f = fixture();
    let table = f.root.join("table.csv");
    std::fs::write(
        &table,
        "# method, score fractions\nUniform,0.2,0.2,0.2,0.2,0.2\nAllFives,0,0,0,0,1\n",
    )
    .unwrap();
    let run = scgan(&["aggregate-survey", "--input", table.to_str().unwrap()], &[]);
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert_eq!(run.stdout, "Uniform,3.00\nAllFives,5.00\n");
}

#[test]
fn aggregate_survey_rejects_bad_distributions() {
    let f = fixture();
    let table = f.root.join("bad-table.csv");
    std::fs::write(&table, "Broken,0.9,0.9,0.9,0.9,0.9\n").unwrap();
    let run = scgan(&["aggregate-survey", "--input", table.to_str().unwrap()], &[]);
    assert_eq!(run.code, 1);
    assert!(run.stdout.is_empty());
    let lines: Vec<&str> = run.stderr.trim_end().lines().collect();
    assert_eq!(lines.len(), 1, "one-line diagnostic, got: {}", run.stderr);
    assert!(lines[0].starts_with("error: "), "got: {}", lines[0]);
}

#[test]
fn train_writes_checkpoint_config_and_log() {
    let f = fixture();
    assert!(f.train_out.join("run-config.toml").is_file());
    let log = std::fs::read_to_string(f.train_out.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["total"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn train_reruns_are_byte_identical() {
    let f = fixture();
    let out2 = f.root.parent().unwrap().join("train-out-again");
    let run = scgan(
        &[
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--out",
            out2.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let log_a = std::fs::read(f.train_out.join("loss_log.jsonl")).unwrap();
    let log_b = std::fs::read(out2.join("loss_log.jsonl")).unwrap();
    assert_eq!(log_a, log_b, "loss logs differ between identical runs");
    let cp_a = std::fs::read(&f.checkpoint).unwrap();
    let cp_b = std::fs::read(out2.join(f.checkpoint.file_name().unwrap())).unwrap();
    assert_eq!(cp_a, cp_b, "checkpoints differ between identical runs");
}

#[test]
fn infer_translates_a_single_file() {
    let f = fixture();
    let out = f.root.parent().unwrap().join("infer-single");
    let input = f.root.join("trainA/a0.png");
    let run = scgan(
        &[
            "infer",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let produced = out.join("a0.cartoon.png");
    assert!(produced.is_file());
    let image = load_image_native(&produced).unwrap();
    assert_eq!(
        (image.channels(), image.height(), image.width()),
        (3, 32, 32)
    );
    let line: serde_json::Value = serde_json::from_str(run.stdout.trim()).unwrap();
    assert_eq!(line["output"].as_str().unwrap(), produced.to_str().unwrap());
}

#[test]
fn infer_handles_directories_sizes_and_suffixes() {
    let f = fixture();
    let out = f.root.parent().unwrap().join("infer-dir");
    let run = scgan(
        &[
            "infer",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--input",
            f.root.join("trainA").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--suffix",
            "styled",
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(out.join("a0.styled.png").is_file());
    assert!(out.join("a1.styled.png").is_file());
    assert_eq!(run.stdout.lines().count(), 2);

    // The networks are fully convolutional: a 64x64 input through a model
    // trained at 32x32 must come back 64x64.
    let out_big = f.root.parent().unwrap().join("infer-big");
    let run = scgan(
        &[
            "infer",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--input",
            f.big_image.to_str().unwrap(),
            "--out",
            out_big.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let image = load_image_native(&out_big.join("big.cartoon.png")).unwrap();
    assert_eq!(
        (image.channels(), image.height(), image.width()),
        (3, 64, 64)
    );
}

#[test]
fn infer_rejects_indivisible_dimensions() {
    let f = fixture();
    let odd = f.root.parent().unwrap().join("odd.png");
    let data = Array3::from_elem((3, 30, 30), 0.1f32);
    let image = ImageTensor::from_parts(data, ValueRange::default()).unwrap();
    save_image(&image, &odd).unwrap();
    let out = f.root.parent().unwrap().join("infer-odd");
    let run = scgan(
        &[
            "infer",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--input",
            odd.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 1);
    assert!(run.stderr.starts_with("error: "), "got: {}", run.stderr);
    assert!(run.stderr.contains("divisible"), "got: {}", run.stderr);
}

#[test]
fn evaluate_reports_gradients_and_maps() {
    let f = fixture();
    let out = f.root.parent().unwrap().join("eval-out");
    let run = scgan(
        &[
            "evaluate",
            "--input",
            f.root.join("trainA").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let report = std::fs::read_to_string(out.join("gradient_report.jsonl")).unwrap();
    assert_eq!(report, run.stdout);
    let lines: Vec<serde_json::Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for line in &lines[..2] {
        assert!(line["average_gradient"].as_f64().unwrap() > 0.0);
    }
    assert_eq!(lines[2]["count"].as_u64(), Some(2));
    assert!(lines[2]["mean_average_gradient"].as_f64().unwrap() > 0.0);
    assert!(out.join("a0.grad.png").is_file());
    assert!(out.join("a1.grad.png").is_file());

    let out_bare = f.root.parent().unwrap().join("eval-bare");
    let run = scgan(
        &[
            "evaluate",
            "--input",
            f.root.join("trainA").to_str().unwrap(),
            "--out",
            out_bare.to_str().unwrap(),
            "--no-maps",
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    assert!(!out_bare.join("a0.grad.png").exists());
}

#[test]
fn usage_errors_exit_2() {
    let run = scgan(&[], &[]);
    assert_eq!(run.code, 2);
    let run = scgan(&["train", "--bogus-flag"], &[]);
    assert_eq!(run.code, 2);
    let run = scgan(&["no-such-command"], &[]);
    assert_eq!(run.code, 2);
}

#[test]
fn domain_errors_exit_1_with_one_line() {
    let f = fixture();
    let missing = f.root.join("does-not-exist.png");
    let out = f.root.parent().unwrap().join("never-created");
    let run = scgan(
        &[
            "infer",
            "--checkpoint",
            f.checkpoint.to_str().unwrap(),
            "--input",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 1);
    assert_eq!(run.stderr.trim_end().lines().count(), 1);
    assert!(run.stderr.starts_with("error: "));

    let run = scgan(
        &[
            "evaluate",
            "--input",
            f.root.join("empty-dir").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 1);
    assert!(run.stderr.starts_with("error: "));
}

#[test]
fn flag_overrides_beat_the_config_file() {
    let f = fixture();
    let override_out = f.root.parent().unwrap().join("override-out");
    let run = scgan(
        &[
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--out",
            override_out.to_str().unwrap(),
            "--steps",
            "1",
            "--seed",
            "4",
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let resolved = std::fs::read_to_string(override_out.join("run-config.toml")).unwrap();
    assert!(
        resolved.contains("override-out"),
        "resolved config must record the overridden out dir"
    );
    assert!(resolved.contains("total_steps = 1"));
    assert!(resolved.contains("seed = 4"));
    let log = std::fs::read_to_string(override_out.join("loss_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn extractor_weights_resolve_flag_over_env_over_config() {
    let f = fixture();
    let env_pair = ("SCGAN_EXTRACTOR_WEIGHTS", f.vgg_weights.to_str().unwrap());

    // Environment fallback fills in when nothing else names weights.
    let out_env = f.root.parent().unwrap().join("weights-env");
    let run = scgan(
        &[
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--out",
            out_env.to_str().unwrap(),
            "--steps",
            "0",
        ],
        &[env_pair],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let resolved = std::fs::read_to_string(out_env.join("run-config.toml")).unwrap();
    assert!(
        resolved.contains(f.vgg_weights.to_str().unwrap()),
        "env-provided weights missing from resolved config: {resolved}"
    );

    // An explicit flag beats the environment.
    let flag_weights = f.root.parent().unwrap().join("flag-vgg.bin");
    write_reference_weights(&flag_weights, 10).unwrap();
    let out_flag = f.root.parent().unwrap().join("weights-flag");
    let run = scgan(
        &[
            "train",
            "--config",
            f.config.to_str().unwrap(),
            "--out",
            out_flag.to_str().unwrap(),
            "--steps",
            "0",
            "--extractor-weights",
            flag_weights.to_str().unwrap(),
        ],
        &[env_pair],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let resolved = std::fs::read_to_string(out_flag.join("run-config.toml")).unwrap();
    assert!(
        resolved.contains("flag-vgg.bin"),
        "flag weights missing from resolved config: {resolved}"
    );
    assert!(
        !resolved.contains(f.vgg_weights.to_str().unwrap()),
        "env weights should lose to the flag: {resolved}"
    );
}

#[test]
fn preprocess_summarizes_and_filters() {
    let f = fixture();
    let raw = f.root.parent().unwrap().join("raw");
    std::fs::create_dir_all(&raw).unwrap();
    let wide = Array3::from_shape_fn((3, 80, 100), |(c, i, j)| {
        ((i + j + c) % 7) as f32 / 7.0 * 1.6 - 0.8
    });
    let wide = ImageTensor::new(wide, ValueRange::default()).unwrap();
    save_image(&wide, &raw.join("keep.png")).unwrap();
    std::fs::copy(raw.join("keep.png"), raw.join("keep_copy.png")).unwrap();
    let small = Array3::from_elem((3, 20, 20), 0.0f32);
    let small = ImageTensor::new(small, ValueRange::default()).unwrap();
    save_image(&small, &raw.join("small.png")).unwrap();

    let cooked = f.root.parent().unwrap().join("cooked");
    let run = scgan(
        &[
            "preprocess",
            "--input",
            raw.to_str().unwrap(),
            "--out",
            cooked.to_str().unwrap(),
        ],
        &[],
    );
    assert_eq!(run.code, 0, "stderr: {}", run.stderr);
    let summary: serde_json::Value = serde_json::from_str(run.stdout.trim()).unwrap();
    assert_eq!(summary["kept"].as_u64(), Some(1));
    assert_eq!(summary["rejected"].as_u64(), Some(2));
    assert_eq!(summary["dedup"].as_bool(), Some(true));

    let kept = load_image_native(&cooked.join("keep.png")).unwrap();
    assert_eq!(
        (kept.height(), kept.width()),
        (80, 80),
        "center-square crop should trim the long side"
    );
}
