use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use holoseg::config::RunConfig;
use holoseg::inference::{write_prediction, HolisticOutput, InstanceInfo, Mode};
use holoseg::model::{init_params, save_checkpoint};
use holoseg::pipeline;
use holoseg::scene::Split;
use serde_json::Value;

const TINY: &str = r#"
[paths]
dataset = "data"
run = "run"

[dataset]
n_train = 3
n_tune = 2
n_val = 2

[dataset.scene]
width = 32
height = 32
object_radius = [4, 7]
objects_per_image = [1, 3]

[model]
trunk_widths = [8, 8]
patch_radius = 1
embed_dim = 3

[train]
epochs = 2
batch_size = 2
pixels_per_image = 64

[tune]
eps_grid = [0.5, 1.0]
min_pts_grid = [4]

[viz]
max_images = 1
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn holoseg(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_holoseg"));
    cmd.args(args).env("RUST_LOG", "off");
    match threads {
        Some(t) => cmd.env("HOLOSEG_THREADS", t),
        None => cmd.env_remove("HOLOSEG_THREADS"),
    };
    cmd.output().unwrap()
}

fn one_json_line(bytes: &[u8]) -> Value {
    let text = String::from_utf8(bytes.to_vec()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one line, got {text:?}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn every_command_runs_from_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    for command in ["gen", "train", "tune", "infer", "eval", "viz"] {
        let out = holoseg(&[command, "--config", cfg], Some("1"));
        assert!(out.status.success(), "{command}: {}", String::from_utf8_lossy(&out.stderr));
        let summary = one_json_line(&out.stdout);
        assert!(summary.is_object(), "{command}: {summary}");
    }
    let run = dir.path().join("run");
    for f in [pipeline::CHECKPOINT_FILE, pipeline::TRACE_FILE, pipeline::STATS_FILE, pipeline::TUNING_FILE] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let trace = fs::read_to_string(run.join(pipeline::TRACE_FILE)).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let report: Value = serde_json::from_str(&fs::read_to_string(run.join("pred/val_open").join(pipeline::EVAL_FILE)).unwrap()).unwrap();
    assert_eq!(report["n_images"], 2);
    assert!(report["groups"]["all_known"].is_object());
    assert!(run.join("viz/val_open/000005_unc.png").is_file());

    // Flags take precedence over the file.
    let out = holoseg(&["infer", "--config", cfg, "--set", "inference.mode=\"closed\""], Some("0"));
    assert!(out.status.success());
    assert!(run.join("pred/val_closed").is_dir());
}

#[test]
fn failures_print_one_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let cases: [(&[&str], Option<&str>, &str); 5] = [
        (&["gen", "--config", "/no/such/file.toml"], None, "config"),
        (&["gen", "--config", cfg, "--set", "train.bogus=1"], None, "config"),
        (&["gen", "--config", cfg, "--set", "inference.t=-1"], None, "config"),
        (&["gen", "--config", cfg], Some("many"), "config"),
        (&["eval", "--config", cfg], None, "missing_path"),
    ];
    for (args, threads, kind) in cases {
        let out = holoseg(args, threads);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(out.stdout.is_empty());
        let err = one_json_line(&out.stderr);
        assert_eq!(err["error"], kind, "{args:?}: {err}");
        assert!(err["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[test]
fn zero_epochs_save_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(Some(&write_config(dir.path())), &["train.epochs=0".into()]).unwrap();
    pipeline::gen(&cfg).unwrap();
    let summary = pipeline::train_model(&cfg).unwrap();
    assert!(summary.trace.is_empty());
    let init = init_params(&cfg.model.arch(&cfg.catalog()), cfg.model.init_seed).unwrap();
    let reference = dir.path().join("init.u3hs");
    save_checkpoint(&init, &reference).unwrap();
    assert_eq!(fs::read(reference).unwrap(), fs::read(cfg.paths.run.join(pipeline::CHECKPOINT_FILE)).unwrap());
}

/// Writes the ground truth of the inference split as the prediction.
fn write_ground_truth(cfg: &RunConfig) {
    let (catalog, samples) = pipeline::load_split(&cfg.paths.dataset, cfg.inference.split).unwrap();
    let dir = pipeline::prediction_dir(cfg);
    fs::create_dir_all(&dir).unwrap();
    let unknown = catalog.unknown_id();
    let open = cfg.inference.mode == Mode::Open;
    for s in &samples {
        let n = s.num_pixels();
        let mut semantic = s.semantic_map.clone();
        let mut instance = s.instance_map.clone();
        let mut mask = vec![false; n];
        for p in 0..n {
            if catalog.is_unknown(semantic[p]) {
                if open {
                    semantic[p] = unknown;
                    mask[p] = true;
                } else {
                    semantic[p] = 0;
                    instance[p] = 0;
                }
            }
        }
        let mut instances: Vec<InstanceInfo> = Vec::new();
        for p in 0..n {
            if instance[p] != 0 {
                match instances.iter_mut().find(|i| i.id == instance[p]) {
                    Some(i) => i.pixel_count += 1,
                    None => instances.push(InstanceInfo {
                        id: instance[p],
                        class_id: semantic[p],
                        is_unknown: semantic[p] == unknown,
                        pixel_count: 1,
                    }),
                }
            }
        }
        let out = HolisticOutput {
            width: s.width,
            height: s.height,
            uncertainty_map: mask.iter().map(|&m| if m { 0.9 } else { 0.1 }).collect(),
            semantic_map: semantic,
            instance_map: instance,
            unknown_mask: mask,
            instances,
            no_prototypes: false,
            orphaned_outliers: 0,
        };
        write_prediction(&dir, s.id, &out, 0.5, cfg.inference.mode).unwrap();
    }
}

#[test]
fn ground_truth_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let base = RunConfig::load(Some(&write_config(dir.path())), &["dataset.n_val=8".into()]).unwrap();
    pipeline::gen(&base).unwrap();

    let mut closed = base.clone();
    closed.inference.mode = Mode::Closed;
    write_ground_truth(&closed);
    let r = pipeline::evaluate(&closed).unwrap();
    assert_eq!(r.group(holoseg::metrics::PqGroup::AllKnown).pq, Some(1.0));
    assert_eq!(r.group(holoseg::metrics::PqGroup::KnownStuff).pq, Some(1.0));
    let unknown = r.group(holoseg::metrics::PqGroup::Unknown);
    assert_eq!(unknown.tp, 0);
    assert!(unknown.fn_ > 0, "the validation split should contain unknown objects");

    let open = base;
    assert_eq!(open.inference.split, Split::Val);
    write_ground_truth(&open);
    let r = pipeline::evaluate(&open).unwrap();
    for (name, g) in &r.groups {
        assert_eq!(g.pq, Some(1.0), "{name}");
    }
    assert_eq!(r.unknown_ap, Some(1.0));
    assert_eq!(r.fpr95, Some(0.0));
    assert!((r.miou.unwrap() - 1.0).abs() < 1e-12);

    // Scoring closed predictions as open is refused.
    let mut mismatched = closed.clone();
    mismatched.inference.mode = Mode::Open;
    fs::remove_dir_all(pipeline::prediction_dir(&mismatched)).unwrap();
    fs::rename(pipeline::prediction_dir(&closed), pipeline::prediction_dir(&mismatched)).unwrap();
    assert!(pipeline::evaluate(&mismatched).is_err());
}
