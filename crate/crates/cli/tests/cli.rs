use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graft_core::align::{init_params, Checkpoint, TrainConfig};
use graft_core::corpus::load_dataset;
use graft_core::corpus::synth::{GROUND_FIXTURE, GROUND_MANIFEST, TEXT_FIXTURE};
use graft_core::corpus::SynthWorld;
use graft_core::FrozenEncoder;
use sha2::{Digest, Sha256};

const SMALL: [&str; 4] = ["--set", "world.extent_km=3", "--set", "world.n_ground=500"];

fn graft(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graft"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("GRAFT_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = graft(out, args);
    assert!(
        o.status.success(),
        "graft {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(SMALL);
    v
}

/// A small world, its dataset, and optionally a checkpoint, under `out`.
fn pipeline(out: &Path, extra: &[&str], epochs: Option<&str>) {
    let mut common = SMALL.to_vec();
    common.extend(extra);
    for cmd in ["synth", "build"] {
        let mut args = vec![cmd];
        args.extend(&common);
        ok(out, &args);
    }
    if let Some(e) = epochs {
        let mut args = vec!["train", "--epochs", e];
        args.extend(&common);
        ok(out, &args);
    }
}

fn hashes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let h = Sha256::digest(fs::read(&p).unwrap()).to_vec();
            (p.strip_prefix(dir).unwrap().to_path_buf(), h)
        })
        .collect()
}

#[test]
fn default_synth_reports_eight_classes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["synth"]);
    assert!(stdout.contains("K=8"), "{stdout}");
    assert!(stdout.contains("seed=0"), "{stdout}");
    let world = dir.path().join("world");
    for f in [GROUND_MANIFEST, GROUND_FIXTURE, TEXT_FIXTURE, "class_map.grr", "world.json"] {
        assert!(world.join(f).is_file(), "{f}");
    }
    assert!(dir.path().join("synth.resolved.toml").is_file());
}

#[test]
fn same_seed_synthesizes_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &with_small(&["synth", "--seed", "5"]));
    ok(b.path(), &with_small(&["synth", "--seed", "5"]));
    let ha = hashes(&a.path().join("world"));
    assert!(ha.len() >= 6);
    assert_eq!(ha, hashes(&b.path().join("world")));

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &with_small(&["synth", "--seed", "6"]));
    assert_ne!(ha, hashes(&c.path().join("world")));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let o = graft(&file.join("sub"), &["synth"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&graft(dir.path(), &["synth", "--set", "world.colour=red"])), 2);
    assert_eq!(code(&graft(dir.path(), &["synth", "--set", "world.classes=1"])), 2);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[world]\nextent_km = \"far\"\n").unwrap();
    assert_eq!(code(&graft(dir.path(), &["synth", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&graft(dir.path(), &["synth", "--config", "missing.toml"])), 2);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\n[world]\nextent_km = 2.0\nn_ground = 100\n").unwrap();
    let c = cfg.to_str().unwrap();
    let stdout = ok(dir.path(), &["synth", "--config", c, "--set", "seed=4", "--seed", "8"]);
    assert!(stdout.contains("seed=8"), "{stdout}");
    let snap = fs::read_to_string(dir.path().join("synth.resolved.toml")).unwrap();
    assert!(snap.contains("seed = 8"));
    assert!(snap.contains("extent_km = 2.0"));
}

#[test]
fn build_reports_counts_and_respects_the_cap() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    let stdout = ok(dir.path(), &with_small(&["build", "--set", "build.cap=3"]));
    assert!(stdout.contains("min tile separation"), "{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("build.json")).unwrap()).unwrap();
    let max = report["max_grounds_per_tile"].as_u64().unwrap();
    assert!((1..=3).contains(&max));
    assert!(report["min_separation_m"].as_f64().unwrap() >= 112.0);

    ok(dir.path(), &with_small(&["build"]));
    let ds = load_dataset(&dir.path().join("pairs.grft")).unwrap();
    assert!(ds.max_grounds_per_tile() <= 25);
    assert!(stdout.contains(&format!("tiles {}", report["tiles"])));
}

#[test]
fn single_pair_manifest_gives_one_tile() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    let manifest = dir.path().join("world").join(GROUND_MANIFEST);
    let text = fs::read_to_string(&manifest).unwrap();
    let first = text.lines().find(|l| !l.starts_with('#')).unwrap();
    fs::write(&manifest, format!("{first}\n")).unwrap();
    let stdout = ok(dir.path(), &with_small(&["build"]));
    assert!(stdout.contains("tiles 1 pairs 1"), "{stdout}");
}

#[test]
fn corrupt_manifest_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    let manifest = dir.path().join("world").join(GROUND_MANIFEST);
    fs::write(&manifest, "g1 not-a-latitude 0.0 0 key\n").unwrap();
    assert_eq!(code(&graft(dir.path(), &with_small(&["build"]))), 4);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &["--seed", "2"], Some("0"));
    let ck = Checkpoint::load(&dir.path().join("model.grck")).unwrap();
    let ds = load_dataset(&dir.path().join("pairs.grft")).unwrap();
    let frozen = FrozenEncoder::load(&dir.path().join("world").join(GROUND_FIXTURE)).unwrap();
    let cfg = TrainConfig {
        seed: 2,
        ..TrainConfig::default()
    };
    assert_eq!(ck.params, init_params(&ds, &frozen, &cfg).unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("history.txt")).unwrap(), "");
}

#[test]
fn history_has_one_line_per_epoch_and_loss_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[], None);
    ok(dir.path(), &with_small(&["train", "--epochs", "3", "--loss", "l2"]));
    let history = fs::read_to_string(dir.path().join("history.txt")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        let mut parts = l.split_whitespace();
        assert_eq!(parts.next().unwrap(), (i + 1).to_string());
        assert!(parts.next().unwrap().parse::<f64>().unwrap().is_finite());
    }
    let ck = Checkpoint::load(&dir.path().join("model.grck")).unwrap();
    assert_eq!(ck.provenance["loss"], "l2");
    assert_eq!(ck.provenance["epochs"], "3");
    assert_eq!(code(&graft(dir.path(), &with_small(&["train", "--loss", "hinge"]))), 2);
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[], None);
    let train = |threads: &str| {
        ok(dir.path(), &with_small(&["train", "--epochs", "2", "--threads", threads]));
        (
            fs::read(dir.path().join("model.grck")).unwrap(),
            fs::read(dir.path().join("history.txt")).unwrap(),
        )
    };
    let one = train("1");
    assert_eq!(one, train("3"));
    assert_eq!(one, train("1"));
}

#[test]
fn divergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[], None);
    let o = graft(
        dir.path(),
        &with_small(&["train", "--epochs", "2", "--set", "train.peak_lr=1e300"]),
    );
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn oracle_classification_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    let stdout = ok(dir.path(), &with_small(&["eval", "--task", "classify", "--oracle"]));
    assert!(stdout.contains("accuracy 1.0000"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_classify.json")).unwrap()).unwrap();
    assert_eq!(summary["accuracy"], 1.0);

    let seg = |upsample: &str| {
        let set = format!("eval.upsample={upsample}");
        ok(dir.path(), &with_small(&["eval", "--task", "segment", "--oracle", "--set", &set]));
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("eval_segment.json")).unwrap()).unwrap();
        v["mean"].as_f64().unwrap()
    };
    assert_eq!(seg("1"), 1.0);
    // Bicubic logits blur boundaries against nearest-upsampled truth.
    let up = seg("4");
    assert!(up > 0.95 && up < 1.0, "{up}");
}

#[test]
fn retrieval_results_are_line_delimited() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    ok(dir.path(), &with_small(&["eval", "--task", "retrieve", "--oracle", "--set", "eval.tiles=60"]));
    let text = fs::read_to_string(dir.path().join("retrieval.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    for l in &lines {
        assert_eq!(l["items"].as_array().unwrap().len(), 60);
        let scores: Vec<f64> = l["scores"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval_retrieve.json")).unwrap()).unwrap();
    assert_eq!(summary["map_at_20"], 1.0);
}

#[test]
fn random_encoder_scores_near_chance() {
    // Monte-Carlo over seeds: an untrained encoder carries no class signal, so
    // its expected accuracy on a balanced eight-class world is 1/8.
    let seeds = 0..10;
    let mut total = 0.0;
    for seed in seeds.clone() {
        let dir = tempfile::tempdir().unwrap();
        let s = seed.to_string();
        pipeline(dir.path(), &["--seed", &s], Some("0"));
        ok(dir.path(), &with_small(&["eval", "--task", "classify", "--seed", &s]));
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("eval_classify.json")).unwrap()).unwrap();
        total += summary["accuracy"].as_f64().unwrap();
    }
    let mean = total / seeds.len() as f64;
    assert!((mean - 0.125).abs() <= 0.05, "mean accuracy {mean}");
}

#[test]
fn missing_or_foreign_checkpoint_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    assert_eq!(code(&graft(dir.path(), &with_small(&["eval", "--task", "classify"]))), 6);

    // A checkpoint trained on another world with a different feature size.
    let other = tempfile::tempdir().unwrap();
    pipeline(other.path(), &["--set", "world.feature_dim=12"], Some("0"));
    let ck = other.path().join("model.grck");
    let set = format!("paths.checkpoint=\"{}\"", ck.display());
    let o = graft(dir.path(), &with_small(&["eval", "--task", "classify", "--set", &set]));
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
}

fn read_density(path: &Path) -> (usize, usize, Vec<f32>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let mut header = |key: &str| {
        let l = lines.next().unwrap();
        let v = l.strip_prefix(key).unwrap().trim();
        v.to_string()
    };
    let width: usize = header("width").parse().unwrap();
    let height: usize = header("height").parse().unwrap();
    for key in ["origin_lat", "origin_lon", "cell_m"] {
        header(key);
    }
    let scores: Vec<f32> = lines
        .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f32>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(scores.len(), width * height);
    (width, height, scores)
}

#[test]
fn oracle_map_peaks_exactly_on_the_query_class() {
    let dir = tempfile::tempdir().unwrap();
    let args = with_small(&["--set", "world.noise_sigma=0.0", "--set", "map.rows=24", "--set", "map.cols=24"]);
    let mut synth = vec!["synth"];
    synth.extend(&args);
    ok(dir.path(), &synth);
    let world = SynthWorld::load(&dir.path().join("world")).unwrap();
    let (geometry, _) = world.region_tiles(24, 24).unwrap();
    for (k, label) in world.labels.iter().enumerate() {
        let mut map = vec!["map", "--oracle", "--query", label.as_str()];
        map.extend(&args);
        ok(dir.path(), &map);
        let (w, h, scores) = read_density(&dir.path().join("density.txt"));
        assert_eq!((w, h), (24, 24));
        let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        for row in 0..24u32 {
            for col in 0..24u32 {
                let truth = world.class_map.class_at(&geometry.cell_center(row, col).unwrap()).unwrap();
                let peak = scores[(row * 24 + col) as usize] == max;
                assert_eq!(peak, truth as usize == k, "{label} at {row},{col}");
            }
        }
    }
}

#[test]
fn trained_map_has_configured_dims_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path(), &[], Some("1"));
    let args = with_small(&["map", "--query", "water", "--set", "map.rows=5", "--set", "map.cols=7"]);
    ok(dir.path(), &args);
    let first = (
        fs::read(dir.path().join("density.txt")).unwrap(),
        fs::read(dir.path().join("density.pgm")).unwrap(),
    );
    let (w, h, _) = read_density(&dir.path().join("density.txt"));
    assert_eq!((w, h), (7, 5));
    assert!(first.1.starts_with(b"P5\n7 5\n255\n"));
    assert_eq!(first.1.len(), b"P5\n7 5\n255\n".len() + 35);
    ok(dir.path(), &args);
    assert_eq!(fs::read(dir.path().join("density.txt")).unwrap(), first.0);
    assert_eq!(fs::read(dir.path().join("density.pgm")).unwrap(), first.1);
}

#[test]
fn map_without_fixtures_exits_6() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["synth"]));
    fs::remove_file(dir.path().join("world").join(TEXT_FIXTURE)).unwrap();
    let o = graft(dir.path(), &with_small(&["map", "--oracle", "--query", "forest"]));
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
    ok(dir.path(), &with_small(&["synth"]));
    let o = graft(dir.path(), &with_small(&["map", "--oracle", "--query", "volcano"]));
    assert_eq!(code(&o), 6, "{}", String::from_utf8_lossy(&o.stderr));
}
