use std::fs;
use std::io::Write as _;
use std::path::Path;

use graft_core::align::{encode_tiles, train, Checkpoint, EncoderOutput};
use graft_core::corpus::manifest::{read_ground_manifest, read_snapshot_manifest};
use graft_core::corpus::synth::{load_blobs, GROUND_FIXTURE, GROUND_MANIFEST, SNAPSHOT_MANIFEST};
use graft_core::corpus::{build_pairs, load_dataset, save_dataset, BuildParams, PairedDataset, SynthWorld};
use graft_core::eval::{density_map, held_out_report, oracle_outputs, HeldOutReport};
use graft_core::geo::flat_distance_m;
use graft_core::{EmbeddingVec, FrozenEncoder};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Classify,
    Retrieve,
    Segment,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Retrieve => "retrieve",
            Task::Segment => "segment",
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    write(path, text.as_bytes())
}

/// Creates the output directory and drops the resolved config into it.
pub fn prepare_out(out: &Path, cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write(&out.join(format!("{command}.resolved.toml")), cfg.to_toml()?.as_bytes())
}

fn load_world(cfg: &RunConfig) -> Result<SynthWorld, CliError> {
    Ok(SynthWorld::load(cfg.world_dir())?)
}

fn load_fixture(dir: &Path) -> Result<FrozenEncoder, CliError> {
    let p = dir.join(GROUND_FIXTURE);
    FrozenEncoder::load(&p).map_err(|e| CliError::Mismatch(format!("{}: {e}", p.display())))
}

/// Loads the checkpoint and checks it was trained for this world.
fn load_checkpoint(cfg: &RunConfig, world: &SynthWorld) -> Result<Checkpoint, CliError> {
    let path = cfg.checkpoint_path();
    let ck = Checkpoint::load(path).map_err(|e| CliError::Mismatch(format!("checkpoint {}: {e}", path.display())))?;
    let p = &ck.params;
    let grid = world.config.tile_template()?.grid_dim() as usize;
    let expect = [
        ("feature dim", world.config.feature_dim, p.feature_dim()),
        ("embed dim", world.ground_encoder.dim(), p.embed_dim()),
        ("patch count", grid * grid, p.n_patches()),
    ];
    for (what, want, got) in expect {
        if want != got {
            return Err(CliError::Mismatch(format!(
                "checkpoint {what} is {got}, world needs {want}"
            )));
        }
    }
    if let Some(fp) = ck.provenance.get("frozen_fingerprint") {
        if *fp != world.ground_encoder.fingerprint() {
            return Err(CliError::Mismatch(
                "checkpoint was trained against a different ground fixture".into(),
            ));
        }
    }
    Ok(ck)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let world = SynthWorld::generate(&cfg.world, cfg.seed)?;
    let dir = cfg.world_dir();
    world.save(dir)?;

    let k = world.n_classes();
    let mut cells = vec![0usize; k];
    for &c in world.class_map.classes() {
        cells[c as usize] += 1;
    }
    let mut grounds = vec![0usize; k];
    for g in &world.grounds {
        if let Some(c) = world.class_map.class_at(&g.geo) {
            grounds[c as usize] += 1;
        }
    }
    println!("world written to {}", dir.display());
    println!(
        "K={k} seed={} grounds={} snapshots={}",
        world.seed,
        world.grounds.len(),
        world.snapshots.len()
    );
    println!("{:<16} {:>8} {:>8}", "class", "cells", "grounds");
    for (i, name) in world.labels.iter().enumerate() {
        println!("{name:<16} {:>8} {:>8}", cells[i], grounds[i]);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BuildReport {
    tiles: usize,
    pairs: usize,
    max_grounds_per_tile: usize,
    cap: usize,
    /// Smallest distance between two tile centers; `None` with a single tile.
    min_separation_m: Option<f64>,
    required_separation_m: f64,
}

fn min_separation(ds: &PairedDataset) -> Option<f64> {
    let centers: Vec<_> = ds.tiles.iter().map(|t| t.spec.center).collect();
    let mut best: Option<f64> = None;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d = flat_distance_m(&centers[i], &centers[j]);
            best = Some(best.map_or(d, |b| b.min(d)));
        }
    }
    best
}

pub fn build(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let dir = cfg.world_dir();
    let grounds = read_ground_manifest(&dir.join(GROUND_MANIFEST))?;
    let snapshots = read_snapshot_manifest(&dir.join(SNAPSHOT_MANIFEST))?;
    let blobs = load_blobs(dir, &snapshots)?;
    let fixture = load_fixture(dir)?;
    let template = cfg.world.tile_template()?;
    let params = BuildParams {
        template,
        cap: cfg.build.cap,
        min_sep_px: cfg.build.min_sep_px,
        seed: cfg.seed,
        channels: cfg.world.channels,
    };
    let ds = build_pairs(&grounds, &snapshots, &blobs, &fixture, &params)?;

    let report = BuildReport {
        tiles: ds.tiles.len(),
        pairs: ds.n_pairs(),
        max_grounds_per_tile: ds.max_grounds_per_tile(),
        cap: cfg.build.cap,
        min_separation_m: min_separation(&ds),
        required_separation_m: cfg.build.min_sep_px as f64 * template.resolution_m_per_px,
    };
    let separated = report
        .min_separation_m
        .is_none_or(|d| d >= report.required_separation_m);
    println!("tiles {} pairs {}", report.tiles, report.pairs);
    println!(
        "max grounds per tile {} (cap {})",
        report.max_grounds_per_tile, report.cap
    );
    match report.min_separation_m {
        Some(d) => println!(
            "min tile separation {d:.3} m (required {:.3} m): {}",
            report.required_separation_m,
            if separated { "ok" } else { "VIOLATED" }
        ),
        None => println!("min tile separation: single tile"),
    }
    if !separated || report.max_grounds_per_tile > report.cap {
        return Err(CliError::Integrity("built dataset violates its sampling constraints".into()));
    }
    save_dataset(&ds, cfg.dataset_path())?;
    write_json(&out.join("build.json"), &report)?;
    println!("dataset written to {}", cfg.dataset_path().display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let ds = load_dataset(cfg.dataset_path())?;
    let fixture = load_fixture(cfg.world_dir())?;
    let tc = cfg.train.to_train_config(cfg.seed)?;
    log::info!("training {} for {} epochs on {} tiles", tc.loss.variant, tc.epochs, ds.tiles.len());
    let (params, history) = train(&ds, &fixture, &tc)?;
    Checkpoint::new(params, history.provenance.clone()).save(cfg.checkpoint_path())?;
    write(&out.join("history.txt"), history.to_text().as_bytes())?;
    println!("loss {} epochs {}", tc.loss.variant, tc.epochs);
    if let Some(last) = history.epoch_losses.last() {
        println!("final epoch loss {last:.6}");
    }
    println!("checkpoint written to {}", cfg.checkpoint_path().display());
    Ok(())
}

fn held_out(cfg: &RunConfig, world: &SynthWorld, oracle: bool) -> Result<HeldOutReport, CliError> {
    let classes = world.class_embeddings()?;
    let seed = cfg.eval.seed.expect("resolved");
    let tiles = world.eval_tiles(cfg.eval.tiles, seed)?;
    let outputs: Vec<EncoderOutput> = if oracle {
        oracle_outputs(&tiles, &classes)
    } else {
        let ck = load_checkpoint(cfg, world)?;
        let refs: Vec<_> = tiles.iter().map(|t| &t.tile).collect();
        encode_tiles(&ck.params, &refs)?
    };
    Ok(held_out_report(&outputs, &tiles, &world.labels, &classes, cfg.eval.upsample)?)
}

pub fn eval(cfg: &RunConfig, out: &Path, task: Task, oracle: bool) -> Result<(), CliError> {
    if cfg.eval.upsample == 0 {
        return Err(CliError::Config("eval.upsample must be at least 1".into()));
    }
    let world = load_world(cfg)?;
    let report = held_out(cfg, &world, oracle)?;
    let source = if oracle { "oracle" } else { "checkpoint" };
    let summary = match task {
        Task::Classify => {
            println!("accuracy {:.4} over {} tiles", report.accuracy, report.predictions.len());
            println!("multilabel mAP {:.4}", report.multilabel.mean);
            json!({
                "task": "classify",
                "encoder": source,
                "tiles": report.predictions.len(),
                "accuracy": report.accuracy,
                "multilabel_map": report.multilabel.mean,
                "multilabel_per_class": report.multilabel.per_class,
            })
        }
        Task::Retrieve => {
            let path = out.join("retrieval.jsonl");
            let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            for r in &report.rankings {
                let line = json!({
                    "query_id": r.query_id,
                    "items": r.items.iter().map(|(id, _)| id).collect::<Vec<_>>(),
                    "scores": r.items.iter().map(|(_, s)| s).collect::<Vec<_>>(),
                });
                writeln!(w, "{line}").map_err(|e| CliError::io(&path, e))?;
            }
            w.flush().map_err(|e| CliError::io(&path, e))?;
            println!("mAP@100 {:.4}", report.map_at_100);
            println!("mAP@20 {:.4}", report.map_at_20);
            json!({
                "task": "retrieve",
                "encoder": source,
                "queries": report.rankings.len(),
                "map_at_100": report.map_at_100,
                "map_at_20": report.map_at_20,
            })
        }
        Task::Segment => {
            println!("{:<16} {:>9}", "class", "accuracy");
            for &(k, acc) in &report.segmentation.per_class {
                println!("{:<16} {acc:>9.4}", world.labels[k as usize]);
            }
            println!("{:<16} {:>9.4}", "mean", report.segmentation.mean);
            let per_class: Vec<_> = report
                .segmentation
                .per_class
                .iter()
                .map(|&(k, acc)| json!({"class": world.labels[k as usize], "accuracy": acc}))
                .collect();
            json!({
                "task": "segment",
                "encoder": source,
                "upsample": cfg.eval.upsample,
                "per_class": per_class,
                "mean": report.segmentation.mean,
            })
        }
    };
    write_json(&out.join(format!("eval_{}.json", task.name())), &summary)
}

pub fn map(cfg: &RunConfig, out: &Path, query: &str, oracle: bool) -> Result<(), CliError> {
    let world = load_world(cfg)?;
    let q = world.text_encoder.embed_text(query, &world.prompts)?;
    let (geometry, tiles) = world.region_tiles(cfg.map.rows, cfg.map.cols)?;
    let cells: Vec<EmbeddingVec> = if oracle {
        // Ground truth injected as the encoder output: every cell gets the
        // embedding of the class at its center.
        let classes = world.class_embeddings()?;
        let mut v = Vec::with_capacity(tiles.len());
        for row in 0..geometry.rows {
            for col in 0..geometry.cols {
                let c = geometry.cell_center(row, col)?;
                let k = world
                    .class_map
                    .class_at(&c)
                    .ok_or_else(|| CliError::Integrity(format!("map cell {row},{col} outside the class map")))?;
                v.push(classes[k as usize].clone());
            }
        }
        v
    } else {
        let ck = load_checkpoint(cfg, &world)?;
        let refs: Vec<_> = tiles.iter().collect();
        encode_tiles(&ck.params, &refs)?
            .into_iter()
            .map(|o| o.image_emb)
            .collect()
    };
    let dm = density_map(geometry, &cells, q.as_slice())?;
    write(&out.join("density.txt"), dm.to_text().as_bytes())?;
    write(&out.join("density.pgm"), &dm.to_pgm())?;
    let max = dm.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let min = dm.scores.iter().copied().fold(f32::INFINITY, f32::min);
    println!(
        "query {query:?}: {}x{} cells of {:.1} m, scores in [{min:.4}, {max:.4}]",
        geometry.rows, geometry.cols, geometry.cell_m
    );
    println!("density map written to {}", out.join("density.txt").display());
    Ok(())
}
