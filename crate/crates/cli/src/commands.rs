use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;

use sslprof_core::dataio::{load_manifest, read_embeddings, write_embeddings};
use sslprof_core::encoder::read_checkpoint;
use sslprof_core::evaluate::evaluate_wells;
use sslprof_core::postprocess::{aggregate_wells, cross_plate_align, fuse_channel_models, AggregateConfig, AlignmentConfig};
use sslprof_core::synthgen::{generate_dataset, SynthConfig};
use sslprof_core::trainer::{embed_dataset, steps_per_epoch, train};
use sslprof_core::{EmbeddingTable, EvalConfig, TrainConfig};

use crate::args::{Command, Common};
use crate::{report, Failure};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SITES_FILE: &str = "sites.cpem";
pub const WELLS_FILE: &str = "wells.cpem";
pub const ALIGNED_FILE: &str = "wells_aligned.cpem";
pub const FUSED_FILE: &str = "wells_fused.cpem";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_CONFIG_FILE: &str = "config.json";

pub fn run(command: Command) -> Result<(), Failure> {
    let common = command.common().clone();
    match command {
        Command::Synth { .. } => synth(&common),
        Command::Train {
            manifest,
            channel_set,
            epochs,
            crop_only,
            no_local_aggregation,
            ..
        } => {
            let mut cfg: TrainConfig = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(set) = channel_set {
                cfg.channel_set = set;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if crop_only {
                cfg.augment = cfg.augment.crop_only();
            }
            if no_local_aggregation {
                cfg.loss.local_aggregation = false;
            }
            train_cmd(&common, cfg, &manifest)
        }
        Command::Embed {
            checkpoint, manifest, ..
        } => embed(&common, &checkpoint, &manifest),
        Command::Aggregate {
            embeddings,
            site_mode,
            merge_mode,
            grid_alignment,
            ..
        } => {
            let mut cfg: AggregateConfig = load_config(&common)?;
            if let Some(m) = site_mode {
                cfg.site_mode = m;
            }
            if let Some(m) = merge_mode {
                cfg.merge_mode = m;
            }
            if let Some(g) = grid_alignment {
                cfg.grid_alignment = g;
            }
            let sites = read_embeddings(&embeddings)?;
            let out = output_dir(&common)?;
            if common.dry_run {
                info!("dry run: would aggregate {} site rows with {cfg:?}", sites.len());
                return Ok(());
            }
            let wells = aggregate_wells(&sites, &cfg)?;
            write_table(&wells, &out.join(WELLS_FILE))
        }
        Command::Align { embeddings, alpha, .. } => {
            let mut cfg: AlignmentConfig = load_config(&common)?;
            if let Some(a) = alpha {
                cfg.alpha_align = a;
            }
            cfg.validate()?;
            let wells = read_embeddings(&embeddings)?;
            let out = output_dir(&common)?;
            if common.dry_run {
                info!("dry run: would align {} wells with alpha {}", wells.len(), cfg.alpha_align);
                return Ok(());
            }
            let aligned = cross_plate_align(&wells, &cfg)?;
            write_table(&aligned, &out.join(ALIGNED_FILE))
        }
        Command::Fuse {
            fluorescent,
            brightfield,
            ..
        } => {
            reject_config(&common, "fuse")?;
            let fl = read_embeddings(&fluorescent)?;
            let bf = read_embeddings(&brightfield)?;
            let out = output_dir(&common)?;
            let fused = fuse_channel_models(&fl, &bf)?;
            if common.dry_run {
                info!("dry run: would write {} fused wells of dim {}", fused.len(), fused.dim());
                return Ok(());
            }
            write_table(&fused, &out.join(FUSED_FILE))
        }
        Command::Evaluate {
            embeddings,
            labels,
            sites,
            k,
            metric,
            n_folds,
            mode,
            ..
        } => {
            let mut cfg: EvalConfig = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(k) = k {
                cfg.k = k;
            }
            if let Some(m) = metric {
                cfg.metric = m;
            }
            if let Some(n) = n_folds {
                cfg.n_folds = n;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            evaluate(&common, &cfg, &embeddings, &labels, sites.as_deref())
        }
        Command::Report { metrics, evals, .. } => {
            reject_config(&common, "report")?;
            let out = output_dir(&common)?;
            report::run(&metrics, &evals, &out, common.dry_run)
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(common: &Common) -> Result<T, Failure> {
    let Some(path) = &common.config else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("config {}: {e}", path.display())))
}

fn reject_config(common: &Common, command: &str) -> Result<(), Failure> {
    match &common.config {
        Some(_) => Err(Failure::Validation(format!("`{command}` takes no --config"))),
        None => Ok(()),
    }
}

fn output_dir(common: &Common) -> Result<PathBuf, Failure> {
    common
        .out
        .clone()
        .ok_or_else(|| Failure::Validation("--out is required".into()))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_table(table: &EmbeddingTable, path: &Path) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    write_embeddings(table, path)?;
    info!("wrote {} rows of dim {} to {}", table.len(), table.dim(), path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn synth(common: &Common) -> Result<(), Failure> {
    let mut cfg: SynthConfig = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = output_dir(common)?;
    if common.dry_run {
        info!(
            "dry run: would write {} plates x {} wells x {} sites to {}",
            cfg.n_plates(),
            cfg.n_well_positions,
            cfg.sites_per_well,
            out.display()
        );
        return Ok(());
    }
    let manifest = generate_dataset(&cfg, &out)?;
    info!("wrote {} site records to {}", manifest.records.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

fn train_cmd(common: &Common, cfg: TrainConfig, manifest: &Path) -> Result<(), Failure> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let manifest = load_manifest(manifest)?;
    let out = output_dir(common)?;
    if common.dry_run {
        let n_sites = manifest.records.iter().filter(|r| r.channel_set == cfg.channel_set).count();
        if n_sites == 0 {
            return Err(Failure::Validation(format!("manifest has no {} sites", cfg.channel_set)));
        }
        info!(
            "dry run: {} sites, {} steps/epoch, {} epochs",
            n_sites,
            steps_per_epoch(n_sites, cfg.batch_size),
            cfg.epochs
        );
        return Ok(());
    }
    create_dir(&out)?;
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes");
    write_text(&out.join(TRAIN_CONFIG_FILE), &json)?;
    let outcome = train(&manifest, &cfg, &out)?;
    info!("final checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

/// A checkpoint file, or the latest `*.cpck` under a training output
/// directory (or its `checkpoints/` subdirectory).
fn resolve_checkpoint(path: &Path) -> Result<PathBuf, Failure> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let nested = path.join("checkpoints");
    let dir = if nested.is_dir() { nested } else { path.to_path_buf() };
    let entries = std::fs::read_dir(&dir).map_err(|e| Failure::Validation(format!("{}: {e}", dir.display())))?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cpck"))
        .max()
        .ok_or_else(|| Failure::Validation(format!("no .cpck checkpoint in {}", dir.display())))
}

fn embed(common: &Common, checkpoint: &Path, manifest: &Path) -> Result<(), Failure> {
    reject_config(common, "embed")?;
    let path = resolve_checkpoint(checkpoint)?;
    let ck = read_checkpoint(&path)?;
    let manifest = load_manifest(manifest)?;
    let out = output_dir(common)?;
    if common.dry_run {
        info!("dry run: would embed {} sites with {}", ck.meta.channel_set, path.display());
        return Ok(());
    }
    info!("embedding {} sites with {}", ck.meta.channel_set, path.display());
    let table = embed_dataset(&ck, &manifest, ck.meta.channel_set)?;
    write_table(&table, &out.join(SITES_FILE))
}

fn evaluate(
    common: &Common,
    cfg: &EvalConfig,
    embeddings: &Path,
    labels: &Path,
    sites: Option<&Path>,
) -> Result<(), Failure> {
    cfg.validate()?;
    let table = read_embeddings(embeddings)?;
    let manifest = load_manifest(labels)?;
    let sites = sites.map(read_embeddings).transpose()?;
    if common.dry_run {
        info!("dry run: would evaluate {} wells with {cfg:?}", table.len());
        return Ok(());
    }
    let report = evaluate_wells(&table, &manifest, sites.as_ref(), cfg)?;
    if let Some(acc) = report.within_mean_accuracy {
        info!("within-line kNN accuracy {acc:.4} (chance {:.4})", report.chance);
    }
    if let Some(acc) = report.cross_mean_accuracy {
        info!("cross-line kNN accuracy {acc:.4}");
    }
    if report.diagnostics.collapse.collapsed {
        log::warn!("embedding collapse detected");
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    match &common.out {
        Some(out) => {
            create_dir(out)?;
            write_text(&out.join(REPORT_FILE), &json)
        }
        None => {
            println!("{json}");
            Ok(())
        }
    }
}
