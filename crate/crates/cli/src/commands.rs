//! The pipeline stages. Each stage reads its inputs, writes its artifacts
//! under the configured output directory and returns what it produced.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use debias_core::blueprint::encode_png;
use debias_core::dataset::write_group_report;
use debias_core::digest::{json_digest, sha256_hex};
use debias_core::dynamics::{read_error_stream, run_update_stream};
use debias_core::layout::{read_layouts, write_layouts};
use debias_core::recalibration::recalibrate_batch;
use debias_core::scoring::compute_rs_table;
use debias_core::{
    load_annotations, render_blueprint, Dataset, EmbeddingStore, Error, Layout, LayoutPriors, Result,
    RsTable, Snapshot, UpdateReport,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::report::{write_plots, BiasReport};
use crate::{io_err, write_json};

pub const RS_TABLE: &str = "rs_table.json";
pub const BIAS_REPORT: &str = "bias_report.json";
pub const GROUPS: &str = "groups.jsonl";
pub const LAYOUTS: &str = "layouts.jsonl";
pub const LAYOUTS_META: &str = "layouts.meta.json";
pub const BLUEPRINT_DIR: &str = "blueprints";
pub const BLUEPRINT_INDEX: &str = "blueprints/index.jsonl";
pub const SNAPSHOT: &str = "rs_snapshot.json";
pub const UPDATE_REPORT: &str = "update_report.json";
pub const PLOT_DIR: &str = "plots";

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let ds = load_annotations(cfg.require_annotations()?, &cfg.binning)?;
    if ds.dropped_boxes > 0 {
        log::warn!("dropped {} zero-area boxes after clamping", ds.dropped_boxes);
    }
    Ok(ds)
}

fn load_embeddings(cfg: &PipelineConfig, ds: &Dataset) -> Result<EmbeddingStore> {
    let mut store = match &cfg.paths.embeddings {
        Some(p) => EmbeddingStore::load(p)?,
        None => EmbeddingStore::new(),
    };
    if let Some(dir) = &cfg.paths.images {
        let added = store.fill_missing_with_fallback(ds, dir)?;
        log::info!("computed {added} fallback descriptors");
    }
    Ok(store)
}

pub struct StatsOutput {
    pub dataset: Dataset,
    pub table: RsTable,
    pub report: BiasReport,
    /// Files written, relative to the output directory.
    pub files: Vec<String>,
}

pub fn stats(cfg: &PipelineConfig) -> Result<StatsOutput> {
    let ds = load_dataset(cfg)?;
    if ds.total_instances == 0 {
        return Err(Error::EmptyDataset);
    }
    let store = load_embeddings(cfg, &ds)?;
    let table = compute_rs_table(&ds, &store, cfg.beta)?;
    let report = BiasReport::build(&ds, &table, cfg.report.lowest_groups, &cfg.digest())?;

    let out = &cfg.paths.out;
    create_dir(out)?;
    table.write(out.join(RS_TABLE))?;
    write_json(&out.join(BIAS_REPORT), &report)?;
    let groups = out.join(GROUPS);
    let mut w = create_file(&groups)?;
    write_group_report(&ds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&groups, e))?;

    let mut files = vec![RS_TABLE.to_string(), BIAS_REPORT.to_string(), GROUPS.to_string()];
    if cfg.report.plots {
        let dir = out.join(PLOT_DIR);
        create_dir(&dir)?;
        for name in write_plots(&report, &dir)? {
            files.push(format!("{PLOT_DIR}/{name}"));
        }
    }
    Ok(StatsOutput {
        dataset: ds,
        table,
        report,
        files,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegenerateLayout {
    pub image_id: u64,
    pub error: String,
}

/// Sidecar of the recalibrated layouts file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecalibMeta {
    pub config_digest: String,
    pub config: PipelineConfig,
    pub dataset_digest: String,
    pub table_digest: String,
    pub seeds: usize,
    pub layouts: usize,
    pub placement_failures: usize,
    pub degenerate: Vec<DegenerateLayout>,
}

pub struct RecalibOutput {
    pub layouts: Vec<Layout>,
    pub meta: RecalibMeta,
}

pub fn read_layout_file(path: &Path) -> Result<Vec<Layout>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    read_layouts(BufReader::new(f))
}

pub fn recalibrate(cfg: &PipelineConfig, ds: &Dataset, table: &RsTable) -> Result<RecalibOutput> {
    if table.dataset_digest != ds.digest() {
        return Err(Error::Compatibility {
            expected: ds.digest(),
            found: table.dataset_digest.clone(),
        });
    }
    let seeds = match &cfg.paths.seeds {
        Some(p) => read_layout_file(p)?,
        None => ds.images.iter().map(Layout::from_image).collect(),
    };
    let priors = LayoutPriors::from_dataset(ds);
    let results = recalibrate_batch(&seeds, &priors, &ds.binning, table, &cfg.recalib);

    let mut layouts = Vec::with_capacity(seeds.len());
    let mut degenerate = Vec::new();
    let mut placement_failures = 0;
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(o) => {
                placement_failures += o.placement_failures;
                layouts.push(o.layout);
            }
            Err(e @ Error::DegenerateLayout { .. }) => {
                log::warn!("{e}");
                placement_failures += seed.len();
                degenerate.push(DegenerateLayout {
                    image_id: seed.image_id,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let meta = RecalibMeta {
        config_digest: cfg.digest(),
        config: cfg.recorded(),
        dataset_digest: ds.digest(),
        table_digest: table.digest(),
        seeds: seeds.len(),
        layouts: layouts.len(),
        placement_failures,
        degenerate,
    };

    let out = &cfg.paths.out;
    create_dir(out)?;
    let path = out.join(LAYOUTS);
    let mut w = create_file(&path)?;
    write_layouts(&layouts, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&path, e))?;
    write_json(&out.join(LAYOUTS_META), &meta)?;
    Ok(RecalibOutput { layouts, meta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub image_id: u64,
    pub variant: String,
    pub layout_digest: String,
    pub palette_digest: String,
    pub config_digest: String,
    pub png_sha256: String,
}

pub struct RenderOutput {
    pub index: Vec<IndexEntry>,
    pub failures: Vec<DegenerateLayout>,
}

pub fn render(cfg: &PipelineConfig, layouts: &[Layout], num_classes: usize, variant: &str) -> Result<RenderOutput> {
    let palette = cfg.blueprint.palette(num_classes)?;
    let alpha = cfg.blueprint.alpha()?;
    let palette_digest = palette.digest();
    let config_digest = cfg.digest();
    let dir = cfg.paths.out.join(BLUEPRINT_DIR);
    create_dir(&dir)?;

    let rendered: Vec<Result<(IndexEntry, Vec<u8>)>> = layouts
        .par_iter()
        .map(|layout| {
            let png = encode_png(&render_blueprint(layout, &palette, alpha)?)?;
            let entry = IndexEntry {
                file: format!("{}_{variant}.png", layout.image_id),
                image_id: layout.image_id,
                variant: variant.to_string(),
                layout_digest: json_digest(layout),
                palette_digest: palette_digest.clone(),
                config_digest: config_digest.clone(),
                png_sha256: sha256_hex(&png),
            };
            Ok((entry, png))
        })
        .collect();

    let mut index = Vec::new();
    let mut failures = Vec::new();
    for (layout, r) in layouts.iter().zip(rendered) {
        match r {
            Ok((entry, png)) => {
                let path = dir.join(&entry.file);
                std::fs::write(&path, png).map_err(|e| io_err(&path, e))?;
                index.push(entry);
            }
            Err(e) if !e.is_io() => {
                log::warn!("layout {} not rendered: {e}", layout.image_id);
                failures.push(DegenerateLayout {
                    image_id: layout.image_id,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let path = cfg.paths.out.join(BLUEPRINT_INDEX);
    let mut w = create_file(&path)?;
    for e in &index {
        serde_json::to_writer(&mut w, e)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|err| io_err(&path, err))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    Ok(RenderOutput { index, failures })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub config_digest: String,
    pub input_table_digest: String,
    pub output_table_digest: String,
    pub mu: f64,
    pub loss_scale: f64,
    pub records_applied_total: u64,
    pub report: UpdateReport,
}

/// Reads either a snapshot or a bare score table.
pub fn read_snapshot(path: &Path, mu: f64) -> Result<Snapshot> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    match Snapshot::from_json(&text) {
        Ok(s) => Ok(s),
        Err(_) => Ok(Snapshot::new(RsTable::from_json(&text)?, mu)),
    }
}

pub fn update(
    cfg: &PipelineConfig,
    mut snap: Snapshot,
    expected_digest: Option<&str>,
) -> Result<(Snapshot, UpdateSummary)> {
    if let Some(expected) = expected_digest {
        if snap.table.dataset_digest != expected {
            return Err(Error::Compatibility {
                expected: expected.to_string(),
                found: snap.table.dataset_digest.clone(),
            });
        }
    }
    let errors = cfg
        .paths
        .errors
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no error stream given (--errors or config paths.errors)".into()))?;
    let f = File::open(errors).map_err(|e| io_err(errors, e))?;
    let input_table_digest = snap.table.digest();
    let report = run_update_stream(&mut snap.table, read_error_stream(BufReader::new(f)), &cfg.dynamics)?;
    snap.mu = cfg.dynamics.mu;
    snap.records_applied += report.applied as u64;

    let out = &cfg.paths.out;
    create_dir(out)?;
    let path = out.join(SNAPSHOT);
    std::fs::write(&path, snap.to_json()).map_err(|e| io_err(&path, e))?;
    let summary = UpdateSummary {
        config_digest: cfg.digest(),
        input_table_digest,
        output_table_digest: snap.table.digest(),
        mu: cfg.dynamics.mu,
        loss_scale: cfg.dynamics.loss_scale,
        records_applied_total: snap.records_applied,
        report,
    };
    write_json(&out.join(UPDATE_REPORT), &summary)?;
    Ok((snap, summary))
}
