//! Machine-readable bias report and optional histogram images.

use std::collections::BTreeMap;
use std::path::Path;

use debias_core::blueprint::write_png;
use debias_core::dataset::{group_assignments, partition_frequency, FrequencyTier};
use debias_core::{Canvas, Dataset, GroupStats, Region, Result, RsTable};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: usize,
    pub name: String,
    pub category_id: u64,
    pub instances: usize,
    pub mean_rs: f64,
    pub tier: FrequencyTier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub config_digest: String,
    pub dataset_digest: String,
    pub table_digest: String,
    pub images: usize,
    pub total_instances: usize,
    pub dropped_boxes: usize,
    pub classes: Vec<ClassEntry>,
    pub size_bin_counts: Vec<usize>,
    pub pos_bin_counts: Vec<usize>,
    pub region_counts: BTreeMap<Region, usize>,
    pub frequency_tiers: BTreeMap<FrequencyTier, Vec<String>>,
    pub lowest_groups: Vec<GroupStats>,
}

impl BiasReport {
    pub fn build(ds: &Dataset, table: &RsTable, lowest: usize, config_digest: &str) -> Result<Self> {
        let tiers = partition_frequency(ds)?;
        let counts = ds.class_counts();
        let classes = (0..ds.num_classes())
            .map(|c| ClassEntry {
                class_id: c,
                name: ds.classes[c].clone(),
                category_id: ds.category_ids[c],
                instances: counts[c],
                mean_rs: table.class_mean(c),
                tier: tiers[&c],
            })
            .collect();

        let mut size_bin_counts = vec![0; ds.binning.size_bins];
        let mut pos_bin_counts = vec![0; ds.binning.pos_bins];
        let mut region_counts: BTreeMap<Region, usize> =
            [Region::Center, Region::Middle, Region::Outer].into_iter().map(|r| (r, 0)).collect();
        for a in group_assignments(ds) {
            size_bin_counts[a.size_bin] += 1;
            pos_bin_counts[a.pos_bin] += 1;
            *region_counts.get_mut(&a.region).unwrap() += 1;
        }
        let mut frequency_tiers: BTreeMap<FrequencyTier, Vec<String>> = BTreeMap::new();
        for (c, tier) in &tiers {
            frequency_tiers.entry(*tier).or_default().push(ds.classes[*c].clone());
        }

        Ok(BiasReport {
            config_digest: config_digest.to_string(),
            dataset_digest: ds.digest(),
            table_digest: table.digest(),
            images: ds.images.len(),
            total_instances: ds.total_instances,
            dropped_boxes: ds.dropped_boxes,
            classes,
            size_bin_counts,
            pos_bin_counts,
            region_counts,
            frequency_tiers,
            lowest_groups: table.lowest(lowest).into_iter().cloned().collect(),
        })
    }
}

const BAR_W: u32 = 12;
const GAP: u32 = 4;
const PLOT_H: u32 = 120;

/// White bars on black, heights relative to the largest count.
pub fn histogram(counts: &[usize]) -> Result<Canvas> {
    let n = counts.len().max(1) as u32;
    let mut canvas = Canvas::new(n * (BAR_W + GAP) + GAP, PLOT_H)?;
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    for (i, &c) in counts.iter().enumerate() {
        let bar = (c as u64 * u64::from(PLOT_H - 2 * GAP) / max as u64) as u32;
        let x0 = GAP + i as u32 * (BAR_W + GAP);
        for y in PLOT_H - GAP - bar..PLOT_H - GAP {
            for x in x0..x0 + BAR_W {
                canvas.set_pixel(x, y, [255, 255, 255]);
            }
        }
    }
    Ok(canvas)
}

/// Writes one PNG per histogram axis into `dir` and returns the file names.
pub fn write_plots(report: &BiasReport, dir: &Path) -> Result<Vec<String>> {
    let class_counts: Vec<usize> = report.classes.iter().map(|c| c.instances).collect();
    let regions: Vec<usize> = report.region_counts.values().copied().collect();
    let mut written = Vec::new();
    for (name, counts) in [
        ("hist_classes.png", &class_counts),
        ("hist_size_bins.png", &report.size_bin_counts),
        ("hist_pos_bins.png", &report.pos_bin_counts),
        ("hist_regions.png", &regions),
    ] {
        write_png(&histogram(counts)?, dir.join(name))?;
        written.push(name.to_string());
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_bar_heights() {
        let c = histogram(&[2, 1, 0]).unwrap();
        let column = |x: u32| (0..PLOT_H).filter(|&y| c.pixel(x, y) == [255, 255, 255]).count();
        assert_eq!(column(GAP), (PLOT_H - 2 * GAP) as usize);
        assert_eq!(column(GAP + BAR_W + GAP), ((PLOT_H - 2 * GAP) / 2) as usize);
        assert_eq!(column(GAP + 2 * (BAR_W + GAP)), 0);
    }
}
