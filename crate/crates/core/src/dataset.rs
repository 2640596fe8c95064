//! Annotation ingest, data-group assignment and evaluation partitions.
//!
//! A [`Dataset`] is built once from COCO-style JSON and is immutable
//! afterwards. Boxes are normalized to corner form and clamped to the image;
//! boxes that collapse to zero area are dropped and counted.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates, `[x1, y1, x2, y2]` on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite box {b:?}")));
        }
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
        }
        Ok(b)
    }

    /// COCO `[x, y, w, h]` to corner form. Does not validate.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing with positive
    /// area is left.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        let (w, h) = (f64::from(width), f64::from(height));
        let c = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        (c.x1 < c.x2 && c.y1 < c.y2 && c.area() > 0.0).then_some(c)
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x1 >= 0.0
            && self.y1 >= 0.0
            && self.x2 <= f64::from(width)
            && self.y2 <= f64::from(height)
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x1 < other.x2 && other.x1 < self.x2 && self.y1 < other.y2 && other.y1 < self.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub instance_id: u64,
    pub image_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    /// Key into the embedding store when it differs from `instance_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_id: Option<u64>,
}

impl Instance {
    pub fn embedding_key(&self) -> u64 {
        self.embedding_id.unwrap_or(self.instance_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    pub instances: Vec<Instance>,
    pub class_set: BTreeSet<usize>,
}

impl ImageRecord {
    /// Builds a record and derives `class_set` from the instances.
    pub fn new(image_id: u64, width: u32, height: u32, instances: Vec<Instance>) -> Self {
        let class_set = instances.iter().map(|i| i.class_id).collect();
        ImageRecord {
            image_id,
            width,
            height,
            file_name: None,
            instances,
            class_set,
        }
    }
}

/// Data group identifier: class x size bin x horizontal position bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub class_id: usize,
    pub size_bin: usize,
    pub pos_bin: usize,
}

impl GroupKey {
    pub fn new(class_id: usize, size_bin: usize, pos_bin: usize) -> Self {
        GroupKey {
            class_id,
            size_bin,
            pos_bin,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(c{}, s{}, u{})", self.class_id, self.size_bin, self.pos_bin)
    }
}

/// Smallest area handed out for the lowest size bin when realizing boxes.
pub const MIN_BOX_AREA: f64 = 1.0;

/// Largest fraction of the canvas the top size bin may cover.
pub const TOP_BIN_CANVAS_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinningConfig {
    pub size_bins: usize,
    /// Area thresholds in px², strictly increasing. Bins are half-open:
    /// bin `k` holds areas in `[t[k-1], t[k])`.
    pub size_thresholds: Vec<f64>,
    pub pos_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        BinningConfig {
            size_bins: 3,
            size_thresholds: vec![32.0 * 32.0, 96.0 * 96.0],
            pos_bins: 3,
        }
    }
}

impl BinningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size_bins == 0 || self.pos_bins == 0 {
            return Err(Error::InvalidArgument("bin counts must be positive".into()));
        }
        if self.size_thresholds.len() + 1 != self.size_bins {
            return Err(Error::InvalidArgument(format!(
                "{} size bins need {} thresholds, got {}",
                self.size_bins,
                self.size_bins - 1,
                self.size_thresholds.len()
            )));
        }
        let ok = self.size_thresholds.iter().all(|t| t.is_finite() && *t > 0.0)
            && self.size_thresholds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidArgument(
                "size thresholds must be positive, finite and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.size_bins * self.pos_bins
    }

    pub fn size_bin(&self, area: f64) -> usize {
        self.size_thresholds.iter().filter(|&&t| area >= t).count()
    }

    pub fn pos_bin(&self, cx: f64, width: u32) -> usize {
        let raw = (self.pos_bins as f64 * cx / f64::from(width)).floor();
        if raw <= 0.0 {
            0
        } else {
            (raw as usize).min(self.pos_bins - 1)
        }
    }

    /// Horizontal band `[lo, hi)` covered by a position bin.
    pub fn pos_band(&self, pos_bin: usize, width: u32) -> (f64, f64) {
        let w = f64::from(width);
        let n = self.pos_bins as f64;
        (pos_bin as f64 * w / n, (pos_bin + 1) as f64 * w / n)
    }

    /// Area range `[lo, hi)` used when realizing a box in `size_bin` on a
    /// canvas of `canvas_area` px².
    pub fn area_range(&self, size_bin: usize, canvas_area: f64) -> (f64, f64) {
        let lo = if size_bin == 0 {
            MIN_BOX_AREA
        } else {
            self.size_thresholds[size_bin - 1]
        };
        let cap = TOP_BIN_CANVAS_FRACTION * canvas_area;
        let hi = self.size_thresholds.get(size_bin).copied().unwrap_or(cap).min(cap);
        (lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Center,
    Middle,
    Outer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrequencyTier {
    Frequent,
    Common,
    Rare,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Sorted by `image_id`; instances within an image sorted by id.
    pub images: Vec<ImageRecord>,
    pub classes: Vec<String>,
    /// Original COCO category id for each class index.
    pub category_ids: Vec<u64>,
    pub total_instances: usize,
    /// Boxes dropped because clamping left no area.
    pub dropped_boxes: usize,
    pub binning: BinningConfig,
}

#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

pub fn load_annotations(path: impl AsRef<Path>, config: &BinningConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_coco_str(&text, config)
}

impl Dataset {
    pub fn from_coco_str(text: &str, config: &BinningConfig) -> Result<Self> {
        config.validate()?;
        let coco: CocoFile = serde_json::from_str(text).map_err(|e| Error::json(text, e))?;

        let mut categories = coco.categories;
        categories.sort_by_key(|c| c.id);
        let mut class_of: HashMap<u64, usize> = HashMap::new();
        let mut names = HashSet::new();
        for (idx, cat) in categories.iter().enumerate() {
            if class_of.insert(cat.id, idx).is_some() {
                return Err(Error::Structural(format!("duplicate category id {}", cat.id)));
            }
            if !names.insert(cat.name.as_str()) {
                return Err(Error::Structural(format!("duplicate category name {:?}", cat.name)));
            }
        }

        let mut images: BTreeMap<u64, ImageRecord> = BTreeMap::new();
        for img in coco.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Structural(format!("image {} has zero size", img.id)));
            }
            let mut rec = ImageRecord::new(img.id, img.width, img.height, Vec::new());
            rec.file_name = img.file_name;
            if images.insert(img.id, rec).is_some() {
                return Err(Error::Structural(format!("duplicate image id {}", img.id)));
            }
        }

        let mut unknown_images = BTreeSet::new();
        let mut unknown_categories = BTreeSet::new();
        let mut seen_ids = HashSet::new();
        let mut duplicate_ids = BTreeSet::new();
        let mut dropped = 0usize;
        for ann in coco.annotations {
            if !seen_ids.insert(ann.id) {
                duplicate_ids.insert(ann.id);
                continue;
            }
            let class_id = match class_of.get(&ann.category_id) {
                Some(&c) => c,
                None => {
                    unknown_categories.insert(ann.category_id);
                    continue;
                }
            };
            let Some(img) = images.get_mut(&ann.image_id) else {
                unknown_images.insert(ann.image_id);
                continue;
            };
            let [x, y, w, h] = ann.bbox;
            let Some(bbox) = BBox::from_xywh(x, y, w, h).clamp_to(img.width, img.height) else {
                dropped += 1;
                continue;
            };
            img.instances.push(Instance {
                instance_id: ann.id,
                image_id: ann.image_id,
                class_id,
                bbox,
                embedding_id: None,
            });
        }

        let mut problems = Vec::new();
        if !unknown_images.is_empty() {
            problems.push(format!(
                "unknown image ids {:?}",
                unknown_images.iter().collect::<Vec<_>>()
            ));
        }
        if !unknown_categories.is_empty() {
            problems.push(format!(
                "unknown category ids {:?}",
                unknown_categories.iter().collect::<Vec<_>>()
            ));
        }
        if !duplicate_ids.is_empty() {
            problems.push(format!("duplicate annotation ids {duplicate_ids:?}"));
        }
        if !problems.is_empty() {
            return Err(Error::Structural(problems.join("; ")));
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} zero-area boxes after clamping");
        }

        let images = images
            .into_values()
            .map(|mut rec| {
                rec.instances.sort_by_key(|i| i.instance_id);
                rec.class_set = rec.instances.iter().map(|i| i.class_id).collect();
                rec
            })
            .collect();
        let mut ds = Dataset::from_parts(
            images,
            categories.iter().map(|c| c.name.clone()).collect(),
            config.clone(),
        )?;
        ds.category_ids = categories.iter().map(|c| c.id).collect();
        ds.dropped_boxes = dropped;
        Ok(ds)
    }

    /// Assembles a dataset from already-normalized parts, checking the
    /// structural invariants.
    pub fn from_parts(
        mut images: Vec<ImageRecord>,
        classes: Vec<String>,
        binning: BinningConfig,
    ) -> Result<Self> {
        binning.validate()?;
        let unique: HashSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::Structural("class names must be unique".into()));
        }
        images.sort_by_key(|i| i.image_id);
        let mut ids = HashSet::new();
        for img in &mut images {
            for inst in &img.instances {
                if inst.class_id >= classes.len() {
                    return Err(Error::Structural(format!(
                        "instance {} has class {} outside [0, {})",
                        inst.instance_id,
                        inst.class_id,
                        classes.len()
                    )));
                }
                if !ids.insert(inst.instance_id) {
                    return Err(Error::Structural(format!(
                        "duplicate instance id {}",
                        inst.instance_id
                    )));
                }
                if !inst.bbox.fits_within(img.width, img.height) {
                    return Err(Error::Structural(format!(
                        "instance {} box {:?} outside image {}",
                        inst.instance_id, inst.bbox, img.image_id
                    )));
                }
            }
            img.class_set = img.instances.iter().map(|i| i.class_id).collect();
        }
        let total_instances = ids.len();
        let category_ids = (0..classes.len() as u64).collect();
        Ok(Dataset {
            images,
            classes,
            category_ids,
            total_instances,
            dropped_boxes: 0,
            binning,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn instances(&self) -> impl Iterator<Item = (&ImageRecord, &Instance)> {
        self.images
            .iter()
            .flat_map(|img| img.instances.iter().map(move |inst| (img, inst)))
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.images
            .binary_search_by_key(&image_id, |i| i.image_id)
            .ok()
            .map(|idx| &self.images[idx])
    }

    /// Instances of every occupied group, in dataset order.
    pub fn groups(&self) -> BTreeMap<GroupKey, Vec<&Instance>> {
        let mut out: BTreeMap<GroupKey, Vec<&Instance>> = BTreeMap::new();
        for (img, inst) in self.instances() {
            out.entry(assign_group(inst, img, &self.binning))
                .or_default()
                .push(inst);
        }
        out
    }

    pub fn group_count(&self, key: GroupKey) -> usize {
        self.instances()
            .filter(|(img, inst)| assign_group(inst, img, &self.binning) == key)
            .count()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for (_, inst) in self.instances() {
            counts[inst.class_id] += 1;
        }
        counts
    }

    /// Content digest over images, classes and binning. Stable across runs.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            images: &'a [ImageRecord],
            classes: &'a [String],
            binning: &'a BinningConfig,
        }
        json_digest(&View {
            images: &self.images,
            classes: &self.classes,
            binning: &self.binning,
        })
    }
}

pub fn assign_group(inst: &Instance, img: &ImageRecord, config: &BinningConfig) -> GroupKey {
    let (cx, _) = inst.bbox.center();
    GroupKey {
        class_id: inst.class_id,
        size_bin: config.size_bin(inst.bbox.area()),
        pos_bin: config.pos_bin(cx, img.width),
    }
}

/// Side scale factors of the inner and outer concentric rectangles; their
/// areas are 1/3 and 2/3 of the image.
fn region_scales() -> (f64, f64) {
    ((1.0f64 / 3.0).sqrt(), (2.0f64 / 3.0).sqrt())
}

/// Closed centered rectangle `[x_lo, x_hi] x [y_lo, y_hi]` scaled by `scale`.
pub fn centered_rect(width: f64, height: f64, scale: f64) -> (f64, f64, f64, f64) {
    let (hw, hh) = (scale * width / 2.0, scale * height / 2.0);
    (width / 2.0 - hw, width / 2.0 + hw, height / 2.0 - hh, height / 2.0 + hh)
}

pub fn region_of_point(x: f64, y: f64, width: f64, height: f64) -> Region {
    let (inner, outer) = region_scales();
    let inside = |scale: f64| {
        let (x0, x1, y0, y1) = centered_rect(width, height, scale);
        x0 <= x && x <= x1 && y0 <= y && y <= y1
    };
    if inside(inner) {
        Region::Center
    } else if inside(outer) {
        Region::Middle
    } else {
        Region::Outer
    }
}

pub fn partition_position(inst: &Instance, img: &ImageRecord) -> Region {
    let (cx, cy) = inst.bbox.center();
    region_of_point(cx, cy, f64::from(img.width), f64::from(img.height))
}

/// Number of classes in each of the frequent and rare tiers.
fn tier_size(num_classes: usize) -> usize {
    // ceil(0.3 * n) in integers
    (3 * num_classes).div_ceil(10)
}

pub fn partition_frequency(ds: &Dataset) -> Result<BTreeMap<usize, FrequencyTier>> {
    if ds.total_instances == 0 {
        return Err(Error::EmptyDataset);
    }
    let counts = ds.class_counts();
    let mut ranked: Vec<usize> = (0..counts.len()).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));

    let n = ranked.len();
    let k = tier_size(n);
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(rank, &class_id)| {
            let tier = if rank < k {
                FrequencyTier::Frequent
            } else if rank >= n - k {
                FrequencyTier::Rare
            } else {
                FrequencyTier::Common
            };
            (class_id, tier)
        })
        .collect())
}

/// One line of the group-assignment report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub instance_id: u64,
    pub image_id: u64,
    pub class_id: usize,
    pub size_bin: usize,
    pub pos_bin: usize,
    pub region: Region,
}

pub fn group_assignments(ds: &Dataset) -> Vec<GroupAssignment> {
    ds.instances()
        .map(|(img, inst)| {
            let key = assign_group(inst, img, &ds.binning);
            GroupAssignment {
                instance_id: inst.instance_id,
                image_id: img.image_id,
                class_id: key.class_id,
                size_bin: key.size_bin,
                pos_bin: key.pos_bin,
                region: partition_position(inst, img),
            }
        })
        .collect()
}

pub fn write_group_report<W: Write>(ds: &Dataset, mut out: W) -> std::io::Result<()> {
    for rec in group_assignments(ds) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coco(annotations: &str) -> String {
        format!(
            r#"{{"images":[{{"id":1,"width":100,"height":100,"file_name":"a.jpg"}}],
               "annotations":[{annotations}],
               "categories":[{{"id":7,"name":"cat"}},{{"id":3,"name":"dog"}}]}}"#
        )
    }

    fn image_100() -> ImageRecord {
        ImageRecord::new(1, 100, 100, Vec::new())
    }

    fn inst(bbox: BBox) -> Instance {
        Instance {
            instance_id: 1,
            image_id: 1,
            class_id: 0,
            bbox,
            embedding_id: None,
        }
    }

    #[test]
    fn empty_annotation_list() {
        let ds = Dataset::from_coco_str(&coco(""), &BinningConfig::default()).unwrap();
        assert_eq!(ds.total_instances, 0);
        assert_eq!(ds.images.len(), 1);
    }

    #[test]
    fn xywh_becomes_corners() {
        let text = coco(r#"{"id":5,"image_id":1,"category_id":7,"bbox":[10,10,30,30]}"#);
        let ds = Dataset::from_coco_str(&text, &BinningConfig::default()).unwrap();
        assert_eq!(ds.total_instances, 1);
        let inst = &ds.images[0].instances[0];
        assert_eq!(inst.bbox, BBox::new(10.0, 10.0, 40.0, 40.0).unwrap());
        // categories sorted by COCO id: dog(3) -> 0, cat(7) -> 1
        assert_eq!(inst.class_id, 1);
        assert_eq!(ds.classes, vec!["dog", "cat"]);
    }

    #[test]
    fn unknown_category_is_structural() {
        let text = coco(r#"{"id":5,"image_id":1,"category_id":99,"bbox":[10,10,30,30]}"#);
        let err = Dataset::from_coco_str(&text, &BinningConfig::default()).unwrap_err();
        match err {
            Error::Structural(msg) => assert!(msg.contains("99"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_image_lists_ids() {
        let text = coco(
            r#"{"id":5,"image_id":4,"category_id":3,"bbox":[1,1,3,3]},
               {"id":6,"image_id":8,"category_id":3,"bbox":[1,1,3,3]}"#,
        );
        let err = Dataset::from_coco_str(&text, &BinningConfig::default()).unwrap_err();
        assert!(err.to_string().contains("[4, 8]"), "{err}");
    }

    #[test]
    fn malformed_json_reports_offset() {
        let text = r#"{"images": [}"#;
        match Dataset::from_coco_str(text, &BinningConfig::default()).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn boxes_are_clamped_and_empty_ones_dropped() {
        let text = coco(
            r#"{"id":1,"image_id":1,"category_id":3,"bbox":[90,90,30,30]},
               {"id":2,"image_id":1,"category_id":3,"bbox":[120,10,5,5]},
               {"id":3,"image_id":1,"category_id":3,"bbox":[10,10,0,5]}"#,
        );
        let ds = Dataset::from_coco_str(&text, &BinningConfig::default()).unwrap();
        assert_eq!(ds.total_instances, 1);
        assert_eq!(ds.dropped_boxes, 2);
        assert_eq!(
            ds.images[0].instances[0].bbox,
            BBox::new(90.0, 90.0, 100.0, 100.0).unwrap()
        );
    }

    #[test]
    fn size_bins_follow_coco_thresholds() {
        let cfg = BinningConfig::default();
        let img = image_100();
        let small = inst(BBox::new(0.0, 0.0, 20.0, 20.0).unwrap());
        assert_eq!(assign_group(&small, &img, &cfg).size_bin, 0);
        let large = ImageRecord::new(1, 200, 200, Vec::new());
        let big = inst(BBox::new(0.0, 0.0, 100.0, 100.0).unwrap());
        assert_eq!(assign_group(&big, &large, &cfg).size_bin, 2);
        assert_eq!(cfg.size_bin(1023.0), 0);
        assert_eq!(cfg.size_bin(1024.0), 1);
        assert_eq!(cfg.size_bin(9215.0), 1);
        assert_eq!(cfg.size_bin(9216.0), 2);
    }

    #[test]
    fn position_bin_from_horizontal_center() {
        let cfg = BinningConfig::default();
        let img = image_100();
        let mid = inst(BBox::new(40.0, 0.0, 60.0, 10.0).unwrap());
        assert_eq!(assign_group(&mid, &img, &cfg).pos_bin, 1);
        assert_eq!(cfg.pos_bin(100.0, 100), 2);
        assert_eq!(cfg.pos_bin(0.0, 100), 0);
    }

    #[test]
    fn regions() {
        assert_eq!(region_of_point(50.0, 50.0, 100.0, 100.0), Region::Center);
        assert_eq!(region_of_point(1.0, 1.0, 100.0, 100.0), Region::Outer);
        assert_eq!(region_of_point(15.0, 50.0, 100.0, 100.0), Region::Middle);
        let (x0, _, _, _) = centered_rect(100.0, 100.0, (1.0f64 / 3.0).sqrt());
        assert!((x0 - 21.13).abs() < 0.01);
        assert_eq!(region_of_point(x0, 50.0, 100.0, 100.0), Region::Center);
        let (o0, _, _, _) = centered_rect(100.0, 100.0, (2.0f64 / 3.0).sqrt());
        assert!((o0 - 9.18).abs() < 0.01);
        assert_eq!(region_of_point(o0, 50.0, 100.0, 100.0), Region::Middle);
    }

    fn ds_with_counts(counts: &[usize]) -> Dataset {
        let mut instances = Vec::new();
        let mut id = 0;
        for (class_id, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                instances.push(Instance {
                    instance_id: id,
                    image_id: 1,
                    class_id,
                    bbox: BBox::new(0.0, 0.0, 5.0, 5.0).unwrap(),
                    embedding_id: None,
                });
                id += 1;
            }
        }
        let classes = (0..counts.len()).map(|i| format!("c{i}")).collect();
        Dataset::from_parts(
            vec![ImageRecord::new(1, 100, 100, instances)],
            classes,
            BinningConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn frequency_tiers_ten_classes() {
        let ds = ds_with_counts(&[5, 9, 1, 7, 3, 10, 2, 8, 4, 6]);
        let tiers = partition_frequency(&ds).unwrap();
        let of = |t| {
            tiers
                .iter()
                .filter(|(_, &v)| v == t)
                .map(|(&k, _)| k)
                .collect::<Vec<_>>()
        };
        assert_eq!(of(FrequencyTier::Frequent), vec![1, 5, 7]);
        assert_eq!(of(FrequencyTier::Rare), vec![2, 4, 6]);
        assert_eq!(of(FrequencyTier::Common), vec![0, 3, 8, 9]);
    }

    #[test]
    fn frequency_ties_use_class_id() {
        let ds = ds_with_counts(&[2, 2, 2, 2]);
        let tiers = partition_frequency(&ds).unwrap();
        // ceil(1.2) = 2
        assert_eq!(tiers[&0], FrequencyTier::Frequent);
        assert_eq!(tiers[&1], FrequencyTier::Frequent);
        assert_eq!(tiers[&2], FrequencyTier::Rare);
        assert_eq!(tiers[&3], FrequencyTier::Rare);
    }

    #[test]
    fn single_class_is_frequent() {
        let tiers = partition_frequency(&ds_with_counts(&[4])).unwrap();
        assert_eq!(tiers[&0], FrequencyTier::Frequent);
    }

    #[test]
    fn frequency_of_empty_dataset_fails() {
        let ds = ds_with_counts(&[0, 0]);
        assert!(matches!(partition_frequency(&ds), Err(Error::EmptyDataset)));
    }

    #[test]
    fn group_counts_sum_to_total() {
        let ds = ds_with_counts(&[3, 1, 4]);
        let total: usize = ds.groups().values().map(Vec::len).sum();
        assert_eq!(total, ds.total_instances);
    }

    #[test]
    fn bbox_wire_format_validates() {
        let b: BBox = serde_json::from_str("[1, 2, 3, 4]").unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.0,2.0,3.0,4.0]");
        assert!(serde_json::from_str::<BBox>("[3, 2, 1, 4]").is_err());
    }
}
