//! Representation scores for data groups.
//!
//! For a group `G = (c, s, u)` the table stores
//!
//! * `d_freq = N(G) / N_all`
//! * `d_vis`, the mean squared embedding distance over all ordered pairs of
//!   the group (diagonal included), divided by 4 so unit-norm embeddings land
//!   in `[0, 1]`
//! * `d_ctx`, the mean number of distinct classes in images containing `c`,
//!   divided by the number of classes
//! * `rs = d_freq * (d_vis + beta * d_ctx)`
//!
//! Every `(c, s, u)` cell is materialized; empty cells carry `rs = 0` so the
//! inverse-score samplers can reach them.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blueprint::Canvas;
use crate::dataset::{BBox, Dataset, GroupKey, Instance};
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_BETA: f64 = 0.5;

/// Side of the square grid a crop is pooled to by [`fallback_descriptor`].
pub const DESCRIPTOR_GRID: usize = 8;
pub const DESCRIPTOR_DIM: usize = DESCRIPTOR_GRID * DESCRIPTOR_GRID * 3;

/// Unit-normalized feature vectors keyed by instance (or embedding) id.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingStore<T> {
    dim: usize,
    vectors: HashMap<u64, Vec<T>>,
}

#[derive(Deserialize)]
struct EmbeddingLine {
    instance_id: u64,
    embedding: Vec<f64>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new() -> Self {
        EmbeddingStore {
            dim: 0,
            vectors: HashMap::new(),
        }
    }

    /// Dimension shared by all vectors; 0 while empty.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, id: u64) -> bool {
        self.vectors.contains_key(&id)
    }

    pub fn get(&self, id: u64) -> Option<&[T]> {
        self.vectors.get(&id).map(Vec::as_slice)
    }

    /// Inserts `vector` after L2 normalization. The first vector fixes the
    /// store's dimension.
    pub fn insert(&mut self, id: u64, vector: Vec<T>) -> Result<()> {
        if vector.is_empty() {
            return Err(Error::InvalidArgument(format!("empty embedding for {id}")));
        }
        if self.dim != 0 && vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding for {id} has dimension {}, store has {}",
                vector.len(),
                self.dim
            )));
        }
        let norm = vector.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm.is_finite() && norm > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "embedding for {id} cannot be normalized"
            )));
        }
        self.dim = vector.len();
        self.vectors
            .insert(id, vector.into_iter().map(|v| v / norm).collect());
        Ok(())
    }

    /// Reads JSON Lines of `{instance_id, embedding}`.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut store = Self::new();
        let mut offset = 0usize;
        for line in reader.lines() {
            let line = line.map_err(|e| Error::io("<embeddings>", e))?;
            let start = offset;
            offset += line.len() + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingLine = serde_json::from_str(&line).map_err(|e| match Error::json(&line, e) {
                Error::Parse { offset, message } => Error::Parse {
                    offset: start + offset,
                    message,
                },
                other => other,
            })?;
            let v = rec.embedding.into_iter().map(T::lit).collect();
            store.insert(rec.instance_id, v)?;
        }
        Ok(store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(BufReader::new(file))
    }

    /// Adds fallback descriptors for every instance of `ds` without a stored
    /// vector, reading pixels from `image_dir/<file_name>`.
    pub fn fill_missing_with_fallback(&mut self, ds: &Dataset, image_dir: &Path) -> Result<usize> {
        let mut added = 0;
        for img in &ds.images {
            let missing: Vec<&Instance> = img
                .instances
                .iter()
                .filter(|i| !self.contains(i.embedding_key()))
                .collect();
            if missing.is_empty() {
                continue;
            }
            let name = img.file_name.clone().unwrap_or_else(|| format!("{}.png", img.image_id));
            let pixels = read_image_pixels(&image_dir.join(name))?;
            for inst in missing {
                let scale = (
                    f64::from(pixels.width) / f64::from(img.width),
                    f64::from(pixels.height) / f64::from(img.height),
                );
                let b = inst.bbox;
                let scaled = BBox {
                    x1: b.x1 * scale.0,
                    y1: b.y1 * scale.1,
                    x2: b.x2 * scale.0,
                    y2: b.y2 * scale.1,
                };
                self.insert(inst.embedding_key(), fallback_descriptor(&pixels, &scaled))?;
                added += 1;
            }
        }
        Ok(added)
    }
}

/// Decodes an image file (PNG or JPEG) into RGB8 pixels.
pub fn read_image_pixels(path: &Path) -> Result<Canvas> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Canvas::from_pixels(w, h, rgb.into_raw())
}

/// Pixel index range whose centers fall in `[lo, hi)`, never empty.
fn covered_range(lo: f64, hi: f64, limit: u32) -> (usize, usize) {
    let limit = limit as usize;
    let start = ((lo - 0.5).ceil().max(0.0) as usize).min(limit - 1);
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    (start, end.max(start + 1))
}

/// Deterministic stand-in for detector features: the crop is average-pooled
/// to an 8x8 grid per channel, centered around mid-gray, concatenated
/// channel-major (d = 192) and L2-normalized.
pub fn fallback_descriptor<T: Scalar>(pixels: &Canvas, bbox: &BBox) -> Vec<T> {
    let (x0, x1) = covered_range(bbox.x1, bbox.x2, pixels.width);
    let (y0, y1) = covered_range(bbox.y1, bbox.y2, pixels.height);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let g = DESCRIPTOR_GRID;
    let cell = |start: usize, len: usize, i: usize| {
        let lo = start + i * len / g;
        let hi = (start + (i + 1) * len / g).max(lo + 1);
        (lo, hi)
    };

    let mut out = vec![0.0f64; DESCRIPTOR_DIM];
    for gy in 0..g {
        let (ry0, ry1) = cell(y0, ch, gy);
        for gx in 0..g {
            let (rx0, rx1) = cell(x0, cw, gx);
            let mut sum = [0u64; 3];
            for y in ry0..ry1 {
                for x in rx0..rx1 {
                    let p = pixels.pixel(x as u32, y as u32);
                    for c in 0..3 {
                        sum[c] += u64::from(p[c]);
                    }
                }
            }
            let n = ((ry1 - ry0) * (rx1 - rx0)) as f64;
            for c in 0..3 {
                out[c * g * g + gy * g + gx] = sum[c] as f64 / (n * 255.0) - 0.5;
            }
        }
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter().map(|v| T::lit(v / norm)).collect()
    } else {
        // perfectly mid-gray crop
        let u = T::lit(1.0 / (DESCRIPTOR_DIM as f64).sqrt());
        vec![u; DESCRIPTOR_DIM]
    }
}

pub fn compute_freq<T: Scalar>(ds: &Dataset, key: GroupKey) -> Result<T> {
    if ds.total_instances == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(T::from_count(ds.group_count(key)) / T::from_count(ds.total_instances))
}

/// Mean squared pairwise distance over all ordered pairs, scaled to `[0, 1]`.
///
/// Uses `mean_ij |o_i - o_j|^2 = 2 mean_i |o_i|^2 - 2 |mean_i o_i|^2`, which is
/// O(n d) instead of O(n^2 d).
pub fn compute_vis<T: Scalar>(instances: &[&Instance], store: &EmbeddingStore<T>) -> Result<T> {
    if let Some(inst) = instances.iter().find(|i| !store.contains(i.embedding_key())) {
        return Err(Error::MissingFeature {
            instance_id: inst.instance_id,
        });
    }
    if instances.len() <= 1 {
        return Ok(T::zero());
    }
    let mut centroid = vec![T::zero(); store.dim()];
    let mut sq_norms = T::zero();
    for inst in instances {
        let v = store.get(inst.embedding_key()).ok_or(Error::MissingFeature {
            instance_id: inst.instance_id,
        })?;
        for (c, &x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
        sq_norms += v.iter().map(|&x| x * x).sum::<T>();
    }
    let n = T::from_count(instances.len());
    let centroid_sq = centroid.iter().map(|&c| (c / n) * (c / n)).sum::<T>();
    let two = T::lit(2.0);
    let mean_sq = two * sq_norms / n - two * centroid_sq;
    Ok((mean_sq / T::lit(4.0)).max(T::zero()).min(T::one()))
}

pub fn compute_ctx<T: Scalar>(ds: &Dataset, class_id: usize) -> T {
    let mut images = 0usize;
    let mut classes = 0usize;
    for img in ds.images.iter().filter(|i| i.class_set.contains(&class_id)) {
        images += 1;
        classes += img.class_set.len();
    }
    if images == 0 || ds.num_classes() == 0 {
        return T::zero();
    }
    T::from_count(classes) / (T::from_count(images) * T::from_count(ds.num_classes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct GroupStats<T> {
    pub class_id: usize,
    pub size_bin: usize,
    pub pos_bin: usize,
    pub count: usize,
    pub d_freq: T,
    pub d_vis: T,
    pub d_ctx: T,
    pub rs: T,
}

impl<T: Scalar> GroupStats<T> {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(self.class_id, self.size_bin, self.pos_bin)
    }

    fn empty(key: GroupKey, d_ctx: T) -> Self {
        GroupStats {
            class_id: key.class_id,
            size_bin: key.size_bin,
            pos_bin: key.pos_bin,
            count: 0,
            d_freq: T::zero(),
            d_vis: T::zero(),
            d_ctx,
            rs: T::zero(),
        }
    }
}

#[inline]
pub fn representation_score<T: Scalar>(d_freq: T, d_vis: T, d_ctx: T, beta: T) -> T {
    d_freq * (d_vis + beta * d_ctx)
}

/// Scores for every `(class, size_bin, pos_bin)` cell of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", into = "RsTableWire<T>", try_from = "RsTableWire<T>")]
pub struct RsTable<T: Scalar> {
    pub beta: T,
    pub dataset_digest: String,
    pub num_classes: usize,
    pub size_bins: usize,
    pub pos_bins: usize,
    groups: BTreeMap<GroupKey, GroupStats<T>>,
    class_mean_rs: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
struct RsTableWire<T> {
    beta: T,
    dataset_digest: String,
    num_classes: usize,
    size_bins: usize,
    pos_bins: usize,
    groups: Vec<GroupStats<T>>,
    class_mean_rs: BTreeMap<usize, T>,
}

impl<T: Scalar> From<RsTable<T>> for RsTableWire<T> {
    fn from(t: RsTable<T>) -> Self {
        RsTableWire {
            beta: t.beta,
            dataset_digest: t.dataset_digest,
            num_classes: t.num_classes,
            size_bins: t.size_bins,
            pos_bins: t.pos_bins,
            groups: t.groups.into_values().collect(),
            class_mean_rs: t.class_mean_rs.into_iter().enumerate().collect(),
        }
    }
}

impl<T: Scalar> TryFrom<RsTableWire<T>> for RsTable<T> {
    type Error = Error;

    fn try_from(w: RsTableWire<T>) -> Result<Self> {
        let groups: BTreeMap<GroupKey, GroupStats<T>> =
            w.groups.into_iter().map(|g| (g.key(), g)).collect();
        let expected = w.num_classes * w.size_bins * w.pos_bins;
        let in_grid = groups.keys().all(|k| {
            k.class_id < w.num_classes && k.size_bin < w.size_bins && k.pos_bin < w.pos_bins
        });
        if groups.len() != expected || !in_grid {
            return Err(Error::Structural(format!(
                "table must hold exactly {expected} distinct in-range groups"
            )));
        }
        let class_mean_rs: Vec<T> = (0..w.num_classes)
            .map(|c| {
                w.class_mean_rs
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Structural(format!("no class_mean_rs for class {c}")))
            })
            .collect::<Result<_>>()?;
        Ok(RsTable {
            beta: w.beta,
            dataset_digest: w.dataset_digest,
            num_classes: w.num_classes,
            size_bins: w.size_bins,
            pos_bins: w.pos_bins,
            groups,
            class_mean_rs,
        })
    }
}

impl<T: Scalar> RsTable<T> {
    /// Builds a table from explicit scores, e.g. for synthetic experiments.
    /// `rs` is indexed `[class][size_bin][pos_bin]`; the component terms are
    /// left at zero.
    pub fn from_scores(beta: T, rs: &[Vec<Vec<T>>]) -> Result<Self> {
        let num_classes = rs.len();
        let size_bins = rs.first().map_or(0, Vec::len);
        let pos_bins = rs.first().and_then(|s| s.first()).map_or(0, Vec::len);
        if num_classes == 0 || size_bins == 0 || pos_bins == 0 {
            return Err(Error::InvalidArgument("score grid must be non-empty".into()));
        }
        let mut groups = BTreeMap::new();
        for (c, per_size) in rs.iter().enumerate() {
            if per_size.len() != size_bins || per_size.iter().any(|p| p.len() != pos_bins) {
                return Err(Error::InvalidArgument("ragged score grid".into()));
            }
            for (s, per_pos) in per_size.iter().enumerate() {
                for (u, &score) in per_pos.iter().enumerate() {
                    if !(score.is_finite() && score >= T::zero()) {
                        return Err(Error::InvalidArgument(format!("bad score {score}")));
                    }
                    let key = GroupKey::new(c, s, u);
                    let mut g = GroupStats::empty(key, T::zero());
                    g.rs = score;
                    groups.insert(key, g);
                }
            }
        }
        let mut table = RsTable {
            beta,
            dataset_digest: String::new(),
            num_classes,
            size_bins,
            pos_bins,
            groups,
            class_mean_rs: vec![T::zero(); num_classes],
        };
        for c in 0..num_classes {
            table.recompute_class_mean(c);
        }
        Ok(table)
    }

    pub fn num_bins(&self) -> usize {
        self.size_bins * self.pos_bins
    }

    pub fn get(&self, key: &GroupKey) -> Option<&GroupStats<T>> {
        self.groups.get(key)
    }

    pub fn rs(&self, key: &GroupKey) -> Option<T> {
        self.groups.get(key).map(|g| g.rs)
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupStats<T>> {
        self.groups.values()
    }

    /// Scores of one class in row-major `(size_bin, pos_bin)` order.
    pub fn class_grid(&self, class_id: usize) -> Vec<T> {
        let lo = GroupKey::new(class_id, 0, 0);
        let hi = GroupKey::new(class_id, usize::MAX, usize::MAX);
        self.groups.range(lo..=hi).map(|(_, g)| g.rs).collect()
    }

    pub fn class_mean_rs(&self) -> &[T] {
        &self.class_mean_rs
    }

    pub fn class_mean(&self, class_id: usize) -> T {
        self.class_mean_rs[class_id]
    }

    /// Overwrites one group's score and shifts its class mean by the delta.
    pub(crate) fn set_rs(&mut self, key: &GroupKey, rs: T) -> Option<T> {
        let bins = T::from_count(self.num_bins());
        let g = self.groups.get_mut(key)?;
        let old = g.rs;
        g.rs = rs;
        self.class_mean_rs[key.class_id] += (rs - old) / bins;
        Some(old)
    }

    pub fn recompute_class_mean(&mut self, class_id: usize) {
        let grid = self.class_grid(class_id);
        let n = T::from_count(grid.len());
        self.class_mean_rs[class_id] = grid.into_iter().sum::<T>() / n;
    }

    /// Groups sorted by ascending score, ties by key.
    pub fn lowest(&self, n: usize) -> Vec<&GroupStats<T>> {
        let mut all: Vec<&GroupStats<T>> = self.groups.values().collect();
        all.sort_by(|a, b| a.rs.partial_cmp(&b.rs).unwrap().then(a.key().cmp(&b.key())));
        all.truncate(n);
        all
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable table")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(text, e))
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_json().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn compute_rs_table<T: Scalar>(
    ds: &Dataset,
    store: &EmbeddingStore<T>,
    beta: T,
) -> Result<RsTable<T>> {
    if !(beta.is_finite() && beta >= T::zero()) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    if ds.total_instances == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_all = T::from_count(ds.total_instances);
    let ctx: Vec<T> = (0..ds.num_classes()).map(|c| compute_ctx(ds, c)).collect();
    let occupied: Vec<(GroupKey, Vec<&Instance>)> = ds.groups().into_iter().collect();

    let stats: Vec<GroupStats<T>> = occupied
        .par_iter()
        .map(|(key, members)| {
            let d_freq = T::from_count(members.len()) / n_all;
            let d_vis = compute_vis(members, store)?;
            let d_ctx = ctx[key.class_id];
            Ok(GroupStats {
                class_id: key.class_id,
                size_bin: key.size_bin,
                pos_bin: key.pos_bin,
                count: members.len(),
                d_freq,
                d_vis,
                d_ctx,
                rs: representation_score(d_freq, d_vis, d_ctx, beta),
            })
        })
        .collect::<Result<_>>()?;

    let cfg = &ds.binning;
    let mut groups = BTreeMap::new();
    for (c, &class_ctx) in ctx.iter().enumerate() {
        for s in 0..cfg.size_bins {
            for u in 0..cfg.pos_bins {
                let key = GroupKey::new(c, s, u);
                groups.insert(key, GroupStats::empty(key, class_ctx));
            }
        }
    }
    for g in stats {
        groups.insert(g.key(), g);
    }

    let mut table = RsTable {
        beta,
        dataset_digest: ds.digest(),
        num_classes: ds.num_classes(),
        size_bins: cfg.size_bins,
        pos_bins: cfg.pos_bins,
        groups,
        class_mean_rs: vec![T::zero(); ds.num_classes()],
    };
    for c in 0..ds.num_classes() {
        table.recompute_class_mean(c);
    }
    Ok(table)
}
