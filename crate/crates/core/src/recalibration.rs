//! Inverse-score layout recalibration.
//!
//! A seed layout is perturbed toward under-represented groups:
//!
//! 1. a fraction of its objects keep their class but get a new
//!    `(size_bin, pos_bin)` drawn with probability proportional to
//!    `(rs(c, s, u) + eps)^-tau`, and a vertical center jittered by
//!    `N(0, sigma_y^2)`;
//! 2. up to `max_new_instances` objects are injected, their class drawn with
//!    weight `(kappa if present else 1) * (mean_rs(c) + eps)^-tau` and their
//!    bins drawn as in step 1.
//!
//! Bins are turned back into pixels by [`materialize_bbox`].

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{BBox, BinningConfig, Dataset};
use crate::error::{Error, Result};
use crate::layout::{Layout, LayoutEntry, Provenance};
use crate::scalar::Scalar;
use crate::scoring::RsTable;

/// Default vertical jitter as a fraction of the canvas height.
pub const DEFAULT_SIGMA_Y_FRACTION: f64 = 0.05;

/// Shrink attempts before a placement is given up.
pub const PLACEMENT_ATTEMPTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(default, deny_unknown_fields)]
pub struct RecalibConfig<T> {
    /// Debias strength, >= 0.
    pub tau: T,
    /// Smoothing added to every score, > 0.
    pub epsilon: T,
    /// Preference for classes already in the scene, >= 1.
    pub kappa: T,
    /// Vertical jitter std in pixels; `None` means 5% of the canvas height.
    pub sigma_y: Option<T>,
    pub max_new_instances: usize,
    /// Fraction of seed objects that are moved, in `[0, 1]`.
    pub recalib_fraction: T,
    pub rng_seed: u64,
}

impl<T: Scalar> Default for RecalibConfig<T> {
    fn default() -> Self {
        RecalibConfig {
            tau: T::one(),
            epsilon: T::lit(0.01),
            kappa: T::lit(2.0),
            sigma_y: None,
            max_new_instances: 2,
            recalib_fraction: T::lit(0.5),
            rng_seed: 0,
        }
    }
}

impl<T: Scalar> RecalibConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: T| Err(Error::InvalidArgument(format!("{what} out of range: {v}")));
        if !(self.tau.is_finite() && self.tau >= T::zero()) {
            return bad("tau", self.tau);
        }
        if !(self.epsilon.is_finite() && self.epsilon > T::zero()) {
            return bad("epsilon", self.epsilon);
        }
        if !(self.kappa.is_finite() && self.kappa >= T::one()) {
            return bad("kappa", self.kappa);
        }
        if let Some(s) = self.sigma_y {
            if !(s.is_finite() && s >= T::zero()) {
                return bad("sigma_y", s);
            }
        }
        if !(self.recalib_fraction >= T::zero() && self.recalib_fraction <= T::one()) {
            return bad("recalib_fraction", self.recalib_fraction);
        }
        Ok(())
    }

    pub fn sigma_y_for(&self, height: u32) -> f64 {
        match self.sigma_y {
            Some(s) => s.as_f64(),
            None => DEFAULT_SIGMA_Y_FRACTION * f64::from(height),
        }
    }
}

/// Normalizes `presence_i * (scores_i + eps)^-tau` in the log domain.
///
/// Entries whose smoothed score is exactly zero get infinite weight when
/// `tau > 0`; if any exist, the mass is shared among them alone.
fn inverse_score_probabilities<T: Scalar>(scores: &[T], presence: &[T], tau: T, eps: T) -> Vec<T> {
    debug_assert_eq!(scores.len(), presence.len());
    let log_w: Vec<T> = scores
        .iter()
        .map(|&rs| {
            if tau == T::zero() {
                T::zero()
            } else {
                -tau * (rs + eps).ln()
            }
        })
        .collect();
    let max = log_w.iter().copied().fold(T::neg_infinity(), T::max);
    let raw: Vec<T> = if max == T::infinity() {
        log_w
            .iter()
            .zip(presence)
            .map(|(&lw, &p)| if lw == T::infinity() { p } else { T::zero() })
            .collect()
    } else {
        log_w
            .iter()
            .zip(presence)
            .map(|(&lw, &p)| p * (lw - max).exp())
            .collect()
    };
    let total: T = raw.iter().copied().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Probabilities over a class's `(size_bin, pos_bin)` grid, row-major.
pub fn size_position_policy<T: Scalar>(class_id: usize, table: &RsTable<T>, tau: T, eps: T) -> Vec<T> {
    let grid = table.class_grid(class_id);
    let ones = vec![T::one(); grid.len()];
    inverse_score_probabilities(&grid, &ones, tau, eps)
}

/// Probabilities over all classes for an injected object.
pub fn class_policy<T: Scalar>(
    present: &BTreeSet<usize>,
    table: &RsTable<T>,
    tau: T,
    eps: T,
    kappa: T,
) -> Vec<T> {
    let presence: Vec<T> = (0..table.num_classes)
        .map(|c| if present.contains(&c) { kappa } else { T::one() })
        .collect();
    inverse_score_probabilities(table.class_mean_rs(), &presence, tau, eps)
}

/// Inverse-CDF draw from normalized probabilities.
pub fn sample_index<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let u = T::lit(rng.random::<f64>());
    let mut acc = T::zero();
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u at or above the final sum
    probs.iter().rposition(|&p| p > T::zero()).unwrap_or(0)
}

pub fn sample_size_position<T: Scalar, R: Rng + ?Sized>(
    class_id: usize,
    table: &RsTable<T>,
    cfg: &RecalibConfig<T>,
    rng: &mut R,
) -> (usize, usize) {
    let probs = size_position_policy(class_id, table, cfg.tau, cfg.epsilon);
    let idx = sample_index(&probs, rng);
    (idx / table.pos_bins, idx % table.pos_bins)
}

pub fn sample_new_class<T: Scalar, R: Rng + ?Sized>(
    present: &BTreeSet<usize>,
    table: &RsTable<T>,
    cfg: &RecalibConfig<T>,
    rng: &mut R,
) -> usize {
    let probs = class_policy(present, table, cfg.tau, cfg.epsilon, cfg.kappa);
    sample_index(&probs, rng)
}

/// Gaussian offset with standard deviation `sigma`, before any clamping.
pub fn draw_jitter<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    sigma * rng.sample::<f64, _>(StandardNormal)
}

/// `v + N(0, sigma^2)`, clamped to `[0, height]`.
pub fn jitter_vertical<R: Rng + ?Sized>(v: f64, sigma: f64, height: u32, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return v;
    }
    (v + draw_jitter(sigma, rng)).clamp(0.0, f64::from(height))
}

/// Per-class empirical shape and placement statistics of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayoutPriors {
    /// Width / height of every instance, per class.
    pub aspect_ratios: Vec<Vec<f64>>,
    /// Vertical box center divided by image height, per class.
    pub v_center_fractions: Vec<Vec<f64>>,
}

impl LayoutPriors {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let n = ds.num_classes();
        let mut priors = LayoutPriors {
            aspect_ratios: vec![Vec::new(); n],
            v_center_fractions: vec![Vec::new(); n],
        };
        for (img, inst) in ds.instances() {
            let b = inst.bbox;
            priors.aspect_ratios[inst.class_id].push(b.width() / b.height());
            priors.v_center_fractions[inst.class_id].push(b.center().1 / f64::from(img.height));
        }
        priors
    }

    pub fn sample_aspect<R: Rng + ?Sized>(&self, class_id: usize, rng: &mut R) -> f64 {
        match self.aspect_ratios.get(class_id) {
            Some(v) if !v.is_empty() => v[rng.random_range(0..v.len())],
            _ => 1.0,
        }
    }

    pub fn sample_v_center<R: Rng + ?Sized>(&self, class_id: usize, height: u32, rng: &mut R) -> f64 {
        let h = f64::from(height);
        match self.v_center_fractions.get(class_id) {
            Some(v) if !v.is_empty() => v[rng.random_range(0..v.len())] * h,
            _ => h * (0.25 + 0.5 * rng.random::<f64>()),
        }
    }
}

/// Realizes a concrete box in the given bins.
///
/// Area is log-uniform in the size bin's range (top bin capped at 90% of the
/// canvas), aspect ratio comes from the class's empirical distribution and
/// the horizontal center is uniform in the position band. The box is shifted
/// inside the canvas; if that moves it out of its bins, it is shrunk about
/// its center toward the bin's area floor, up to [`PLACEMENT_ATTEMPTS`] times.
#[allow(clippy::too_many_arguments)]
pub fn materialize_bbox<R: Rng + ?Sized>(
    class_id: usize,
    size_bin: usize,
    pos_bin: usize,
    v_center: f64,
    priors: &LayoutPriors,
    binning: &BinningConfig,
    rng: &mut R,
    width: u32,
    height: u32,
) -> Result<BBox> {
    let placement = Error::Placement {
        class_id,
        size_bin,
        pos_bin,
    };
    if size_bin >= binning.size_bins || pos_bin >= binning.pos_bins || width == 0 || height == 0 {
        return Err(placement);
    }
    let (w_max, h_max) = (f64::from(width), f64::from(height));
    let (lo, hi) = binning.area_range(size_bin, w_max * h_max);
    if lo >= hi {
        return Err(placement);
    }
    let (band_lo, band_hi) = binning.pos_band(pos_bin, width);
    let aspect = priors.sample_aspect(class_id, rng);
    let mut area = lo * (hi / lo).powf(rng.random::<f64>());
    let cx = band_lo + rng.random::<f64>() * (band_hi - band_lo);

    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut w = (area * aspect).sqrt();
        let mut h = (area / aspect).sqrt();
        if w > w_max {
            w = w_max;
            h = area / w;
        }
        if h > h_max {
            h = h_max;
            w = (area / h).min(w_max);
        }
        let x1 = (cx - w / 2.0).clamp(0.0, w_max - w);
        let y1 = (v_center - h / 2.0).clamp(0.0, h_max - h);
        let b = BBox {
            x1,
            y1,
            x2: (x1 + w).min(w_max),
            y2: (y1 + h).min(h_max),
        };
        if b.fits_within(width, height)
            && binning.size_bin(b.area()) == size_bin
            && binning.pos_bin(b.center().0, width) == pos_bin
        {
            return Ok(b);
        }
        area = (area * lo).sqrt();
    }
    Err(placement)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecalibOutcome {
    pub layout: Layout,
    /// Entries dropped because no box could be placed in their target bins.
    pub placement_failures: usize,
}

/// Deterministic per-layout generator derived from the run seed.
pub fn layout_rng(rng_seed: u64, image_id: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(rng_seed.to_le_bytes());
    h.update(image_id.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

pub fn recalibrate_layout<T: Scalar, R: Rng + ?Sized>(
    seed: &Layout,
    priors: &LayoutPriors,
    binning: &BinningConfig,
    table: &RsTable<T>,
    cfg: &RecalibConfig<T>,
    rng: &mut R,
) -> Result<RecalibOutcome> {
    cfg.validate()?;
    if (table.size_bins, table.pos_bins) != (binning.size_bins, binning.pos_bins) {
        return Err(Error::InvalidArgument(format!(
            "table grid {}x{} does not match binning {}x{}",
            table.size_bins, table.pos_bins, binning.size_bins, binning.pos_bins
        )));
    }
    seed.validate(table.num_classes)?;
    let (width, height) = (seed.width, seed.height);
    let sigma = cfg.sigma_y_for(height);
    let mut failures = 0usize;

    let n = seed.entries.len();
    let n_moved = (cfg.recalib_fraction.as_f64() * n as f64).ceil().min(n as f64) as usize;
    let mut chosen = index::sample(rng, n, n_moved).into_vec();
    chosen.sort_unstable();

    let mut slots: Vec<Option<LayoutEntry>> = seed.entries.iter().cloned().map(Some).collect();
    for idx in chosen {
        let entry = &seed.entries[idx];
        let (size_bin, pos_bin) = sample_size_position(entry.class_id, table, cfg, rng);
        let v = jitter_vertical(entry.bbox.center().1, sigma, height, rng);
        slots[idx] = match materialize_bbox(
            entry.class_id,
            size_bin,
            pos_bin,
            v,
            priors,
            binning,
            rng,
            width,
            height,
        ) {
            Ok(bbox) => Some(LayoutEntry {
                class_id: entry.class_id,
                bbox,
                provenance: Provenance::Moved,
                source_instance_id: entry.source_instance_id,
            }),
            Err(Error::Placement { .. }) => {
                failures += 1;
                None
            }
            Err(e) => return Err(e),
        };
    }
    let mut entries: Vec<LayoutEntry> = slots.into_iter().flatten().collect();

    let n_new = rng.random_range(0..=cfg.max_new_instances);
    for _ in 0..n_new {
        let present: BTreeSet<usize> = entries.iter().map(|e| e.class_id).collect();
        let class_id = sample_new_class(&present, table, cfg, rng);
        let (size_bin, pos_bin) = sample_size_position(class_id, table, cfg, rng);
        let v = priors.sample_v_center(class_id, height, rng);
        match materialize_bbox(class_id, size_bin, pos_bin, v, priors, binning, rng, width, height) {
            Ok(bbox) => entries.push(LayoutEntry {
                class_id,
                bbox,
                provenance: Provenance::Injected,
                source_instance_id: None,
            }),
            Err(Error::Placement { .. }) => failures += 1,
            Err(e) => return Err(e),
        }
    }

    if entries.is_empty() && n > 0 {
        return Err(Error::DegenerateLayout {
            image_id: seed.image_id,
        });
    }
    Ok(RecalibOutcome {
        layout: Layout {
            image_id: seed.image_id,
            width,
            height,
            entries,
        },
        placement_failures: failures,
    })
}

/// Recalibrates every seed with its own derived generator. The result does
/// not depend on how rayon schedules the work.
pub fn recalibrate_batch<T: Scalar>(
    seeds: &[Layout],
    priors: &LayoutPriors,
    binning: &BinningConfig,
    table: &RsTable<T>,
    cfg: &RecalibConfig<T>,
) -> Vec<Result<RecalibOutcome>> {
    seeds
        .par_iter()
        .map(|seed| {
            let mut rng = layout_rng(cfg.rng_seed, seed.image_id);
            recalibrate_layout(seed, priors, binning, table, cfg, &mut rng)
        })
        .collect()
}
