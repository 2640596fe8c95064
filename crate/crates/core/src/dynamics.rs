//! Online refinement of representation scores from detection errors.
//!
//! Each record moves its group's score by an exponential moving average,
//! `rs <- mu * rs + (1 - mu) * loss`, and shifts the class mean by the same
//! delta divided by the number of bins.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::GroupKey;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scoring::RsTable;

pub const DEFAULT_MU: f64 = 0.99;

/// One per-instance detection loss, attributed to a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ErrorRecord<T> {
    pub class_id: usize,
    pub size_bin: usize,
    pub pos_bin: usize,
    pub loss: T,
    pub step: u64,
}

impl<T: Scalar> ErrorRecord<T> {
    pub fn new(group: GroupKey, loss: T, step: u64) -> Self {
        ErrorRecord {
            class_id: group.class_id,
            size_bin: group.size_bin,
            pos_bin: group.pos_bin,
            loss,
            step,
        }
    }

    pub fn group(&self) -> GroupKey {
        GroupKey::new(self.class_id, self.size_bin, self.pos_bin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsConfig<T> {
    /// EMA momentum in `[0, 1]`; 1 freezes the table.
    pub mu: T,
    /// Losses are divided by this before entering the average.
    pub loss_scale: T,
}

impl<T: Scalar> Default for DynamicsConfig<T> {
    fn default() -> Self {
        DynamicsConfig {
            mu: T::lit(DEFAULT_MU),
            loss_scale: T::one(),
        }
    }
}

impl<T: Scalar> DynamicsConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= T::zero() && self.mu <= T::one()) {
            return Err(Error::InvalidArgument(format!("mu must lie in [0, 1], got {}", self.mu)));
        }
        if !(self.loss_scale.is_finite() && self.loss_scale > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "loss scale must be positive, got {}",
                self.loss_scale
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn ema_update<T: Scalar>(rs: T, loss: T, mu: T) -> T {
    mu * rs + (T::one() - mu) * loss
}

/// Applies one record and returns the group's new score.
pub fn apply_error_record<T: Scalar>(
    table: &mut RsTable<T>,
    rec: &ErrorRecord<T>,
    cfg: &DynamicsConfig<T>,
) -> Result<T> {
    if !(rec.loss.is_finite() && rec.loss >= T::zero()) {
        return Err(Error::RejectedRecord(format!(
            "loss {} for group {} at step {}",
            rec.loss,
            rec.group(),
            rec.step
        )));
    }
    let key = rec.group();
    let old = table
        .rs(&key)
        .ok_or_else(|| Error::RejectedRecord(format!("unknown group {key}")))?;
    let new = ema_update(old, rec.loss / cfg.loss_scale, cfg.mu);
    table.set_rs(&key, new);
    Ok(new)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupUpdateCount {
    pub class_id: usize,
    pub size_bin: usize,
    pub pos_bin: usize,
    pub records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct UpdateReport<T> {
    pub applied: usize,
    pub rejected: usize,
    pub per_group: Vec<GroupUpdateCount>,
    /// Range of scores over the touched groups, before and after the stream.
    pub rs_min_before: Option<T>,
    pub rs_max_before: Option<T>,
    pub rs_min_after: Option<T>,
    pub rs_max_after: Option<T>,
}

fn min_max<T: Scalar>(values: impl Iterator<Item = T>) -> (Option<T>, Option<T>) {
    values.fold((None, None), |(lo, hi), v| {
        (
            Some(lo.map_or(v, |l: T| l.min(v))),
            Some(hi.map_or(v, |h: T| h.max(v))),
        )
    })
}

/// Applies records in order. Records must be ordered by step (ties allowed);
/// an out-of-order record aborts the run and leaves `table` untouched.
/// Invalid records are skipped and counted.
pub fn run_update_stream<T, I>(table: &mut RsTable<T>, records: I, cfg: &DynamicsConfig<T>) -> Result<UpdateReport<T>>
where
    T: Scalar,
    I: IntoIterator<Item = Result<ErrorRecord<T>>>,
{
    cfg.validate()?;
    let mut work = table.clone();
    let mut before: BTreeMap<GroupKey, T> = BTreeMap::new();
    let mut counts: BTreeMap<GroupKey, usize> = BTreeMap::new();
    let mut previous: Option<u64> = None;
    let (mut applied, mut rejected) = (0usize, 0usize);

    for rec in records {
        let rec = rec?;
        if let Some(p) = previous {
            if rec.step < p {
                return Err(Error::Ordering {
                    previous: p,
                    got: rec.step,
                });
            }
        }
        previous = Some(rec.step);
        let key = rec.group();
        let old = work.rs(&key);
        match apply_error_record(&mut work, &rec, cfg) {
            Ok(_) => {
                applied += 1;
                before.entry(key).or_insert(old.unwrap());
                *counts.entry(key).or_insert(0) += 1;
            }
            Err(Error::RejectedRecord(why)) => {
                log::debug!("rejected record: {why}");
                rejected += 1;
            }
            Err(e) => return Err(e),
        }
    }

    let (rs_min_before, rs_max_before) = min_max(before.values().copied());
    let (rs_min_after, rs_max_after) = min_max(before.keys().map(|k| work.rs(k).unwrap()));
    *table = work;
    Ok(UpdateReport {
        applied,
        rejected,
        per_group: counts
            .into_iter()
            .map(|(k, records)| GroupUpdateCount {
                class_id: k.class_id,
                size_bin: k.size_bin,
                pos_bin: k.pos_bin,
                records,
            })
            .collect(),
        rs_min_before,
        rs_max_before,
        rs_min_after,
        rs_max_after,
    })
}

/// Lazily parses a JSON Lines error stream.
pub fn read_error_stream<T: Scalar, R: BufRead>(reader: R) -> impl Iterator<Item = Result<ErrorRecord<T>>> {
    let mut offset = 0usize;
    reader.lines().filter_map(move |line| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(Error::io("<error stream>", e))),
        };
        let start = offset;
        offset += line.len() + 1;
        if line.trim().is_empty() {
            return None;
        }
        Some(serde_json::from_str(&line).map_err(|e| match Error::json(&line, e) {
            Error::Parse { offset, message } => Error::Parse {
                offset: start + offset,
                message,
            },
            other => other,
        }))
    })
}

/// Score table plus the dynamics state that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Snapshot<T: Scalar> {
    pub table: RsTable<T>,
    pub mu: T,
    pub records_applied: u64,
}

impl<T: Scalar> Snapshot<T> {
    pub fn new(table: RsTable<T>, mu: T) -> Self {
        Snapshot {
            table,
            mu,
            records_applied: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable snapshot")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json(text, e))
    }
}

pub fn snapshot<T: Scalar>(snap: &Snapshot<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(snap.to_json().as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads a snapshot; with `expected_digest`, refuses one built from another
/// dataset.
pub fn restore<T: Scalar>(path: impl AsRef<Path>, expected_digest: Option<&str>) -> Result<Snapshot<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let snap = Snapshot::from_json(&text)?;
    if let Some(expected) = expected_digest {
        if snap.table.dataset_digest != expected {
            return Err(Error::Compatibility {
                expected: expected.to_string(),
                found: snap.table.dataset_digest.clone(),
            });
        }
    }
    Ok(snap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> RsTable<f64> {
        RsTable::from_scores(0.5, &[vec![vec![0.5, 0.2]], vec![vec![0.1, 0.0]]]).unwrap()
    }

    fn cfg(mu: f64) -> DynamicsConfig<f64> {
        DynamicsConfig { mu, loss_scale: 1.0 }
    }

    #[test]
    fn ema_examples() {
        let g = GroupKey::new(0, 0, 0);
        let mut t = table();
        let new = apply_error_record(&mut t, &ErrorRecord::new(g, 1.0, 0), &cfg(0.99)).unwrap();
        assert!((new - 0.505).abs() < 1e-15);
        assert!((t.class_mean(0) - (0.505 + 0.2) / 2.0).abs() < 1e-15);

        let mut t = table();
        apply_error_record(&mut t, &ErrorRecord::new(g, 7.0, 0), &cfg(1.0)).unwrap();
        assert_eq!(t, table());

        let mut t = table();
        apply_error_record(&mut t, &ErrorRecord::new(g, 7.0, 0), &cfg(0.0)).unwrap();
        assert_eq!(t.rs(&g), Some(7.0));
    }

    #[test]
    fn bad_losses_rejected() {
        let g = GroupKey::new(0, 0, 0);
        let mut t = table();
        for loss in [-1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                apply_error_record(&mut t, &ErrorRecord::new(g, loss, 0), &cfg(0.9)),
                Err(Error::RejectedRecord(_))
            ));
        }
        assert_eq!(t, table());
    }

    #[test]
    fn stream_counts_and_ranges() {
        let mut t = table();
        let recs = vec![
            Ok(ErrorRecord::new(GroupKey::new(0, 0, 0), 1.0, 0)),
            Ok(ErrorRecord::new(GroupKey::new(0, 0, 0), -1.0, 1)),
            Ok(ErrorRecord::new(GroupKey::new(1, 0, 1), 1.0, 1)),
            Ok(ErrorRecord::new(GroupKey::new(9, 0, 0), 1.0, 2)),
        ];
        let report = run_update_stream(&mut t, recs, &cfg(0.5)).unwrap();
        assert_eq!(report.applied, 2);
        assert_eq!(report.rejected, 2);
        assert_eq!(report.per_group.len(), 2);
        assert_eq!(report.rs_min_before, Some(0.0));
        assert_eq!(report.rs_max_before, Some(0.5));
        assert_eq!(report.rs_min_after, Some(0.5));
        assert_eq!(report.rs_max_after, Some(0.75));
    }

    #[test]
    fn empty_stream_is_noop() {
        let mut t = table();
        let report = run_update_stream(&mut t, Vec::new(), &cfg(0.5)).unwrap();
        assert_eq!(t, table());
        assert_eq!(report.applied + report.rejected, 0);
        assert!(report.per_group.is_empty() && report.rs_min_before.is_none());
    }

    #[test]
    fn out_of_order_aborts_without_changes() {
        let mut t = table();
        let g = GroupKey::new(0, 0, 0);
        let recs = vec![Ok(ErrorRecord::new(g, 1.0, 5)), Ok(ErrorRecord::new(g, 1.0, 4))];
        let err = run_update_stream(&mut t, recs, &cfg(0.5)).unwrap_err();
        assert!(matches!(err, Error::Ordering { previous: 5, got: 4 }));
        assert_eq!(t, table());
    }

    #[test]
    fn stream_parsing() {
        let text = "{\"class_id\":0,\"size_bin\":0,\"pos_bin\":1,\"loss\":0.25,\"step\":3}\n\n";
        let recs: Vec<_> = read_error_stream::<f64, _>(text.as_bytes()).collect::<Result<_>>().unwrap();
        assert_eq!(recs, vec![ErrorRecord::new(GroupKey::new(0, 0, 1), 0.25, 3)]);
    }

    #[test]
    fn snapshot_round_trip_and_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        let mut t = table();
        t.dataset_digest = "abc".into();
        let snap = Snapshot {
            table: t,
            mu: 0.99,
            records_applied: 12,
        };
        snapshot(&snap, &path).unwrap();
        let back = restore::<f64>(&path, Some("abc")).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.to_json(), snap.to_json());
        assert!(matches!(
            restore::<f64>(&path, Some("other")),
            Err(Error::Compatibility { .. })
        ));
    }

    #[test]
    fn validation() {
        assert!(cfg(1.5).validate().is_err());
        assert!(DynamicsConfig { mu: 0.5, loss_scale: 0.0 }.validate().is_err());
    }
}
