//! Covers of the input space and the label-aware partition built on them.
//!
//! Centers are picked at radius `gamma / 2`, so two points sharing a cell have
//! the same label and lie within `gamma` of each other.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, LabeledExample};

/// Counts above this are not exactly representable as `f64`.
const MAX_EXACT_COUNT: f64 = 9_007_199_254_740_992.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverNorm {
    L1,
    L2,
}

impl CoverNorm {
    pub fn distance(self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match self {
            CoverNorm::L1 => a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum(),
            CoverNorm::L2 => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CoverNorm::L1 => "l1",
            CoverNorm::L2 => "l2",
        }
    }
}

impl FromStr for CoverNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(CoverNorm::L1),
            "l2" => Ok(CoverNorm::L2),
            other => Err(Error::InvalidInput(format!("unknown cover norm {other:?}"))),
        }
    }
}

impl fmt::Display for CoverNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverConfig {
    pub gamma: f64,
    pub norm: CoverNorm,
}

impl CoverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Greedy sweep in input order: a point becomes a center when no earlier
/// center lies within `radius`.
pub fn greedy_cover(points: &[DVector<f64>], radius: f64, norm: CoverNorm) -> Result<Vec<DVector<f64>>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!("cover radius must be > 0, got {radius}")));
    }
    let mut centers: Vec<DVector<f64>> = Vec::new();
    for p in points {
        if !centers.iter().any(|c| norm.distance(c, p) <= radius) {
            centers.push(p.clone());
        }
    }
    Ok(centers)
}

/// Volumetric bound `ceil((1 + 2R/r)^d)` on the covering number of the
/// radius-`R` ball at radius `r` (`R` scaled by `sqrt(d)` for `l1`).
pub fn covering_number_upper_bound(radius: f64, gamma_half: f64, d: usize, norm: CoverNorm) -> Result<u64> {
    if !(radius > 0.0 && gamma_half > 0.0 && d > 0) {
        return Err(Error::InvalidInput(format!(
            "covering bound needs positive inputs, got R={radius}, r={gamma_half}, d={d}"
        )));
    }
    let reach = match norm {
        CoverNorm::L2 => radius,
        CoverNorm::L1 => radius * (d as f64).sqrt(),
    };
    let count = (1.0 + 2.0 * reach / gamma_half).powi(d as i32).ceil();
    if !count.is_finite() || count > MAX_EXACT_COUNT {
        return Err(Error::CoverOverflow(format!(
            "(1 + 2*{reach}/{gamma_half})^{d} exceeds 2^53"
        )));
    }
    Ok(count as u64)
}

/// Cell identifier; `index = label * n_centers + center`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId {
    pub label: usize,
    pub center: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub gamma: f64,
    pub norm: CoverNorm,
    pub centers: Vec<DVector<f64>>,
    pub labels: Vec<String>,
}

impl Partition {
    /// Total number of cells, `|Y| * |centers|`.
    pub fn k(&self) -> usize {
        self.labels.len() * self.centers.len()
    }

    pub fn radius(&self) -> f64 {
        self.gamma / 2.0
    }

    /// Nearest center (lowest index on ties) and its distance.
    pub fn nearest_center(&self, x: &DVector<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.centers.iter().enumerate() {
            let d = self.norm.distance(c, x);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }
}

/// Covers the dataset points followed by the optional probe points.
pub fn build_partition(ds: &Dataset, cfg: &CoverConfig, probe: Option<&[LabeledExample]>) -> Result<Partition> {
    cfg.validate()?;
    let mut points: Vec<DVector<f64>> = ds.examples().iter().map(|e| e.x.clone()).collect();
    let mut labels: Vec<String> = ds.labels().to_vec();
    if let Some(extra) = probe {
        for e in extra {
            if e.x.len() != ds.dim() {
                return Err(Error::DimensionMismatch {
                    expected: ds.dim(),
                    got: e.x.len(),
                });
            }
            points.push(e.x.clone());
            labels.push(e.y.clone());
        }
    }
    labels.sort();
    labels.dedup();
    let centers = greedy_cover(&points, cfg.gamma / 2.0, cfg.norm)?;
    Ok(Partition {
        gamma: cfg.gamma,
        norm: cfg.norm,
        centers,
        labels,
    })
}

/// Cell of `z`: its label crossed with the nearest center. Points farther than
/// `gamma / 2` from every center, or carrying an unknown label, are out of
/// the cover.
pub fn assign_cell(p: &Partition, z: &LabeledExample) -> Result<CellId> {
    let radius = p.radius();
    let (center, distance) = p.nearest_center(&z.x).ok_or(Error::OutOfCover {
        distance: f64::INFINITY,
        radius,
    })?;
    if distance > radius {
        return Err(Error::OutOfCover { distance, radius });
    }
    let label = p
        .labels
        .binary_search(&z.y)
        .map_err(|_| Error::InvalidInput(format!("label {:?} is not in the partition", z.y)))?;
    Ok(CellId {
        label,
        center,
        index: label * p.centers.len() + center,
    })
}

/// Occupancy `N_i` of every cell.
pub fn cell_counts(p: &Partition, examples: &[LabeledExample]) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; p.k()];
    for z in examples {
        counts[assign_cell(p, z)?.index] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|&x| DVector::from_vec(vec![x])).collect()
    }

    /// Smallest subset of `points` that covers them at `radius`.
    fn min_cover_size(points: &[DVector<f64>], radius: f64, norm: CoverNorm) -> usize {
        let n = points.len();
        (1u32..(1 << n))
            .filter(|mask| {
                points.iter().all(|p| {
                    (0..n).any(|i| mask & (1 << i) != 0 && norm.distance(&points[i], p) <= radius)
                })
            })
            .map(|mask| mask.count_ones() as usize)
            .min()
            .unwrap_or(0)
    }

    #[test]
    fn greedy_examples() {
        let three = pts(&[0.0, 1.0, 2.0]);
        let c = greedy_cover(&three, 0.5, CoverNorm::L2).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(min_cover_size(&three, 0.5, CoverNorm::L2), 3);

        assert_eq!(greedy_cover(&pts(&[0.3]), 0.5, CoverNorm::L2).unwrap().len(), 1);

        let close = pts(&[0.0, 0.4, 0.8]);
        let c = greedy_cover(&close, 0.5, CoverNorm::L2).unwrap();
        assert_eq!(c, pts(&[0.0, 0.8]));
        // Greedy is not optimal here: 0.4 alone covers all three.
        assert_eq!(min_cover_size(&close, 0.5, CoverNorm::L2), 1);

        assert!(greedy_cover(&[], 0.5, CoverNorm::L1).unwrap().is_empty());
        assert!(greedy_cover(&close, 0.0, CoverNorm::L1).is_err());
    }

    #[test]
    fn covering_bound_examples() {
        assert_eq!(covering_number_upper_bound(1.0, 1.0, 1, CoverNorm::L2).unwrap(), 3);
        assert_eq!(covering_number_upper_bound(1.0, 2.0, 1, CoverNorm::L2).unwrap(), 2);
        for d in 1..6 {
            assert!(covering_number_upper_bound(1.0, 2.5, d, CoverNorm::L2).unwrap() <= 1 << d);
        }
        assert_eq!(covering_number_upper_bound(1.0, 0.5, 2, CoverNorm::L2).unwrap(), 25);
        assert!(matches!(
            covering_number_upper_bound(1.0, 1e-6, 50, CoverNorm::L2),
            Err(Error::CoverOverflow(_))
        ));
    }

    #[test]
    fn partition_examples() {
        let same = Dataset::new(
            vec![LabeledExample::new(vec![0.5], "a"), LabeledExample::new(vec![0.5], "b")],
            1.0,
        )
        .unwrap();
        let cfg = CoverConfig {
            gamma: 0.1,
            norm: CoverNorm::L2,
        };
        let p = build_partition(&same, &cfg, None).unwrap();
        assert_eq!((p.centers.len(), p.k()), (1, 2));

        let line = Dataset::new(
            [0.0, 1.0, 2.0].iter().map(|&x| LabeledExample::new(vec![x], "a")).collect(),
            2.0,
        )
        .unwrap();
        let p = build_partition(&line, &CoverConfig { gamma: 1.0, norm: CoverNorm::L2 }, None).unwrap();
        assert_eq!(p.k(), 3);
    }

    #[test]
    fn assign_rules() {
        let p = Partition {
            gamma: 2.0,
            norm: CoverNorm::L2,
            centers: pts(&[0.0, 10.0, 5.0, 20.0, 7.0]),
            labels: vec!["a".into(), "b".into()],
        };
        let at = assign_cell(&p, &LabeledExample::new(vec![5.0], "b")).unwrap();
        assert_eq!((at.label, at.center, at.index), (1, 2, 7));
        // 6.0 is equidistant from centers 2 (5.0) and 4 (7.0).
        let tie = assign_cell(&p, &LabeledExample::new(vec![6.0], "a")).unwrap();
        assert_eq!(tie.center, 2);
        assert!(matches!(
            assign_cell(&p, &LabeledExample::new(vec![2.5], "a")),
            Err(Error::OutOfCover { .. })
        ));
    }

    #[test]
    fn counts() {
        let p = Partition {
            gamma: 1.0,
            norm: CoverNorm::L1,
            centers: pts(&[0.0, 1.0]),
            labels: vec!["a".into()],
        };
        assert_eq!(cell_counts(&p, &[]).unwrap(), vec![0, 0]);
        let one_each = [LabeledExample::new(vec![0.1], "a"), LabeledExample::new(vec![0.9], "a")];
        assert_eq!(cell_counts(&p, &one_each).unwrap(), vec![1, 1]);
        assert!(cell_counts(&p, &[LabeledExample::new(vec![3.0], "a")]).is_err());
    }
}
