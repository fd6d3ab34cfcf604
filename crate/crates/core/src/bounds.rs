//! Robustness constants, probe-based robustness estimates and the
//! generalization bounds they feed.
//!
//! A learner is `(K, eps)`-robust when the labeled space splits into `K` cells
//! such that any test pair falling cell-wise onto a training pair has a loss
//! within `eps` of it. With probability `1 - delta` the gap between true and
//! empirical pair loss is then at most
//!
//! ```text
//! eps + 2 B sqrt((2 K ln 2 + 2 ln(1/delta)) / n)
//! ```
//!
//! (coefficient `3 B` for triplets), and a pseudo-robust learner that is only
//! robust on `p_hat` of the `n^2` training pairs gets
//! `(p_hat/n^2) eps + B((n^2 - p_hat)/n^2 + 2 sqrt(...))`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::cover::{assign_cell, CellId, CoverNorm, Partition};
use crate::error::{Error, Result};
use crate::exec::{chunk_ranges, stream_rng, Exec};
use crate::model::{
    build_triplets, is_admissible, triplet_value, Dataset, LabeledExample, LossSpec, MetricKind,
    MetricModel, Regularizer, TRIPLET_G0,
};

/// Learner families with a closed-form robustness constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "fro")]
    Fro,
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l21")]
    L21,
    #[serde(rename = "bilinear")]
    Bilinear,
    #[serde(rename = "kernel-rbf")]
    KernelRbf,
    #[serde(rename = "triplet-fro")]
    TripletFro,
    #[serde(rename = "triplet-l21")]
    TripletL21,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Fro,
        Family::L1,
        Family::L21,
        Family::Bilinear,
        Family::KernelRbf,
        Family::TripletFro,
        Family::TripletL21,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Fro => "fro",
            Family::L1 => "l1",
            Family::L21 => "l21",
            Family::Bilinear => "bilinear",
            Family::KernelRbf => "kernel-rbf",
            Family::TripletFro => "triplet-fro",
            Family::TripletL21 => "triplet-l21",
        }
    }

    pub fn regularizer(self) -> Regularizer {
        match self {
            Family::L1 => Regularizer::L1,
            Family::L21 | Family::TripletL21 => Regularizer::L21,
            _ => Regularizer::Fro,
        }
    }

    pub fn metric_kind(self) -> MetricKind {
        match self {
            Family::Bilinear => MetricKind::Bilinear,
            Family::KernelRbf => MetricKind::Kernelized,
            _ => MetricKind::Mahalanobis,
        }
    }

    pub fn is_triplet(self) -> bool {
        matches!(self, Family::TripletFro | Family::TripletL21)
    }

    /// Zero-matrix loss of the family's loss function.
    pub fn g0(self, ls: &LossSpec) -> f64 {
        if self.is_triplet() {
            TRIPLET_G0
        } else {
            ls.g0
        }
    }

    /// The cover norm the family's constant is stated for.
    pub fn natural_norm(self) -> CoverNorm {
        match self {
            Family::L1 => CoverNorm::L1,
            _ => CoverNorm::L2,
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown family {s:?}")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustnessQuery {
    pub family: Family,
    pub u: f64,
    pub r: f64,
    pub gamma: f64,
    pub g0: f64,
    pub c: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl RobustnessQuery {
    pub fn validate(&self) -> Result<()> {
        let positive = [("U", self.u), ("R", self.r), ("g0", self.g0), ("c", self.c)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidInput(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.family == Family::KernelRbf && !self.sigma.is_some_and(|s| s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidInput("kernel-rbf needs a positive sigma".into()));
        }
        Ok(())
    }
}

/// `sup_{||a-b||_2 <= gamma} k(a,a) + k(b,b) - 2k(a,b)` for the rbf kernel.
pub fn rbf_fh(gamma: f64, sigma: f64) -> f64 {
    2.0 * (1.0 - (-(gamma * gamma) / (2.0 * sigma * sigma)).exp())
}

/// Closed-form robustness constant of a family:
/// `8 U R gamma g0 / c` for fro/l1/l21, `2 U R gamma g0 / c` for bilinear,
/// `16 U R gamma g0 / c` for triplets and `8 U sqrt(f_H(gamma)) g0 / c` for
/// the rbf kernel (whose features have unit norm).
pub fn epsilon_theoretical(q: &RobustnessQuery) -> Result<f64> {
    q.validate()?;
    let base = q.u * q.r * q.gamma * q.g0 / q.c;
    Ok(match q.family {
        Family::Fro | Family::L1 | Family::L21 => 8.0 * base,
        Family::Bilinear => 2.0 * base,
        Family::TripletFro | Family::TripletL21 => 16.0 * base,
        Family::KernelRbf => {
            let b_gamma = 1.0;
            let fh = rbf_fh(q.gamma, q.sigma.unwrap_or(1.0));
            8.0 * q.u * b_gamma * fh.sqrt() * q.g0 / q.c
        }
    })
}

/// Probe-based robustness estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonEstimate {
    pub epsilon: f64,
    /// Probe points outside the cover, left out of the estimate.
    pub excluded_probes: usize,
    /// Training pairs with at least one cell-matched probe pair.
    pub matched_pairs: usize,
}

struct PairDeviations {
    /// Largest loss deviation for each training pair (row-major), `None`
    /// when no probe pair shares its cells.
    per_pair: Vec<Option<f64>>,
    excluded: usize,
}

fn train_cells(p: &Partition, ds: &Dataset) -> Result<Vec<CellId>> {
    ds.examples().iter().map(|z| assign_cell(p, z)).collect()
}

fn probe_cells(p: &Partition, probe: &[LabeledExample]) -> (Vec<usize>, Vec<CellId>) {
    let mut kept = Vec::new();
    let mut cells = Vec::new();
    for (i, z) in probe.iter().enumerate() {
        if let Ok(c) = assign_cell(p, z) {
            kept.push(i);
            cells.push(c);
        }
    }
    (kept, cells)
}

fn merge_range(map: &mut HashMap<Vec<usize>, (f64, f64)>, key: Vec<usize>, v: f64) {
    map.entry(key)
        .and_modify(|(lo, hi)| {
            *lo = lo.min(v);
            *hi = hi.max(v);
        })
        .or_insert((v, v));
}

/// `max |l - t|` over `t` in `[lo, hi]` attained at an endpoint.
fn worst_deviation(l: f64, (lo, hi): (f64, f64)) -> f64 {
    (l - lo).abs().max((hi - l).abs())
}

fn pair_deviations(
    m: &MetricModel,
    ls: &LossSpec,
    p: &Partition,
    ds: &Dataset,
    probe: &[LabeledExample],
    exec: Exec,
) -> Result<PairDeviations> {
    let train = ds.examples();
    let tcells = train_cells(p, ds)?;
    let (kept, pcells) = probe_cells(p, probe);
    let temb = exec.try_map(train.len(), |i| m.embed(&train[i].x))?;
    let pemb = exec.try_map(kept.len(), |i| m.embed(&probe[kept[i]].x))?;

    let rows = exec.map(kept.len(), |a| {
        (0..kept.len())
            .map(|b| {
                let f = m.eval_embedded(&pemb[a], &pemb[b]);
                ls.pair_value(probe[kept[a]].y == probe[kept[b]].y, f)
            })
            .collect::<Vec<f64>>()
    });
    let mut ranges: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
    for (a, row) in rows.iter().enumerate() {
        for (b, &l) in row.iter().enumerate() {
            merge_range(&mut ranges, vec![pcells[a].index, pcells[b].index], l);
        }
    }

    let n = train.len();
    let per_row = exec.map(n, |i| {
        (0..n)
            .map(|j| {
                let key = [tcells[i].index, tcells[j].index];
                ranges.get(key.as_slice()).map(|&range| {
                    let f = m.eval_embedded(&temb[i], &temb[j]);
                    let l = ls.pair_value(train[i].y == train[j].y, f);
                    worst_deviation(l, range)
                })
            })
            .collect::<Vec<_>>()
    });
    Ok(PairDeviations {
        per_pair: per_row.into_iter().flatten().collect(),
        excluded: probe.len() - kept.len(),
    })
}

/// Largest `|l(s1,s2) - l(z1,z2)|` over training pairs and probe pairs that
/// fall cell-wise onto them; 0 when nothing matches.
pub fn empirical_epsilon(
    m: &MetricModel,
    ls: &LossSpec,
    p: &Partition,
    ds: &Dataset,
    probe: &[LabeledExample],
) -> Result<EpsilonEstimate> {
    empirical_epsilon_with(m, ls, p, ds, probe, Exec::default())
}

pub fn empirical_epsilon_with(
    m: &MetricModel,
    ls: &LossSpec,
    p: &Partition,
    ds: &Dataset,
    probe: &[LabeledExample],
    exec: Exec,
) -> Result<EpsilonEstimate> {
    let dev = pair_deviations(m, ls, p, ds, probe, exec)?;
    Ok(EpsilonEstimate {
        epsilon: dev.per_pair.iter().flatten().fold(0.0, |a: f64, &v| a.max(v)),
        excluded_probes: dev.excluded,
        matched_pairs: dev.per_pair.iter().filter(|v| v.is_some()).count(),
    })
}

/// Number of training pairs whose every cell-matched probe pair deviates by at
/// most `epsilon`.
pub fn pseudo_robust_count(
    m: &MetricModel,
    ls: &LossSpec,
    p: &Partition,
    ds: &Dataset,
    probe: &[LabeledExample],
    epsilon: f64,
) -> Result<usize> {
    let dev = pair_deviations(m, ls, p, ds, probe, Exec::default())?;
    Ok(dev
        .per_pair
        .iter()
        .filter(|v| v.is_none_or(|d| d <= epsilon))
        .count())
}

/// Triplet analogue of [`empirical_epsilon`] over the admissible training
/// triplets and admissible probe triples.
pub fn empirical_epsilon_triplet(
    m: &MetricModel,
    p: &Partition,
    ds: &Dataset,
    probe: &[LabeledExample],
) -> Result<EpsilonEstimate> {
    let exec = Exec::default();
    let train = ds.examples();
    let tcells = train_cells(p, ds)?;
    let (kept, pcells) = probe_cells(p, probe);
    let temb = exec.try_map(train.len(), |i| m.embed(&train[i].x))?;
    let pemb = exec.try_map(kept.len(), |i| m.embed(&probe[kept[i]].x))?;
    let pz: Vec<&LabeledExample> = kept.iter().map(|&i| &probe[i]).collect();

    let rows = exec.map(kept.len(), |a| {
        let mut out = Vec::new();
        for b in 0..kept.len() {
            for c in 0..kept.len() {
                if is_admissible(pz[a], pz[b], pz[c]) {
                    let f13 = m.eval_embedded(&pemb[a], &pemb[c]);
                    let f12 = m.eval_embedded(&pemb[a], &pemb[b]);
                    out.push(([pcells[a].index, pcells[b].index, pcells[c].index], triplet_value(f13, f12)));
                }
            }
        }
        out
    });
    let mut ranges: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
    for (key, l) in rows.into_iter().flatten() {
        merge_range(&mut ranges, key.to_vec(), l);
    }

    let ts = build_triplets(ds);
    let mut eps = 0.0_f64;
    let mut matched = 0;
    for &(i, j, k) in &ts.triplets {
        let key = [tcells[i].index, tcells[j].index, tcells[k].index];
        if let Some(&range) = ranges.get(key.as_slice()) {
            let l = triplet_value(m.eval_embedded(&temb[i], &temb[k]), m.eval_embedded(&temb[i], &temb[j]));
            eps = eps.max(worst_deviation(l, range));
            matched += 1;
        }
    }
    Ok(EpsilonEstimate {
        epsilon: eps,
        excluded_probes: probe.len() - kept.len(),
        matched_pairs: matched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    Pair,
    Triplet,
    Pseudo,
}

impl FromStr for BoundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair" => Ok(BoundMode::Pair),
            "triplet" => Ok(BoundMode::Triplet),
            "pseudo" => Ok(BoundMode::Pseudo),
            other => Err(Error::InvalidInput(format!("unknown bound mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub epsilon: f64,
    pub b: f64,
    pub k: u64,
    pub n: u64,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<u64>,
    pub mode: BoundMode,
}

impl BoundQuery {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.b >= 0.0 && self.b.is_finite()) {
            return Err(Error::InvalidInput(format!("B must be >= 0, got {}", self.b)));
        }
        if self.k == 0 || self.n == 0 {
            return Err(Error::InvalidInput("K and n must be positive".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!("delta must be in (0,1), got {}", self.delta)));
        }
        if self.mode == BoundMode::Pseudo {
            match self.p_hat {
                Some(p) if (p as u128) <= (self.n as u128) * (self.n as u128) => {}
                Some(p) => {
                    return Err(Error::InvalidInput(format!("p_hat = {p} exceeds n^2")));
                }
                None => return Err(Error::InvalidInput("pseudo bound needs p_hat".into())),
            }
        }
        Ok(())
    }
}

/// `sqrt((2 K ln 2 + 2 ln(1/delta)) / n)`.
pub fn concentration_term(k: u64, n: u64, delta: f64) -> f64 {
    ((2.0 * k as f64 * std::f64::consts::LN_2 + 2.0 * (1.0 / delta).ln()) / n as f64).sqrt()
}

/// Multiplier of `B * concentration_term` in the pair/triplet bounds.
pub fn concentration_coefficient(mode: BoundMode) -> f64 {
    match mode {
        BoundMode::Pair | BoundMode::Pseudo => 2.0,
        BoundMode::Triplet => 3.0,
    }
}

pub fn bound_value(q: &BoundQuery) -> Result<f64> {
    q.validate()?;
    let s = concentration_term(q.k, q.n, q.delta);
    Ok(match q.mode {
        BoundMode::Pair | BoundMode::Triplet => {
            q.epsilon + concentration_coefficient(q.mode) * q.b * s
        }
        BoundMode::Pseudo => {
            let total = q.n as f64 * q.n as f64;
            let p_hat = q.p_hat.unwrap_or(0) as f64;
            (p_hat / total) * q.epsilon + q.b * ((total - p_hat) / total + 2.0 * s)
        }
    })
}

/// Outcome of a multinomial total-variation tail simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BhcResult {
    pub k: usize,
    pub n: u64,
    pub lambda: f64,
    pub trials: u64,
    /// Fraction of trials with `sum |N_i/n - mu_i| >= lambda`.
    pub tail: f64,
    /// Monte Carlo standard error of `tail`.
    pub std_error: f64,
    /// `2^K exp(-n lambda^2 / 2)`.
    pub cap: f64,
    pub violation: bool,
}

const BHC_CHUNK: usize = 4096;

/// Draws `trials` multinomial samples and compares their total-variation
/// tail against the concentration cap. A trial at the threshold (within
/// `1e-12`) counts as an exceedance.
pub fn bhc_simulate(
    k: usize,
    mu: &[f64],
    n: u64,
    lambda: f64,
    trials: u64,
    seed: u64,
    exec: Exec,
) -> Result<BhcResult> {
    if k == 0 || mu.len() != k {
        return Err(Error::InvalidInput(format!(
            "mu has {} entries, expected K = {k}",
            mu.len()
        )));
    }
    if mu.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::InvalidInput("mu entries must be nonnegative".into()));
    }
    let mass: f64 = mu.iter().sum();
    if (mass - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput(format!("mu sums to {mass}, not 1")));
    }
    if !(lambda > 0.0) || n == 0 || trials == 0 {
        return Err(Error::InvalidInput("lambda, n and trials must be positive".into()));
    }

    let expected: Vec<f64> = mu.iter().map(|p| p * n as f64).collect();
    let threshold = lambda * n as f64 - 1e-12 * n as f64;
    let ranges = chunk_ranges(trials as usize, BHC_CHUNK);
    let hits = exec.try_map(ranges.len(), |ci| -> Result<u64> {
        let mut rng = stream_rng(seed, ci as u64);
        let mut hits = 0u64;
        let mut counts = vec![0u64; k];
        for _ in ranges[ci].clone() {
            sample_multinomial(&mut rng, n, mu, &mut counts)?;
            let dev: f64 = counts
                .iter()
                .zip(&expected)
                .map(|(&c, &e)| (c as f64 - e).abs())
                .sum();
            if dev >= threshold {
                hits += 1;
            }
        }
        Ok(hits)
    })?;
    let total: u64 = hits.iter().sum();
    let tail = total as f64 / trials as f64;
    let std_error = (tail * (1.0 - tail) / trials as f64).sqrt();
    let cap = 2f64.powi(k as i32) * (-(n as f64) * lambda * lambda / 2.0).exp();
    Ok(BhcResult {
        k,
        n,
        lambda,
        trials,
        tail,
        std_error,
        cap,
        violation: tail > cap + 3.0 * std_error,
    })
}

/// Sequential conditional-binomial draw of a multinomial vector.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, n: u64, mu: &[f64], out: &mut [u64]) -> Result<()> {
    let mut left = n;
    let mut mass = 1.0_f64;
    let last = mu.len() - 1;
    for (i, &p) in mu.iter().enumerate() {
        if i == last || left == 0 {
            out[i] = if i == last { left } else { 0 };
            left -= out[i];
            continue;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 0.0 };
        let draw = Binomial::new(left, q)
            .map_err(|e| Error::Numerical(format!("binomial sampler: {e}")))?
            .sample(rng);
        out[i] = draw;
        left -= draw;
        mass -= p;
    }
    Ok(())
}

/// Certified quantities for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub family: Family,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub gamma: f64,
    pub g0: f64,
    pub c: f64,
    pub n: u64,
    #[serde(rename = "K_theoretical")]
    pub k_theoretical: u64,
    #[serde(rename = "K_empirical")]
    pub k_empirical: u64,
    #[serde(rename = "B")]
    pub b: f64,
    pub epsilon_theoretical: f64,
    pub epsilon_empirical: f64,
    pub bound_pair: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_pseudo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_hat: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_triplet: Option<f64>,
    pub empirical_loss: f64,
    pub true_loss: f64,
    pub true_loss_se: f64,
    pub empirical_gap: f64,
    pub holds: bool,
    pub excluded_probes: u64,
    pub seed: u64,
    pub config_hash: String,
}

impl BoundReport {
    /// The bound `holds` is checked against.
    pub fn operative_bound(&self) -> f64 {
        self.bound_triplet.unwrap_or(self.bound_pair)
    }

    pub fn all_finite(&self) -> bool {
        [
            self.u,
            self.r,
            self.gamma,
            self.g0,
            self.c,
            self.b,
            self.epsilon_theoretical,
            self.epsilon_empirical,
            self.bound_pair,
            self.bound_pseudo.unwrap_or(0.0),
            self.bound_triplet.unwrap_or(0.0),
            self.empirical_loss,
            self.true_loss,
            self.true_loss_se,
            self.empirical_gap,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}
