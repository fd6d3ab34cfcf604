//! Synthetic tasks, end-to-end experiments (train, certify, validate against
//! a Monte Carlo estimate of the true loss), gap-vs-n curves and k-NN.

use nalgebra::DVector;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    bound_value, concentration_coefficient, concentration_term, empirical_epsilon_with,
    empirical_epsilon_triplet, epsilon_theoretical, pseudo_robust_count, BoundMode, BoundQuery,
    BoundReport, Family, RobustnessQuery,
};
use crate::cover::{build_partition, covering_number_upper_bound, CoverConfig, CoverNorm};
use crate::error::{Error, Result};
use crate::exec::{chunk_ranges, stream_rng, Exec};
use crate::model::{
    build_pairs, build_triplets, empirical_loss, loss_bound_b, loss_bound_b_kernel,
    loss_bound_b_triplet, metric_eval, pair_loss, triplet_loss, triplet_losses, Dataset,
    KernelSpec, LabeledExample, LossSpec, MetricKind, MetricModel,
};
use crate::solver::{solve, solve_bilinear, solve_kernel, solve_triplet, SolverConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Attempts allowed per accepted point before giving up on a spec.
const MAX_TRIES_PER_POINT: usize = 10_000;

/// Equal-weight Gaussian mixture restricted to the radius-`R` ball. Class `k`
/// has mean `means[k]` and covariance `cov_scale * diag(axis_scales)^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub means: Vec<Vec<f64>>,
    pub cov_scale: f64,
    pub radius: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_scales: Option<Vec<f64>>,
}

impl SyntheticSpec {
    /// Two classes separated along axis 0 in `d = 5`; the four other axes
    /// carry twice the noise and no signal.
    pub fn default_task(n: usize, seed: u64) -> Self {
        let d = 5;
        let mean = |s: f64| {
            let mut m = vec![0.0; d];
            m[0] = s;
            m
        };
        Self {
            d,
            n,
            classes: 2,
            means: vec![mean(-0.5), mean(0.5)],
            cov_scale: 0.04,
            radius: 2.0,
            seed,
            axis_scales: Some(vec![1.0, 2.0, 2.0, 2.0, 2.0]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.classes == 0 {
            return Err(Error::InvalidInput("d, n and classes must be positive".into()));
        }
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidInput(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.cov_scale >= 0.0 && self.cov_scale.is_finite()) {
            return Err(Error::InvalidInput(format!("cov_scale must be >= 0, got {}", self.cov_scale)));
        }
        if self.means.len() != self.classes {
            return Err(Error::InvalidInput(format!(
                "{} means for {} classes",
                self.means.len(),
                self.classes
            )));
        }
        for (k, m) in self.means.iter().enumerate() {
            if m.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: m.len(),
                });
            }
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= self.radius) {
                return Err(Error::InvalidInput(format!(
                    "mean of class {k} lies outside the radius-{} ball",
                    self.radius
                )));
            }
        }
        if let Some(s) = &self.axis_scales {
            if s.len() != self.d {
                return Err(Error::DimensionMismatch {
                    expected: self.d,
                    got: s.len(),
                });
            }
            if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::InvalidInput("axis_scales must be >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.classes).map(|k| k.to_string()).collect()
    }

    /// Draws one example by rejection into the ball.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<LabeledExample> {
        let k = rng.random_range(0..self.classes);
        let sd = self.cov_scale.sqrt();
        for _ in 0..MAX_TRIES_PER_POINT {
            let x = DVector::from_fn(self.d, |j, _| {
                let z: f64 = rng.sample(StandardNormal);
                let scale = self.axis_scales.as_ref().map_or(1.0, |s| s[j]);
                self.means[k][j] + sd * scale * z
            });
            if x.norm() <= self.radius {
                return Ok(LabeledExample { x, y: k.to_string() });
            }
        }
        Err(Error::InvalidInput(format!(
            "rejection rate above 99% for class {k}; use a larger radius"
        )))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<LabeledExample>> {
        (0..count).map(|_| self.draw(rng)).collect()
    }

    /// Acceptance rate of the ball restriction, estimated from `draws` proposals.
    pub fn acceptance_rate(&self, draws: usize, seed: u64) -> f64 {
        let mut rng = stream_rng(seed, 0);
        let sd = self.cov_scale.sqrt();
        let mut accepted = 0usize;
        for _ in 0..draws {
            let k = rng.random_range(0..self.classes);
            let norm_sq: f64 = (0..self.d)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    let scale = self.axis_scales.as_ref().map_or(1.0, |s| s[j]);
                    let v = self.means[k][j] + sd * scale * z;
                    v * v
                })
                .sum();
            if norm_sq.sqrt() <= self.radius {
                accepted += 1;
            }
        }
        accepted as f64 / draws.max(1) as f64
    }
}

/// `n` IID draws from the spec's mixture, deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.acceptance_rate(1000, spec.seed) < 0.01 {
        return Err(Error::InvalidInput(
            "rejection rate above 99%; use a larger radius".into(),
        ));
    }
    let mut rng = stream_rng(spec.seed, 0);
    let examples = spec.sample(&mut rng, spec.n)?;
    Dataset::with_labels(examples, spec.radius, spec.labels())
}

/// Mean and standard error of a per-sample Monte Carlo quantity. Samples are
/// split in fixed chunks with their own RNG streams.
fn monte_carlo<F>(samples: usize, seed: u64, exec: Exec, one: F) -> Result<(f64, f64)>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng) -> Result<f64> + Sync + Send,
{
    if samples < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 Monte Carlo samples, got {samples}")));
    }
    let ranges = chunk_ranges(samples, 2048);
    let sums = exec.try_map(ranges.len(), |ci| -> Result<(f64, f64)> {
        let mut rng = stream_rng(seed, ci as u64);
        let mut s = 0.0;
        let mut s2 = 0.0;
        for _ in ranges[ci].clone() {
            let v = one(&mut rng)?;
            s += v;
            s2 += v * v;
        }
        Ok((s, s2))
    })?;
    let (s, s2) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let m = samples as f64;
    let mean = s / m;
    let var = ((s2 - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok((mean, (var / m).sqrt()))
}

/// Monte Carlo estimate of the expected pair loss under the spec's
/// distribution, with its standard error.
pub fn true_loss_estimate(
    m: &MetricModel,
    ls: &LossSpec,
    spec: &SyntheticSpec,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    spec.validate()?;
    monte_carlo(samples, seed, Exec::default(), |rng| {
        let a = spec.draw(rng)?;
        let b = spec.draw(rng)?;
        pair_loss(m, ls, &a, &b)
    })
}

/// Expected triplet loss over IID triples (non-admissible triples score 0).
pub fn true_triplet_loss_estimate(
    m: &MetricModel,
    spec: &SyntheticSpec,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    spec.validate()?;
    monte_carlo(samples, seed, Exec::default(), |rng| {
        let a = spec.draw(rng)?;
        let b = spec.draw(rng)?;
        let c = spec.draw(rng)?;
        triplet_loss(m, &a, &b, &c)
    })
}

fn default_pseudo_fraction() -> f64 {
    0.5
}

fn default_kernel_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub family: Family,
    pub delta: f64,
    /// Probe points drawn per repetition for the empirical robustness estimate.
    pub probe_size: usize,
    /// Monte Carlo pairs (or triples) for the true-loss estimate.
    pub mc_samples: usize,
    pub repetitions: usize,
    /// Pseudo-robustness threshold as a fraction of the theoretical epsilon.
    #[serde(default = "default_pseudo_fraction")]
    pub pseudo_fraction: f64,
    #[serde(default = "default_kernel_sigma")]
    pub kernel_sigma: f64,
    pub synthetic: SyntheticSpec,
    pub solver: SolverConfig,
    pub cover: CoverConfig,
}

impl ExperimentConfig {
    pub fn default_task() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            family: Family::Fro,
            delta: 0.05,
            probe_size: 200,
            mc_samples: 20_000,
            repetitions: 10,
            pseudo_fraction: default_pseudo_fraction(),
            kernel_sigma: default_kernel_sigma(),
            synthetic: SyntheticSpec::default_task(200, 0),
            solver: SolverConfig {
                c: 0.1,
                ..SolverConfig::default()
            },
            cover: CoverConfig {
                gamma: 0.5,
                norm: CoverNorm::L2,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!("delta must be in (0,1), got {}", self.delta)));
        }
        if self.probe_size == 0 || self.mc_samples < 2 || self.repetitions == 0 {
            return Err(Error::InvalidInput(
                "probe_size >= 1, mc_samples >= 2 and repetitions >= 1 are required".into(),
            ));
        }
        if !(self.pseudo_fraction >= 0.0 && self.pseudo_fraction.is_finite()) {
            return Err(Error::InvalidInput("pseudo_fraction must be >= 0".into()));
        }
        self.synthetic.validate()?;
        self.solver.validate()?;
        self.cover.validate()?;
        self.kernel_spec().validate()
    }

    pub fn kernel_spec(&self) -> KernelSpec {
        KernelSpec {
            kind: crate::model::KernelKind::Rbf,
            sigma: Some(self.kernel_sigma),
        }
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::hinge()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Deterministic child seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).next_u64()
}

/// Trains the family's model on `ds`.
pub fn train(cfg: &ExperimentConfig, ds: &Dataset) -> Result<MetricModel> {
    let ls = cfg.loss_spec();
    let fam = cfg.family;
    if fam.is_triplet() {
        return solve_triplet(ds, &build_triplets(ds), fam.regularizer(), &cfg.solver);
    }
    let ps = build_pairs(ds);
    match fam.metric_kind() {
        MetricKind::Mahalanobis => solve(ds, &ps, &ls, fam.regularizer(), &cfg.solver),
        MetricKind::Bilinear => solve_bilinear(ds, &ps, &ls, fam.regularizer(), &cfg.solver),
        MetricKind::Kernelized => solve_kernel(ds, &ps, &ls, &cfg.kernel_spec(), &cfg.solver),
    }
}

/// Empirical loss on the training sample: mean over the `n^2` pairs, or the
/// triplet sum normalized by `n^3`.
pub fn training_loss(cfg: &ExperimentConfig, m: &MetricModel, ds: &Dataset) -> Result<f64> {
    if cfg.family.is_triplet() {
        let total: f64 = triplet_losses(m, ds, &build_triplets(ds))?.iter().sum();
        let n = ds.n() as f64;
        Ok(total / (n * n * n))
    } else {
        empirical_loss(m, ds, &build_pairs(ds), &cfg.loss_spec())
    }
}

/// Certifies a trained model: robustness constants, both `K`s, `B`, the
/// bounds and the gap against the supplied true-loss estimate.
pub fn certify(
    cfg: &ExperimentConfig,
    m: &MetricModel,
    ds: &Dataset,
    probe: &[LabeledExample],
    true_loss: (f64, f64),
    seed: u64,
) -> Result<BoundReport> {
    let fam = cfg.family;
    let ls = cfg.loss_spec();
    let c = cfg.solver.c;
    let r = ds.radius();
    let partition = build_partition(ds, &cfg.cover, Some(probe))?;
    let k_emp = partition.k() as u64;
    let k_th = ds.labels().len() as u64
        * covering_number_upper_bound(r, cfg.cover.gamma / 2.0, ds.dim(), cfg.cover.norm)?;

    let b = if fam.is_triplet() {
        loss_bound_b_triplet(r, c)?
    } else {
        match fam.metric_kind() {
            MetricKind::Kernelized => loss_bound_b_kernel(&ls, r, c, &cfg.kernel_spec())?,
            kind => loss_bound_b(&ls, r, c, kind)?,
        }
    };
    let g0 = fam.g0(&ls);
    let eps_th = epsilon_theoretical(&RobustnessQuery {
        family: fam,
        u: ls.lipschitz,
        r,
        gamma: cfg.cover.gamma,
        g0,
        c,
        sigma: Some(cfg.kernel_sigma),
    })?;
    let estimate = if fam.is_triplet() {
        empirical_epsilon_triplet(m, &partition, ds, probe)?
    } else {
        empirical_epsilon_with(m, &ls, &partition, ds, probe, Exec::default())?
    };

    let n = ds.n() as u64;
    let query = BoundQuery {
        epsilon: eps_th,
        b,
        k: k_th,
        n,
        delta: cfg.delta,
        p_hat: None,
        mode: BoundMode::Pair,
    };
    let bound_pair = bound_value(&query)?;
    let (bound_pseudo, p_hat, bound_triplet) = if fam.is_triplet() {
        let t = bound_value(&BoundQuery {
            mode: BoundMode::Triplet,
            ..query
        })?;
        (None, None, Some(t))
    } else {
        let eps_ps = cfg.pseudo_fraction * eps_th;
        let p_hat = pseudo_robust_count(m, &ls, &partition, ds, probe, eps_ps)? as u64;
        let v = bound_value(&BoundQuery {
            epsilon: eps_ps,
            p_hat: Some(p_hat),
            mode: BoundMode::Pseudo,
            ..query
        })?;
        (Some(v), Some(p_hat), None)
    };

    let emp = training_loss(cfg, m, ds)?;
    let gap = (true_loss.0 - emp).abs();
    let operative = bound_triplet.unwrap_or(bound_pair);
    Ok(BoundReport {
        family: fam,
        u: ls.lipschitz,
        r,
        gamma: cfg.cover.gamma,
        g0,
        c,
        n,
        k_theoretical: k_th,
        k_empirical: k_emp,
        b,
        epsilon_theoretical: eps_th,
        epsilon_empirical: estimate.epsilon,
        bound_pair,
        bound_pseudo,
        p_hat,
        bound_triplet,
        empirical_loss: emp,
        true_loss: true_loss.0,
        true_loss_se: true_loss.1,
        empirical_gap: gap,
        holds: gap <= operative,
        excluded_probes: estimate.excluded_probes as u64,
        seed,
        config_hash: cfg.hash(),
    })
}

/// One repetition: data, training, probes, true loss and certification.
pub fn run_repetition(cfg: &ExperimentConfig, rep: usize) -> Result<(MetricModel, BoundReport)> {
    let seed = derive_seed(cfg.synthetic.seed, rep as u64);
    let spec = SyntheticSpec {
        seed,
        ..cfg.synthetic.clone()
    };
    let ds = gen_synthetic(&spec)?;
    let m = train(cfg, &ds)?;
    let probe = spec.sample(&mut stream_rng(seed, 1), cfg.probe_size)?;
    let mc_seed = derive_seed(seed, 2);
    let truth = if cfg.family.is_triplet() {
        true_triplet_loss_estimate(&m, &spec, cfg.mc_samples, mc_seed)?
    } else {
        true_loss_estimate(&m, &cfg.loss_spec(), &spec, cfg.mc_samples, mc_seed)?
    };
    let report = certify(cfg, &m, &ds, &probe, truth, seed)?;
    Ok((m, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub repetitions: usize,
    pub holds_count: usize,
    pub holds_fraction: f64,
    pub mean_gap: f64,
    pub mean_bound_pair: f64,
    pub mean_epsilon_empirical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub reports: Vec<BoundReport>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with(cfg, Exec::default())
}

/// Repetitions run independently with derived seeds; the output lists them
/// in repetition order.
pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Exec) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let reports = exec.try_map(cfg.repetitions, |rep| {
        run_repetition(cfg, rep)
            .map(|(_, r)| r)
            .map_err(|e| Error::Repetition {
                index: rep,
                source: Box::new(e),
            })
    })?;
    let count = reports.len() as f64;
    let holds_count = reports.iter().filter(|r| r.holds).count();
    let mean = |f: fn(&BoundReport) -> f64| reports.iter().map(f).sum::<f64>() / count;
    Ok(ExperimentOutput {
        summary: ExperimentSummary {
            repetitions: reports.len(),
            holds_count,
            holds_fraction: holds_count as f64 / count,
            mean_gap: mean(|r| r.empirical_gap),
            mean_bound_pair: mean(|r| r.bound_pair),
            mean_epsilon_empirical: mean(|r| r.epsilon_empirical),
        },
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub n: usize,
    pub gap_mean: f64,
    pub gap_se: f64,
    pub bound_mean: f64,
    /// `2 B sqrt((2 K ln 2 + 2 ln(1/delta)) / n)`, the epsilon-free part of the bound.
    pub sqrt_term: f64,
}

/// Mean gap and bound per sample size, one experiment per ladder rung.
pub fn gap_curve(cfg: &ExperimentConfig, ladder: &[usize]) -> Result<Vec<CurveRow>> {
    if ladder.is_empty() || ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("n ladder must be non-empty and increasing".into()));
    }
    ladder
        .iter()
        .map(|&n| {
            let mut c = cfg.clone();
            c.synthetic.n = n;
            let out = run_experiment(&c)?;
            let gaps: Vec<f64> = out.reports.iter().map(|r| r.empirical_gap).collect();
            let k = gaps.len() as f64;
            let gap_mean = gaps.iter().sum::<f64>() / k;
            let var = if gaps.len() > 1 {
                gaps.iter().map(|g| (g - gap_mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            let first = &out.reports[0];
            let mode = if cfg.family.is_triplet() {
                BoundMode::Triplet
            } else {
                BoundMode::Pair
            };
            Ok(CurveRow {
                n,
                gap_mean,
                gap_se: (var / k).sqrt(),
                bound_mean: out.reports.iter().map(|r| r.operative_bound()).sum::<f64>() / k,
                sqrt_term: concentration_coefficient(mode)
                    * first.b
                    * concentration_term(first.k_theoretical, n as u64, cfg.delta),
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// k-NN accuracy under the learned metric: smallest distance, or largest
/// similarity for bilinear models. Neighbor ties go to the lower training
/// index, vote ties to the label that sorts first.
pub fn knn_eval(m: &MetricModel, train: &Dataset, test: &Dataset, k: usize) -> Result<f64> {
    if test.n() == 0 {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    if k == 0 || k > train.n() {
        return Err(Error::InvalidInput(format!(
            "k must be in [1, {}], got {k}",
            train.n()
        )));
    }
    let labels = train.labels();
    let tr = train.examples();
    let sign = if m.kind() == MetricKind::Bilinear { -1.0 } else { 1.0 };
    let hits = Exec::default().try_map(test.n(), |t| -> Result<usize> {
        let z = &test.examples()[t];
        let mut scored: Vec<(f64, usize)> = tr
            .iter()
            .enumerate()
            .map(|(i, s)| metric_eval(m, &s.x, &z.x).map(|f| (sign * f, i)))
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; labels.len()];
        for &(_, i) in &scored[..k] {
            if let Some(li) = train.label_index(&tr[i].y) {
                votes[li] += 1;
            }
        }
        let best = votes
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > votes[b] { i } else { b });
        Ok(usize::from(labels[best] == z.y))
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / test.n() as f64)
}
