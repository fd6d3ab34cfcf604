//! Proximal subgradient descent for the regularized pair and triplet
//! objectives, with projection onto the PSD cone after every step.
//!
//! The iteration starts at `M = 0`, uses steps `step0 / sqrt(t)`, keeps the
//! best iterate seen and finally returns whichever of {best iterate, `M = 0`}
//! has the smaller objective. Since the zero matrix scores `g0` at most, every
//! returned model satisfies `c * ||M||_reg <= g0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{
    empirical_loss, empirical_triplet_loss, Dataset, KernelMetric, KernelSpec, LossSpec,
    MetricForm, MetricModel, PairSet, Regularizer, TripletSet, PSD_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub c: f64,
    pub max_iters: usize,
    pub step0: f64,
    pub tol: f64,
    /// Kept for provenance; the iteration itself starts from `M = 0`.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iters: 500,
            step0: 1.0,
            tol: 1e-9,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidInput(format!("c must be > 0, got {}", self.c)));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidInput("max_iters must be >= 1".into()));
        }
        if !(self.step0 > 0.0 && self.step0.is_finite()) {
            return Err(Error::InvalidInput(format!("step0 must be > 0, got {}", self.step0)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidInput(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Per-iteration record of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    /// Objective of the iterate evaluated at each step.
    pub objectives: Vec<f64>,
    /// Running minimum of `objectives`.
    pub best: Vec<f64>,
    pub converged: bool,
}

/// `c * ||M||_reg + empirical_loss`. Kernelized models always use the
/// feature-space Frobenius norm.
pub fn objective(
    m: &MetricModel,
    ds: &Dataset,
    ps: &PairSet,
    ls: &LossSpec,
    reg: Regularizer,
    c: f64,
) -> Result<f64> {
    let norm = match &m.form {
        MetricForm::Kernelized(k) => k.feature_norm(),
        MetricForm::Mahalanobis(mat) | MetricForm::Bilinear(mat) => reg.norm(mat),
    };
    Ok(c * norm + empirical_loss(m, ds, ps, ls)?)
}

/// `c * ||M||_reg + mean triplet loss`.
pub fn triplet_objective(
    m: &MetricModel,
    ds: &Dataset,
    ts: &TripletSet,
    reg: Regularizer,
    c: f64,
) -> Result<f64> {
    Ok(c * reg.norm(m.matrix()) + empirical_triplet_loss(m, ds, ts)?)
}

/// Euclidean projection onto the PSD cone: symmetrize, clip negative
/// eigenvalues. Rows/columns that are exactly zero stay exactly zero, and an
/// already-PSD input is returned as its symmetric part unchanged.
pub fn psd_project(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!(
            "psd_project needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = linalg::symmetrize(m);
    let active: Vec<usize> = (0..sym.nrows())
        .filter(|&i| sym.row(i).iter().any(|v| *v != 0.0))
        .collect();
    if active.is_empty() {
        return Ok(sym);
    }
    let sub = sym.select_rows(&active).select_columns(&active);
    let eig = linalg::sym_eigen(&sub)?;
    if eig.eigenvalues.min() >= 0.0 {
        return Ok(sym);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    let rebuilt = linalg::symmetrize(&rebuilt);
    let mut out = DMatrix::zeros(sym.nrows(), sym.ncols());
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            out[(i, j)] = rebuilt[(a, b)];
        }
    }
    Ok(out)
}

/// Proximal operator of `tau * ||.||_reg`.
pub fn prox(m: &DMatrix<f64>, tau: f64, reg: Regularizer) -> DMatrix<f64> {
    if tau <= 0.0 {
        return m.clone();
    }
    match reg {
        Regularizer::Fro => {
            let norm = Regularizer::Fro.norm(m);
            if norm == 0.0 {
                return m.clone();
            }
            m * (1.0 - tau / norm).max(0.0)
        }
        Regularizer::L1 => m.map(|v| v.signum() * (v.abs() - tau).max(0.0)),
        Regularizer::L21 => {
            let mut out = m.clone();
            for mut col in out.column_iter_mut() {
                let norm = col.norm();
                let scale = if norm > 0.0 { (1.0 - tau / norm).max(0.0) } else { 0.0 };
                col *= scale;
            }
            out
        }
    }
}

/// Subgradient of the mean pair loss at `m`, taking the zero branch on hinge
/// kinks. For Mahalanobis models each active pair contributes
/// `y_ij (x_i - x_j)(x_i - x_j)ᵀ`; bilinear models `y_ij x_i x_jᵀ`;
/// kernelized models the same outer products in kernel coordinates.
pub fn loss_subgradient(
    m: &MetricModel,
    ds: &Dataset,
    ps: &PairSet,
    ls: &LossSpec,
) -> Result<DMatrix<f64>> {
    if ps.is_empty() {
        return Err(Error::Degenerate("empty pair set".into()));
    }
    let ex = ds.examples();
    let emb = m.embed_all(ex)?;
    let coords: Vec<DVector<f64>> = match &m.form {
        MetricForm::Kernelized(k) => ex.iter().map(|e| k.kernel_vector(&e.x)).collect(),
        _ => ex.iter().map(|e| e.x.clone()).collect(),
    };
    let p = coords[0].len();
    let mut grad = DMatrix::zeros(p, p);
    for &(i, j) in &ps.pairs {
        let same = ex[i].y == ex[j].y;
        let f = m.eval_embedded(&emb[i], &emb[j]);
        if ls.argument(same, f) >= 1.0 {
            continue;
        }
        let y = if same { 1.0 } else { -1.0 };
        match &m.form {
            MetricForm::Bilinear(_) => grad += (&coords[i] * coords[j].transpose()) * y,
            _ => {
                let diff = &coords[i] - &coords[j];
                grad += (&diff * diff.transpose()) * y;
            }
        }
    }
    Ok(grad / ps.len() as f64)
}

/// Loss value and subgradient over features stacked as rows of `feats`.
trait LossOracle {
    fn dim(&self) -> usize;
    fn value_and_subgradient(&self, m: &DMatrix<f64>) -> (f64, DMatrix<f64>);
}

/// `sum_ij w_ij (a_i - a_j)(a_i - a_j)ᵀ = Aᵀ (diag(rowsum + colsum) - W - Wᵀ) A`.
fn difference_outer_sum(feats: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut lap = -(w + w.transpose());
    for i in 0..n {
        let s: f64 = w.row(i).sum() + w.column(i).sum();
        lap[(i, i)] += s;
    }
    feats.transpose() * lap * feats
}

struct PairOracle<'a> {
    feats: DMatrix<f64>,
    pairs: &'a [(usize, usize)],
    same: Vec<bool>,
    bilinear: bool,
    ls: LossSpec,
}

impl<'a> PairOracle<'a> {
    fn new(feats: DMatrix<f64>, ds: &Dataset, ps: &'a PairSet, ls: &LossSpec, bilinear: bool) -> Self {
        let ex = ds.examples();
        let same = ps.pairs.iter().map(|&(i, j)| ex[i].y == ex[j].y).collect();
        Self {
            feats,
            pairs: &ps.pairs,
            same,
            bilinear,
            ls: *ls,
        }
    }
}

impl LossOracle for PairOracle<'_> {
    fn dim(&self) -> usize {
        self.feats.ncols()
    }

    fn value_and_subgradient(&self, m: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let n = self.feats.nrows();
        let gram = &self.feats * m * self.feats.transpose();
        let mut w = DMatrix::zeros(n, n);
        let mut total = 0.0;
        for (&(i, j), &same) in self.pairs.iter().zip(&self.same) {
            let f = if self.bilinear {
                gram[(i, j)]
            } else {
                gram[(i, i)] + gram[(j, j)] - gram[(i, j)] - gram[(j, i)]
            };
            let t = self.ls.argument(same, f);
            total += self.ls.g(t);
            if t < 1.0 {
                w[(i, j)] += if same { 1.0 } else { -1.0 };
            }
        }
        let grad = if self.bilinear {
            self.feats.transpose() * w * &self.feats
        } else {
            difference_outer_sum(&self.feats, &w)
        };
        let count = self.pairs.len() as f64;
        (total / count, grad / count)
    }
}

struct TripletOracle<'a> {
    feats: DMatrix<f64>,
    triplets: &'a [(usize, usize, usize)],
}

impl LossOracle for TripletOracle<'_> {
    fn dim(&self) -> usize {
        self.feats.ncols()
    }

    fn value_and_subgradient(&self, m: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let n = self.feats.nrows();
        let gram = &self.feats * m * self.feats.transpose();
        let dist = |i: usize, j: usize| gram[(i, i)] + gram[(j, j)] - gram[(i, j)] - gram[(j, i)];
        let mut w = DMatrix::zeros(n, n);
        let mut total = 0.0;
        for &(i, j, k) in self.triplets {
            let arg = 1.0 - dist(i, k) + dist(i, j);
            if arg > 0.0 {
                total += arg;
                w[(i, j)] += 1.0;
                w[(i, k)] -= 1.0;
            }
        }
        let count = self.triplets.len() as f64;
        (total / count, difference_outer_sum(&self.feats, &w) / count)
    }
}

/// Proximal step that keeps group sparsity compatible with symmetry: for
/// `l21` on symmetric iterates, a zeroed column also zeroes its row.
fn prox_step(a: &DMatrix<f64>, tau: f64, reg: Regularizer, symmetric: bool) -> DMatrix<f64> {
    let mut out = prox(a, tau, reg);
    if symmetric && reg == Regularizer::L21 {
        let zeroed: Vec<usize> = (0..out.ncols())
            .filter(|&j| out.column(j).iter().all(|v| *v == 0.0))
            .collect();
        for &j in &zeroed {
            out.row_mut(j).fill(0.0);
        }
    }
    out
}

fn descend(
    oracle: &dyn LossOracle,
    reg: Regularizer,
    cfg: &SolverConfig,
    project: bool,
) -> Result<(DMatrix<f64>, SolveTrace)> {
    cfg.validate()?;
    let p = oracle.dim();
    let mut m = DMatrix::zeros(p, p);
    let mut best = m.clone();
    let mut best_obj = f64::INFINITY;
    let mut trace = SolveTrace::default();
    let mut prev: Option<f64> = None;

    for iter in 1..=cfg.max_iters {
        let (loss, grad) = oracle.value_and_subgradient(&m);
        let obj = cfg.c * reg.norm(&m) + loss;
        if !obj.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: iter });
        }
        if obj < best_obj {
            best_obj = obj;
            best = m.clone();
        }
        trace.objectives.push(obj);
        trace.best.push(best_obj);
        if let Some(last) = prev {
            if (obj - last).abs() <= cfg.tol * last.abs().max(f64::MIN_POSITIVE) {
                trace.converged = true;
                break;
            }
        }
        prev = Some(obj);

        let step = cfg.step0 / (iter as f64).sqrt();
        let moved = &m - grad * step;
        let shrunk = prox_step(&moved, step * cfg.c, reg, project);
        m = if project { psd_project(&shrunk)? } else { shrunk };
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { iteration: iter });
        }
    }
    Ok((best, trace))
}

fn pick_best(candidate: MetricModel, zero: MetricModel, score: impl Fn(&MetricModel) -> Result<f64>) -> Result<MetricModel> {
    let cand = score(&candidate)?;
    let base = score(&zero)?;
    if !cand.is_finite() {
        return Err(Error::Numerical("solver produced a non-finite objective".into()));
    }
    Ok(if cand <= base { candidate } else { zero })
}

/// Minimizes the pair objective over PSD Mahalanobis matrices.
pub fn solve(
    ds: &Dataset,
    ps: &PairSet,
    ls: &LossSpec,
    reg: Regularizer,
    cfg: &SolverConfig,
) -> Result<MetricModel> {
    solve_with_trace(ds, ps, ls, reg, cfg).map(|(m, _)| m)
}

pub fn solve_with_trace(
    ds: &Dataset,
    ps: &PairSet,
    ls: &LossSpec,
    reg: Regularizer,
    cfg: &SolverConfig,
) -> Result<(MetricModel, SolveTrace)> {
    check_pairs(ps)?;
    let oracle = PairOracle::new(ds.feature_matrix(), ds, ps, ls, false);
    let (m, trace) = descend(&oracle, reg, cfg, true)?;
    let candidate = MetricModel::mahalanobis(m, reg, cfg.c)?;
    let zero = MetricModel::mahalanobis(DMatrix::zeros(ds.dim(), ds.dim()), reg, cfg.c)?;
    let model = pick_best(candidate, zero, |mm| objective(mm, ds, ps, ls, reg, cfg.c))?;
    Ok((model, trace))
}

/// Bilinear similarity `x_iᵀ M x_j` with unconstrained `M`.
pub fn solve_bilinear(
    ds: &Dataset,
    ps: &PairSet,
    ls: &LossSpec,
    reg: Regularizer,
    cfg: &SolverConfig,
) -> Result<MetricModel> {
    check_pairs(ps)?;
    let oracle = PairOracle::new(ds.feature_matrix(), ds, ps, ls, true);
    let (m, _) = descend(&oracle, reg, cfg, false)?;
    let candidate = MetricModel::bilinear(m, reg, cfg.c)?;
    let zero = MetricModel::bilinear(DMatrix::zeros(ds.dim(), ds.dim()), reg, cfg.c)?;
    pick_best(candidate, zero, |mm| objective(mm, ds, ps, ls, reg, cfg.c))
}

/// Triplet objective with the `fro` or `l21` regularizer.
pub fn solve_triplet(
    ds: &Dataset,
    ts: &TripletSet,
    reg: Regularizer,
    cfg: &SolverConfig,
) -> Result<MetricModel> {
    if ts.is_empty() {
        return Err(Error::Degenerate(
            "no admissible triplets (need at least two labels)".into(),
        ));
    }
    if reg == Regularizer::L1 {
        return Err(Error::InvalidInput(
            "triplet solver supports the fro and l21 regularizers".into(),
        ));
    }
    let oracle = TripletOracle {
        feats: ds.feature_matrix(),
        triplets: &ts.triplets,
    };
    let (m, _) = descend(&oracle, reg, cfg, true)?;
    let candidate = MetricModel::mahalanobis(m, reg, cfg.c)?;
    let zero = MetricModel::mahalanobis(DMatrix::zeros(ds.dim(), ds.dim()), reg, cfg.c)?;
    pick_best(candidate, zero, |mm| triplet_objective(mm, ds, ts, reg, cfg.c))
}

/// Relative cutoff below which Gram eigenvalues are treated as zero.
const GRAM_RANK_TOL: f64 = 1e-10;

/// Kernelized pair objective. The Gram matrix `K = V Λ Vᵀ` gives training
/// coordinates `u_i = Λ^{1/2} Vᵀ e_i`, in which the problem is the Frobenius
/// Mahalanobis problem; the solution `B` maps back to `A = V Λ^{-1/2} B
/// Λ^{-1/2} Vᵀ`, so that `||K^{1/2} A K^{1/2}||_F = ||B||_F`.
pub fn solve_kernel(
    ds: &Dataset,
    ps: &PairSet,
    ls: &LossSpec,
    ks: &KernelSpec,
    cfg: &SolverConfig,
) -> Result<MetricModel> {
    check_pairs(ps)?;
    ks.validate()?;
    cfg.validate()?;
    let anchors = ds.feature_matrix();
    let gram = ks.gram(&anchors);
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Gram matrix has non-finite entries".into()));
    }
    let eig = linalg::sym_eigen(&gram)?;
    let scale = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.min() < -PSD_TOL * scale.max(1.0) {
        return Err(Error::Numerical(format!(
            "Gram matrix is not PSD (min eigenvalue {})",
            eig.eigenvalues.min()
        )));
    }
    let n = ds.n();
    let keep: Vec<usize> = (0..n)
        .filter(|&k| eig.eigenvalues[k] > GRAM_RANK_TOL * scale)
        .collect();
    let r = keep.len();
    let zero_metric = KernelMetric::from_factor(*ks, anchors.clone(), DMatrix::zeros(0, n))?;
    let zero = MetricModel::kernelized(zero_metric, cfg.c);
    if r == 0 {
        return Ok(zero);
    }

    let mut coords = DMatrix::zeros(n, r);
    let mut whiten = DMatrix::zeros(r, n);
    for (col, &k) in keep.iter().enumerate() {
        let lambda = eig.eigenvalues[k];
        for i in 0..n {
            coords[(i, col)] = lambda.sqrt() * eig.eigenvectors[(i, k)];
            whiten[(col, i)] = eig.eigenvectors[(i, k)] / lambda.sqrt();
        }
    }

    let oracle = PairOracle::new(coords, ds, ps, ls, false);
    let (b, _) = descend(&oracle, Regularizer::Fro, cfg, true)?;

    let b_eig = linalg::sym_eigen(&b)?;
    let pos: Vec<usize> = (0..r).filter(|&k| b_eig.eigenvalues[k] > 0.0).collect();
    let mut c_t = DMatrix::zeros(pos.len(), r);
    for (row, &k) in pos.iter().enumerate() {
        let s = b_eig.eigenvalues[k].sqrt();
        for j in 0..r {
            c_t[(row, j)] = s * b_eig.eigenvectors[(j, k)];
        }
    }
    let factor = c_t * whiten;
    let candidate = MetricModel::kernelized(KernelMetric::from_factor(*ks, anchors, factor)?, cfg.c);
    pick_best(candidate, zero, |mm| {
        objective(mm, ds, ps, ls, Regularizer::Fro, cfg.c)
    })
}

fn check_pairs(ps: &PairSet) -> Result<()> {
    if ps.is_empty() {
        return Err(Error::Degenerate("empty pair set".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_pairs, build_triplets, LabeledExample, MetricKind};

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn line(points: &[(f64, &str)]) -> Dataset {
        Dataset::new(
            points.iter().map(|(x, y)| LabeledExample::new(vec![*x], *y)).collect(),
            2.0,
        )
        .unwrap()
    }

    /// Brute-force minimizer of `tau * |u| + (u - x)^2 / 2` on a grid.
    fn scalar_prox_oracle(x: f64, tau: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let steps = 200_000;
        for s in 0..=steps {
            let u = -2.0 + 4.0 * s as f64 / steps as f64;
            let v = tau * u.abs() + 0.5 * (u - x) * (u - x);
            if v < best.0 {
                best = (v, u);
            }
        }
        best.1
    }

    #[test]
    fn objective_examples() {
        let ls = LossSpec::hinge();
        let ds = line(&[(0.0, "A"), (1.0, "A")]);
        let ps = build_pairs(&ds);
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 1);
        let loss0 = empirical_loss(&zero, &ds, &ps, &ls).unwrap();
        assert_eq!(objective(&zero, &ds, &ps, &ls, Regularizer::Fro, 3.0).unwrap(), loss0);

        assert!((Regularizer::Fro.norm(&DMatrix::identity(2, 2)) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Regularizer::L21.norm(&mat(2, 2, &[3.0, 0.0, 4.0, 0.0])), 5.0);
        assert_eq!(Regularizer::L1.norm(&mat(2, 2, &[3.0, -1.0, 4.0, 0.0])), 8.0);
    }

    #[test]
    fn psd_project_examples() {
        let p = psd_project(&mat(2, 2, &[1.0, 0.0, 0.0, -1.0])).unwrap();
        assert_eq!(p, mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(psd_project(&id).unwrap(), id);
        let p = psd_project(&mat(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        for v in p.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!(psd_project(&mat(2, 3, &[0.0; 6])).is_err());
    }

    #[test]
    fn psd_project_keeps_zero_rows() {
        let m = mat(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let p = psd_project(&m).unwrap();
        assert!(p.row(2).iter().all(|v| *v == 0.0));
        assert!(p.column(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prox_examples() {
        let m = mat(1, 2, &[0.5, 0.1]);
        let out = prox(&m, 0.2, Regularizer::L1);
        assert!((out[(0, 0)] - 0.3).abs() < 1e-15);
        assert_eq!(out[(0, 1)], 0.0);
        assert!((out[(0, 0)] - scalar_prox_oracle(0.5, 0.2)).abs() < 1e-4);
        assert!(scalar_prox_oracle(0.1, 0.2).abs() < 1e-4);

        let col = mat(2, 1, &[3.0, 4.0]);
        let out = prox(&col, 1.0, Regularizer::L21);
        assert!((out[(0, 0)] - 2.4).abs() < 1e-12 && (out[(1, 0)] - 3.2).abs() < 1e-12);

        // scaled-candidate brute force for the group prox: u = s * x
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=10_000 {
            let s = k as f64 / 10_000.0;
            let v = 5.0 * s + 0.5 * 25.0 * (1.0 - s) * (1.0 - s);
            if v < best.0 {
                best = (v, s);
            }
        }
        assert!((best.1 - 0.8).abs() < 1e-3);

        let any = mat(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        for reg in [Regularizer::Fro, Regularizer::L1, Regularizer::L21] {
            assert_eq!(prox(&any, 0.0, reg), any);
        }
    }

    #[test]
    fn subgradient_flat_and_single_pair() {
        let ls = LossSpec::hinge();
        // Equal labels with M = 0: every argument sits on the kink -> 0.
        let ds = Dataset::new(
            vec![LabeledExample::new(vec![0.0, 0.0], "A"), LabeledExample::new(vec![1.0, 0.0], "A")],
            1.0,
        )
        .unwrap();
        let ps = build_pairs(&ds);
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 2);
        assert_eq!(loss_subgradient(&zero, &ds, &ps, &ls).unwrap(), DMatrix::zeros(2, 2));

        // With M = I the two cross pairs are active with loss f > 0.
        let id = MetricModel::mahalanobis(DMatrix::identity(2, 2), Regularizer::Fro, 1.0).unwrap();
        let g = loss_subgradient(&id, &ds, &ps, &ls).unwrap();
        assert!((g[(0, 0)] - 2.0 / 4.0).abs() < 1e-15);
        assert_eq!(g[(0, 1)], 0.0);
        assert_eq!(g[(1, 1)], 0.0);

        // A single ordered same-label pair gives +(1/|ps|) e1 e1ᵀ.
        let single = PairSet { pairs: vec![(0, 1)] };
        let g = loss_subgradient(&id, &ds, &single, &ls).unwrap();
        assert_eq!(g, mat(2, 2, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn all_equal_labels_gives_zero_objective() {
        let ls = LossSpec::hinge();
        let ds = line(&[(0.0, "A"), (0.5, "A"), (1.0, "A")]);
        let ps = build_pairs(&ds);
        let cfg = SolverConfig::default();
        let m = solve(&ds, &ps, &ls, Regularizer::Fro, &cfg).unwrap();
        assert!(objective(&m, &ds, &ps, &ls, Regularizer::Fro, cfg.c).unwrap() <= 1e-6);
    }

    #[test]
    fn two_point_separation_beats_zero() {
        let ls = LossSpec::hinge();
        let ds = line(&[(0.0, "A"), (1.0, "B")]);
        let ps = build_pairs(&ds);
        let cfg = SolverConfig {
            c: 0.01,
            ..SolverConfig::default()
        };
        let m = solve(&ds, &ps, &ls, Regularizer::Fro, &cfg).unwrap();
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 1);
        let l = empirical_loss(&m, &ds, &ps, &ls).unwrap();
        assert!(l < empirical_loss(&zero, &ds, &ps, &ls).unwrap());

        // Grid oracle over scalar M in [0, 50].
        let grid_best = (0..=50_000)
            .map(|k| {
                let s = k as f64 / 1000.0;
                let mm = MetricModel::mahalanobis(mat(1, 1, &[s]), Regularizer::Fro, cfg.c).unwrap();
                objective(&mm, &ds, &ps, &ls, Regularizer::Fro, cfg.c).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        let got = objective(&m, &ds, &ps, &ls, Regularizer::Fro, cfg.c).unwrap();
        assert!(got <= grid_best + 0.05, "solver {got} vs grid {grid_best}");
    }

    #[test]
    fn triplet_solver_edges() {
        let single = line(&[(0.0, "A"), (1.0, "A")]);
        let ts = build_triplets(&single);
        assert!(matches!(
            solve_triplet(&single, &ts, Regularizer::Fro, &SolverConfig::default()),
            Err(Error::Degenerate(_))
        ));

        let ds = line(&[(0.0, "A"), (0.2, "A"), (1.0, "B")]);
        let ts = build_triplets(&ds);
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 1);
        assert_eq!(triplet_objective(&zero, &ds, &ts, Regularizer::Fro, 1.0).unwrap(), 1.0);
        let cfg = SolverConfig {
            c: 0.05,
            ..SolverConfig::default()
        };
        let m = solve_triplet(&ds, &ts, Regularizer::Fro, &cfg).unwrap();
        let got = triplet_objective(&m, &ds, &ts, Regularizer::Fro, cfg.c).unwrap();
        assert!(got <= 1.0);
        let grid_best = (0..=20_000)
            .map(|k| {
                let s = k as f64 / 1000.0;
                let mm = MetricModel::mahalanobis(mat(1, 1, &[s]), Regularizer::Fro, cfg.c).unwrap();
                triplet_objective(&mm, &ds, &ts, Regularizer::Fro, cfg.c).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(got <= grid_best + 0.05, "solver {got} vs grid {grid_best}");
    }

    #[test]
    fn kernel_zero_and_single_label() {
        let ls = LossSpec::hinge();
        let ds = line(&[(0.0, "A"), (0.5, "A"), (1.0, "A")]);
        let ps = build_pairs(&ds);
        let rbf = KernelSpec::rbf(1.0).unwrap();
        let m = solve_kernel(&ds, &ps, &ls, &rbf, &SolverConfig::default()).unwrap();
        assert!(objective(&m, &ds, &ps, &ls, Regularizer::Fro, 1.0).unwrap() <= 1e-6);

        let zero = KernelMetric::from_factor(rbf, ds.feature_matrix(), DMatrix::zeros(0, 3)).unwrap();
        let zero = MetricModel::kernelized(zero, 1.0);
        let l0 = empirical_loss(&zero, &ds, &ps, &ls).unwrap();
        assert_eq!(objective(&zero, &ds, &ps, &ls, Regularizer::Fro, 1.0).unwrap(), l0);
    }

    #[test]
    fn config_validation() {
        let bad = [
            SolverConfig { c: 0.0, ..Default::default() },
            SolverConfig { max_iters: 0, ..Default::default() },
            SolverConfig { step0: -1.0, ..Default::default() },
            SolverConfig { tol: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
