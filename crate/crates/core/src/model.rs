//! Labeled data, pair/triplet construction, learned metrics and the
//! margin losses built on them.
//!
//! A pair `(z1, z2)` is scored by `g(y12 * (1 - f(z1, z2)))` with the hinge
//! `g(t) = max(0, 1 - t)` and `y12 = +1` for equal labels, `-1` otherwise.
//! Triplets `(z1, z2, z3)` with `y1 = y2 != y3` are scored by
//! `[1 - f(x1, x3) + f(x1, x2)]_+`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::rbf_fh;
use crate::error::{Error, Result};
use crate::linalg;

/// Relative slack applied to the radius invariant.
const RADIUS_SLACK: f64 = 1e-12;

/// Numerical PSD tolerance on the smallest eigenvalue.
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: DVector<f64>,
    pub y: String,
}

impl LabeledExample {
    pub fn new(x: impl Into<Vec<f64>>, y: impl Into<String>) -> Self {
        Self {
            x: DVector::from_vec(x.into()),
            y: y.into(),
        }
    }
}

/// An IID labeled sample living in the radius-`R` ball.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<LabeledExample>,
    dim: usize,
    radius: f64,
    labels: Vec<String>,
}

impl Dataset {
    /// Builds a dataset whose label set is the (sorted) set of observed labels.
    pub fn new(examples: Vec<LabeledExample>, radius: f64) -> Result<Self> {
        let labels: BTreeSet<String> = examples.iter().map(|e| e.y.clone()).collect();
        Self::with_labels(examples, radius, labels.into_iter().collect())
    }

    /// Builds a dataset with an explicitly declared label set.
    pub fn with_labels(
        examples: Vec<LabeledExample>,
        radius: f64,
        labels: Vec<String>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("dataset must be non-empty".into()));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidInput(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        let mut labels = labels;
        labels.sort();
        labels.dedup();
        let dim = examples[0].x.len();
        if dim == 0 {
            return Err(Error::InvalidInput("feature dimension must be >= 1".into()));
        }
        for (i, e) in examples.iter().enumerate() {
            if e.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: e.x.len(),
                });
            }
            if e.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("example {i} has non-finite features")));
            }
            let norm = e.x.norm();
            if norm > radius * (1.0 + RADIUS_SLACK) {
                return Err(Error::InvalidInput(format!(
                    "example {i} has norm {norm} outside the radius-{radius} ball"
                )));
            }
            if labels.binary_search(&e.y).is_err() {
                return Err(Error::InvalidInput(format!(
                    "example {i} has undeclared label {:?}",
                    e.y
                )));
            }
        }
        Ok(Self {
            examples,
            dim,
            radius,
            labels,
        })
    }

    /// Uses the largest example norm as the declared radius.
    pub fn with_tight_radius(examples: Vec<LabeledExample>) -> Result<Self> {
        let radius = examples
            .iter()
            .map(|e| e.x.norm())
            .fold(0.0_f64, f64::max);
        Self::new(examples, if radius > 0.0 { radius } else { 1.0 })
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn n(&self) -> usize {
        self.examples.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Features stacked as an `n x d` matrix.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.dim, |i, j| self.examples[i].x[j])
    }

    /// SHA-256 over dimension, radius, feature bits and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        h.update(self.radius.to_bits().to_le_bytes());
        for e in &self.examples {
            for v in e.x.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
            h.update((e.y.len() as u64).to_le_bytes());
            h.update(e.y.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// All ordered pairs of a sample, self-pairs included (`n^2` entries).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Admissible triplets `(i, j, k)`: `y_i = y_j` and `y_i != y_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<(usize, usize, usize)>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Row-major `(i, j)` over `0..n`, `i` outer.
pub fn build_pairs(ds: &Dataset) -> PairSet {
    let n = ds.n();
    PairSet {
        pairs: (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect(),
    }
}

/// Lexicographic enumeration of the admissible triplets (`i = j` allowed).
pub fn build_triplets(ds: &Dataset) -> TripletSet {
    let ex = ds.examples();
    let n = ex.len();
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if ex[i].y != ex[j].y {
                continue;
            }
            for k in 0..n {
                if ex[i].y != ex[k].y {
                    triplets.push((i, j, k));
                }
            }
        }
    }
    TripletSet { triplets }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    Fro,
    L1,
    L21,
}

impl Regularizer {
    /// `fro = sqrt(sum m_ij^2)`, `l1 = sum |m_ij|`, `l21 = sum_j ||column j||_2`.
    pub fn norm(self, m: &DMatrix<f64>) -> f64 {
        match self {
            Regularizer::Fro => m.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Regularizer::L1 => m.iter().map(|v| v.abs()).sum(),
            Regularizer::L21 => m.column_iter().map(|c| c.norm()).sum(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regularizer::Fro => "fro",
            Regularizer::L1 => "l1",
            Regularizer::L21 => "l21",
        }
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fro" => Ok(Regularizer::Fro),
            "l1" => Ok(Regularizer::L1),
            "l21" => Ok(Regularizer::L21),
            other => Err(Error::InvalidInput(format!("unknown regularizer tag {other:?}"))),
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mahalanobis,
    Bilinear,
    Kernelized,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Mahalanobis => "mahalanobis",
            MetricKind::Bilinear => "bilinear",
            MetricKind::Kernelized => "kernelized",
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mahalanobis" => Ok(MetricKind::Mahalanobis),
            "bilinear" => Ok(MetricKind::Bilinear),
            "kernelized" => Ok(MetricKind::Kernelized),
            other => Err(Error::InvalidInput(format!("unknown metric kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

/// `linear: k(a, b) = aᵀb`, `rbf: k(a, b) = exp(-||a - b||^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

impl KernelSpec {
    pub fn linear() -> Self {
        Self {
            kind: KernelKind::Linear,
            sigma: None,
        }
    }

    pub fn rbf(sigma: f64) -> Result<Self> {
        let spec = Self {
            kind: KernelKind::Rbf,
            sigma: Some(sigma),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.sigma) {
            (KernelKind::Rbf, Some(s)) if s.is_finite() && s > 0.0 => Ok(()),
            (KernelKind::Rbf, s) => Err(Error::InvalidInput(format!(
                "rbf kernel needs a positive bandwidth, got {s:?}"
            ))),
            (KernelKind::Linear, _) => Ok(()),
        }
    }

    pub fn eval(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match self.kind {
            KernelKind::Linear => a.dot(b),
            KernelKind::Rbf => {
                let s = self.sigma.unwrap_or(1.0);
                (-linalg::squared_distance(a, b) / (2.0 * s * s)).exp()
            }
        }
    }

    /// Supremum of `||phi(a) - phi(b)||^2` over the radius-`R` ball.
    pub fn feature_diameter_sq(&self, radius: f64) -> f64 {
        match self.kind {
            KernelKind::Linear => 4.0 * radius * radius,
            KernelKind::Rbf => rbf_fh(2.0 * radius, self.sigma.unwrap_or(1.0)),
        }
    }

    pub fn gram(&self, points: &DMatrix<f64>) -> DMatrix<f64> {
        let rows: Vec<DVector<f64>> = points.row_iter().map(|r| r.transpose()).collect();
        let n = rows.len();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(&rows[i], &rows[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// A kernel-space metric `f(x, x') = ||E kappa(x) - E kappa(x')||^2`, where
/// `kappa(x)_i = k(anchor_i, x)` and `A = EᵀE` is the PSD coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMetric {
    pub kernel: KernelSpec,
    /// Anchor points as rows (`n x d`).
    pub anchors: DMatrix<f64>,
    /// Coefficient matrix `A` (`n x n`).
    pub coeffs: DMatrix<f64>,
    /// Factor `E` (`r x n`) with `EᵀE = A`.
    pub factor: DMatrix<f64>,
    anchor_rows: Vec<DVector<f64>>,
}

impl KernelMetric {
    pub fn from_factor(kernel: KernelSpec, anchors: DMatrix<f64>, factor: DMatrix<f64>) -> Result<Self> {
        kernel.validate()?;
        if factor.ncols() != anchors.nrows() {
            return Err(Error::DimensionMismatch {
                expected: anchors.nrows(),
                got: factor.ncols(),
            });
        }
        let coeffs = factor.transpose() * &factor;
        let anchor_rows = anchors.row_iter().map(|r| r.transpose()).collect();
        Ok(Self {
            kernel,
            anchors,
            coeffs,
            factor,
            anchor_rows,
        })
    }

    /// Factors a PSD coefficient matrix through its eigendecomposition.
    pub fn from_coeffs(kernel: KernelSpec, anchors: DMatrix<f64>, coeffs: DMatrix<f64>) -> Result<Self> {
        let n = anchors.nrows();
        if coeffs.nrows() != n || coeffs.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: coeffs.nrows(),
            });
        }
        let eig = linalg::sym_eigen(&coeffs)?;
        let scale = eig.eigenvalues.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        if eig.eigenvalues.min() < -PSD_TOL * scale {
            return Err(Error::InvalidInput(
                "kernel coefficient matrix is not PSD".into(),
            ));
        }
        let keep: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > 0.0).collect();
        let mut factor = DMatrix::zeros(keep.len(), n);
        for (r, &k) in keep.iter().enumerate() {
            let s = eig.eigenvalues[k].sqrt();
            for i in 0..n {
                factor[(r, i)] = s * eig.eigenvectors[(i, k)];
            }
        }
        let mut km = Self::from_factor(kernel, anchors, factor)?;
        km.coeffs = coeffs;
        Ok(km)
    }

    pub fn kernel_vector(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.anchor_rows.len(),
            self.anchor_rows.iter().map(|a| self.kernel.eval(a, x)),
        )
    }

    pub fn embed(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.factor * self.kernel_vector(x)
    }

    pub fn input_dim(&self) -> usize {
        self.anchors.ncols()
    }

    /// Feature-space Frobenius norm `||K^{1/2} A K^{1/2}||_F = ||E K Eᵀ||_F`.
    pub fn feature_norm(&self) -> f64 {
        let k = self.kernel.gram(&self.anchors);
        let inner = &self.factor * k * self.factor.transpose();
        inner.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Bilinear-form matrix `Xᵀ A X` induced by a linear kernel.
    pub fn induced_linear_matrix(&self) -> DMatrix<f64> {
        let ex = &self.factor * &self.anchors;
        ex.transpose() * ex
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricForm {
    Mahalanobis(DMatrix<f64>),
    Bilinear(DMatrix<f64>),
    Kernelized(KernelMetric),
}

/// A learned metric together with the regularizer and weight it was fit with.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub form: MetricForm,
    pub regularizer: Regularizer,
    pub c: f64,
}

impl MetricModel {
    /// Mahalanobis metric; `m` must be symmetric PSD.
    pub fn mahalanobis(m: DMatrix<f64>, regularizer: Regularizer, c: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput("metric matrix must be square".into()));
        }
        let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        if !linalg::is_symmetric(&m, 1e-12 * scale) {
            return Err(Error::InvalidInput("mahalanobis matrix must be symmetric".into()));
        }
        if linalg::min_eigenvalue(&m)? < -PSD_TOL {
            return Err(Error::InvalidInput("mahalanobis matrix must be PSD".into()));
        }
        Ok(Self {
            form: MetricForm::Mahalanobis(m),
            regularizer,
            c,
        })
    }

    pub fn bilinear(m: DMatrix<f64>, regularizer: Regularizer, c: f64) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput("metric matrix must be square".into()));
        }
        Ok(Self {
            form: MetricForm::Bilinear(m),
            regularizer,
            c,
        })
    }

    pub fn kernelized(km: KernelMetric, c: f64) -> Self {
        Self {
            form: MetricForm::Kernelized(km),
            regularizer: Regularizer::Fro,
            c,
        }
    }

    pub fn zero(kind: MetricKind, d: usize) -> Self {
        let z = DMatrix::zeros(d, d);
        let form = match kind {
            MetricKind::Bilinear => MetricForm::Bilinear(z),
            _ => MetricForm::Mahalanobis(z),
        };
        Self {
            form,
            regularizer: Regularizer::Fro,
            c: 1.0,
        }
    }

    pub fn kind(&self) -> MetricKind {
        match self.form {
            MetricForm::Mahalanobis(_) => MetricKind::Mahalanobis,
            MetricForm::Bilinear(_) => MetricKind::Bilinear,
            MetricForm::Kernelized(_) => MetricKind::Kernelized,
        }
    }

    /// `M` for linear models, the coefficient matrix `A` for kernelized ones.
    pub fn matrix(&self) -> &DMatrix<f64> {
        match &self.form {
            MetricForm::Mahalanobis(m) | MetricForm::Bilinear(m) => m,
            MetricForm::Kernelized(k) => &k.coeffs,
        }
    }

    pub fn kernel_metric(&self) -> Option<&KernelMetric> {
        match &self.form {
            MetricForm::Kernelized(k) => Some(k),
            _ => None,
        }
    }

    /// Input feature dimension.
    pub fn dim(&self) -> usize {
        match &self.form {
            MetricForm::Mahalanobis(m) | MetricForm::Bilinear(m) => m.nrows(),
            MetricForm::Kernelized(k) => k.input_dim(),
        }
    }

    /// The norm the regularizer penalizes (feature-space Frobenius norm for
    /// kernelized models).
    pub fn reg_norm(&self) -> f64 {
        match &self.form {
            MetricForm::Mahalanobis(m) | MetricForm::Bilinear(m) => self.regularizer.norm(m),
            MetricForm::Kernelized(k) => k.feature_norm(),
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Representation of `x` that [`MetricModel::eval_embedded`] consumes.
    pub fn embed(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(match &self.form {
            MetricForm::Kernelized(k) => k.embed(x),
            _ => x.clone(),
        })
    }

    pub fn eval_embedded(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        match &self.form {
            MetricForm::Mahalanobis(m) => linalg::quad_form_diff(m, a, b),
            MetricForm::Bilinear(m) => linalg::bilinear_form(m, a, b),
            MetricForm::Kernelized(_) => linalg::squared_distance(a, b),
        }
    }

    pub fn embed_all(&self, examples: &[LabeledExample]) -> Result<Vec<DVector<f64>>> {
        examples.iter().map(|e| self.embed(&e.x)).collect()
    }
}

/// `f(M, x1, x2)`: Mahalanobis `(x1-x2)ᵀM(x1-x2)`, bilinear `x1ᵀMx2`, or the
/// kernel-space Mahalanobis distance.
pub fn metric_eval(m: &MetricModel, x1: &DVector<f64>, x2: &DVector<f64>) -> Result<f64> {
    Ok(m.eval_embedded(&m.embed(x1)?, &m.embed(x2)?))
}

/// Hinge margin loss configuration. `U = 1`, `g0 = 1 + margin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub margin: f64,
    pub lipschitz: f64,
    pub g0: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::hinge()
    }
}

impl LossSpec {
    pub fn hinge() -> Self {
        Self {
            margin: 1.0,
            lipschitz: 1.0,
            g0: 2.0,
        }
    }

    pub fn g(&self, t: f64) -> f64 {
        (1.0 - t).max(0.0)
    }

    /// Hinge argument `y12 * (margin - f)`.
    pub fn argument(&self, same_label: bool, f: f64) -> f64 {
        let y = if same_label { 1.0 } else { -1.0 };
        y * (self.margin - f)
    }

    pub fn pair_value(&self, same_label: bool, f: f64) -> f64 {
        self.g(self.argument(same_label, f))
    }
}

/// Zero-matrix value of the triplet loss.
pub const TRIPLET_G0: f64 = 1.0;

pub fn pair_loss(
    m: &MetricModel,
    ls: &LossSpec,
    z1: &LabeledExample,
    z2: &LabeledExample,
) -> Result<f64> {
    let f = metric_eval(m, &z1.x, &z2.x)?;
    Ok(ls.pair_value(z1.y == z2.y, f))
}

pub fn is_admissible(z1: &LabeledExample, z2: &LabeledExample, z3: &LabeledExample) -> bool {
    z1.y == z2.y && z1.y != z3.y
}

pub fn triplet_value(f13: f64, f12: f64) -> f64 {
    (1.0 - f13 + f12).max(0.0)
}

/// `[1 - f(x1, x3) + f(x1, x2)]_+`, zero for non-admissible triples.
pub fn triplet_loss(
    m: &MetricModel,
    z1: &LabeledExample,
    z2: &LabeledExample,
    z3: &LabeledExample,
) -> Result<f64> {
    if !is_admissible(z1, z2, z3) {
        return Ok(0.0);
    }
    let e1 = m.embed(&z1.x)?;
    let f13 = m.eval_embedded(&e1, &m.embed(&z3.x)?);
    let f12 = m.eval_embedded(&e1, &m.embed(&z2.x)?);
    Ok(triplet_value(f13, f12))
}

/// Per-pair losses over `ps`, in pair order.
pub fn pair_losses(m: &MetricModel, ds: &Dataset, ps: &PairSet, ls: &LossSpec) -> Result<Vec<f64>> {
    let ex = ds.examples();
    let emb = m.embed_all(ex)?;
    ps.pairs
        .iter()
        .map(|&(i, j)| {
            if i >= ex.len() || j >= ex.len() {
                return Err(Error::InvalidInput(format!("pair ({i}, {j}) out of range")));
            }
            let f = m.eval_embedded(&emb[i], &emb[j]);
            Ok(ls.pair_value(ex[i].y == ex[j].y, f))
        })
        .collect()
}

/// Mean pair loss over `ps`.
pub fn empirical_loss(m: &MetricModel, ds: &Dataset, ps: &PairSet, ls: &LossSpec) -> Result<f64> {
    if ps.is_empty() {
        return Err(Error::Degenerate("empty pair set".into()));
    }
    let losses = pair_losses(m, ds, ps, ls)?;
    Ok(losses.iter().sum::<f64>() / ps.len() as f64)
}

pub fn triplet_losses(m: &MetricModel, ds: &Dataset, ts: &TripletSet) -> Result<Vec<f64>> {
    let ex = ds.examples();
    let emb = m.embed_all(ex)?;
    ts.triplets
        .iter()
        .map(|&(i, j, k)| {
            if i >= ex.len() || j >= ex.len() || k >= ex.len() {
                return Err(Error::InvalidInput(format!("triplet ({i}, {j}, {k}) out of range")));
            }
            if !is_admissible(&ex[i], &ex[j], &ex[k]) {
                return Ok(0.0);
            }
            let f13 = m.eval_embedded(&emb[i], &emb[k]);
            let f12 = m.eval_embedded(&emb[i], &emb[j]);
            Ok(triplet_value(f13, f12))
        })
        .collect()
}

/// Mean triplet loss over `ts`.
pub fn empirical_triplet_loss(m: &MetricModel, ds: &Dataset, ts: &TripletSet) -> Result<f64> {
    if ts.is_empty() {
        return Err(Error::Degenerate("empty triplet set".into()));
    }
    let losses = triplet_losses(m, ds, ts)?;
    Ok(losses.iter().sum::<f64>() / ts.len() as f64)
}

/// Uniform loss bound `B = g(-(margin + F_max))` from the capacity bound
/// `||M|| <= g0 / c`: `F_max = 4 R^2 g0 / c` (Mahalanobis) or `R^2 g0 / c`
/// (bilinear). Kernelized models go through [`loss_bound_b_kernel`].
pub fn loss_bound_b(ls: &LossSpec, radius: f64, c: f64, kind: MetricKind) -> Result<f64> {
    check_capacity_args(radius, c)?;
    let reach = match kind {
        MetricKind::Mahalanobis => 4.0 * radius * radius,
        MetricKind::Bilinear => radius * radius,
        MetricKind::Kernelized => {
            return Err(Error::InvalidInput(
                "kernelized loss bound needs the kernel; use loss_bound_b_kernel".into(),
            ))
        }
    };
    Ok(ls.g(-(ls.margin + reach * ls.g0 / c)))
}

/// Kernel analogue of [`loss_bound_b`] with `F_max = sup ||phi(a)-phi(b)||^2 g0 / c`.
pub fn loss_bound_b_kernel(ls: &LossSpec, radius: f64, c: f64, kernel: &KernelSpec) -> Result<f64> {
    check_capacity_args(radius, c)?;
    kernel.validate()?;
    let reach = kernel.feature_diameter_sq(radius);
    Ok(ls.g(-(ls.margin + reach * ls.g0 / c)))
}

/// Bound on the triplet loss: `1 + 4 R^2 g0_triplet / c`.
pub fn loss_bound_b_triplet(radius: f64, c: f64) -> Result<f64> {
    check_capacity_args(radius, c)?;
    Ok(1.0 + 4.0 * radius * radius * TRIPLET_G0 / c)
}

fn check_capacity_args(radius: f64, c: f64) -> Result<()> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidInput(format!("c must be positive, got {c}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidInput(format!("R must be positive, got {radius}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(x: &[f64], y: &str) -> LabeledExample {
        LabeledExample::new(x.to_vec(), y)
    }

    fn ds(points: &[(&[f64], &str)]) -> Dataset {
        Dataset::with_tight_radius(points.iter().map(|(x, y)| ex(x, y)).collect()).unwrap()
    }

    fn mahal(m: &[f64], d: usize) -> MetricModel {
        MetricModel::mahalanobis(DMatrix::from_row_slice(d, d, m), Regularizer::Fro, 1.0).unwrap()
    }

    /// Enumeration oracle for admissible triplets.
    fn triplets_oracle(labels: &[&str]) -> Vec<(usize, usize, usize)> {
        let n = labels.len();
        let mut out = vec![];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if labels[i] == labels[j] && labels[i] != labels[k] {
                        out.push((i, j, k));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn pairs_include_self_pairs_in_row_major_order() {
        let one = ds(&[(&[0.0], "a")]);
        assert_eq!(build_pairs(&one).pairs, vec![(0, 0)]);
        let two = ds(&[(&[0.0], "a"), (&[1.0], "b")]);
        assert_eq!(build_pairs(&two).pairs, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        let three = ds(&[(&[0.0], "a"), (&[1.0], "b"), (&[0.5], "a")]);
        let p = build_pairs(&three);
        assert_eq!(p.len(), 9);
        assert_eq!(&p.pairs[..3], &[(0, 0), (0, 1), (0, 2)]);
    }

    #[test]
    fn triplets_match_enumeration() {
        let aab = ds(&[(&[0.0], "A"), (&[0.5], "A"), (&[1.0], "B")]);
        let t = build_triplets(&aab);
        assert_eq!(t.len(), 6);
        assert_eq!(t.triplets, triplets_oracle(&["A", "A", "B"]));
        assert!(t.triplets.contains(&(2, 2, 0)) && t.triplets.contains(&(2, 2, 1)));

        let ab = ds(&[(&[0.0], "A"), (&[1.0], "B")]);
        assert_eq!(build_triplets(&ab).triplets, vec![(0, 0, 1), (1, 1, 0)]);

        let single = ds(&[(&[0.0], "A"), (&[1.0], "A")]);
        assert!(build_triplets(&single).is_empty());
    }

    #[test]
    fn metric_eval_examples() {
        let id = mahal(&[1.0, 0.0, 0.0, 1.0], 2);
        let a = DVector::from_vec(vec![0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(metric_eval(&id, &a, &b).unwrap(), 1.0);

        let zero = MetricModel::zero(MetricKind::Mahalanobis, 2);
        assert_eq!(metric_eval(&zero, &a, &b).unwrap(), 0.0);

        let bil = MetricModel::bilinear(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]),
            Regularizer::Fro,
            1.0,
        )
        .unwrap();
        let x1 = DVector::from_vec(vec![1.0, 1.0]);
        let x2 = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(metric_eval(&bil, &x1, &x2).unwrap(), 4.0);

        let bad = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            metric_eval(&id, &a, &bad),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pair_loss_examples() {
        let ls = LossSpec::hinge();
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 2);
        let a = ex(&[0.0, 0.0], "A");
        let b = ex(&[1.0, 0.0], "A");
        let c = ex(&[1.0, 0.0], "B");
        assert_eq!(pair_loss(&zero, &ls, &a, &b).unwrap(), 0.0);
        assert_eq!(pair_loss(&zero, &ls, &a, &c).unwrap(), 2.0);
        assert_eq!(pair_loss(&zero, &ls, &a, &c).unwrap(), ls.g0);
        let id = mahal(&[1.0, 0.0, 0.0, 1.0], 2);
        assert_eq!(pair_loss(&id, &ls, &a, &b).unwrap(), 1.0);
    }

    #[test]
    fn triplet_loss_examples() {
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 1);
        let a = ex(&[0.0], "A");
        let b = ex(&[1.0], "A");
        let c = ex(&[0.5], "B");
        assert_eq!(triplet_loss(&zero, &a, &b, &c).unwrap(), 1.0);
        assert_eq!(triplet_value(3.0, 1.0), 0.0);
        // f(x1,x3) = 3, f(x1,x2) = 1 realized with M = [[1]] and offsets.
        let id = mahal(&[1.0], 1);
        let z2 = ex(&[1.0], "A");
        let z3 = ex(&[3.0_f64.sqrt()], "B");
        assert!(triplet_loss(&id, &a, &z2, &z3).unwrap().abs() < 1e-12);
        // non-admissible
        assert_eq!(triplet_loss(&id, &a, &c, &b).unwrap(), 0.0);
        assert_eq!(triplet_loss(&zero, &a, &b, &b).unwrap(), 0.0);
    }

    #[test]
    fn empirical_loss_examples() {
        let ls = LossSpec::hinge();
        let zero = MetricModel::zero(MetricKind::Mahalanobis, 1);
        let same = ds(&[(&[0.0], "A"), (&[1.0], "A"), (&[0.5], "A")]);
        assert_eq!(empirical_loss(&zero, &same, &build_pairs(&same), &ls).unwrap(), 0.0);
        let ab = ds(&[(&[0.0], "A"), (&[1.0], "B")]);
        assert_eq!(empirical_loss(&zero, &ab, &build_pairs(&ab), &ls).unwrap(), 1.0);
        let one = ds(&[(&[0.3], "A")]);
        let id = mahal(&[2.0], 1);
        let self_loss = pair_loss(&id, &ls, &one.examples()[0], &one.examples()[0]).unwrap();
        assert_eq!(empirical_loss(&id, &one, &build_pairs(&one), &ls).unwrap(), self_loss);
        let empty = PairSet { pairs: vec![] };
        assert!(empirical_loss(&id, &one, &empty, &ls).is_err());
    }

    #[test]
    fn loss_bound_examples() {
        let ls = LossSpec::hinge();
        assert_eq!(loss_bound_b(&ls, 1.0, 2.0, MetricKind::Mahalanobis).unwrap(), 6.0);
        assert_eq!(loss_bound_b(&ls, 1.0, 2.0, MetricKind::Bilinear).unwrap(), 3.0);
        let tiny = loss_bound_b(&ls, 1.0, 1e12, MetricKind::Mahalanobis).unwrap();
        assert!((tiny - 2.0).abs() < 1e-10);
        assert!(loss_bound_b(&ls, 1.0, 0.0, MetricKind::Mahalanobis).is_err());
        assert!(loss_bound_b(&ls, 1.0, -1.0, MetricKind::Bilinear).is_err());
        let rbf = KernelSpec::rbf(1.0).unwrap();
        let b = loss_bound_b_kernel(&ls, 1.0, 2.0, &rbf).unwrap();
        assert!(b > 2.0 && b <= 4.0);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![], 1.0).is_err());
        assert!(Dataset::new(vec![ex(&[2.0], "a")], 1.0).is_err());
        assert!(Dataset::new(vec![ex(&[0.5], "a"), ex(&[0.1, 0.1], "a")], 1.0).is_err());
        assert!(
            Dataset::with_labels(vec![ex(&[0.5], "z")], 1.0, vec!["a".into()]).is_err()
        );
        let d = Dataset::new(vec![ex(&[0.5], "b"), ex(&[0.1], "a")], 1.0).unwrap();
        assert_eq!(d.labels(), &["a".to_string(), "b".to_string()]);
        assert_eq!(d.label_index("b"), Some(1));
    }

    #[test]
    fn mahalanobis_constructor_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(MetricModel::mahalanobis(m, Regularizer::Fro, 1.0).is_err());
        let ns = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 1.0]);
        assert!(MetricModel::mahalanobis(ns, Regularizer::Fro, 1.0).is_err());
    }

    #[test]
    fn unknown_regularizer_tag() {
        assert!("l3".parse::<Regularizer>().is_err());
        assert_eq!("l21".parse::<Regularizer>().unwrap(), Regularizer::L21);
    }
}
