//! Statistical model of the data matrix and reproducible sampling.
//!
//! Columns are independent with arbitrary means and covariances. Laws are
//! stored as contiguous groups of identically distributed columns, so the
//! isotropic and few-group models never materialize n copies of a p×p matrix.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::stream_rng;

/// Below this, `(1/n)·tr Σ_i` is treated as a vanishing column.
pub const TRACE_FLOOR: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-12;

/// Distribution of one column: mean `μ`, centered covariance `C`, and the
/// cached second moment `Σ = C + μμᵀ`.
#[derive(Debug, Clone)]
pub struct ColumnLaw {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    second_moment: DMatrix<f64>,
    root: DMatrix<f64>,
    cov_diagonal: bool,
    second_moment_diagonal: bool,
    trace_second_moment: f64,
}

impl ColumnLaw {
    /// Validates symmetry and positive semi-definiteness of `cov`.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::build(mean, cov, 0)
    }

    /// Isotropic law `N(0, σ²I)` in dimension `p`.
    pub fn isotropic(p: usize, sigma2: f64) -> Result<Self> {
        Self::new(DVector::zeros(p), DMatrix::identity(p, p) * sigma2)
    }

    pub(crate) fn build(mean: DVector<f64>, cov: DMatrix<f64>, column: usize) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::Covariance {
                column,
                reason: format!("shape {}x{} does not match mean length {p}", cov.nrows(), cov.ncols()),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Covariance {
                column,
                reason: "non-finite entry".into(),
            });
        }
        let asym = linalg::max_asymmetry(&cov);
        if asym > SYMMETRY_TOL {
            return Err(Error::Covariance {
                column,
                reason: format!("not symmetric (max |C_ij - C_ji| = {asym:e})"),
            });
        }
        let cov_diagonal = linalg::is_diagonal(&cov);
        let root = if cov_diagonal {
            let mut r = DMatrix::zeros(p, p);
            let floor = -1e-10 * cov.trace().abs().max(f64::MIN_POSITIVE) / p.max(1) as f64;
            for k in 0..p {
                let v = cov[(k, k)];
                if v < floor {
                    return Err(Error::Covariance {
                        column,
                        reason: format!("indefinite: eigenvalue {v:e} below floor {floor:e}"),
                    });
                }
                r[(k, k)] = v.max(0.0).sqrt();
            }
            r
        } else {
            linalg::psd_sqrt(&cov)
                .map_err(|reason| Error::Covariance { column, reason })?
                .0
        };
        let mut second_moment = &cov + &mean * mean.transpose();
        linalg::symmetrize(&mut second_moment);
        let second_moment_diagonal = linalg::is_diagonal(&second_moment);
        let trace_second_moment = second_moment.trace();
        Ok(Self {
            mean,
            cov,
            second_moment,
            root,
            cov_diagonal,
            second_moment_diagonal,
            trace_second_moment,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.second_moment
    }

    /// Symmetric square root of the covariance.
    pub fn cov_root(&self) -> &DMatrix<f64> {
        &self.root
    }

    pub fn trace_second_moment(&self) -> f64 {
        self.trace_second_moment
    }

    pub fn second_moment_is_diagonal(&self) -> bool {
        self.second_moment_diagonal
    }

    /// `root · g`, skipping the dense product for diagonal covariances.
    fn apply_root(&self, g: &mut DVector<f64>) {
        if self.cov_diagonal {
            for k in 0..g.len() {
                g[k] *= self.root[(k, k)];
            }
        } else {
            *g = &self.root * &*g;
        }
    }
}

/// How a column is generated from its law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// `x = μ + C^{1/2} g`, `g` standard normal.
    #[default]
    Gaussian,
    /// `x = μ + φ(C^{1/2} g)` with a 1-Lipschitz entrywise map `φ` (tanh by default).
    LipschitzOfGaussian,
    /// `x = μ + C^{1/2} u`, `u` with i.i.d. uniform entries on `[−√3, √3]`.
    BoundedIndependent,
}

pub type EntryMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Model of a p×n data matrix with independent columns.
#[derive(Clone)]
pub struct DataModel {
    p: usize,
    n: usize,
    groups: Vec<(Arc<ColumnLaw>, usize)>,
    offsets: Vec<usize>,
    generator: Generator,
    epsilon: f64,
    lipschitz_map: EntryMap,
    report: ValidationReport,
    id: u64,
}

impl fmt::Debug for DataModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DataModel")
            .field("p", &self.p)
            .field("n", &self.n)
            .field("groups", &self.groups.iter().map(|g| g.1).collect::<Vec<_>>())
            .field("generator", &self.generator)
            .field("epsilon", &self.epsilon)
            .field("report", &self.report)
            .finish()
    }
}

/// Result of checking a model against its spectral-margin and trace-floor invariants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Largest eigenvalue of `(1/n) Σ_i Σ_i`.
    pub top_eigenvalue: f64,
    /// `1 − 2ε`.
    pub margin_limit: f64,
    /// `min_i (1/n) tr Σ_i`.
    pub min_trace: f64,
    pub margin_ok: bool,
    pub trace_ok: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.margin_ok && self.trace_ok
    }
}

impl DataModel {
    /// Builds a model from contiguous groups `(law, count)` and rejects it
    /// unless both invariants pass.
    pub fn new(groups: Vec<(ColumnLaw, usize)>, generator: Generator, epsilon: f64) -> Result<Self> {
        let model = Self::unchecked(groups, generator, epsilon)?;
        let r = model.report;
        if !r.margin_ok {
            return Err(Error::invalid(
                "epsilon",
                format!(
                    "top eigenvalue {:.6} of the mean second moment exceeds 1 - 2*epsilon = {:.6}",
                    r.top_eigenvalue, r.margin_limit
                ),
            ));
        }
        if !r.trace_ok {
            return Err(Error::invalid(
                "laws",
                format!("min (1/n) tr(Sigma_i) = {:e} below floor {TRACE_FLOOR:e}", r.min_trace),
            ));
        }
        Ok(model)
    }

    /// Like [`DataModel::new`] but skips the spectral-margin check. Covariances
    /// and the trace floor are still enforced.
    pub fn new_relaxed(groups: Vec<(ColumnLaw, usize)>, generator: Generator, epsilon: f64) -> Result<Self> {
        let model = Self::unchecked(groups, generator, epsilon)?;
        if !model.report.trace_ok {
            return Err(Error::invalid(
                "laws",
                format!(
                    "min (1/n) tr(Sigma_i) = {:e} below floor {TRACE_FLOOR:e}",
                    model.report.min_trace
                ),
            ));
        }
        Ok(model)
    }

    /// Builds without enforcing the model invariants; see [`validate_model`].
    pub fn unchecked(groups: Vec<(ColumnLaw, usize)>, generator: Generator, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 0.5) {
            return Err(Error::invalid("epsilon", format!("{epsilon} is not in (0, 1/2]")));
        }
        let groups: Vec<(Arc<ColumnLaw>, usize)> = groups
            .into_iter()
            .filter(|g| g.1 > 0)
            .map(|(l, c)| (Arc::new(l), c))
            .collect();
        if groups.is_empty() {
            return Err(Error::invalid("n", "model has no columns"));
        }
        let p = groups[0].0.dim();
        if p == 0 {
            return Err(Error::invalid("p", "dimension must be positive"));
        }
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut n = 0;
        for (law, count) in &groups {
            if law.dim() != p {
                return Err(Error::invalid(
                    "laws",
                    format!("column {n} has dimension {} but p = {p}", law.dim()),
                ));
            }
            offsets.push(n);
            n += count;
        }
        offsets.push(n);

        let mut mean_second = DMatrix::zeros(p, p);
        let mut min_trace = f64::INFINITY;
        for (law, count) in &groups {
            mean_second += law.second_moment() * (*count as f64 / n as f64);
            min_trace = min_trace.min(law.trace_second_moment() / n as f64);
        }
        linalg::symmetrize(&mut mean_second);
        let top = linalg::top_eigenvalue(&mean_second);
        let margin_limit = 1.0 - 2.0 * epsilon;
        let report = ValidationReport {
            top_eigenvalue: top,
            margin_limit,
            min_trace,
            margin_ok: top <= margin_limit + 1e-12,
            trace_ok: min_trace >= TRACE_FLOOR,
        };
        let id = fingerprint(p, n, epsilon, generator, &groups);
        Ok(Self {
            p,
            n,
            groups,
            offsets,
            generator,
            epsilon,
            lipschitz_map: Arc::new(f64::tanh),
            report,
            id,
        })
    }

    /// One law shared by all `n` columns.
    pub fn shared(law: ColumnLaw, n: usize, generator: Generator, epsilon: f64) -> Result<Self> {
        Self::new(vec![(law, n)], generator, epsilon)
    }

    /// `N(0, σ²I)` columns.
    pub fn isotropic(p: usize, n: usize, sigma2: f64, epsilon: f64) -> Result<Self> {
        Self::shared(ColumnLaw::isotropic(p, sigma2)?, n, Generator::Gaussian, epsilon)
    }

    /// One law per column.
    pub fn per_column(laws: Vec<ColumnLaw>, generator: Generator, epsilon: f64) -> Result<Self> {
        Self::new(laws.into_iter().map(|l| (l, 1)).collect(), generator, epsilon)
    }

    /// Replaces the entrywise map used by [`Generator::LipschitzOfGaussian`].
    /// The caller vouches that it is 1-Lipschitz.
    pub fn with_lipschitz_map(mut self, map: EntryMap) -> Self {
        self.lipschitz_map = map;
        self
    }

    pub fn with_generator(mut self, generator: Generator) -> Self {
        self.generator = generator;
        self.id = fingerprint(self.p, self.n, self.epsilon, generator, &self.groups);
        self
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn generator(&self) -> Generator {
        self.generator
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn report(&self) -> ValidationReport {
        self.report
    }

    /// Contiguous `(law, count)` groups in column order.
    pub fn groups(&self) -> &[(Arc<ColumnLaw>, usize)] {
        &self.groups
    }

    /// Column range `[start, end)` of group `g`.
    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }

    pub fn group_of(&self, column: usize) -> usize {
        assert!(column < self.n, "column {column} out of range (n = {})", self.n);
        self.offsets.partition_point(|&o| o <= column) - 1
    }

    pub fn law(&self, column: usize) -> &ColumnLaw {
        &self.groups[self.group_of(column)].0
    }

    /// Per-column `tr(Σ_i)`.
    pub fn traces(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n);
        for (law, count) in &self.groups {
            out.extend(std::iter::repeat_n(law.trace_second_moment(), *count));
        }
        out
    }

    /// `(1/n) Σ_i Σ_i`.
    pub fn mean_second_moment(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.p, self.p);
        for (law, count) in &self.groups {
            m += law.second_moment() * (*count as f64 / self.n as f64);
        }
        linalg::symmetrize(&mut m);
        m
    }

    /// Draws one column with its own RNG stream.
    fn draw_column(&self, law: &ColumnLaw, seed: u64, column: usize) -> DVector<f64> {
        let mut rng = stream_rng(seed, column as u64);
        let p = self.p;
        let mut g: DVector<f64> = match self.generator {
            Generator::Gaussian | Generator::LipschitzOfGaussian => {
                DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)))
            }
            Generator::BoundedIndependent => {
                let s = 3f64.sqrt();
                let u = Uniform::new_inclusive(-s, s).expect("valid range");
                DVector::from_iterator(p, (0..p).map(|_| rng.sample(u)))
            }
        };
        law.apply_root(&mut g);
        if self.generator == Generator::LipschitzOfGaussian {
            g.apply(|v| *v = (self.lipschitz_map)(*v));
        }
        g += law.mean();
        g
    }

    /// Serializes to the model-file dialect (groups form).
    pub fn to_json(&self) -> serde_json::Value {
        let groups: Vec<serde_json::Value> = self
            .groups
            .iter()
            .map(|(law, count)| {
                serde_json::json!({
                    "count": count,
                    "law": law_to_json(law),
                })
            })
            .collect();
        serde_json::json!({
            "p": self.p,
            "n": self.n,
            "epsilon": self.epsilon,
            "generator": self.generator,
            "groups": groups,
        })
    }
}

fn law_to_json(law: &ColumnLaw) -> serde_json::Value {
    let p = law.dim();
    let cov: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| law.cov()[(i, j)]).collect()).collect();
    serde_json::json!({
        "mean": law.mean().iter().cloned().collect::<Vec<f64>>(),
        "cov": cov,
    })
}

fn fingerprint(p: usize, n: usize, epsilon: f64, generator: Generator, groups: &[(Arc<ColumnLaw>, usize)]) -> u64 {
    let mut h = Sha256::new();
    h.update((p as u64).to_le_bytes());
    h.update((n as u64).to_le_bytes());
    h.update(epsilon.to_bits().to_le_bytes());
    h.update([generator as u8]);
    for (law, count) in groups {
        h.update((*count as u64).to_le_bytes());
        for v in law.mean().iter().chain(law.cov().iter()) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Checks the spectral margin and trace floor of a model.
pub fn validate_model(model: &DataModel) -> ValidationReport {
    model.report
}

/// A drawn p×n matrix tagged with the seed and model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    pub data: DMatrix<f64>,
    pub seed: u64,
    pub model_id: u64,
}

impl SampleMatrix {
    /// Wraps an arbitrary matrix (model id 0).
    pub fn from_data(data: DMatrix<f64>) -> Self {
        Self { data, seed: 0, model_id: 0 }
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }
}

/// Draws X column by column; column `i` uses RNG stream `i` under `seed`.
pub fn sample(model: &DataModel, seed: u64) -> SampleMatrix {
    let mut data = DMatrix::zeros(model.p, model.n);
    for (g, (law, _)) in model.groups.iter().enumerate() {
        for i in model.group_range(g) {
            let col = model.draw_column(law, seed, i);
            data.set_column(i, &col);
        }
    }
    SampleMatrix {
        data,
        seed,
        model_id: model.id,
    }
}

/// I.i.d. entries uniform on `[−√3, √3]` (mean 0, variance 1).
pub fn sample_bounded(p: usize, n: usize, seed: u64) -> SampleMatrix {
    let s = 3f64.sqrt();
    let u = Uniform::new_inclusive(-s, s).expect("valid range");
    let mut data = DMatrix::zeros(p, n);
    for i in 0..n {
        let mut rng = stream_rng(seed, i as u64);
        for k in 0..p {
            data[(k, i)] = rng.sample(u);
        }
    }
    SampleMatrix {
        data,
        seed,
        model_id: 0,
    }
}

/// Scalable model families used by the size-sweep experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFamily {
    /// `N(0, σ²I)` columns.
    Isotropic { sigma2: f64, epsilon: f64 },
    /// First `⌊n/2⌋` columns `N(0, a·I)`, the rest `N(0, b·I)`.
    TwoGroup { a: f64, b: f64, epsilon: f64 },
}

impl ModelFamily {
    pub fn instantiate(&self, p: usize, n: usize) -> Result<DataModel> {
        match *self {
            ModelFamily::Isotropic { sigma2, epsilon } => DataModel::isotropic(p, n, sigma2, epsilon),
            ModelFamily::TwoGroup { a, b, epsilon } => DataModel::new(
                vec![
                    (ColumnLaw::isotropic(p, a)?, n / 2),
                    (ColumnLaw::isotropic(p, b)?, n - n / 2),
                ],
                Generator::Gaussian,
                epsilon,
            ),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LawFile {
    #[serde(default)]
    mean: Option<Vec<f64>>,
    #[serde(default)]
    cov: Option<Vec<Vec<f64>>>,
    /// Shorthand for `cov = variance · I`.
    #[serde(default)]
    variance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupFile {
    count: usize,
    law: LawFile,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    p: usize,
    n: usize,
    epsilon: f64,
    #[serde(default)]
    generator: Generator,
    #[serde(default)]
    relaxed: bool,
    laws: Option<Vec<LawFile>>,
    shared_law: Option<LawFile>,
    groups: Option<Vec<GroupFile>>,
}

fn law_from_file(l: LawFile, p: usize, column: usize, field: &str) -> Result<ColumnLaw> {
    let mean = match l.mean {
        Some(m) => {
            if m.len() != p {
                return Err(Error::invalid(
                    &format!("{field}.mean"),
                    format!("length {} but p = {p}", m.len()),
                ));
            }
            DVector::from_vec(m)
        }
        None => DVector::zeros(p),
    };
    let cov = match (l.cov, l.variance) {
        (Some(rows), None) => {
            if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                return Err(Error::Covariance {
                    column,
                    reason: format!("{field}.cov must be {p}x{p}"),
                });
            }
            DMatrix::from_fn(p, p, |i, j| rows[i][j])
        }
        (None, Some(v)) => DMatrix::from_diagonal_element(p, p, v),
        _ => {
            return Err(Error::invalid(field, "exactly one of `cov`, `variance` is required"));
        }
    };
    ColumnLaw::build(mean, cov, column)
}

/// Parses a model document (see the crate README for the schema).
pub fn model_from_json(text: &str) -> Result<DataModel> {
    let f: ModelFile = serde_json::from_str(text).map_err(|e| {
        Error::invalid(
            "model",
            format!("line {} column {}: {e}", e.line(), e.column()),
        )
    })?;
    if f.p == 0 {
        return Err(Error::invalid("p", "must be positive"));
    }
    if f.n == 0 {
        return Err(Error::invalid("n", "must be positive"));
    }
    if !(f.epsilon > 0.0 && f.epsilon <= 0.5) {
        return Err(Error::invalid("epsilon", format!("{} is not in (0, 1/2]", f.epsilon)));
    }
    let given = [f.laws.is_some(), f.shared_law.is_some(), f.groups.is_some()]
        .iter()
        .filter(|b| **b)
        .count();
    if given != 1 {
        return Err(Error::invalid(
            "laws",
            "exactly one of `laws`, `shared_law`, `groups` is required",
        ));
    }
    let p = f.p;
    let groups = if let Some(laws) = f.laws {
        if laws.len() != f.n {
            return Err(Error::invalid("laws", format!("{} laws but n = {}", laws.len(), f.n)));
        }
        laws.into_iter()
            .enumerate()
            .map(|(i, l)| law_from_file(l, p, i, &format!("laws[{i}]")).map(|l| (l, 1)))
            .collect::<Result<Vec<_>>>()?
    } else if let Some(l) = f.shared_law {
        vec![(law_from_file(l, p, 0, "shared_law")?, f.n)]
    } else {
        let gs = f.groups.unwrap_or_default();
        let total: usize = gs.iter().map(|g| g.count).sum();
        if total != f.n {
            return Err(Error::invalid("groups", format!("counts sum to {total} but n = {}", f.n)));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(gs.len());
        for (k, g) in gs.into_iter().enumerate() {
            out.push((law_from_file(g.law, p, start, &format!("groups[{k}].law"))?, g.count));
            start += g.count;
        }
        out
    };
    if f.relaxed {
        DataModel::new_relaxed(groups, f.generator, f.epsilon)
    } else {
        DataModel::new(groups, f.generator, f.epsilon)
    }
}

pub fn load_model(path: &Path) -> Result<DataModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    model_from_json(&text)
}
