//! Sketch distributions: discrete families with probability rules,
//! Gaussian sketches and the adaptive sketches drawn through a factor.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, ResolvedWeight};
use crate::rates;

/// Redraws allowed for a rank-deficient sample before giving up.
pub const REDRAW_LIMIT: usize = 100;

/// Which inverse equation the sketch acts on: `AX = I` (rows of the
/// system) or `XA = I` (columns).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Row,
    Col,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SketchKind {
    /// q = 1, S = e_i.
    Coordinate,
    /// S = I_{:C_i} for a partition C_1..C_r of the indices.
    CoordinateBlock { blocks: Vec<Vec<usize>> },
    /// Dense n×q with i.i.d. standard normal entries.
    Gaussian { q: usize },
    /// An explicit list of sketch matrices.
    FixedFamily { members: Vec<Matrix> },
    /// S = L·I_{:C_i} through the current factor L.
    AdaptiveFactorCols { blocks: Vec<Vec<usize>> },
    /// S = L·G with G Gaussian n×q.
    AdaptiveFactorGauss { q: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProbabilityRule {
    Uniform,
    Convenient,
    OptimizedExact,
    /// Recomputed every iteration with the iterate standing in for A⁻¹.
    /// Not covered by the convergence theory.
    OptimizedHeuristic,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchRule {
    pub kind: SketchKind,
    pub probabilities: ProbabilityRule,
    /// Members are used as `A·V_i` instead of `V_i`.
    pub premultiply_by_a: bool,
}

impl SketchRule {
    pub fn new(kind: SketchKind, probabilities: ProbabilityRule) -> Self {
        Self {
            kind,
            probabilities,
            premultiply_by_a: false,
        }
    }

    pub fn coordinate(probabilities: ProbabilityRule) -> Self {
        Self::new(SketchKind::Coordinate, probabilities)
    }

    /// Contiguous blocks of width `q`.
    pub fn blocks(n: usize, q: usize, probabilities: ProbabilityRule) -> Self {
        Self::new(
            SketchKind::CoordinateBlock {
                blocks: contiguous_blocks(n, q),
            },
            probabilities,
        )
    }

    pub fn gaussian(q: usize) -> Self {
        Self::new(SketchKind::Gaussian { q }, ProbabilityRule::Uniform)
    }

    /// The single-outcome family `{I}`.
    pub fn full(n: usize) -> Self {
        Self::new(
            SketchKind::FixedFamily {
                members: vec![Matrix::identity(n, n)],
            },
            ProbabilityRule::Uniform,
        )
    }

    pub fn premultiplied(mut self) -> Self {
        self.premultiply_by_a = true;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SketchKind::Coordinate => "coordinate",
            SketchKind::CoordinateBlock { .. } => "coordinate-block",
            SketchKind::Gaussian { .. } => "gaussian",
            SketchKind::FixedFamily { .. } => "fixed-family",
            SketchKind::AdaptiveFactorCols { .. } => "adaptive-factor-cols",
            SketchKind::AdaptiveFactorGauss { .. } => "adaptive-factor-gauss",
        }
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(
            self.kind,
            SketchKind::AdaptiveFactorCols { .. } | SketchKind::AdaptiveFactorGauss { .. }
        )
    }

    pub fn is_discrete(&self) -> bool {
        matches!(
            self.kind,
            SketchKind::Coordinate | SketchKind::CoordinateBlock { .. } | SketchKind::FixedFamily { .. }
        )
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match &self.kind {
            SketchKind::Coordinate => {}
            SketchKind::CoordinateBlock { blocks } | SketchKind::AdaptiveFactorCols { blocks } => {
                validate_partition(blocks, n)?
            }
            SketchKind::Gaussian { q } | SketchKind::AdaptiveFactorGauss { q } => {
                if *q == 0 || *q > n {
                    return Err(Error::config(format!("sketch width q = {q} must lie in 1..={n}")));
                }
                if self.probabilities != ProbabilityRule::Uniform {
                    return Err(Error::config("gaussian sketches take no probability rule"));
                }
            }
            SketchKind::FixedFamily { members } => {
                if members.is_empty() {
                    return Err(Error::config("fixed family is empty"));
                }
                for m in members {
                    if m.nrows() != n || m.ncols() == 0 || m.ncols() > n {
                        return Err(Error::dim(format!(
                            "family member is {}x{}, expected {n} rows and 1..={n} columns",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                }
            }
        }
        if let ProbabilityRule::Explicit(p) = &self.probabilities {
            let r = self
                .outcome_count(n)
                .ok_or_else(|| Error::config("explicit probabilities need a discrete sketch family"))?;
            if p.len() != r {
                return Err(Error::config(format!(
                    "{} probabilities for {r} outcomes",
                    p.len()
                )));
            }
            check_simplex(p)?;
        }
        if self.is_adaptive()
            && matches!(
                self.probabilities,
                ProbabilityRule::OptimizedExact | ProbabilityRule::OptimizedHeuristic
            )
        {
            return Err(Error::config(
                "adaptive sketches support uniform or convenient probabilities",
            ));
        }
        Ok(())
    }

    fn outcome_count(&self, n: usize) -> Option<usize> {
        match &self.kind {
            SketchKind::Coordinate => Some(n),
            SketchKind::CoordinateBlock { blocks } | SketchKind::AdaptiveFactorCols { blocks } => {
                Some(blocks.len())
            }
            SketchKind::FixedFamily { members } => Some(members.len()),
            _ => None,
        }
    }

    /// Materializes the discrete family (with `A·` applied when requested)
    /// and resolves the probability rule.
    pub fn discrete_sampling(&self, a: &Matrix, w: &ResolvedWeight, side: Side) -> Result<DiscreteSampling> {
        let n = a.nrows();
        self.validate(n)?;
        let mut members = match &self.kind {
            SketchKind::Coordinate => (0..n).map(|i| selector(n, &[i])).collect(),
            SketchKind::CoordinateBlock { blocks } => blocks.iter().map(|b| selector(n, b)).collect(),
            SketchKind::FixedFamily { members } => members.clone(),
            _ => {
                return Err(Error::config(format!(
                    "`{}` is not a discrete sketch",
                    self.name()
                )))
            }
        };
        if self.premultiply_by_a {
            members = members.iter().map(|m| a * m).collect::<Vec<Matrix>>();
        }
        let r = members.len();
        let probabilities = match &self.probabilities {
            ProbabilityRule::Uniform | ProbabilityRule::OptimizedHeuristic => vec![1.0 / r as f64; r],
            ProbabilityRule::Explicit(p) => p.clone(),
            ProbabilityRule::Convenient => convenient_probabilities(&members, a, w, side)?,
            ProbabilityRule::OptimizedExact => {
                optimized_probabilities(&members, a, w, InverseSource::Exact)?.0
            }
        };
        DiscreteSampling::new(members, probabilities)
    }

    /// Builds a sampler for this rule on problem `a`.
    pub fn sampler(&self, a: &Matrix, w: &ResolvedWeight, side: Side, rng: ChaCha8Rng) -> Result<Sampler> {
        let n = a.nrows();
        self.validate(n)?;
        let premultiply = self.premultiply_by_a.then(|| a.clone());
        let source = match &self.kind {
            SketchKind::Gaussian { q } => Source::Gaussian(*q),
            SketchKind::AdaptiveFactorGauss { q } => Source::AdaptiveGaussian(*q),
            SketchKind::AdaptiveFactorCols { blocks } => Source::AdaptiveBlocks(blocks.clone()),
            _ => {
                let sampling = self.discrete_sampling(a, w, side)?;
                return Sampler::from_discrete(sampling, rng).map(|s| Sampler {
                    rule: self.name(),
                    ..s
                });
            }
        };
        let mut sampler = Sampler {
            rule: self.name(),
            n,
            source,
            premultiply,
            index: None,
            probabilities: Vec::new(),
            rng,
            limit: REDRAW_LIMIT,
        };
        if let Source::AdaptiveBlocks(blocks) = &sampler.source {
            let r = blocks.len();
            let p = match &self.probabilities {
                ProbabilityRule::Explicit(p) => p.clone(),
                _ => vec![1.0 / r as f64; r],
            };
            sampler.set_probabilities(p)?;
        }
        Ok(sampler)
    }
}

/// Default sketch width `⌈√n⌉`.
pub fn default_q(n: usize) -> usize {
    ((n as f64).sqrt().ceil() as usize).clamp(1, n.max(1))
}

/// `{0..q}, {q..2q}, …` with a shorter final block when q does not divide n.
pub fn contiguous_blocks(n: usize, q: usize) -> Vec<Vec<usize>> {
    let q = q.max(1);
    (0..n).step_by(q).map(|s| (s..(s + q).min(n)).collect()).collect()
}

fn validate_partition(blocks: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for b in blocks {
        if b.is_empty() {
            return Err(Error::config("partition block is empty"));
        }
        for &i in b {
            if i >= n {
                return Err(Error::config(format!("index {i} out of range for n = {n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("index {i} appears in two blocks")));
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!(
            "index {missing} is not covered by the partition"
        )));
    }
    Ok(())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    if let Some(&bad) = p.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositive(bad));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::config(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

/// `I_{:C}` as an n×|C| matrix.
pub fn selector(n: usize, columns: &[usize]) -> Matrix {
    let mut s = Matrix::zeros(n, columns.len());
    for (j, &i) in columns.iter().enumerate() {
        s[(i, j)] = 1.0;
    }
    s
}

/// A finite family of sketches with positive probabilities.
#[derive(Debug, Clone)]
pub struct DiscreteSampling {
    members: Vec<Matrix>,
    probabilities: Vec<f64>,
}

impl DiscreteSampling {
    pub fn new(members: Vec<Matrix>, probabilities: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::config("sampling has no members"));
        }
        if members.len() != probabilities.len() {
            return Err(Error::config("one probability per member is required"));
        }
        let n = members[0].nrows();
        if members.iter().any(|m| m.nrows() != n || m.ncols() == 0) {
            return Err(Error::dim("members must share the row dimension"));
        }
        check_simplex(&probabilities)?;
        Ok(Self {
            members,
            probabilities,
        })
    }

    pub fn n(&self) -> usize {
        self.members[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[Matrix] {
        &self.members
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn expected_q(&self) -> f64 {
        self.members
            .iter()
            .zip(&self.probabilities)
            .map(|(m, p)| p * m.ncols() as f64)
            .sum()
    }

    /// The concatenation `[S_1 … S_r]`.
    pub fn stacked(&self) -> Matrix {
        let cols: usize = self.members.iter().map(|m| m.ncols()).sum();
        let mut out = Matrix::zeros(self.n(), cols);
        let mut at = 0;
        for m in &self.members {
            out.columns_mut(at, m.ncols()).copy_from(m);
            at += m.ncols();
        }
        out
    }

    /// Rank of the stacked sketch, from the spectrum of `𝐒𝐒ᵀ`.
    pub fn stacked_rank(&self) -> Result<usize> {
        let s = self.stacked();
        let eig = linalg::symmetric_eigen(&(&s * s.transpose()))?;
        let cutoff = linalg::GRAM_TOLERANCE * eig.max_abs();
        Ok(eig.values.iter().filter(|&&v| v > cutoff).count())
    }

    /// Full row rank of the stacked sketch and full column rank of every
    /// member.
    pub fn check_complete(&self) -> Result<()> {
        let rank = self.stacked_rank()?;
        if rank < self.n() {
            return Err(Error::IncompleteSampling { rank, n: self.n() });
        }
        for m in &self.members {
            let pinv = linalg::sym_pinv(&m.tr_mul(m), linalg::GRAM_TOLERANCE)?;
            if pinv.dropped > 0 {
                return Err(Error::RankDeficient {
                    dropped: pinv.dropped,
                    size: m.ncols(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SketchSample {
    /// The sketch S actually used by the step.
    pub matrix: Matrix,
    /// Discrete outcome index, if any.
    pub outcome: Option<usize>,
    /// For adaptive sketches, the factor-free sketch S̃ with S = L·S̃.
    pub pre_factor: Option<Matrix>,
    /// Selected coordinates for block sketches.
    pub columns: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
enum Source {
    Members(Vec<Matrix>),
    Gaussian(usize),
    AdaptiveBlocks(Vec<Vec<usize>>),
    AdaptiveGaussian(usize),
}

/// Draws sketches for one run from its own seeded stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    rule: &'static str,
    n: usize,
    source: Source,
    premultiply: Option<Matrix>,
    index: Option<WeightedIndex<f64>>,
    probabilities: Vec<f64>,
    rng: ChaCha8Rng,
    limit: usize,
}

impl Sampler {
    pub fn from_discrete(sampling: DiscreteSampling, rng: ChaCha8Rng) -> Result<Self> {
        let n = sampling.n();
        let DiscreteSampling {
            members,
            probabilities,
        } = sampling;
        let mut sampler = Self {
            rule: "discrete",
            n,
            source: Source::Members(members),
            premultiply: None,
            index: None,
            probabilities: Vec::new(),
            rng,
            limit: REDRAW_LIMIT,
        };
        sampler.set_probabilities(probabilities)?;
        Ok(sampler)
    }

    pub fn rule(&self) -> &'static str {
        self.rule
    }

    pub fn redraw_limit(&self) -> usize {
        self.limit
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn members(&self) -> Option<&[Matrix]> {
        match &self.source {
            Source::Members(m) => Some(m),
            _ => None,
        }
    }

    pub fn blocks(&self) -> Option<&[Vec<usize>]> {
        match &self.source {
            Source::AdaptiveBlocks(b) => Some(b),
            _ => None,
        }
    }

    pub fn outcome_count(&self) -> Option<usize> {
        match &self.source {
            Source::Members(m) => Some(m.len()),
            Source::AdaptiveBlocks(b) => Some(b.len()),
            _ => None,
        }
    }

    /// Replaces the outcome probabilities (heuristic and adaptive rules).
    pub fn set_probabilities(&mut self, p: Vec<f64>) -> Result<()> {
        let r = self
            .outcome_count()
            .ok_or_else(|| Error::config("continuous sketches have no outcome probabilities"))?;
        if p.len() != r {
            return Err(Error::config(format!(
                "{} probabilities for {r} outcomes",
                p.len()
            )));
        }
        if let Some(&bad) = p.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::NonPositive(bad));
        }
        self.index = Some(WeightedIndex::new(&p).map_err(|e| Error::config(e.to_string()))?);
        self.probabilities = p;
        Ok(())
    }

    /// Draws one sketch. Adaptive rules need the current factor.
    pub fn draw(&mut self, factor: Option<&Matrix>) -> Result<SketchSample> {
        let adaptive = matches!(
            self.source,
            Source::AdaptiveBlocks(_) | Source::AdaptiveGaussian(_)
        );
        match (adaptive, factor) {
            (true, None) => return Err(Error::config("adaptive sketch needs the current factor")),
            (false, Some(_)) => return Err(Error::config("only adaptive sketches take a factor")),
            _ => {}
        }
        match &self.source {
            Source::Members(_) | Source::AdaptiveBlocks(_) => {
                let i = self
                    .index
                    .as_ref()
                    .expect("discrete sampler")
                    .sample(&mut self.rng);
                self.outcome(i, factor)
            }
            Source::Gaussian(q) | Source::AdaptiveGaussian(q) => {
                let (n, q) = (self.n, *q);
                for _ in 0..=self.limit {
                    let g = gaussian_matrix(n, q, &mut self.rng);
                    let s = self.finish(&g, factor);
                    let pinv = linalg::sym_pinv(&s.tr_mul(&s), linalg::GRAM_TOLERANCE)?;
                    if pinv.dropped == 0 {
                        return Ok(SketchSample {
                            matrix: s,
                            outcome: None,
                            pre_factor: adaptive.then_some(g),
                            columns: None,
                        });
                    }
                }
                Err(Error::RejectionLimit {
                    rule: self.rule.to_string(),
                    limit: self.limit,
                })
            }
        }
    }

    /// The sample for a forced outcome index.
    pub fn outcome(&self, i: usize, factor: Option<&Matrix>) -> Result<SketchSample> {
        match &self.source {
            Source::Members(m) => {
                let base = m
                    .get(i)
                    .ok_or_else(|| Error::config(format!("outcome {i} out of range")))?;
                Ok(SketchSample {
                    matrix: self.finish(base, None),
                    outcome: Some(i),
                    pre_factor: None,
                    columns: None,
                })
            }
            Source::AdaptiveBlocks(blocks) => {
                let cols = blocks
                    .get(i)
                    .ok_or_else(|| Error::config(format!("outcome {i} out of range")))?;
                let l = factor.ok_or_else(|| Error::config("adaptive sketch needs the current factor"))?;
                let tilde = selector(self.n, cols);
                let mut s = Matrix::zeros(self.n, cols.len());
                for (j, &c) in cols.iter().enumerate() {
                    s.set_column(j, &l.column(c));
                }
                Ok(SketchSample {
                    matrix: s,
                    outcome: Some(i),
                    pre_factor: Some(tilde),
                    columns: Some(cols.clone()),
                })
            }
            _ => Err(Error::config("continuous sketches have no outcomes")),
        }
    }

    fn finish(&self, base: &Matrix, factor: Option<&Matrix>) -> Matrix {
        let s = match factor {
            Some(l) => l * base,
            None => base.clone(),
        };
        match &self.premultiply {
            Some(a) => a * s,
            None => s,
        }
    }
}

/// One draw from a freshly built sampler.
pub fn draw_sketch(
    rule: &SketchRule,
    a: &Matrix,
    w: &ResolvedWeight,
    rng: ChaCha8Rng,
    factor: Option<&Matrix>,
) -> Result<SketchSample> {
    rule.sampler(a, w, Side::Row, rng)?.draw(factor)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// The stream for trial `trial` of a run seeded with `seed`.
pub fn trial_stream(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// `p_i ∝ ‖W^{1/2}AᵀS_i‖²_F` on the row side and `‖W^{1/2}AS_i‖²_F` on the
/// column side.
pub fn convenient_probabilities(
    family: &[Matrix],
    a: &Matrix,
    w: &ResolvedWeight,
    side: Side,
) -> Result<Vec<f64>> {
    let mut fc = crate::flops::FlopCounter::new();
    let mut weights = Vec::with_capacity(family.len());
    for (i, s) in family.iter().enumerate() {
        if s.nrows() != a.nrows() {
            return Err(Error::dim(format!("member {i} has {} rows", s.nrows())));
        }
        let m = match side {
            Side::Row => a.tr_mul(s),
            Side::Col => a * s,
        };
        let v = m.dot(&w.apply(&m, &mut fc));
        if !(v > 0.0) {
            return Err(Error::config(format!("member {i} has zero weighted norm")));
        }
        weights.push(v);
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|v| v / total).collect())
}

#[derive(Debug, Clone, Copy)]
pub enum InverseSource<'a> {
    /// Materialize A⁻¹.
    Exact,
    /// Use an approximate inverse (typically the current iterate).
    Proxy(&'a Matrix),
}

/// Probabilities minimizing the γ(p) bound, with the achieved bound.
///
/// Needs the stacked sketch to be square and invertible; the blocks of its
/// inverse transpose pair with the members.
pub fn optimized_probabilities(
    family: &[Matrix],
    a: &Matrix,
    w: &ResolvedWeight,
    source: InverseSource<'_>,
) -> Result<(Vec<f64>, f64)> {
    let costs = optimized_costs(family, a, w, source)?;
    let (p, value) = rates::fracsum_optimal_p(&costs)?;
    Ok((p, 1.0 - 1.0 / value))
}

/// `a_i = ‖W^{-1/2} A⁻¹ S̄_i S_iᵀ A W^{1/2}‖²_F` with `S̄_i` the blocks of
/// `𝐒^{-T}`.
pub(crate) fn optimized_costs(
    family: &[Matrix],
    a: &Matrix,
    w: &ResolvedWeight,
    source: InverseSource<'_>,
) -> Result<Vec<f64>> {
    let n = a.nrows();
    let cols: usize = family.iter().map(|m| m.ncols()).sum();
    if cols != n {
        return Err(Error::NotSquareSampling);
    }
    let stacked =
        DiscreteSampling::new(family.to_vec(), vec![1.0 / family.len() as f64; family.len()])?.stacked();
    let bar = linalg::invert(&stacked.transpose()).map_err(|_| Error::NotSquareSampling)?;
    let exact;
    let inverse = match source {
        InverseSource::Exact => {
            exact = linalg::invert(a)?;
            &exact
        }
        InverseSource::Proxy(x) => x,
    };
    let (wd, winv) = (w.dense(), w.dense_inverse());
    let mut costs = Vec::with_capacity(family.len());
    let mut at = 0;
    for s in family {
        let q = s.ncols();
        let sbar = bar.columns(at, q).into_owned();
        at += q;
        // B = A⁻¹ S̄ Sᵀ A; cost = Tr(W⁻¹ B W Bᵀ)
        let b = inverse * sbar * (s.transpose() * a);
        let cost = if w.is_identity() {
            b.norm_squared()
        } else {
            (winv * &b).dot(&(&b * wd))
        };
        costs.push(cost);
    }
    Ok(costs)
}
