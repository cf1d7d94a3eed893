//! Method selection and the shared iteration loop with stopping rules and
//! history capture.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::adarbfgs::{self, FactoredState};
use crate::baselines::{self, MrState};
use crate::error::{Error, Result};
use crate::flops::FlopCounter;
use crate::linalg::{self, Matrix, ProblemMatrix, ResolvedWeight, Symmetry, WeightSpec};
use crate::qn::{self, NamedUpdate, UpdateName};
use crate::rates::{self, RateReport};
use crate::simi;
use crate::sketch::{
    contiguous_blocks, default_q, optimized_probabilities, trial_stream, InverseSource, ProbabilityRule,
    Sampler, Side, SketchKind, SketchRule,
};

/// Default relative residual target.
pub const DEFAULT_TOL: f64 = 1e-2;
/// Default spacing of full residual recomputations.
pub const DEFAULT_RESIDUAL_EVERY: usize = 10;
/// Relative residual beyond which a run is declared divergent.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Row,
    Col,
    Sym,
    Kaczmarz,
    BadBroyden,
    Psb,
    GoodBroyden,
    Aip,
    Dfp,
    Bfgs,
    Column,
    ColumnSym,
    AdaRbfgsGauss,
    AdaRbfgsCols,
    NewtonSchulz,
    Mr,
}

impl Method {
    pub const ALL: [Method; 16] = [
        Method::Row,
        Method::Col,
        Method::Sym,
        Method::Kaczmarz,
        Method::BadBroyden,
        Method::Psb,
        Method::GoodBroyden,
        Method::Aip,
        Method::Dfp,
        Method::Bfgs,
        Method::Column,
        Method::ColumnSym,
        Method::AdaRbfgsGauss,
        Method::AdaRbfgsCols,
        Method::NewtonSchulz,
        Method::Mr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Row => "row",
            Method::Col => "col",
            Method::Sym => "sym",
            Method::Kaczmarz => "kaczmarz",
            Method::BadBroyden => "bad-broyden",
            Method::Psb => "psb",
            Method::GoodBroyden => "good-broyden",
            Method::Aip => "aip",
            Method::Dfp => "dfp",
            Method::Bfgs => "bfgs",
            Method::Column => "column",
            Method::ColumnSym => "column-sym",
            Method::AdaRbfgsGauss => "adarbfgs-gauss",
            Method::AdaRbfgsCols => "adarbfgs-cols",
            Method::NewtonSchulz => "newton-schulz",
            Method::Mr => "mr",
        }
    }

    pub fn named_update(self) -> Option<UpdateName> {
        Some(match self {
            Method::Kaczmarz => UpdateName::Kaczmarz,
            Method::BadBroyden => UpdateName::BadBroyden,
            Method::Psb => UpdateName::Psb,
            Method::GoodBroyden => UpdateName::GoodBroyden,
            Method::Aip => UpdateName::Aip,
            Method::Dfp => UpdateName::Dfp,
            Method::Bfgs => UpdateName::Bfgs,
            Method::Column | Method::ColumnSym => UpdateName::Column,
            _ => return None,
        })
    }

    pub fn requires(self) -> Symmetry {
        match self {
            Method::Sym | Method::ColumnSym => Symmetry::Symmetric,
            Method::AdaRbfgsGauss | Method::AdaRbfgsCols => Symmetry::Spd,
            m => m
                .named_update()
                .map_or(Symmetry::General, |u| NamedUpdate::of(u).requires),
        }
    }

    /// Whether the method draws sketches at all.
    pub fn is_sketched(self) -> bool {
        !matches!(self, Method::NewtonSchulz | Method::Mr)
    }

    pub fn symmetric_iterate(self) -> bool {
        matches!(
            self,
            Method::Sym | Method::Psb | Method::Bfgs | Method::Dfp | Method::ColumnSym
        ) || self.is_adaptive()
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Method::AdaRbfgsGauss | Method::AdaRbfgsCols)
    }

    /// The weight the method fixes, if any.
    pub fn implied_weight(self) -> Option<WeightSpec> {
        match self {
            Method::Row | Method::Col | Method::Sym => None,
            Method::AdaRbfgsGauss | Method::AdaRbfgsCols => Some(WeightSpec::InverseOfA),
            Method::NewtonSchulz | Method::Mr => Some(WeightSpec::Identity),
            m => m.named_update().map(|u| NamedUpdate::of(u).implied_weight),
        }
    }

    pub fn default_probabilities(self) -> ProbabilityRule {
        match self {
            Method::GoodBroyden | Method::AdaRbfgsGauss | Method::NewtonSchulz | Method::Mr => {
                ProbabilityRule::Uniform
            }
            _ => ProbabilityRule::Convenient,
        }
    }

    /// Default sketch width: single coordinates for Good Broyden, `⌈√n⌉`
    /// otherwise.
    pub fn default_q(self, n: usize) -> usize {
        match self {
            Method::GoodBroyden => 1,
            _ => default_q(n),
        }
    }

    /// Contiguous coordinate blocks of width `q` (Gaussian and adaptive
    /// kinds for AdaRBFGS); `None` for the unsketched baselines.
    pub fn default_rule(self, n: usize, q: usize, probabilities: ProbabilityRule) -> Option<SketchRule> {
        let kind = match self {
            Method::NewtonSchulz | Method::Mr => return None,
            Method::AdaRbfgsGauss => SketchKind::AdaptiveFactorGauss { q },
            Method::AdaRbfgsCols => SketchKind::AdaptiveFactorCols {
                blocks: contiguous_blocks(n, q),
            },
            _ if q == 1 => SketchKind::Coordinate,
            _ => SketchKind::CoordinateBlock {
                blocks: contiguous_blocks(n, q),
            },
        };
        Some(SketchRule::new(kind, probabilities))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

/// Starting point of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Identity,
    Zero,
    /// Newton-Schulz `0.99Aᵀ/‖A‖²₂`, MR `(Tr A/Tr AAᵀ)I`, identity otherwise.
    Paper,
    /// An explicit estimate of A⁻¹.
    Matrix(Matrix),
}

#[derive(Debug, Clone)]
pub struct InverterConfig {
    pub method: Method,
    /// Only the generic row, col and sym variants take a free weight.
    pub weight: Option<WeightSpec>,
    /// Overrides the method's default sketch.
    pub rule: Option<SketchRule>,
    pub q: Option<usize>,
    pub probabilities: Option<ProbabilityRule>,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Independent substream index, one per trial.
    pub stream: u64,
    pub residual_every: usize,
    /// When false every recorded time is 0, making traces reproducible.
    pub record_time: bool,
    /// Seconds of step time after which the run stops.
    pub time_budget: Option<f64>,
    pub divergence_threshold: f64,
    pub init: Init,
}

impl InverterConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            weight: None,
            rule: None,
            q: None,
            probabilities: None,
            tol: DEFAULT_TOL,
            max_iters: 10_000,
            seed: 0,
            stream: 0,
            residual_every: DEFAULT_RESIDUAL_EVERY,
            record_time: true,
            time_budget: None,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            init: Init::Paper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol >= 0.0) {
            return Err(Error::config(format!(
                "tolerance must be nonnegative, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters must be at least 1"));
        }
        if self.residual_every == 0 {
            return Err(Error::config("residual_every must be at least 1"));
        }
        if !(self.divergence_threshold > 1.0) {
            return Err(Error::config("divergence threshold must exceed 1"));
        }
        if let (Some(w), Some(implied)) = (&self.weight, self.method.implied_weight()) {
            if *w != implied {
                return Err(Error::config(format!(
                    "`{}` fixes the weight to `{}`",
                    self.method,
                    implied.name()
                )));
            }
        }
        Ok(())
    }

    pub fn weight_spec(&self) -> WeightSpec {
        self.method
            .implied_weight()
            .or_else(|| self.weight.clone())
            .unwrap_or(WeightSpec::Identity)
    }

    /// The sketch rule the run will use.
    pub fn resolve_rule(&self, n: usize) -> Result<Option<SketchRule>> {
        if !self.method.is_sketched() {
            return Ok(None);
        }
        if let Some(rule) = &self.rule {
            return Ok(Some(rule.clone()));
        }
        let q = self.q.unwrap_or_else(|| self.method.default_q(n));
        if q == 0 || q > n {
            return Err(Error::config(format!("sketch width q = {q} must lie in 1..={n}")));
        }
        let p = self
            .probabilities
            .clone()
            .unwrap_or_else(|| self.method.default_probabilities());
        Ok(self.method.default_rule(n, q, p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryPoint {
    pub k: usize,
    /// `‖I − AX_k‖_F / ‖I − AX₀‖_F`
    pub residual: f64,
    pub flops: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    ToleranceReached,
    MaxIters,
    TimeBudget,
    Diverged,
    Failed(String),
}

impl Termination {
    pub fn label(&self) -> &'static str {
        match self {
            Termination::ToleranceReached => "converged",
            Termination::MaxIters => "max-iters",
            Termination::TimeBudget => "time-budget",
            Termination::Diverged => "diverged",
            Termination::Failed(_) => "error",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InverterState {
    /// Current estimate of A⁻¹.
    pub x: Matrix,
    pub k: usize,
    pub history: Vec<HistoryPoint>,
    /// Largest correction applied when re-symmetrizing.
    pub symmetry_drift: f64,
    /// AdaRBFGS factor L with `X = LLᵀ`.
    pub factor: Option<Matrix>,
    /// Good Broyden and DFP estimate of A itself.
    pub primal: Option<Matrix>,
    /// MR steps skipped for a vanishing search direction.
    pub stagnated: usize,
}

impl InverterState {
    pub fn final_residual(&self) -> f64 {
        self.history.last().map_or(1.0, |h| h.residual)
    }

    pub fn total_flops(&self) -> u64 {
        self.history.last().map_or(0, |h| h.flops)
    }
}

#[derive(Debug, Clone)]
pub struct InverterRun {
    pub state: InverterState,
    pub termination: Termination,
}

#[derive(Debug, Clone, Copy)]
enum DenseKernel {
    Row,
    Col,
    Sym,
    Kaczmarz,
    BadBroyden,
    Psb,
    Aip,
    Bfgs,
    Column,
    ColumnSym,
}

#[derive(Debug, Clone, Copy)]
enum PairKernel {
    GoodBroyden,
    Dfp,
}

/// Heuristic probability refresh: the family's transposed side, if any.
#[derive(Debug, Clone)]
struct Heuristic {
    side: Side,
}

enum Engine {
    Dense {
        x: Matrix,
        kernel: DenseKernel,
        weight: ResolvedWeight,
        sampler: Sampler,
        symmetric: bool,
        heuristic: Option<Heuristic>,
        count_premultiply: Option<usize>,
    },
    Pair {
        x: Matrix,
        xinv: Matrix,
        kernel: PairKernel,
        sampler: Sampler,
    },
    Factored {
        state: FactoredState,
        sampler: Sampler,
        probabilities: ProbabilityRule,
    },
    NewtonSchulz {
        x: Matrix,
    },
    Mr {
        state: MrState,
    },
}

enum StepError {
    Diverged,
    Failed(Error),
}

impl From<Error> for StepError {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite => StepError::Diverged,
            e => StepError::Failed(e),
        }
    }
}

impl Engine {
    fn build(a: &Matrix, config: &InverterConfig, fc: &mut FlopCounter) -> Result<Self> {
        let n = a.nrows();
        let method = config.method;
        let rng = trial_stream(config.seed, config.stream);
        let rule = config.resolve_rule(n)?;

        match method {
            Method::NewtonSchulz => {
                let x = match &config.init {
                    Init::Paper => baselines::newton_schulz_init(a, config.seed, fc)?,
                    init => plain_init(init, n)?,
                };
                return Ok(Engine::NewtonSchulz { x });
            }
            Method::Mr => {
                let x = match &config.init {
                    Init::Paper => baselines::mr_init(a)?,
                    init => plain_init(init, n)?,
                };
                return Ok(Engine::Mr {
                    state: MrState::new(x, a)?,
                });
            }
            _ => {}
        }
        let rule = rule.expect("sketched method has a rule");
        rule.validate(n)?;

        if method.is_adaptive() {
            if !rule.is_adaptive() {
                return Err(Error::config(format!("`{method}` needs an adaptive sketch")));
            }
            let l = match &config.init {
                Init::Identity | Init::Paper => Matrix::identity(n, n),
                Init::Zero => return Err(Error::config("the factored iterate cannot start at zero")),
                Init::Matrix(m) => m.clone().cholesky().ok_or(Error::NotSpd)?.l(),
            };
            let sampler = rule.sampler(a, &ResolvedWeight::identity(n), Side::Row, rng)?;
            return Ok(Engine::Factored {
                state: FactoredState::new(l, a)?,
                sampler,
                probabilities: rule.probabilities.clone(),
            });
        }
        if rule.is_adaptive() {
            return Err(Error::config(format!("`{method}` cannot use an adaptive sketch")));
        }

        if matches!(method, Method::GoodBroyden | Method::Dfp) {
            let (x, xinv) = match &config.init {
                Init::Identity | Init::Paper => (Matrix::identity(n, n), Matrix::identity(n, n)),
                Init::Zero => return Err(Error::config("this method needs an invertible start")),
                Init::Matrix(m) => (linalg::invert(m)?, m.clone()),
            };
            let sampler = if method == Method::GoodBroyden {
                if rule.kind != SketchKind::Coordinate {
                    return Err(Error::config("good-broyden needs coordinate sketches"));
                }
                if !matches!(
                    rule.probabilities,
                    ProbabilityRule::Uniform | ProbabilityRule::Explicit(_)
                ) {
                    return Err(Error::config(
                        "good-broyden supports uniform or explicit probabilities",
                    ));
                }
                rule.sampler(a, &ResolvedWeight::identity(n), Side::Row, rng)?
            } else if matches!(
                rule.probabilities,
                ProbabilityRule::Convenient | ProbabilityRule::OptimizedExact
            ) {
                // DFP is the sketch-and-project method for the system A⁻¹
                // under the weight A.
                let ainv = linalg::invert(a)?;
                let w = WeightSpec::InverseOfA.resolve(&ainv)?;
                rule.sampler(&ainv, &w, Side::Row, rng)?
            } else if rule.probabilities == ProbabilityRule::OptimizedHeuristic {
                return Err(Error::config("dfp does not support heuristic probabilities"));
            } else {
                rule.sampler(a, &ResolvedWeight::identity(n), Side::Row, rng)?
            };
            let kernel = if method == Method::GoodBroyden {
                PairKernel::GoodBroyden
            } else {
                PairKernel::Dfp
            };
            return Ok(Engine::Pair {
                x,
                xinv,
                kernel,
                sampler,
            });
        }

        let kernel = match method {
            Method::Row => DenseKernel::Row,
            Method::Col => DenseKernel::Col,
            Method::Sym => DenseKernel::Sym,
            Method::Kaczmarz => DenseKernel::Kaczmarz,
            Method::BadBroyden => DenseKernel::BadBroyden,
            Method::Psb => DenseKernel::Psb,
            Method::Aip => DenseKernel::Aip,
            Method::Bfgs => DenseKernel::Bfgs,
            Method::Column => DenseKernel::Column,
            Method::ColumnSym => DenseKernel::ColumnSym,
            _ => unreachable!("handled above"),
        };
        let weight_spec = config.weight_spec();
        // The weight the kernel applies, and the (side, weight) pair whose
        // convenient probabilities are ‖W^{1/2}AᵀS_i‖² on that side.
        let (weight, side, prob_weight) = match kernel {
            DenseKernel::Row | DenseKernel::Sym => {
                let w = weight_spec.resolve(a)?;
                (w.clone(), Side::Row, w)
            }
            DenseKernel::Col => {
                let w = weight_spec.resolve(a)?;
                (w.clone(), Side::Col, w)
            }
            DenseKernel::Aip | DenseKernel::Bfgs => {
                let w = WeightSpec::InverseOfA.resolve(a)?;
                (ResolvedWeight::identity(n), Side::Row, w)
            }
            DenseKernel::BadBroyden | DenseKernel::Column | DenseKernel::ColumnSym => (
                ResolvedWeight::identity(n),
                Side::Col,
                ResolvedWeight::identity(n),
            ),
            DenseKernel::Kaczmarz | DenseKernel::Psb => (
                ResolvedWeight::identity(n),
                Side::Row,
                ResolvedWeight::identity(n),
            ),
        };
        let heuristic = if rule.probabilities == ProbabilityRule::OptimizedHeuristic {
            if matches!(kernel, DenseKernel::Column | DenseKernel::ColumnSym) || !rule.is_discrete() {
                return Err(Error::config(format!(
                    "heuristic probabilities are not available for `{method}` with this sketch"
                )));
            }
            Some(Heuristic { side })
        } else {
            None
        };
        let symmetric = method.symmetric_iterate();
        let mut x = plain_init(&config.init, n)?;
        if symmetric {
            x = linalg::symmetrize(&x).0;
        }
        let sampler = rule.sampler(a, &prob_weight, side, rng)?;
        let count_premultiply = (rule.premultiply_by_a && !rule.is_discrete()).then(|| match rule.kind {
            SketchKind::Gaussian { q } => q,
            _ => 0,
        });
        Ok(Engine::Dense {
            x,
            kernel,
            weight: if heuristic.is_some() { prob_weight } else { weight },
            sampler,
            symmetric,
            heuristic,
            count_premultiply,
        })
    }

    fn step(&mut self, a: &Matrix, fc: &mut FlopCounter, drift: &mut f64) -> Result<(), StepError> {
        let n = a.nrows();
        match self {
            Engine::Dense {
                x,
                kernel,
                weight,
                sampler,
                symmetric,
                count_premultiply,
                ..
            } => {
                for _ in 0..=sampler.redraw_limit() {
                    let sample = sampler.draw(None)?;
                    if let Some(q) = count_premultiply {
                        fc.gemm(n, n, *q);
                    }
                    let s = &sample.matrix;
                    let w = &*weight;
                    let out = match kernel {
                        DenseKernel::Row => simi::step_row(x, a, w, s, fc),
                        DenseKernel::Col => simi::step_col(x, a, w, s, fc),
                        DenseKernel::Sym => simi::step_sym(x, a, w, s, fc),
                        DenseKernel::Kaczmarz => qn::kaczmarz_step(x, a, s, fc),
                        DenseKernel::BadBroyden => qn::bad_broyden_step(x, a, s, fc),
                        DenseKernel::Psb => qn::psb_step(x, a, s, fc),
                        DenseKernel::Aip => qn::aip_step(x, a, s, fc),
                        DenseKernel::Bfgs => qn::bfgs_step(x, a, s, fc),
                        DenseKernel::Column => qn::column_update_step(x, a, s, false, fc),
                        DenseKernel::ColumnSym => qn::column_update_step(x, a, s, true, fc),
                    };
                    match out {
                        Ok(next) => {
                            *x = next;
                            if *symmetric {
                                *drift = drift.max(simi::resymmetrize(x));
                            }
                            return finite(x);
                        }
                        Err(Error::RankDeficient { .. }) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
                Err(rejection(sampler))
            }
            Engine::Pair {
                x,
                xinv,
                kernel,
                sampler,
            } => {
                for _ in 0..=sampler.redraw_limit() {
                    let sample = sampler.draw(None)?;
                    let out = match kernel {
                        PairKernel::GoodBroyden => {
                            let i = sample.outcome.expect("coordinate sketch");
                            qn::good_broyden_step(x, xinv, a, i, fc)
                        }
                        PairKernel::Dfp => qn::dfp_step(x, xinv, a, &sample.matrix, fc).map(|(nx, ni)| {
                            *x = nx;
                            *xinv = ni;
                        }),
                    };
                    match out {
                        Ok(()) => {
                            if let PairKernel::Dfp = kernel {
                                *drift = drift.max(simi::resymmetrize(x));
                                *drift = drift.max(simi::resymmetrize(xinv));
                            }
                            finite(x)?;
                            return finite(xinv);
                        }
                        Err(Error::RankDeficient { .. } | Error::DegeneratePivot(_)) => continue,
                        Err(e) => return Err(e.into()),
                    }
                }
                Err(rejection(sampler))
            }
            Engine::Factored {
                state,
                sampler,
                probabilities,
                ..
            } => {
                adarbfgs::adarbfgs_step(state, a, sampler, probabilities, fc)?;
                Ok(())
            }
            Engine::NewtonSchulz { x } => {
                *x = baselines::newton_schulz_step(x, a, fc)?;
                Ok(())
            }
            Engine::Mr { state } => {
                baselines::mr_step(state, a, fc)?;
                Ok(())
            }
        }
    }

    /// Recomputes heuristic probabilities from the current estimate.
    fn refresh(&mut self, a: &Matrix, fc: &mut FlopCounter) {
        if let Engine::Dense {
            x,
            weight,
            sampler,
            heuristic: Some(h),
            ..
        } = self
        {
            let Some(members) = sampler.members().map(|m| m.to_vec()) else {
                return;
            };
            let n = a.nrows();
            let p = match h.side {
                Side::Row => optimized_probabilities(&members, a, weight, InverseSource::Proxy(x)),
                Side::Col => optimized_probabilities(
                    &members,
                    &a.transpose(),
                    weight,
                    InverseSource::Proxy(&x.transpose()),
                ),
            };
            // one n×n product and a solve with the proxy per refresh
            fc.gemm(n, n, n);
            fc.solve(n, n);
            if let Ok((p, _)) = p {
                // a proxy can yield zero costs; keep the previous distribution then
                let _ = sampler.set_probabilities(p);
            }
        }
    }

    /// Current estimate of A⁻¹.
    fn estimate(&self) -> Matrix {
        match self {
            Engine::Dense { x, .. } | Engine::NewtonSchulz { x } => x.clone(),
            Engine::Pair { xinv, .. } => xinv.clone(),
            Engine::Factored { state, .. } => state.reconstruct(),
            Engine::Mr { state } => state.x.clone(),
        }
    }

    /// `‖I − AX‖_F`; `full` forces a recomputation for cached residuals.
    fn residual_norm(&mut self, a: &Matrix, full: bool) -> f64 {
        match self {
            Engine::Dense { x, .. } | Engine::NewtonSchulz { x } => residual(a, x),
            Engine::Pair { xinv, .. } => residual(a, xinv),
            Engine::Factored { state, .. } => state.residual_norm(a),
            Engine::Mr { state } => {
                if full {
                    state.revalidate(a);
                }
                state.residual_norm()
            }
        }
    }

    fn snapshot(&self) -> Snapshot {
        match self {
            Engine::Factored { state, .. } => Snapshot::Factor(state.l().clone()),
            Engine::Pair { x, xinv, .. } => Snapshot::Pair(x.clone(), xinv.clone()),
            e => Snapshot::Dense(e.estimate()),
        }
    }

    fn cheap_residual(&self) -> bool {
        matches!(self, Engine::Mr { .. })
    }

    fn stagnated(&self) -> usize {
        match self {
            Engine::Mr { state } => state.stagnated,
            _ => 0,
        }
    }
}

enum Snapshot {
    Dense(Matrix),
    Pair(Matrix, Matrix),
    Factor(Matrix),
}

fn finite(x: &Matrix) -> Result<(), StepError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StepError::Diverged)
    }
}

fn rejection(sampler: &Sampler) -> StepError {
    StepError::Failed(Error::RejectionLimit {
        rule: sampler.rule().to_string(),
        limit: sampler.redraw_limit(),
    })
}

fn plain_init(init: &Init, n: usize) -> Result<Matrix> {
    match init {
        Init::Identity | Init::Paper => Ok(Matrix::identity(n, n)),
        Init::Zero => Ok(Matrix::zeros(n, n)),
        Init::Matrix(m) => {
            if m.shape() != (n, n) {
                return Err(Error::dim(format!(
                    "initial matrix is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(m.clone())
        }
    }
}

/// `‖I − AX‖_F`.
pub fn residual(a: &Matrix, x: &Matrix) -> f64 {
    let mut r = -(a * x);
    for i in 0..a.nrows() {
        r[(i, i)] += 1.0;
    }
    r.norm()
}

/// Runs one method until the relative residual reaches `tol`, the
/// iteration or time budget runs out, or the iterate diverges.
///
/// Configuration problems are returned as errors; numerical trouble during
/// the run ends it with [`Termination::Diverged`] or
/// [`Termination::Failed`] and the last checked iterate.
pub fn run_inverter(a: &ProblemMatrix, config: &InverterConfig) -> Result<InverterRun> {
    config.validate()?;
    check_requirements(a, config.method)?;
    let a = a.data();
    let mut fc = FlopCounter::new();
    let mut engine = Engine::build(a, config, &mut fc)?;

    let r0 = engine.residual_norm(a, true);
    let mut history = vec![HistoryPoint {
        k: 0,
        residual: 1.0,
        flops: fc.total(),
        seconds: 0.0,
    }];
    let mut drift = 0.0;
    let mut elapsed = 0.0;
    let mut snapshot = engine.snapshot();
    let mut k = 0;
    let mut termination = if r0 == 0.0 || !r0.is_finite() {
        Some(if r0 == 0.0 {
            Termination::ToleranceReached
        } else {
            Termination::Diverged
        })
    } else {
        None
    };

    while termination.is_none() && k < config.max_iters {
        k += 1;
        let start = Instant::now();
        let stepped = engine.step(a, &mut fc, &mut drift);
        let due = k == 1 || k % config.residual_every == 0 || k == config.max_iters;
        if due && stepped.is_ok() {
            engine.refresh(a, &mut fc);
        }
        if config.record_time {
            elapsed += start.elapsed().as_secs_f64();
        }
        match stepped {
            Ok(()) => {}
            Err(StepError::Diverged) => {
                termination = Some(Termination::Diverged);
                break;
            }
            Err(StepError::Failed(e)) => {
                termination = Some(Termination::Failed(e.to_string()));
                break;
            }
        }
        let over_budget = config.time_budget.is_some_and(|b| elapsed >= b);
        if !(due || over_budget || engine.cheap_residual()) {
            continue;
        }
        let rel = engine.residual_norm(a, due || over_budget) / r0;
        if !rel.is_finite() || rel > config.divergence_threshold {
            termination = Some(Termination::Diverged);
            break;
        }
        history.push(HistoryPoint {
            k,
            residual: rel,
            flops: fc.total(),
            seconds: elapsed,
        });
        if due || over_budget {
            snapshot = engine.snapshot();
        }
        if rel <= config.tol {
            termination = Some(Termination::ToleranceReached);
        } else if over_budget {
            termination = Some(Termination::TimeBudget);
        }
    }
    let termination = termination.unwrap_or(Termination::MaxIters);

    // Keep the live iterate unless the run ended abnormally.
    let healthy = matches!(
        termination,
        Termination::ToleranceReached | Termination::MaxIters | Termination::TimeBudget
    );
    if healthy {
        snapshot = engine.snapshot();
    }
    let (x, factor, primal) = match snapshot {
        Snapshot::Dense(x) => (x, None, None),
        Snapshot::Pair(x, xinv) => (xinv, None, Some(x)),
        Snapshot::Factor(l) => (linalg::symmetrize(&(&l * l.transpose())).0, Some(l), None),
    };
    Ok(InverterRun {
        state: InverterState {
            x,
            k,
            history,
            symmetry_drift: drift,
            factor,
            primal,
            stagnated: engine.stagnated(),
        },
        termination,
    })
}

fn check_requirements(a: &ProblemMatrix, method: Method) -> Result<()> {
    match method.requires() {
        Symmetry::General => Ok(()),
        Symmetry::Symmetric if a.is_symmetric() => Ok(()),
        Symmetry::Symmetric => Err(Error::NotSymmetric),
        Symmetry::Spd if a.is_spd() => Ok(()),
        Symmetry::Spd => Err(Error::NotSpd),
    }
}

/// Convergence rate of a sketched method with a fixed discrete sketch.
///
/// Each method is written as sketch-and-project on some system `MX = I`
/// (or `XM = I`) under some weight, and the report is computed in that frame.
/// Adaptive, Gaussian and heuristic configurations have no fixed rate and are
/// rejected.
pub fn method_rate(a: &ProblemMatrix, config: &InverterConfig) -> Result<RateReport> {
    config.validate()?;
    let method = config.method;
    check_requirements(a, method)?;
    let data = a.data();
    let n = data.nrows();
    let rule = config
        .resolve_rule(n)?
        .ok_or_else(|| Error::config(format!("`{method}` is not a sketched method")))?;
    if rule.is_adaptive() || method.is_adaptive() {
        return Err(Error::config(format!(
            "`{method}` has no fixed rate: its sketch follows the iterate"
        )));
    }
    if rule.probabilities == ProbabilityRule::OptimizedHeuristic {
        return Err(Error::config(
            "heuristic probabilities change every iteration and have no fixed rate",
        ));
    }
    let identity = ResolvedWeight::identity(n);
    match method {
        Method::Row | Method::Sym | Method::Col => {
            let w = config.weight_spec().resolve(data)?;
            let side = if method == Method::Col {
                Side::Col
            } else {
                Side::Row
            };
            let sampling = rule.discrete_sampling(data, &w, side)?;
            rates::rho(data, &w, &sampling, side)
        }
        Method::Kaczmarz | Method::Psb => rates::rho(
            data,
            &identity,
            &rule.discrete_sampling(data, &identity, Side::Row)?,
            Side::Row,
        ),
        Method::BadBroyden => rates::rho(
            data,
            &identity,
            &rule.discrete_sampling(data, &identity, Side::Col)?,
            Side::Col,
        ),
        Method::Aip | Method::Bfgs => {
            let w = WeightSpec::InverseOfA.resolve(data)?;
            rates::rho(data, &w, &rule.discrete_sampling(data, &w, Side::Row)?, Side::Row)
        }
        Method::Column | Method::ColumnSym => {
            // AX = I sketched with AV under W = (AᵀA)⁻¹.
            let w = WeightSpec::GramInverseLeft.resolve(data)?;
            let rule = rule.premultiplied();
            rates::rho(data, &w, &rule.discrete_sampling(data, &w, Side::Row)?, Side::Row)
        }
        Method::GoodBroyden => {
            // X⁺ − A = (X − A)(I − Z) with Z the orthogonal projector onto range(S).
            let eye = Matrix::identity(n, n);
            rates::rho(
                &eye,
                &identity,
                &rule.discrete_sampling(data, &identity, Side::Col)?,
                Side::Col,
            )
        }
        Method::Dfp => {
            let ainv = linalg::invert(data)?;
            let w = WeightSpec::InverseOfA.resolve(&ainv)?;
            rates::rho(
                &ainv,
                &w,
                &rule.discrete_sampling(&ainv, &w, Side::Row)?,
                Side::Row,
            )
        }
        Method::AdaRbfgsGauss | Method::AdaRbfgsCols | Method::NewtonSchulz | Method::Mr => {
            unreachable!("rejected above")
        }
    }
}
