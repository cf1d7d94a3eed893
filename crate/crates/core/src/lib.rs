//! Stochastic sketch-and-project methods for approximating the inverse of
//! a matrix, the randomized quasi-Newton updates they contain, AdaRBFGS,
//! and the Newton-Schulz and minimal residual baselines.
//!
//! ```
//! use stochinv::{run_inverter, InverterConfig, Matrix, Method, ProblemMatrix, Termination};
//!
//! let a = ProblemMatrix::spd(Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
//! let mut config = InverterConfig::new(Method::Bfgs);
//! config.tol = 1e-8;
//! let run = run_inverter(&a, &config).unwrap();
//! assert_eq!(run.termination, Termination::ToleranceReached);
//! ```

pub mod adarbfgs;
pub mod baselines;
pub mod bench;
pub mod driver;
pub mod error;
pub mod flops;
pub mod io;
pub mod linalg;
pub mod qn;
pub mod rates;
pub mod simi;
pub mod sketch;

pub use adarbfgs::{one_step_rate_bound, reconstruct, FactoredState};
pub use bench::{BenchmarkSpec, ConvergenceTrace, InitPolicy, MatrixSource, MethodSpec};
pub use driver::{
    method_rate, run_inverter, HistoryPoint, Init, InverterConfig, InverterRun, InverterState, Method,
    Termination,
};
pub use error::{Error, Result};
pub use flops::FlopCounter;
pub use linalg::{Matrix, ProblemMatrix, ResolvedWeight, Symmetry, WeightSpec};
pub use rates::RateReport;
pub use sketch::{DiscreteSampling, ProbabilityRule, Sampler, Side, SketchKind, SketchRule, SketchSample};
