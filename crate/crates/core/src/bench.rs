//! Multi-method benchmark runs and their CSV and SVG traces.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::driver::{run_inverter, HistoryPoint, Init, InverterConfig, Method, Termination};
use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{Matrix, ProblemMatrix, WeightSpec};
use crate::sketch::{ProbabilityRule, SketchRule};

/// CSV header of a trace file.
pub const CSV_HEADER: &str = "method,iter,residual,flops,seconds";

#[derive(Debug, Clone, PartialEq)]
pub enum MatrixSource {
    MatrixMarket(PathBuf),
    Libsvm { path: PathBuf, lambda: f64 },
    Synthetic { n: usize, seed: u64 },
    Identity(usize),
}

impl MatrixSource {
    pub fn load(&self) -> Result<ProblemMatrix> {
        match self {
            MatrixSource::MatrixMarket(path) => io::load_matrix_market(path),
            MatrixSource::Libsvm { path, lambda } => io::build_ridge_hessian(path, *lambda),
            MatrixSource::Synthetic { n, seed } => io::gen_synthetic(*n, *seed),
            MatrixSource::Identity(n) => {
                if *n == 0 {
                    return Err(Error::config("identity needs n >= 1"));
                }
                ProblemMatrix::spd(Matrix::identity(*n, *n))
            }
        }
    }
}

/// Starting points for every method of a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicy {
    /// Each method's own default start.
    Paper,
    /// `X₀ = I` for all methods.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub q: Option<usize>,
    pub probabilities: Option<ProbabilityRule>,
    pub weight: Option<WeightSpec>,
    pub rule: Option<SketchRule>,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            q: None,
            probabilities: None,
            weight: None,
            rule: None,
        }
    }

    pub fn with_q(mut self, q: usize) -> Self {
        self.q = Some(q);
        self
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkSpec {
    pub source: MatrixSource,
    pub methods: Vec<MethodSpec>,
    pub tol: f64,
    pub max_iters: usize,
    pub time_budget: Option<f64>,
    pub seed: u64,
    pub trials: usize,
    pub init: InitPolicy,
    pub residual_every: usize,
    /// Disable to make the CSV byte-reproducible.
    pub record_time: bool,
}

impl BenchmarkSpec {
    pub fn new(source: MatrixSource, methods: Vec<MethodSpec>) -> Self {
        Self {
            source,
            methods,
            tol: crate::driver::DEFAULT_TOL,
            max_iters: 10_000,
            time_budget: None,
            seed: 0,
            trials: 1,
            init: InitPolicy::Paper,
            residual_every: crate::driver::DEFAULT_RESIDUAL_EVERY,
            record_time: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("a benchmark needs at least one method"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::config("tolerance must be positive"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials must be at least 1"));
        }
        if let MatrixSource::Synthetic { n, .. } = self.source {
            if n < 2 {
                return Err(Error::config("synthetic matrices need n >= 2"));
            }
        }
        Ok(())
    }

    fn config(&self, m: &MethodSpec, trial: usize) -> InverterConfig {
        let mut c = InverterConfig::new(m.method);
        c.q = m.q;
        c.probabilities = m.probabilities.clone();
        c.weight = m.weight.clone();
        c.rule = m.rule.clone();
        c.tol = self.tol;
        c.max_iters = self.max_iters;
        c.seed = self.seed;
        c.stream = trial as u64;
        c.residual_every = self.residual_every;
        c.record_time = self.record_time;
        c.time_budget = self.time_budget;
        c.init = match self.init {
            InitPolicy::Paper => Init::Paper,
            InitPolicy::Identity => Init::Identity,
        };
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    pub label: String,
    pub method: Method,
    pub trial: usize,
    pub points: Vec<HistoryPoint>,
    pub status: Termination,
}

impl ConvergenceTrace {
    /// Counted flops at the first point with residual at most `tol`.
    pub fn flops_to_reach(&self, tol: f64) -> Option<u64> {
        self.points.iter().find(|p| p.residual <= tol).map(|p| p.flops)
    }

    pub fn final_residual(&self) -> f64 {
        self.points.last().map_or(1.0, |p| p.residual)
    }

    pub fn iterations(&self) -> usize {
        self.points.last().map_or(0, |p| p.k)
    }
}

/// Runs every method in turn on `a`; the trials of one method run
/// concurrently on separate substreams. Failures are recorded in the
/// trace status.
pub fn run_benchmark(spec: &BenchmarkSpec, a: &ProblemMatrix) -> Result<Vec<ConvergenceTrace>> {
    spec.validate()?;
    let mut traces = Vec::new();
    for m in &spec.methods {
        let mut runs: Vec<ConvergenceTrace> = (0..spec.trials)
            .into_par_iter()
            .map(|trial| {
                let label = if spec.trials == 1 {
                    m.method.name().to_string()
                } else {
                    format!("{}#{trial}", m.method)
                };
                let (points, status) = match run_inverter(a, &spec.config(m, trial)) {
                    Ok(run) => (run.state.history, run.termination),
                    Err(e) => (
                        vec![HistoryPoint {
                            k: 0,
                            residual: 1.0,
                            flops: 0,
                            seconds: 0.0,
                        }],
                        Termination::Failed(e.to_string()),
                    ),
                };
                ConvergenceTrace {
                    label,
                    method: m.method,
                    trial,
                    points,
                    status,
                }
            })
            .collect();
        runs.sort_by_key(|t| t.trial);
        traces.extend(runs);
    }
    Ok(traces)
}

/// Loads the spec's matrix and runs it.
pub fn run_benchmark_spec(spec: &BenchmarkSpec) -> Result<(ProblemMatrix, Vec<ConvergenceTrace>)> {
    spec.validate()?;
    let a = spec.source.load()?;
    let traces = run_benchmark(spec, &a)?;
    Ok((a, traces))
}

/// One row per trace point under [`CSV_HEADER`].
pub fn write_csv(out: &mut impl Write, traces: &[ConvergenceTrace]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for t in traces {
        for p in &t.points {
            writeln!(
                out,
                "{},{},{:e},{},{:.6}",
                t.label, p.k, p.residual, p.flops, p.seconds
            )?;
        }
    }
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 60.0;

/// Two panels, residual against seconds and against flops, log-scale y.
pub fn render_svg(traces: &[ConvergenceTrace]) -> String {
    let width = 2.0 * (PANEL_W + MARGIN) + MARGIN;
    let legend_h = 18.0 * traces.len() as f64;
    let height = PANEL_H + 2.0 * MARGIN + legend_h;

    let residuals = traces
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p.residual))
        .filter(|r| *r > 0.0 && r.is_finite());
    let (lo, hi) = residuals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
        (lo.min(r), hi.max(r))
    });
    let (ylo, yhi) = if lo.is_finite() {
        (
            lo.log10().floor(),
            hi.log10().ceil().max(lo.log10().floor() + 1.0),
        )
    } else {
        (-2.0, 0.0)
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let panels: [(&str, fn(&HistoryPoint) -> f64); 2] =
        [("seconds", |p| p.seconds), ("flops", |p| p.flops as f64)];
    for (idx, (axis, xof)) in panels.iter().enumerate() {
        let x0 = MARGIN + idx as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let xmax = traces
            .iter()
            .flat_map(|t| t.points.iter().map(xof))
            .fold(0.0_f64, f64::max);
        let xmax = if xmax > 0.0 { xmax } else { 1.0 };
        let sx = |v: f64| x0 + v / xmax * PANEL_W;
        let sy = |r: f64| {
            let l = r.max(10f64.powf(ylo)).log10();
            y0 + (yhi - l) / (yhi - ylo) * PANEL_H
        };

        let _ = writeln!(
            svg,
            r##"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#333"/>"##
        );
        let mut e = ylo;
        while e <= yhi {
            let y = sy(10f64.powf(e));
            let _ = writeln!(
                svg,
                r##"<line x1="{x0}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
                x0 + PANEL_W,
                x0 - 4.0,
                y + 4.0
            );
            e += 1.0;
        }
        for i in 0..=4 {
            let v = xmax * i as f64 / 4.0;
            let _ = writeln!(
                svg,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.3e}</text>"#,
                sx(v),
                y0 + PANEL_H + 14.0,
                v
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{axis}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 + PANEL_H + 32.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">relative residual vs {axis}</text>"#,
            x0 + PANEL_W / 2.0,
            y0 - 10.0
        );
        for (i, t) in traces.iter().enumerate() {
            let pts: Vec<String> = t
                .points
                .iter()
                .filter(|p| p.residual.is_finite())
                .map(|p| format!("{:.2},{:.2}", sx(xof(p)), sy(p.residual)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                PALETTE[i % PALETTE.len()],
                pts.join(" ")
            );
        }
    }
    for (i, t) in traces.iter().enumerate() {
        let y = PANEL_H + 2.0 * MARGIN + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{MARGIN}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="3"/><text x="{}" y="{}">{} ({})</text>"#,
            MARGIN + 24.0,
            PALETTE[i % PALETTE.len()],
            MARGIN + 30.0,
            y + 4.0,
            t.label,
            t.status.label()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(out: &mut impl Write, traces: &[ConvergenceTrace]) -> Result<()> {
    out.write_all(render_svg(traces).as_bytes())?;
    Ok(())
}
