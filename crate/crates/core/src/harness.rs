//! Trajectory runner, absorption detection, early-stopping statistics and parameter sweeps.
//!
//! The equilibrium is always the origin (affine games are normalized first), so the
//! distance to equilibrium of a state is its norm.

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Resolved, RunConfig, TraceFormat};
use crate::dynamics::{StepContext, Stepper};
use crate::error::{Error, Result};
use crate::game::JointState;
use crate::perturbation::{make_oracle, OracleKind};

/// Relative inflation applied to radii in every inside/outside test.
pub const ABSORPTION_RTOL: f64 = 1e-9;

pub const TRACE_HEADER: &str = "t,norm_z,norm_theta,norm_omega,perturb_norm,inside_R,avg_iterate_norm";
pub const SWEEP_HEADER: &str = "value,final_norm,predicted_R,entry_time,never_left,error";

fn within(norm: f64, radius: f64) -> bool {
    norm <= radius * (1.0 + ABSORPTION_RTOL)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub norm_z: f64,
    pub norm_theta: f64,
    pub norm_omega: f64,
    pub perturb_norm: f64,
    #[serde(rename = "inside_R")]
    pub inside_r: bool,
    pub avg_iterate_norm: Option<f64>,
}

/// A recorded run: one row per iterate including `t = 0`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Predicted absorption radius used for the `inside_R` column.
    pub radius: Option<f64>,
    /// Predicted number of steps to reach `radius + ε`.
    pub predicted_t: Option<u64>,
    pub final_state: JointState,
}

impl Trace {
    pub fn norms(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.norm_z).collect()
    }

    pub fn final_norm(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.norm_z)
    }

    pub fn absorption(&self) -> Option<AbsorptionReport> {
        let r = self.radius?;
        Some(detect_absorption(&self.norms(), r, self.predicted_t.unwrap_or(0)))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in &self.rows {
            write!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{},",
                r.t, r.norm_z, r.norm_theta, r.norm_omega, r.perturb_norm, r.inside_r
            )?;
            if let Some(a) = r.avg_iterate_norm {
                write!(w, "{a:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.rows {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: W, format: TraceFormat) -> std::io::Result<()> {
        match format {
            TraceFormat::Csv => self.write_csv(w),
            TraceFormat::Jsonl => self.write_jsonl(w),
        }
    }
}

/// Runs a configuration from its initial state for `steps` transitions.
pub fn run(cfg: &RunConfig) -> Result<Trace> {
    let resolved = cfg.resolve()?;
    run_resolved(&resolved, cfg.steps, cfg.record_average_iterate)
}

pub fn run_resolved(r: &Resolved, steps: usize, record_average: bool) -> Result<Trace> {
    let stepper = Stepper::new(&r.game, r.method)?;
    let mut oracle = make_oracle(&r.oracle, r.game.dim())?;
    let radius = r.prediction.as_ref().map(|p| p.radius);
    let predicted_t = r.prediction.as_ref().map(|p| p.iteration_bound);

    let mut sum = record_average.then(|| DVector::zeros(r.game.dim()));
    let mut rows = Vec::with_capacity(steps + 1);
    let mut push = |t: usize, z: &JointState, perturb_norm: f64, sum: &mut Option<DVector<f64>>| {
        let avg = sum.as_mut().map(|s| {
            *s += z.stacked();
            s.norm() / (t + 1) as f64
        });
        let norm_z = z.norm();
        rows.push(TraceRow {
            t,
            norm_z,
            norm_theta: z.norm_theta(),
            norm_omega: z.norm_omega(),
            perturb_norm,
            inside_r: radius.is_some_and(|rad| within(norm_z, rad)),
            avg_iterate_norm: avg,
        });
    };

    push(0, &r.z0, 0.0, &mut sum);
    let mut prev: Option<JointState> = None;
    let mut prev_g: Option<DVector<f64>> = None;
    let mut cur = r.z0.clone();
    for t in 0..steps {
        let ctx = StepContext {
            t,
            current: &cur,
            previous: prev.as_ref(),
            previous_perturbation: prev_g.as_ref(),
        };
        let out = stepper.step(&ctx, &mut oracle)?;
        push(t + 1, &out.state, out.perturb_norm(), &mut sum);
        prev_g = out.perturbations.into_iter().next();
        prev = Some(std::mem::replace(&mut cur, out.state));
    }
    Ok(Trace {
        rows,
        radius,
        predicted_t,
        final_state: cur,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorptionReport {
    pub radius: f64,
    /// First index whose norm is within the (inflated) radius.
    pub entry_time: Option<usize>,
    /// No index after `entry_time` leaves the inflated radius. False without an entry.
    pub never_left: bool,
    pub predicted_t: u64,
}

pub fn detect_absorption(norms: &[f64], radius: f64, predicted_t: u64) -> AbsorptionReport {
    let entry_time = norms.iter().position(|&n| within(n, radius));
    let never_left = entry_time.is_some_and(|e| norms[e..].iter().all(|&n| within(n, radius)));
    AbsorptionReport {
        radius,
        entry_time,
        never_left,
        predicted_t,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EarlyStopStats {
    pub n_steps: usize,
    /// Fraction of steps whose first oracle output pointed against the pre-step state.
    pub frac_negative_alignment: f64,
    /// Fraction of steps that ended strictly closer to the origin than the unperturbed step
    /// from the same state. Ties count as not helpful.
    pub frac_helpful: f64,
}

/// Runs the configuration and, at every step, compares against the unperturbed counterfactual.
pub fn early_stopping_stats(cfg: &RunConfig) -> Result<EarlyStopStats> {
    if cfg.oracle.kind != OracleKind::UniformRandom {
        return Err(Error::Config(format!(
            "early-stopping statistics need a uniform_random oracle, not {}",
            cfg.oracle.kind
        )));
    }
    let r = cfg.resolve()?;
    let stepper = Stepper::new(&r.game, r.method)?;
    let mut oracle = make_oracle(&r.oracle, r.game.dim())?;
    let (mut negative, mut helpful) = (0usize, 0usize);
    let mut prev: Option<JointState> = None;
    let mut prev_g: Option<DVector<f64>> = None;
    let mut cur = r.z0.clone();
    for t in 0..cfg.steps {
        let ctx = StepContext {
            t,
            current: &cur,
            previous: prev.as_ref(),
            previous_perturbation: prev_g.as_ref(),
        };
        let counterfactual = stepper.step_unperturbed(&ctx)?;
        let out = stepper.step(&ctx, &mut oracle)?;
        if let Some(g) = out.perturbations.first() {
            if g.dot(cur.stacked()) < 0.0 {
                negative += 1;
            }
        }
        if out.state.norm() < counterfactual.norm() {
            helpful += 1;
        }
        prev_g = out.perturbations.into_iter().next();
        prev = Some(std::mem::replace(&mut cur, out.state));
    }
    let n = cfg.steps as f64;
    Ok(EarlyStopStats {
        n_steps: cfg.steps,
        frac_negative_alignment: negative as f64 / n,
        frac_helpful: helpful as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    Gamma,
    Eta,
    WidthM,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "gamma" => Ok(SweepParam::Gamma),
            "eta" => Ok(SweepParam::Eta),
            "width_m" => Ok(SweepParam::WidthM),
            other => Err(Error::Config(format!(
                "unsupported sweep parameter {other:?} (expected alpha, gamma, eta or width_m)"
            ))),
        }
    }
}

impl SweepParam {
    fn apply(self, base: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::Alpha => cfg.oracle.alpha = Some(value),
            SweepParam::Gamma => cfg.method.gamma = Some(value),
            SweepParam::Eta => cfg.method.eta = Some(value),
            SweepParam::WidthM => {
                let ntk = cfg
                    .ntk
                    .as_mut()
                    .ok_or_else(|| Error::Config("width_m sweep needs an ntk block".into()))?;
                ntk.m = value;
                cfg.oracle.alpha = None;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_norm: Option<f64>,
    pub predicted_r: Option<f64>,
    pub entry_time: Option<usize>,
    pub never_left: Option<bool>,
    /// Set when this row failed; the other fields are then empty.
    pub error: Option<String>,
}

fn sweep_row(base: &RunConfig, param: SweepParam, value: f64) -> SweepRow {
    let outcome = param.apply(base, value).and_then(|cfg| run(&cfg));
    match outcome {
        Ok(trace) => {
            let absorption = trace.absorption();
            SweepRow {
                value,
                final_norm: Some(trace.final_norm()),
                predicted_r: trace.radius,
                entry_time: absorption.as_ref().and_then(|a| a.entry_time),
                never_left: absorption.map(|a| a.never_left),
                error: None,
            }
        }
        Err(e) => SweepRow {
            value,
            final_norm: None,
            predicted_r: None,
            entry_time: None,
            never_left: None,
            error: Some(e.to_string()),
        },
    }
}

/// One row per value, in input order. Rows run on up to `jobs` threads; a failing row is
/// recorded rather than aborting the sweep.
pub fn sweep(base: &RunConfig, param: SweepParam, values: &[f64], jobs: usize) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if param == SweepParam::WidthM && base.ntk.is_none() {
        return Err(Error::Config("width_m sweep needs an ntk block".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        values
            .par_iter()
            .map(|&v| sweep_row(base, param, v))
            .collect()
    }))
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
        v.as_ref().map_or_else(String::new, |x| x.to_string())
    }
    fn optf(v: Option<f64>) -> String {
        v.map_or_else(String::new, |x| format!("{x:.16e}"))
    }
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        let err = r.error.as_deref().map_or_else(String::new, |e| {
            format!("\"{}\"", e.replace('"', "\"\""))
        });
        writeln!(
            w,
            "{:.16e},{},{},{},{},{}",
            r.value,
            optf(r.final_norm),
            optf(r.predicted_r),
            opt(&r.entry_time),
            opt(&r.never_left),
            err
        )?;
    }
    Ok(())
}
