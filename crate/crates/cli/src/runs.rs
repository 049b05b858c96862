//! Effective runs, single microscopic runs and `(N, Λ)` sweeps.

use std::time::Instant;

use nelson_core::effective::{skg_energy, EffectiveState, SkgIntegrator};
use nelson_core::fock::Mode;
use nelson_core::indicators::{self, GronwallFit, IndicatorReport};
use nelson_core::manybody::{product_initial_state, propagate, NelsonOperator};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{resolve, whole_steps, Kind, RunConfig, Setup};
use crate::error::{Context, HarnessError, Result};
use crate::output::Record;

/// Slack allowed in the density-matrix inequalities checked at every snapshot.
pub const BOUND_SLACK: f64 = 1e-9;

fn steps_per_snapshot(cfg: &RunConfig, step: f64, name: &str) -> Result<usize> {
    whole_steps(cfg.snapshot_interval, step)
        .filter(|&n| n > 0)
        .ok_or_else(|| HarnessError::Config(format!("{name} does not divide snapshot_interval")))
}

fn elapsed(cfg: &RunConfig, start: Instant) -> Option<f64> {
    cfg.record_walltime.then(|| start.elapsed().as_secs_f64())
}

#[derive(Clone, Debug, Serialize)]
pub struct EffectiveSummary {
    #[serde(rename = "Lambda")]
    pub cutoff: f64,
    pub modes: Vec<Mode>,
    pub energy_initial: f64,
    pub max_energy_deviation: f64,
    pub max_norm_drift: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub walltime_s: Option<f64>,
}

pub fn run_effective(cfg: &RunConfig) -> Result<(Vec<Record>, EffectiveSummary)> {
    let start = Instant::now();
    let (_, setups) = resolve(cfg)?;
    let setup = &setups[0];
    let (grid, modes) = (&setup.grid, &setup.modes);
    let integ = SkgIntegrator::new(grid.clone(), modes.clone(), cfg.scheme).context(|| "effective integrator".into())?;
    let per = steps_per_snapshot(cfg, cfg.dt, "dt")?;
    let mut state = EffectiveState::new(setup.phi0.clone(), setup.alpha0.clone());
    let e0 = skg_energy(&state, grid, modes);
    let mut summary = EffectiveSummary {
        cutoff: setup.cutoff,
        modes: modes.modes().to_vec(),
        energy_initial: e0,
        max_energy_deviation: 0.0,
        max_norm_drift: 0.0,
        walltime_s: None,
    };
    let mut records = Vec::new();
    for s in 0..=cfg.snapshots() {
        let t = s as f64 * cfg.snapshot_interval;
        if s > 0 {
            state = integ.evolve(&state, cfg.dt, per).context(|| format!("effective run at t = {t}"))?;
            state.time = t;
        }
        let e = skg_energy(&state, grid, modes);
        summary.max_energy_deviation = summary.max_energy_deviation.max((e - e0).abs());
        summary.max_norm_drift = summary.max_norm_drift.max((grid.l2_norm_sq(&state.phi) - 1.0).abs());
        records.push(Record {
            kind: Kind::Effective.as_str(),
            cutoff: setup.cutoff,
            t,
            energy: Some(e),
            walltime_s: elapsed(cfg, start),
            ..Default::default()
        });
    }
    summary.walltime_s = elapsed(cfg, start);
    Ok((records, summary))
}

/// Outcome of one microscopic run at fixed `(N, Λ)`.
#[derive(Clone, Debug, Serialize)]
pub struct PointSummary {
    #[serde(rename = "N")]
    pub particles: usize,
    #[serde(rename = "Lambda")]
    pub cutoff: f64,
    pub modes: usize,
    pub n_max: usize,
    pub fock_dim: usize,
    pub total_dim: usize,
    pub initial_defect: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gronwall: Option<GronwallFit>,
    pub energy_initial: f64,
    pub max_energy_drift: f64,
    pub max_norm_drift: f64,
    pub max_error_estimate: f64,
    pub effective_energy_drift: f64,
    pub bound_worst_violation: f64,
    pub bounds_hold: bool,
    pub matvecs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub walltime_s: Option<f64>,
}

pub struct PointOutcome {
    pub records: Vec<Record>,
    pub reports: Vec<IndicatorReport>,
    pub summary: PointSummary,
}

/// Propagates `φ₀^{⊗N} ⊗ W(√N α₀)Ω` and the SKG pair side by side,
/// recording indicators at every snapshot.
pub fn run_point(cfg: &RunConfig, setup: &Setup, particles: usize) -> Result<PointOutcome> {
    let start = Instant::now();
    let at = |t: f64| format!("N = {particles}, Lambda = {}, t = {t}", setup.cutoff);
    let (grid, modes, basis) = (&setup.grid, &setup.modes, &setup.basis);
    let op = NelsonOperator::new(grid.clone(), modes.clone(), basis.clone(), particles).context(|| at(0.0))?;
    let (mut psi, defect) =
        product_initial_state(&setup.phi0, &setup.alpha0, particles, grid, basis, cfg.truncation_tol)
            .context(|| at(0.0))?;
    let integ = SkgIntegrator::new(grid.clone(), modes.clone(), cfg.scheme).context(|| at(0.0))?;
    let mut eff = EffectiveState::new(setup.phi0.clone(), setup.alpha0.clone());
    let micro_steps = steps_per_snapshot(cfg, cfg.micro_dt, "micro_dt")?;
    let eff_steps = steps_per_snapshot(cfg, cfg.dt, "dt")?;

    let n = particles as f64;
    let e_eff0 = skg_energy(&eff, grid, modes);
    let mut summary = PointSummary {
        particles,
        cutoff: setup.cutoff,
        modes: modes.len(),
        n_max: basis.n_max(),
        fock_dim: basis.len(),
        total_dim: psi.layout().total(),
        initial_defect: defect,
        gronwall: None,
        energy_initial: op.energy(&psi).context(|| at(0.0))?,
        max_energy_drift: 0.0,
        max_norm_drift: 0.0,
        max_error_estimate: 0.0,
        effective_energy_drift: 0.0,
        bound_worst_violation: f64::NEG_INFINITY,
        bounds_hold: true,
        matvecs: 0,
        walltime_s: None,
    };
    let mut records = Vec::new();
    let mut reports = Vec::new();
    for s in 0..=cfg.snapshots() {
        let t = s as f64 * cfg.snapshot_interval;
        if s > 0 {
            let (next, rep) = propagate(&op, &psi, cfg.micro_dt, micro_steps, cfg.krylov_dim, cfg.tol)
                .context(|| at(t))?;
            psi = next.with_time(t);
            summary.max_norm_drift = summary.max_norm_drift.max(rep.max_norm_drift);
            summary.max_error_estimate = summary.max_error_estimate.max(rep.max_error_estimate);
            summary.matvecs += rep.matvecs;
            eff = integ.evolve(&eff, cfg.dt, eff_steps).context(|| at(t))?;
            eff.time = t;
        }
        let mut report = indicators::indicator_report(&psi, &eff, &op).context(|| at(t))?;
        report.time = t;
        let energy = op.energy(&psi).context(|| at(t))?;
        summary.max_energy_drift = summary.max_energy_drift.max((energy - summary.energy_initial).abs());
        summary.effective_energy_drift =
            summary.effective_energy_drift.max((skg_energy(&eff, grid, modes) - e_eff0).abs());
        let bounds = indicators::density_matrix_bounds(&psi, &eff.phi, &eff.alpha, grid, basis).context(|| at(t))?;
        summary.bound_worst_violation = summary.bound_worst_violation.max(bounds.worst_violation());
        records.push(Record {
            kind: Kind::Microscopic.as_str(),
            particles: Some(particles),
            cutoff: setup.cutoff,
            t,
            beta_a: Some(report.beta_a),
            beta_b: Some(report.beta_b),
            beta_c: Some(report.beta_c),
            beta: Some(report.beta),
            beta2: Some(report.beta2),
            tr_dist_10: Some(report.tr_dist_10),
            tr_dist_01: Some(report.tr_dist_01),
            sobolev_dist: Some(report.sobolev_dist),
            mean_boson: Some(report.mean_boson),
            dbeta_a_dt: Some(report.dbeta_a_dt),
            dbeta_b_dt: Some(report.dbeta_b_dt),
            dbeta_c_dt: Some(report.dbeta_c_dt),
            energy: Some(energy / n),
            c_fit: None,
            walltime_s: elapsed(cfg, start),
        });
        reports.push(report);
    }
    summary.bounds_hold = summary.bound_worst_violation <= BOUND_SLACK;
    if reports.len() >= 3 {
        let fit = indicators::gronwall_fit(&reports, particles, setup.cutoff)
            .context(|| format!("Gronwall fit for N = {particles}, Lambda = {}", setup.cutoff))?;
        for r in &mut records {
            r.c_fit = Some(fit.c);
        }
        summary.gronwall = Some(fit);
    }
    summary.walltime_s = elapsed(cfg, start);
    Ok(PointOutcome {
        records,
        reports,
        summary,
    })
}

pub fn run_microscopic(cfg: &RunConfig) -> Result<(Vec<Record>, PointSummary)> {
    let (_, setups) = resolve(cfg)?;
    let particles = cfg.particle_numbers()[0];
    let out = run_point(cfg, &setups[0], particles)?;
    Ok((out.records, out.summary))
}

/// Trace distance versus `N` at the trend time for one cutoff.
#[derive(Clone, Debug, Serialize)]
pub struct Trend {
    #[serde(rename = "Lambda")]
    pub cutoff: f64,
    pub t: f64,
    #[serde(rename = "N")]
    pub particles: Vec<usize>,
    pub tr_dist_10: Vec<f64>,
    pub non_increasing: bool,
    /// Least-squares slope of `log Tr|γ − p|` against `log N`; absent when
    /// fewer than two distinct positive points exist.
    pub log_log_slope: Option<f64>,
    pub label: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub runs: Vec<PointSummary>,
    pub trends: Vec<Trend>,
    pub all_envelopes_valid: bool,
}

pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

pub fn run_sweep(cfg: &RunConfig) -> Result<(Vec<Record>, SweepSummary)> {
    let (_, setups) = resolve(cfg)?;
    let mut ns = cfg.particle_numbers();
    ns.sort_unstable();
    ns.dedup();
    let points: Vec<(usize, usize)> =
        (0..setups.len()).flat_map(|c| ns.iter().map(move |&n| (c, n))).collect();
    let outcomes: Vec<PointOutcome> = points
        .par_iter()
        .map(|&(c, n)| run_point(cfg, &setups[c], n))
        .collect::<Result<_>>()?;

    let trend_index = whole_steps(cfg.trend_time, cfg.snapshot_interval)
        .filter(|&i| i <= cfg.snapshots())
        .ok_or_else(|| HarnessError::Config(format!("trend_time {} is not a snapshot time", cfg.trend_time)))?;
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&outcomes[a].summary, &outcomes[b].summary);
        sa.particles.cmp(&sb.particles).then(sa.cutoff.total_cmp(&sb.cutoff))
    });
    let mut records = Vec::new();
    for &i in &order {
        records.extend(outcomes[i].records.iter().cloned());
    }
    let mut trends = Vec::new();
    for setup in &setups {
        let runs: Vec<&PointOutcome> = order
            .iter()
            .map(|&i| &outcomes[i])
            .filter(|o| o.summary.cutoff == setup.cutoff)
            .collect();
        let particles: Vec<usize> = runs.iter().map(|o| o.summary.particles).collect();
        let dist: Vec<f64> = runs.iter().map(|o| o.reports[trend_index].tr_dist_10).collect();
        let xs: Vec<f64> = particles.iter().map(|&n| n as f64).collect();
        trends.push(Trend {
            cutoff: setup.cutoff,
            t: trend_index as f64 * cfg.snapshot_interval,
            non_increasing: dist.windows(2).all(|w| w[1] <= w[0]),
            log_log_slope: log_log_slope(&xs, &dist),
            particles,
            tr_dist_10: dist,
            label: "indicative",
        });
    }
    let runs: Vec<PointSummary> = order.iter().map(|&i| outcomes[i].summary.clone()).collect();
    let all_envelopes_valid = runs
        .iter()
        .all(|r| r.gronwall.map(|g| g.valid && g.valid2).unwrap_or(false));
    let records = records
        .into_iter()
        .map(|mut r| {
            r.kind = Kind::Sweep.as_str();
            r
        })
        .collect();
    Ok((
        records,
        SweepSummary {
            runs,
            trends,
            all_envelopes_valid,
        },
    ))
}
