//! One runner per experiment kind. Every Monte Carlo section draws its
//! replication streams from a sequential allocator, and all model
//! randomization uses dedicated high stream ids, so a configuration plus a
//! seed fixes every byte of the output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Gamma};

use super::config::*;
use super::CheckOutcome;
use crate::concatenation::{
    concat_generator_check, concat_markov_stratification_check, concat_semigroup_check,
    restarts_ou_mean, restore_invariant_solve, revival_conditional_test, simulate_concatenated,
    BlockSpec, ConcatSpec, RevivalKernel,
};
use crate::error::{Error, Result};
use crate::extended_state::{
    apply_extended, extend_function, extend_kernel, ExtState, StateSpaceTag, SubKernel,
};
use crate::functionals::{EventTime, RateFunction};
use crate::killing::{
    exit_joint_histogram, killed_generator_check, killed_semigroup_mc,
    markov_stratification_check, sample_killed, BaseModel, EstimatorMode, KillRule, KillSpec,
    Observable,
};
use crate::mat;
use crate::parallel::replicate;
use crate::process_models::{ctmc_semigroup_exact, DiffusionModel, RateModel, RngStream};
use crate::verification::{ks_statistic, ks_two_sample, EstimatorReport};

/// Stream ids below this belong to replications; model randomization and
/// other setup draws live above it.
const SETUP_STREAM_BASE: u64 = 1 << 48;

struct Streams {
    seed: u64,
    next: u64,
    next_setup: u64,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            next: 0,
            next_setup: SETUP_STREAM_BASE,
        }
    }

    fn replications(&mut self, n: usize) -> RngStream {
        let base = self.next;
        self.next += n as u64;
        RngStream::new(self.seed, base)
    }

    fn setup(&mut self) -> ChaCha8Rng {
        let id = self.next_setup;
        self.next_setup += 1;
        RngStream::new(self.seed, id).rng()
    }
}

pub(super) fn run(
    config: &ExperimentConfig,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let mut streams = Streams::new(config.seed);
    match &config.params {
        ExperimentParams::ExtendCheck(p) => extend_check(p, &mut streams),
        ExperimentParams::KillSemigroup(p) => kill_semigroup(config, p, &mut streams, jobs),
        ExperimentParams::ExitJoint(p) => exit_joint(config, p, &mut streams, jobs),
        ExperimentParams::GeneratorKill(p) => generator_kill(config, p, &mut streams),
        ExperimentParams::Concat(p) => concat(config, p, &mut streams, jobs),
        ExperimentParams::Revival(p) => revival(config, p, &mut streams, jobs),
        ExperimentParams::RestoreInvariant(p) => restore_invariant(config, p, &mut streams, jobs),
        ExperimentParams::RestartsFormula(p) => restarts_formula(config, p, &mut streams, jobs),
    }
}

fn random_substochastic(size: usize, rng: &mut ChaCha8Rng) -> SubKernel {
    let tag = StateSpaceTag::new(0, size).unwrap();
    let rows = (0..size)
        .map(|_| {
            let raw: Vec<f64> = (0..size).map(|_| rng.random::<f64>()).collect();
            let total: f64 = raw.iter().sum();
            let mass: f64 = rng.random::<f64>();
            raw.into_iter().map(|v| v * mass / total).collect()
        })
        .collect();
    SubKernel::new(tag, rows).expect("rows are substochastic by construction")
}

fn random_rate_matrix(
    id: u32,
    size: usize,
    range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<RateModel> {
    let mut rows = vec![vec![0.0; size]; size];
    for i in 0..size {
        for j in 0..size {
            if i != j {
                rows[i][j] = range.0 + (range.1 - range.0) * rng.random::<f64>();
            }
        }
    }
    RateModel::from_off_diagonal(StateSpaceTag::new(id, size)?, rows)
}

fn random_probability_vector(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..size).map(|_| 0.1 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn uniform_in(range: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    range.0 + (range.1 - range.0) * rng.random::<f64>()
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(header).expect("in-memory csv");
    for row in rows {
        out.write_record(row).expect("in-memory csv");
    }
    String::from_utf8(out.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn ctmc_kill_spec(rate_matrix: &[Vec<f64>], kill_rates: &[f64], tag: u32) -> Result<KillSpec> {
    let model = RateModel::new(
        StateSpaceTag::new(tag, rate_matrix.len())?,
        rate_matrix.to_vec(),
    )?;
    KillSpec::new(
        BaseModel::Ctmc(model),
        KillRule::ExpRate(RateFunction::discrete(kill_rates.to_vec())?),
    )
}

fn constant_rate_of(kill_rates: &[f64]) -> Result<f64> {
    let c = kill_rates
        .first()
        .copied()
        .ok_or_else(|| Error::Configuration("empty kill-rate vector".into()))?;
    if kill_rates.iter().any(|&v| (v - c).abs() > 1e-12) || c <= 0.0 {
        return Err(Error::Configuration(
            "this section needs a constant positive kill rate".into(),
        ));
    }
    Ok(c)
}

// ---------------------------------------------------------------------------
// extend-check

fn extend_check(
    p: &ExtendCheckParams,
    streams: &mut Streams,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    if p.min_size < 1 || p.max_size < p.min_size {
        return Err(Error::Configuration("bad kernel size range".into()));
    }
    let mut rng = streams.setup();
    let mut max_row_dev = 0.0f64;
    let mut max_identity_dev = 0.0f64;
    let mut dead_row_exact = true;
    let mut rows = Vec::with_capacity(p.count);
    for i in 0..p.count {
        let size = rng.random_range(p.min_size..=p.max_size);
        let kernel = random_substochastic(size, &mut rng);
        let ext = extend_kernel(&kernel);

        let row_dev = ext
            .rows()
            .iter()
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0f64, f64::max);
        let dead = &ext.rows()[size];
        dead_row_exact &= dead[..size].iter().all(|&v| v == 0.0) && dead[size] == 1.0;

        // f extended with a nonzero dead value, checked against
        // k(f|_E - f(dead)) + f(dead)
        let f: Vec<f64> = (0..size).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
        let dead_value = 4.0 * rng.random::<f64>() - 2.0;
        let mut fstar = extend_function(&f);
        fstar[size] = dead_value;
        let lhs = apply_extended(&ext, &fstar)?;
        let shifted: Vec<f64> = f.iter().map(|v| v - dead_value).collect();
        let rhs = kernel.apply(&shifted)?;
        let identity_dev = (0..size)
            .map(|j| (lhs[j] - (rhs[j] + dead_value)).abs())
            .fold((lhs[size] - dead_value).abs(), f64::max);

        max_row_dev = max_row_dev.max(row_dev);
        max_identity_dev = max_identity_dev.max(identity_dev);
        rows.push(vec![
            i.to_string(),
            size.to_string(),
            row_dev.to_string(),
            identity_dev.to_string(),
        ]);
    }
    let checks = vec![
        CheckOutcome::new(
            "extension rows are Markov",
            max_row_dev <= p.tolerance,
            Some(max_row_dev),
            Some(p.tolerance),
            format!("max |row sum - 1| over {} random kernels", p.count),
        ),
        CheckOutcome::new(
            "cemetery row is the exact unit vector",
            dead_row_exact,
            None,
            None,
            "checked bitwise on every extension",
        ),
        CheckOutcome::new(
            "extension identity",
            max_identity_dev <= p.tolerance,
            Some(max_identity_dev),
            Some(p.tolerance),
            "max deviation of k* f* from k(f*|_E - f*(dead)) + f*(dead)",
        ),
    ];
    let table = csv_table(
        &["kernel", "size", "row_sum_dev", "identity_dev"],
        &rows,
    );
    Ok((checks, vec![("extend_check.csv".into(), table)]))
}

// ---------------------------------------------------------------------------
// kill-semigroup

fn kill_semigroup(
    config: &ExperimentConfig,
    p: &KillSemigroupParams,
    streams: &mut Streams,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let spec = ctmc_kill_spec(&p.rate_matrix, &p.kill_rates, 0)?;
    let model = spec.model.ctmc().expect("built as a chain").clone();
    let states = model.size();
    let x0 = ExtState::Discrete { tag: 0, index: p.x0 };
    let thresholds = &config.thresholds;
    let mut checks = Vec::new();
    let mut tables = Vec::new();

    if let Some(ks) = &p.lifetime_ks {
        let c = constant_rate_of(&p.kill_rates)?;
        let stream = streams.replications(p.n);
        let lifetimes = replicate(jobs, p.n, |i| {
            let mut rng = stream.offset(i as u64).rng();
            let sample = sample_killed(&spec, &x0, ks.horizon, &mut rng)?;
            Ok(sample.lifetime)
        })?;
        let observed: Vec<f64> = lifetimes.iter().filter_map(EventTime::time).collect();
        let censored = p.n - observed.len();
        let (d, pv) = ks_statistic(&observed, |x| 1.0 - (-c * x).exp())?;
        checks.push(CheckOutcome::new(
            "lifetime law is Exp(c)",
            pv > thresholds.p_min && censored * 1000 < p.n,
            Some(pv),
            Some(thresholds.p_min),
            format!("KS D = {d:.5} over {} lifetimes, {censored} censored", observed.len()),
        ));
    }

    if p.mc_vs_exact || p.hard_vs_weighted {
        let mut estimate_rows = Vec::new();
        for &t in &p.t_grid {
            let exact = ctmc_semigroup_exact(&model, Some(&p.kill_rates), t)?;
            for basis in 0..states {
                let mut f = vec![0.0; states];
                f[basis] = 1.0;
                let reference = exact.rows()[p.x0][basis];
                let observable = Observable::Discrete(f);

                let weighted = killed_semigroup_mc(
                    &spec,
                    &observable,
                    t,
                    &x0,
                    p.n,
                    EstimatorMode::Weighted,
                    streams.replications(p.n),
                    jobs,
                )?;
                push_estimate_row(&mut estimate_rows, t, basis, "weighted", &weighted, reference);
                if p.mc_vs_exact {
                    let z = weighted.z_against(reference);
                    checks.push(CheckOutcome::new(
                        format!("weighted vs exact (t={t}, f=e{basis})"),
                        z <= thresholds.ci_multiplier,
                        Some(z),
                        Some(thresholds.ci_multiplier),
                        format!("mean {:.6} vs exact {:.6}", weighted.mean, reference),
                    ));
                }

                if p.hard_vs_weighted {
                    let hard = killed_semigroup_mc(
                        &spec,
                        &observable,
                        t,
                        &x0,
                        p.n,
                        EstimatorMode::Hard,
                        streams.replications(p.n),
                        jobs,
                    )?;
                    push_estimate_row(&mut estimate_rows, t, basis, "hard", &hard, reference);
                    let combined =
                        (weighted.stderr.powi(2) + hard.stderr.powi(2)).sqrt().max(1e-300);
                    let z = (weighted.mean - hard.mean).abs() / combined;
                    checks.push(CheckOutcome::new(
                        format!("hard vs weighted (t={t}, f=e{basis})"),
                        z <= thresholds.ci_multiplier,
                        Some(z),
                        Some(thresholds.ci_multiplier),
                        format!("hard {:.6} vs weighted {:.6}", hard.mean, weighted.mean),
                    ));
                }
            }
        }
        tables.push((
            "estimates.csv".into(),
            csv_table(
                &["t", "f_index", "mode", "mean", "stderr", "exact", "z"],
                &estimate_rows,
            ),
        ));
    }

    if let Some(strat) = &p.markov_strat {
        let stream = streams.replications(p.n);
        let report = markov_stratification_check(
            &spec,
            p.x0,
            strat.u,
            strat.s,
            strat.t,
            strat.condition_state,
            p.n,
            stream,
            jobs,
        )?;
        checks.push(CheckOutcome::new(
            "killed chain forgets its history",
            report.p > thresholds.p_min,
            Some(report.p),
            Some(thresholds.p_min),
            format!(
                "chi2 = {:.3}, dof = {}, {} conditioned samples",
                report.chi2, report.dof, report.conditioned
            ),
        ));
    }

    Ok((checks, tables))
}

fn push_estimate_row(
    rows: &mut Vec<Vec<String>>,
    t: f64,
    basis: usize,
    mode: &str,
    report: &EstimatorReport,
    exact: f64,
) {
    rows.push(vec![
        t.to_string(),
        basis.to_string(),
        mode.into(),
        report.mean.to_string(),
        report.stderr.to_string(),
        exact.to_string(),
        report.z_against(exact).to_string(),
    ]);
}

// ---------------------------------------------------------------------------
// exit-joint

fn exit_joint(
    config: &ExperimentConfig,
    p: &ExitJointParams,
    streams: &mut Streams,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let spec = ctmc_kill_spec(&p.rate_matrix, &p.kill_rates, 0)?;
    let stream = streams.replications(p.n);
    let report = exit_joint_histogram(&spec, p.x0, p.n, &p.bins, stream, jobs)?;
    let checks = vec![CheckOutcome::new(
        "lifetime/exit-point joint law matches the quadrature oracle",
        report.p > config.thresholds.p_min,
        Some(report.p),
        Some(config.thresholds.p_min),
        format!(
            "chi2 = {:.3} over {} bins x {} states (+ censored cell, mass {:.4})",
            report.chi2,
            report.bins.len(),
            report.states,
            report.censored_oracle
        ),
    )];
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let table = String::from_utf8(csv).expect("csv is utf-8");
    Ok((checks, vec![("exit_joint.csv".into(), table)]))
}

// ---------------------------------------------------------------------------
// generator-kill

fn generator_kill(
    config: &ExperimentConfig,
    p: &GeneratorKillParams,
    streams: &mut Streams,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let mut rng = streams.setup();
    let mut checks = Vec::new();
    let mut slope_rows = Vec::new();
    let mut error_rows = Vec::new();
    for index in 0..p.models {
        let model = random_rate_matrix(0, p.size, p.rate_range, &mut rng)?;
        let kill: Vec<f64> = (0..p.size).map(|_| uniform_in(p.kill_range, &mut rng)).collect();
        let f: Vec<f64> = (0..p.size).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let spec = KillSpec::new(
            BaseModel::Ctmc(model),
            KillRule::ExpRate(RateFunction::discrete(kill)?),
        )?;
        let outcome = killed_generator_check(&spec, &f, &p.hs, config.thresholds.slope_band);
        match outcome {
            Ok(report) => {
                for &(h, err) in &report.points {
                    error_rows.push(vec![index.to_string(), h.to_string(), err.to_string()]);
                }
                slope_rows.push(vec![index.to_string(), report.slope.to_string(), "pass".into()]);
                checks.push(CheckOutcome::new(
                    format!("killed generator slope (model {index})"),
                    true,
                    Some(report.slope),
                    None,
                    format!("band [{}, {}]", report.band.0, report.band.1),
                ));
            }
            Err(Error::GeneratorMismatch { slope, lo, hi, table }) => {
                for &(h, err) in &table {
                    error_rows.push(vec![index.to_string(), h.to_string(), err.to_string()]);
                }
                slope_rows.push(vec![index.to_string(), slope.to_string(), "fail".into()]);
                checks.push(CheckOutcome::new(
                    format!("killed generator slope (model {index})"),
                    false,
                    Some(slope),
                    None,
                    format!("slope outside [{lo}, {hi}]"),
                ));
            }
            Err(other) => return Err(other),
        }
    }
    let tables = vec![
        (
            "generator_slopes.csv".into(),
            csv_table(&["model", "slope", "verdict"], &slope_rows),
        ),
        (
            "generator_errors.csv".into(),
            csv_table(&["model", "h", "error"], &error_rows),
        ),
    ];
    Ok((checks, tables))
}

// ---------------------------------------------------------------------------
// concat

fn concat(
    config: &ExperimentConfig,
    p: &ConcatParams,
    streams: &mut Streams,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let kill = ctmc_kill_spec(&p.rate_matrix, &p.kill_rates, 0)?;
    let spec = ConcatSpec::cyclic(
        BlockSpec::new(kill),
        RevivalKernel::constant(p.mu.clone())?,
        p.horizon,
    )?;
    let x0 = ExtState::Discrete { tag: 0, index: p.x0 };
    let thresholds = &config.thresholds;
    let mut checks = Vec::new();
    let mut tables = Vec::new();

    if let Some(gamma) = &p.gamma_ks {
        let c = constant_rate_of(&p.kill_rates)?;
        let stream = streams.replications(gamma.n);
        let k = gamma.k;
        let sigmas = replicate(jobs, gamma.n, |i| {
            let mut rng = stream.offset(i as u64).rng();
            let sample = simulate_concatenated(&spec, &x0, &mut rng)?;
            Ok(sample.renewals.get(k - 1).map(|r| r.sigma))
        })?;
        let observed: Vec<f64> = sigmas.iter().flatten().copied().collect();
        let censored = gamma.n - observed.len();
        let law = Gamma::new(k as f64, c).map_err(|e| Error::Configuration(e.to_string()))?;
        let (d, pv) = ks_statistic(&observed, |x| law.cdf(x))?;
        checks.push(CheckOutcome::new(
            format!("renewal time sigma_{k} is Gamma({k}, c)"),
            pv > thresholds.p_min && censored * 1000 < gamma.n,
            Some(pv),
            Some(thresholds.p_min),
            format!("KS D = {d:.5} over {} renewals, {censored} censored", observed.len()),
        ));
        // event log of the first sample, as a worked example of the export
        let mut rng = stream.rng();
        let sample = simulate_concatenated(&spec, &x0, &mut rng)?;
        let mut buf = Vec::new();
        sample.write_event_csv(&mut buf)?;
        tables.push(("events.csv".into(), String::from_utf8(buf).expect("csv is utf-8")));
    }

    if let Some(sg) = &p.semigroup {
        let stream = streams.replications(sg.n);
        let report = concat_semigroup_check(&spec, &sg.f, sg.t, p.x0, sg.n, stream, jobs)?;
        checks.push(CheckOutcome::new(
            format!("restore chain matches the restart formula (t={})", sg.t),
            report.z <= thresholds.ci_multiplier,
            Some(report.z),
            Some(thresholds.ci_multiplier),
            format!("mc {:.6} vs formula {:.6}", report.mc.mean, report.formula),
        ));
    }

    if let Some(gen) = &p.generator {
        let mut rng = streams.setup();
        let mut slope_rows = Vec::new();
        for index in 0..gen.models {
            let model = random_rate_matrix(0, gen.size, gen.rate_range, &mut rng)?;
            let c = uniform_in(gen.kill_range, &mut rng);
            let mu = random_probability_vector(gen.size, &mut rng);
            let f: Vec<f64> = (0..gen.size).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            let block = BlockSpec::new(KillSpec::new(
                BaseModel::Ctmc(model),
                KillRule::ExpRate(RateFunction::constant(c, gen.size)?),
            )?);
            let gen_spec =
                ConcatSpec::cyclic(block, RevivalKernel::constant(mu)?, p.horizon)?;
            let outcome = concat_generator_check(&gen_spec, &f, &gen.hs, thresholds.slope_band);
            match outcome {
                Ok(report) => {
                    slope_rows.push(vec![
                        index.to_string(),
                        report.slope.to_string(),
                        "pass".into(),
                    ]);
                    checks.push(CheckOutcome::new(
                        format!("restore generator slope (model {index})"),
                        true,
                        Some(report.slope),
                        None,
                        format!("band [{}, {}]", report.band.0, report.band.1),
                    ));
                }
                Err(Error::GeneratorMismatch { slope, lo, hi, .. }) => {
                    slope_rows.push(vec![index.to_string(), slope.to_string(), "fail".into()]);
                    checks.push(CheckOutcome::new(
                        format!("restore generator slope (model {index})"),
                        false,
                        Some(slope),
                        None,
                        format!("slope outside [{lo}, {hi}]"),
                    ));
                }
                Err(other) => return Err(other),
            }
        }
        tables.push((
            "restore_generator_slopes.csv".into(),
            csv_table(&["model", "slope", "verdict"], &slope_rows),
        ));
    }

    if let Some(strat) = &p.markov_strat {
        let stream = streams.replications(strat.n);
        let report = concat_markov_stratification_check(
            &spec,
            p.x0,
            strat.u,
            strat.s,
            strat.t,
            strat.condition_state,
            strat.n,
            stream,
            jobs,
        )?;
        checks.push(CheckOutcome::new(
            "restore chain forgets its history",
            report.p > thresholds.p_min,
            Some(report.p),
            Some(thresholds.p_min),
            format!(
                "chi2 = {:.3}, dof = {}, {} conditioned samples",
                report.chi2, report.dof, report.conditioned
            ),
        ));
    }

    if let Some(iid) = &p.lifetimes_iid {
        let stream = streams.replications(iid.n);
        let pairs = replicate(jobs, iid.n, |i| {
            let mut rng = stream.offset(i as u64).rng();
            let sample = simulate_concatenated(&spec, &x0, &mut rng)?;
            Ok(match (sample.renewals.first(), sample.renewals.get(1)) {
                (Some(a), Some(b)) => Some((a.block_lifetime, b.block_lifetime)),
                _ => None,
            })
        })?;
        let first: Vec<f64> = pairs.iter().flatten().map(|(a, _)| *a).collect();
        let second: Vec<f64> = pairs.iter().flatten().map(|(_, b)| *b).collect();
        let (d, pv) = ks_two_sample(&first, &second)?;
        checks.push(CheckOutcome::new(
            "block lifetimes across renewals are identically distributed",
            pv > thresholds.p_min,
            Some(pv),
            Some(thresholds.p_min),
            format!("two-sample KS D = {d:.5} over {} pairs", first.len()),
        ));
    }

    Ok((checks, tables))
}

// ---------------------------------------------------------------------------
// revival

fn revival(
    config: &ExperimentConfig,
    p: &RevivalParams,
    streams: &mut Streams,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let kill1 = ctmc_kill_spec(&p.block1.rate_matrix, &p.block1.kill_rates, 0)?;
    let kill2 = ctmc_kill_spec(&p.block2.rate_matrix, &p.block2.kill_rates, 1)?;
    let exit_states = p.block1.rate_matrix.len();
    let next_states = p.block2.rate_matrix.len();
    let mu_rows = match &p.mu_matrix {
        Some(rows) => rows.clone(),
        None => {
            let mut rng = streams.setup();
            (0..exit_states)
                .map(|_| random_probability_vector(next_states, &mut rng))
                .collect()
        }
    };
    let mu = RevivalKernel::matrix(mu_rows.clone())?;
    let spec = ConcatSpec::blocks(
        vec![BlockSpec::new(kill1), BlockSpec::new(kill2)],
        vec![mu.clone()],
        p.horizon,
    )?;
    let x0 = ExtState::Discrete { tag: 0, index: p.x0 };
    let stream = streams.replications(p.n);
    let samples = replicate(jobs, p.n, |i| {
        let mut rng = stream.offset(i as u64).rng();
        simulate_concatenated(&spec, &x0, &mut rng)
    })?;
    let rows = revival_conditional_test(
        &samples,
        p.renewal_index,
        &mu,
        exit_states,
        next_states,
        p.min_per_state,
    )?;
    let mut checks = Vec::new();
    let mut table_rows = Vec::new();
    for row in &rows {
        if row.skipped {
            checks.push(CheckOutcome::new(
                format!("revival law from exit state {} (skipped)", row.exit_state),
                true,
                None,
                None,
                format!("only {} samples, fewer than {}", row.n, p.min_per_state),
            ));
        } else {
            checks.push(CheckOutcome::new(
                format!("revival law from exit state {}", row.exit_state),
                row.p.unwrap() > config.thresholds.p_min,
                row.p,
                Some(config.thresholds.p_min),
                format!("chi2 = {:.3} over {} revivals", row.chi2.unwrap(), row.n),
            ));
        }
        for (y, &count) in row.counts.iter().enumerate() {
            table_rows.push(vec![
                row.exit_state.to_string(),
                y.to_string(),
                count.to_string(),
                (count as f64 / row.n.max(1) as f64).to_string(),
                mu_rows[row.exit_state][y].to_string(),
            ]);
        }
    }
    let table = csv_table(
        &["exit_state", "revival_state", "count", "empirical", "mu"],
        &table_rows,
    );
    Ok((checks, vec![("revival.csv".into(), table)]))
}

// ---------------------------------------------------------------------------
// restore-invariant

fn restore_invariant(
    config: &ExperimentConfig,
    p: &RestoreInvariantParams,
    streams: &mut Streams,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let mut rng = streams.setup();
    let mut checks = Vec::new();
    let mut rows = Vec::new();
    let occupations = (0..p.models)
        .map(|_| {
            let size = rng.random_range(p.min_size..=p.max_size);
            let model = random_rate_matrix(0, size, p.rate_range, &mut rng)?;
            let c: Vec<f64> = (0..size).map(|_| uniform_in(p.kill_range, &mut rng)).collect();
            let mu = random_probability_vector(size, &mut rng);
            Ok((model, c, mu))
        })
        .collect::<Result<Vec<_>>>()?;

    // the long single-path runs are the expensive part; farm them out but keep
    // results in model order
    let stream_bases: Vec<RngStream> =
        (0..p.models).map(|_| streams.replications(1)).collect();
    let runs = replicate(jobs, p.models, |index| {
        let (model, c, mu) = &occupations[index];
        let pi = restore_invariant_solve(model, c, mu)?;
        let residual = mat::inf_norm(&mat::vec_mat(
            &pi,
            &crate::concatenation::restore_generator(model, c, mu),
        ));
        let kill = KillSpec::new(
            BaseModel::Ctmc(model.clone()),
            KillRule::ExpRate(RateFunction::discrete(c.clone())?),
        )?;
        let spec = ConcatSpec::cyclic(
            BlockSpec::new(kill),
            RevivalKernel::constant(mu.clone())?,
            p.horizon,
        )?;
        let mut rng = stream_bases[index].rng();
        let sample = simulate_concatenated(
            &spec,
            &ExtState::Discrete { tag: 0, index: 0 },
            &mut rng,
        )?;
        let occupation = sample.occupation(model.size())?;
        Ok((pi, residual, occupation))
    })?;

    for (index, (pi, residual, occupation)) in runs.into_iter().enumerate() {
        let tv: f64 = occupation
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        checks.push(CheckOutcome::new(
            format!("invariant solve residual (model {index})"),
            residual < 1e-10,
            Some(residual),
            Some(1e-10),
            "inf-norm of pi^T A_restore",
        ));
        checks.push(CheckOutcome::new(
            format!("long-run occupation near invariant law (model {index})"),
            tv <= config.thresholds.tv_max,
            Some(tv),
            Some(config.thresholds.tv_max),
            format!("total variation over horizon {}", p.horizon),
        ));
        for (state, (pv, ov)) in pi.iter().zip(&occupation).enumerate() {
            rows.push(vec![
                index.to_string(),
                state.to_string(),
                pv.to_string(),
                ov.to_string(),
            ]);
        }
    }
    let table = csv_table(&["model", "state", "pi", "occupation"], &rows);
    Ok((checks, vec![("invariant.csv".into(), table)]))
}

// ---------------------------------------------------------------------------
// restarts-formula

fn restarts_formula(
    config: &ExperimentConfig,
    p: &RestartsParams,
    streams: &mut Streams,
    jobs: usize,
) -> Result<(Vec<CheckOutcome>, Vec<(String, String)>)> {
    let thresholds = &config.thresholds;
    let mut checks = Vec::new();

    if let Some(ctmc) = &p.ctmc {
        let size = ctmc.rate_matrix.len();
        let kill = ctmc_kill_spec(&ctmc.rate_matrix, &vec![ctmc.c; size], 0)?;
        let spec = ConcatSpec::cyclic(
            BlockSpec::new(kill),
            RevivalKernel::constant(ctmc.mu.clone())?,
            ctmc.t * 1.5,
        )?;
        let stream = streams.replications(ctmc.n);
        let report =
            concat_semigroup_check(&spec, &ctmc.f, ctmc.t, ctmc.x0, ctmc.n, stream, jobs)?;
        checks.push(CheckOutcome::new(
            "finite-state restart chain matches the closed formula",
            report.z <= thresholds.ci_multiplier,
            Some(report.z),
            Some(thresholds.ci_multiplier),
            format!("mc {:.6} vs formula {:.6}", report.mc.mean, report.formula),
        ));
    }

    if let Some(ou) = &p.ou {
        let model = DiffusionModel::ornstein_uhlenbeck(ou.theta, ou.sigma, ou.dt)?;
        let c = ou.c;
        let kill = KillSpec::new(
            BaseModel::Diffusion(model),
            KillRule::ExpRate(RateFunction::continuous(move |_| c, c)?),
        )?;
        let spec = ConcatSpec::cyclic(
            BlockSpec::new(kill),
            RevivalKernel::dirac(ou.restart_point),
            ou.t + 10.0 * ou.dt,
        )?;
        let stream = streams.replications(ou.n);
        let t = ou.t;
        let values = replicate(jobs, ou.n, |i| {
            let mut rng = stream.offset(i as u64).rng();
            let sample = simulate_concatenated(&spec, &ExtState::Real(ou.x0), &mut rng)?;
            sample.eval(t)?.real_value().ok_or_else(|| {
                Error::Configuration("restarted diffusion must stay alive".into())
            })
        })?;
        let mc = EstimatorReport::from_values(
            format!("ou-restart|t={t}"),
            &values,
            stream.master_seed,
            stream.stream_id,
        );
        let expected = restarts_ou_mean(ou.theta, ou.c, ou.x0, ou.restart_point, ou.t);
        let tolerance = (thresholds.ci_multiplier * mc.stderr).max(5.0 * ou.dt);
        let deviation = (mc.mean - expected).abs();
        checks.push(CheckOutcome::new(
            "restarted Ornstein-Uhlenbeck mean matches the closed form",
            deviation <= tolerance,
            Some(deviation),
            Some(tolerance),
            format!("mc {:.6} vs closed form {expected:.6}", mc.mean),
        ));
    }

    if checks.is_empty() {
        return Err(Error::Configuration(
            "restarts-formula needs at least one of `ctmc`, `ou`".into(),
        ));
    }
    Ok((checks, Vec::new()))
}
