//! Splicing killed blocks into one process: each block runs until its
//! lifetime, the exit point (the left limit just before death) feeds a revival
//! kernel, and the next block starts from the drawn revival point with the
//! clock shifted. The cyclic variant reuses one block and one kernel
//! indefinitely, which is the restore chain.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::extended_state::{ExtState, ROW_SUM_TOLERANCE};
use crate::functionals::{EventTime, RateFunction, TerminalRule};
use crate::killing::{BaseModel, KillRule, KillSpec};
use crate::mat;
use crate::parallel::replicate;
use crate::process_models::{ctmc_semigroup_exact, expm_subgenerator, Path, RateModel, RngStream};
use crate::verification::{adaptive_simpson, chi_square, fit_slope, EstimatorReport, SlopeReport};

/// Hard upper bound on explicit block lists.
pub const MAX_BLOCKS: usize = 64;

/// Conditional law of the revival point given the exit point.
#[derive(Clone)]
pub enum RevivalKernel {
    /// Row-stochastic matrix: exit space row, next space column.
    Matrix { rows: Vec<Vec<f64>> },
    /// State-independent distribution over the next finite space.
    ConstantDiscrete { weights: Vec<f64> },
    /// Diffusion revival: maps the exit point to a sampled next point.
    RealSampler(Arc<dyn Fn(f64, &mut dyn RngCore) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for RevivalKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RevivalKernel::Matrix { rows } => {
                f.debug_struct("RevivalKernel::Matrix").field("rows", rows).finish()
            }
            RevivalKernel::ConstantDiscrete { weights } => f
                .debug_struct("RevivalKernel::ConstantDiscrete")
                .field("weights", weights)
                .finish(),
            RevivalKernel::RealSampler(_) => f.write_str("RevivalKernel::RealSampler"),
        }
    }
}

fn check_stochastic(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(0.0..=1.0 + ROW_SUM_TOLERANCE).contains(&p) {
            return Err(Error::InvalidKernel(format!(
                "{what}: entry {p} outside [0, 1]"
            )));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::InvalidKernel(format!(
            "{what}: row sums to {sum}, not 1"
        )));
    }
    Ok(())
}

impl RevivalKernel {
    pub fn matrix(rows: Vec<Vec<f64>>) -> Result<Self> {
        for row in &rows {
            check_stochastic(row, "revival kernel")?;
        }
        Ok(RevivalKernel::Matrix { rows })
    }

    pub fn constant(weights: Vec<f64>) -> Result<Self> {
        check_stochastic(&weights, "revival distribution")?;
        Ok(RevivalKernel::ConstantDiscrete { weights })
    }

    /// Revive at the fixed real point `x`.
    pub fn dirac(x: f64) -> Self {
        RevivalKernel::RealSampler(Arc::new(move |_, _| x))
    }

    /// Probability row for a finite exit state, when the kernel is discrete.
    pub fn row(&self, exit_state: usize) -> Option<&[f64]> {
        match self {
            RevivalKernel::Matrix { rows } => rows.get(exit_state).map(|r| r.as_slice()),
            RevivalKernel::ConstantDiscrete { weights } => Some(weights),
            RevivalKernel::RealSampler(_) => None,
        }
    }

    fn sample<R: Rng>(&self, exit: &ExtState, next_tag: u32, rng: &mut R) -> Result<ExtState> {
        match (self, exit) {
            (RevivalKernel::Matrix { rows }, ExtState::Discrete { index, .. }) => {
                let row = rows.get(*index).ok_or_else(|| {
                    Error::Configuration(format!(
                        "revival kernel has no row for exit state {index}"
                    ))
                })?;
                Ok(ExtState::Discrete {
                    tag: next_tag,
                    index: sample_categorical(row, rng),
                })
            }
            (RevivalKernel::ConstantDiscrete { weights }, _) => Ok(ExtState::Discrete {
                tag: next_tag,
                index: sample_categorical(weights, rng),
            }),
            (RevivalKernel::RealSampler(f), ExtState::Real(x)) => Ok(ExtState::Real(f(*x, rng))),
            _ => Err(Error::Configuration(
                "revival kernel does not match the exit state kind".into(),
            )),
        }
    }
}

fn sample_categorical<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .unwrap_or(weights.len() - 1)
}

/// One killed block of a concatenation.
#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub kill: KillSpec,
}

impl BlockSpec {
    pub fn new(kill: KillSpec) -> Self {
        Self { kill }
    }

    pub fn tag(&self) -> Option<u32> {
        self.kill.model.ctmc().map(|m| m.tag().id)
    }

    fn state_count(&self) -> Option<usize> {
        self.kill.model.ctmc().map(|m| m.size())
    }
}

/// Block arrangement: an explicit ordered list joined by per-step kernels, or
/// one block revived by one kernel for as long as the horizon lasts. The
/// cyclic form realizes identical copies distinguished by a renewal counter
/// instead of by distinct tagged spaces.
#[derive(Debug, Clone)]
pub enum ConcatMode {
    Blocks {
        blocks: Vec<BlockSpec>,
        transfers: Vec<RevivalKernel>,
    },
    Cyclic {
        block: BlockSpec,
        transfer: RevivalKernel,
    },
}

#[derive(Debug, Clone)]
pub struct ConcatSpec {
    pub mode: ConcatMode,
    pub horizon: f64,
}

impl ConcatSpec {
    pub fn blocks(
        blocks: Vec<BlockSpec>,
        transfers: Vec<RevivalKernel>,
        horizon: f64,
    ) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Configuration("need at least one block".into()));
        }
        if blocks.len() > MAX_BLOCKS {
            return Err(Error::Configuration(format!(
                "at most {MAX_BLOCKS} explicit blocks are supported"
            )));
        }
        if transfers.len() + 1 != blocks.len() {
            return Err(Error::Configuration(format!(
                "{} blocks need {} transfer kernels, got {}",
                blocks.len(),
                blocks.len() - 1,
                transfers.len()
            )));
        }
        for pair in blocks.windows(2) {
            if let (Some(a), Some(b)) = (pair[0].tag(), pair[1].tag()) {
                if a == b {
                    return Err(Error::Configuration(
                        "consecutive blocks must carry distinct state-space tags".into(),
                    ));
                }
            }
        }
        for (k, tr) in transfers.iter().enumerate() {
            let exit = blocks[k].state_count();
            let next = blocks[k + 1].state_count();
            match (tr, exit, next) {
                (RevivalKernel::Matrix { rows }, Some(e), Some(n)) => {
                    if rows.len() != e || rows.iter().any(|r| r.len() != n) {
                        return Err(Error::Configuration(format!(
                            "transfer {k} must map {e} exit states into {n} next states"
                        )));
                    }
                }
                (RevivalKernel::ConstantDiscrete { weights }, _, Some(n)) => {
                    if weights.len() != n {
                        return Err(Error::Configuration(format!(
                            "transfer {k} distribution must have {n} weights"
                        )));
                    }
                }
                _ => {}
            }
        }
        if !(horizon > 0.0) {
            return Err(Error::Configuration("horizon must be positive".into()));
        }
        Ok(Self {
            mode: ConcatMode::Blocks { blocks, transfers },
            horizon,
        })
    }

    pub fn cyclic(block: BlockSpec, transfer: RevivalKernel, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Configuration("horizon must be positive".into()));
        }
        if let (RevivalKernel::Matrix { rows }, Some(n)) = (&transfer, block.state_count()) {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Configuration(
                    "cyclic transfer matrix must be square on the block space".into(),
                ));
            }
        }
        if let (RevivalKernel::ConstantDiscrete { weights }, Some(n)) =
            (&transfer, block.state_count())
        {
            if weights.len() != n {
                return Err(Error::Configuration(
                    "cyclic revival distribution must match the block space".into(),
                ));
            }
        }
        Ok(Self {
            mode: ConcatMode::Cyclic { block, transfer },
            horizon,
        })
    }

    fn block_at(&self, k: usize) -> Option<(&BlockSpec, Option<&RevivalKernel>)> {
        match &self.mode {
            ConcatMode::Blocks { blocks, transfers } => {
                blocks.get(k).map(|b| (b, transfers.get(k)))
            }
            ConcatMode::Cyclic { block, transfer } => Some((block, Some(transfer))),
        }
    }
}

/// One renewal: block `index` died at global time `sigma`, leaving from `exit`
/// and restarting the next block at `revival`.
#[derive(Debug, Clone, Copy)]
pub struct Renewal {
    pub index: usize,
    pub sigma: f64,
    pub exit: ExtState,
    pub revival: ExtState,
    pub block_lifetime: f64,
}

/// A sampled concatenated trajectory: block paths in local time at their
/// global start offsets, the renewal log, and the time from which the sample
/// is dead (only when an explicit block list was exhausted).
#[derive(Debug, Clone)]
pub struct ConcatSample {
    segments: Vec<(f64, Path)>,
    pub renewals: Vec<Renewal>,
    pub horizon: f64,
    pub dead_from: Option<f64>,
    pub blocks_used: usize,
}

impl ConcatSample {
    pub fn eval(&self, t: f64) -> Result<ExtState> {
        if t < 0.0 || t > self.horizon || t.is_nan() {
            return Err(Error::OutOfDomain {
                t,
                horizon: self.horizon,
            });
        }
        if self.dead_from.is_some_and(|d| t >= d) {
            return Ok(ExtState::Dead);
        }
        let idx = self.segments.partition_point(|(start, _)| *start <= t);
        let (start, path) = &self.segments[idx - 1];
        path.eval((t - start).min(path.horizon()))
    }

    /// State just before `t`; at a renewal time this is the exit point.
    pub fn left_limit(&self, t: f64) -> Result<ExtState> {
        if t <= 0.0 || t > self.horizon || t.is_nan() {
            return Err(Error::OutOfDomain {
                t,
                horizon: self.horizon,
            });
        }
        if self.dead_from.is_some_and(|d| t > d) {
            return Ok(ExtState::Dead);
        }
        let idx = self.segments.partition_point(|(start, _)| *start < t);
        let (start, path) = &self.segments[idx - 1];
        path.left_limit((t - start).min(path.horizon()))
    }

    /// Time-weighted occupation of each state over the covered span; finite
    /// states only.
    pub fn occupation(&self, states: usize) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; states];
        let mut covered = 0.0;
        for (k, (start, path)) in self.segments.iter().enumerate() {
            let end = self
                .segments
                .get(k + 1)
                .map(|(s, _)| *s)
                .or(self.dead_from)
                .unwrap_or(self.horizon)
                .min(self.horizon);
            let events = match path {
                Path::Jump { events, .. } => events,
                _ => {
                    return Err(Error::Configuration(
                        "occupation is defined for finite-state samples".into(),
                    ))
                }
            };
            for (j, &(lt, state)) in events.iter().enumerate() {
                let seg_end = events
                    .get(j + 1)
                    .map(|(s, _)| *s)
                    .unwrap_or(f64::INFINITY)
                    .min(end - start);
                let duration = seg_end - lt;
                if duration <= 0.0 {
                    continue;
                }
                if let Some(i) = state.discrete_index() {
                    acc[i] += duration;
                    covered += duration;
                }
            }
        }
        if covered <= 0.0 {
            return Err(Error::DegenerateInput("sample covers no alive time".into()));
        }
        Ok(acc.into_iter().map(|a| a / covered).collect())
    }

    /// Rows `(k, sigma_k, exit_state, revival_state, block_lifetime)`.
    pub fn write_event_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["k", "sigma_k", "exit_state", "revival_state", "block_lifetime"])
            .map_err(|e| Error::Configuration(format!("csv: {e}")))?;
        for r in &self.renewals {
            out.write_record([
                r.index.to_string(),
                r.sigma.to_string(),
                fmt_state(&r.exit),
                fmt_state(&r.revival),
                r.block_lifetime.to_string(),
            ])
            .map_err(|e| Error::Configuration(format!("csv: {e}")))?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fmt_state(s: &ExtState) -> String {
    match s {
        ExtState::Discrete { index, .. } => index.to_string(),
        ExtState::Real(x) => x.to_string(),
        ExtState::Dead => "dead".into(),
    }
}

struct BlockOutcome {
    path: Path,
    lifetime: EventTime,
    exit: Option<ExtState>,
}

/// Joint draw of one block's killed path and lifetime on `[0, remaining]`,
/// stopping the walk at the kill instead of simulating past it.
fn sample_block<R: Rng>(
    kill: &KillSpec,
    x0: &ExtState,
    remaining: f64,
    rng: &mut R,
) -> Result<BlockOutcome> {
    match (&kill.model, &kill.rule) {
        (BaseModel::Ctmc(m), KillRule::ExpRate(c)) => {
            let level: f64 = Exp1.sample(rng);
            ctmc_block_walk(m, c, None, Some(level), x0, remaining, rng)
        }
        (BaseModel::Ctmc(m), KillRule::Terminal(rule)) => {
            let zero = RateFunction::constant(0.0, m.size())?;
            ctmc_block_walk(m, &zero, Some(rule), None, x0, remaining, rng)
        }
        (BaseModel::Diffusion(m), KillRule::ExpRate(c)) => {
            let level: f64 = Exp1.sample(rng);
            diffusion_block_walk(m, |x, acc, dt| {
                // clock crossing within the cell: the rate is frozen at the left endpoint
                let rate = c.eval(&ExtState::Real(x))?;
                if acc + rate * dt >= level {
                    return Ok(StepVerdict::KillAfter((level - acc) / rate));
                }
                Ok(StepVerdict::Continue(rate * dt))
            }, x0, remaining, rng)
        }
        (BaseModel::Diffusion(m), KillRule::Terminal(rule)) => {
            diffusion_block_walk(m, |x, _acc, _dt| {
                Ok(match rule {
                    TerminalRule::HitClosedSet(target) if target.contains(&ExtState::Real(x)) => {
                        StepVerdict::KillNow
                    }
                    TerminalRule::Deterministic(t0) => StepVerdict::DeadlineAt(*t0),
                    _ => StepVerdict::Continue(0.0),
                })
            }, x0, remaining, rng)
        }
    }
}

enum StepVerdict {
    /// Keep walking; add this increment to the accumulated clock.
    Continue(f64),
    /// Kill inside the current cell, this far after its left endpoint.
    KillAfter(f64),
    /// Kill exactly at the current grid point.
    KillNow,
    /// Kill at the fixed time if it falls before the next grid point.
    DeadlineAt(f64),
}

fn diffusion_block_walk<R: Rng>(
    m: &crate::process_models::DiffusionModel,
    mut verdict: impl FnMut(f64, f64, f64) -> Result<StepVerdict>,
    x0: &ExtState,
    remaining: f64,
    rng: &mut R,
) -> Result<BlockOutcome> {
    let x0 = x0
        .real_value()
        .ok_or_else(|| Error::InvalidModel("diffusion block needs a real start point".into()))?;
    let dt = m.dt();
    let steps = (remaining / dt - 1e-9).ceil().max(1.0) as usize;
    let mut values = vec![ExtState::Real(x0)];
    let mut x = x0;
    let mut accumulated = 0.0;
    for k in 0..steps {
        let now = k as f64 * dt;
        match verdict(x, accumulated, dt)? {
            StepVerdict::KillNow => {
                let exit = if k == 0 {
                    ExtState::Dead
                } else {
                    values[k - 1]
                };
                values.truncate(k);
                values.push(ExtState::Dead);
                return Ok(BlockOutcome {
                    path: Path::grid(dt, values)?,
                    lifetime: EventTime::At(now),
                    exit: Some(exit),
                });
            }
            StepVerdict::KillAfter(offset) => {
                let exit = ExtState::Real(x);
                values.push(ExtState::Dead);
                return Ok(BlockOutcome {
                    path: Path::grid(dt, values)?,
                    lifetime: EventTime::At(now + offset),
                    exit: Some(exit),
                });
            }
            StepVerdict::DeadlineAt(t0) => {
                if t0 < now + dt && t0 <= remaining {
                    let exit = ExtState::Real(x);
                    values.push(ExtState::Dead);
                    return Ok(BlockOutcome {
                        path: Path::grid(dt, values)?,
                        lifetime: EventTime::At(t0.max(now)),
                        exit: Some(if t0 == 0.0 { ExtState::Dead } else { exit }),
                    });
                }
            }
            StepVerdict::Continue(increment) => accumulated += increment,
        }
        let noise: f64 = StandardNormal.sample(rng);
        x += m.drift_at(x) * dt + m.diffusion_at(x) * dt.sqrt() * noise;
        if !x.is_finite() {
            return Err(Error::PathBlowup { t: now + dt });
        }
        values.push(ExtState::Real(x));
    }
    Ok(BlockOutcome {
        path: Path::grid(dt, values)?,
        lifetime: EventTime::Censored { horizon: remaining },
        exit: None,
    })
}

/// Jump-chain walk with an accumulated-rate kill clock and/or a terminal rule.
fn ctmc_block_walk<R: Rng>(
    m: &RateModel,
    c: &RateFunction,
    terminal: Option<&TerminalRule>,
    level: Option<f64>,
    x0: &ExtState,
    remaining: f64,
    rng: &mut R,
) -> Result<BlockOutcome> {
    let tag = m.tag().id;
    let start = x0.discrete_index().ok_or_else(|| {
        Error::InvalidModel("finite-state block needs a discrete start state".into())
    })?;
    if start >= m.size() {
        return Err(Error::InvalidModel(format!(
            "start state {start} outside space of size {}",
            m.size()
        )));
    }
    let deterministic = match terminal {
        Some(TerminalRule::Deterministic(t0)) => Some(*t0),
        _ => None,
    };
    let target = match terminal {
        Some(TerminalRule::HitClosedSet(t)) => Some(t),
        _ => None,
    };
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut x = start;
    let mut accumulated = 0.0;
    let mut prev: Option<usize> = None;
    loop {
        let state = ExtState::Discrete { tag, index: x };
        if target.is_some_and(|b| b.contains(&state)) {
            events.push((t, ExtState::Dead));
            let path = if t == 0.0 {
                Path::jump(vec![(0.0, ExtState::Dead)], remaining)?
            } else {
                Path::jump(events, remaining)?
            };
            return Ok(BlockOutcome {
                path,
                lifetime: EventTime::At(t),
                exit: Some(prev.map_or(ExtState::Dead, |p| ExtState::Discrete {
                    tag,
                    index: p,
                })),
            });
        }
        events.push((t, state));
        let rate = -m.rates()[x][x];
        let hold = if rate > 0.0 {
            let e: f64 = Exp1.sample(rng);
            e / rate
        } else {
            f64::INFINITY
        };
        let cx = c.eval(&state)?;
        let kill_in = if let Some(level) = level {
            if cx > 0.0 {
                (level - accumulated) / cx
            } else {
                f64::INFINITY
            }
        } else {
            f64::INFINITY
        };
        let det_in = deterministic.map_or(f64::INFINITY, |t0| t0 - t);
        let horizon_in = remaining - t;

        let first = kill_in.min(det_in).min(hold).min(horizon_in);
        if first == horizon_in && horizon_in < kill_in.min(det_in).min(hold) {
            return Ok(BlockOutcome {
                path: Path::jump(events, remaining)?,
                lifetime: EventTime::Censored { horizon: remaining },
                exit: None,
            });
        }
        if first == kill_in || first == det_in {
            let tau = t + first;
            let exit = ExtState::Discrete { tag, index: x };
            events.push((tau, ExtState::Dead));
            let path = if tau == 0.0 {
                Path::jump(vec![(0.0, ExtState::Dead)], remaining)?
            } else {
                Path::jump(events, remaining)?
            };
            return Ok(BlockOutcome {
                path,
                lifetime: EventTime::At(tau),
                exit: Some(exit),
            });
        }
        // jump
        accumulated += cx * hold;
        t += hold;
        let u: f64 = rng.random::<f64>() * rate;
        let mut cum = 0.0;
        let mut next = x;
        for (j, &r) in m.rates()[x].iter().enumerate() {
            if j == x {
                continue;
            }
            cum += r;
            if u < cum {
                next = j;
                break;
            }
        }
        if next == x {
            next = m.rates()[x]
                .iter()
                .enumerate()
                .rev()
                .find(|(j, &r)| *j != x && r > 0.0)
                .map(|(j, _)| j)
                .unwrap_or(x);
        }
        prev = Some(x);
        x = next;
    }
}

/// Runs blocks and revivals until the horizon, the block list, or (for
/// explicit lists) the final lifetime ends the sample. A block dying at its
/// start violates the positive-lifetime hypothesis of the revival law and is
/// an error, not a skip.
pub fn simulate_concatenated<R: Rng>(
    spec: &ConcatSpec,
    x0: &ExtState,
    rng: &mut R,
) -> Result<ConcatSample> {
    let mut segments = Vec::new();
    let mut renewals = Vec::new();
    let mut dead_from = None;
    let mut blocks_used = 0usize;
    let mut t_acc = 0.0;
    let mut x = *x0;
    let mut k = 0usize;
    let renewal_cap = 1_000 + (100.0 * spec.horizon.max(1.0)) as usize * 100;
    loop {
        let remaining = spec.horizon - t_acc;
        if remaining <= 0.0 {
            break;
        }
        let Some((block, transfer)) = spec.block_at(k) else {
            dead_from = Some(t_acc);
            break;
        };
        let next_tag = match &spec.mode {
            ConcatMode::Blocks { blocks, .. } => {
                blocks.get(k + 1).and_then(|b| b.tag()).unwrap_or(0)
            }
            ConcatMode::Cyclic { block, .. } => block.tag().unwrap_or(0),
        };
        let outcome = sample_block(&block.kill, &x, remaining, rng)?;
        segments.push((t_acc, outcome.path));
        blocks_used += 1;
        match outcome.lifetime {
            EventTime::Censored { .. } => break,
            EventTime::At(tau) => {
                if tau <= 0.0 {
                    return Err(Error::ZeroLifetime { block: k });
                }
                let sigma = t_acc + tau;
                let exit = outcome.exit.expect("finite lifetime has an exit point");
                match transfer {
                    Some(tr) => {
                        let revival = tr.sample(&exit, next_tag, rng)?;
                        renewals.push(Renewal {
                            index: k,
                            sigma,
                            exit,
                            revival,
                            block_lifetime: tau,
                        });
                        t_acc = sigma;
                        x = revival;
                        k += 1;
                    }
                    None => {
                        dead_from = Some(sigma);
                        break;
                    }
                }
            }
        }
        if renewals.len() > renewal_cap {
            return Err(Error::Configuration(format!(
                "renewal count exceeded the cap {renewal_cap}; check the kill rates"
            )));
        }
    }
    Ok(ConcatSample {
        segments,
        renewals,
        horizon: spec.horizon,
        dead_from,
        blocks_used,
    })
}

/// Per-exit-state comparison of the empirical revival law at renewal `k`
/// against the configured kernel row. Exit states with fewer than
/// `min_per_state` observations are reported as skipped.
#[derive(Debug, Clone, Serialize)]
pub struct RevivalRowReport {
    pub exit_state: usize,
    pub n: u64,
    pub counts: Vec<u64>,
    pub chi2: Option<f64>,
    pub p: Option<f64>,
    pub skipped: bool,
}

pub fn revival_conditional_test(
    samples: &[ConcatSample],
    renewal_index: usize,
    mu: &RevivalKernel,
    exit_states: usize,
    next_states: usize,
    min_per_state: u64,
) -> Result<Vec<RevivalRowReport>> {
    let mut counts = vec![vec![0u64; next_states]; exit_states];
    for sample in samples {
        let Some(renewal) = sample.renewals.get(renewal_index) else {
            continue;
        };
        let (Some(z), Some(y)) = (
            renewal.exit.discrete_index(),
            renewal.revival.discrete_index(),
        ) else {
            return Err(Error::Configuration(
                "revival test needs finite-state renewals".into(),
            ));
        };
        counts[z][y] += 1;
    }
    let mut rows = Vec::with_capacity(exit_states);
    for (z, row) in counts.into_iter().enumerate() {
        let n: u64 = row.iter().sum();
        let probs = mu.row(z).ok_or_else(|| {
            Error::Configuration("revival test needs a discrete kernel".into())
        })?;
        if n < min_per_state {
            rows.push(RevivalRowReport {
                exit_state: z,
                n,
                counts: row,
                chi2: None,
                p: None,
                skipped: true,
            });
            continue;
        }
        let (chi2, p) = chi_square(&row, probs)?;
        rows.push(RevivalRowReport {
            exit_state: z,
            n,
            counts: row,
            chi2: Some(chi2),
            p: Some(p),
            skipped: false,
        });
    }
    Ok(rows)
}

/// Restart-chain operator for a constant kill rate `c` and a state-independent
/// revival law: `P_t f = e^{-ct} K_t f + (c int_0^t e^{-cs} (mu K_s f) ds) 1`.
/// The integral is evaluated by adaptive quadrature; the vector form returns
/// `P_t f` on every state.
pub fn restarts_closed_form_vec(
    m: &RateModel,
    mu: &[f64],
    c: f64,
    f: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(Error::Configuration("restart rate must be positive".into()));
    }
    if mu.len() != m.size() || f.len() != m.size() {
        return Err(Error::DimensionMismatch {
            expected: m.size(),
            got: mu.len().max(f.len()),
        });
    }
    check_stochastic(mu, "restart distribution")?;
    let ktf = ctmc_semigroup_exact(m, None, t)?.apply(f)?;
    let scale = f.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-30);
    let integral = adaptive_simpson(
        |s| {
            let ksf = ctmc_semigroup_exact(m, None, s).unwrap().apply(f).unwrap();
            (-c * s).exp() * mu.iter().zip(&ksf).map(|(w, v)| w * v).sum::<f64>()
        },
        0.0,
        t,
        1e-10 * scale * t.max(1.0),
    );
    Ok(ktf
        .iter()
        .map(|v| (-c * t).exp() * v + c * integral)
        .collect())
}

/// Scalar form of [`restarts_closed_form_vec`] at one start state.
pub fn restarts_closed_form(
    m: &RateModel,
    mu: &[f64],
    c: f64,
    f: &[f64],
    t: f64,
    x0: usize,
) -> Result<f64> {
    if t == 0.0 {
        return Ok(f[x0]);
    }
    Ok(restarts_closed_form_vec(m, mu, c, f, t)?[x0])
}

/// Restarted Ornstein-Uhlenbeck mean of `f = id`, in closed form:
/// `e^{-(c+theta)t} x0 + c x' (1 - e^{-(c+theta)t}) / (c + theta)`.
pub fn restarts_ou_mean(theta: f64, c: f64, x0: f64, restart_point: f64, t: f64) -> f64 {
    let k = c + theta;
    (-k * t).exp() * x0 + c * restart_point * (1.0 - (-k * t).exp()) / k
}

/// Two-block operator on the first space, by quadrature over the first
/// block's exit-time density:
/// `P_t f (x) = Q1_t f1 (x) + int_0^t sum_z [e^{s(L1-C1)}]_{x z} c1_z (mu(z,.) Q2_{t-s} f2) ds`.
pub fn two_block_formula(
    b1: (&RateModel, &[f64]),
    mu: &RevivalKernel,
    b2: (&RateModel, &[f64]),
    f1: &[f64],
    f2: &[f64],
    t: f64,
    x0: usize,
) -> Result<f64> {
    let (m1, c1) = b1;
    let (m2, c2) = b2;
    let gen1 = killed_generator_rows(m1, c1);
    let q1f = ctmc_semigroup_exact(m1, Some(c1), t)?.apply(f1)?;
    let scale = f1
        .iter()
        .chain(f2)
        .fold(0.0f64, |a, v| a.max(v.abs()))
        .max(1e-30);
    let integral = adaptive_simpson(
        |s| {
            let q1 = expm_subgenerator(&gen1, s);
            let q2f = ctmc_semigroup_exact(m2, Some(c2), t - s).unwrap().apply(f2).unwrap();
            (0..m1.size())
                .map(|z| {
                    let row = mu.row(z).expect("discrete kernel");
                    let revival_value: f64 = row.iter().zip(&q2f).map(|(w, v)| w * v).sum();
                    q1[x0][z] * c1[z] * revival_value
                })
                .sum()
        },
        0.0,
        t,
        1e-10 * scale * t.max(1.0),
    );
    Ok(q1f[x0] + integral)
}

fn killed_generator_rows(m: &RateModel, c: &[f64]) -> Vec<Vec<f64>> {
    let mut g = m.rates().to_vec();
    for (i, ci) in c.iter().enumerate() {
        g[i][i] -= ci;
    }
    g
}

/// Monte Carlo check of `E_x[f(X_t)]` against the formula value for the
/// restart chain (constant rate, state-independent revival).
#[derive(Debug, Clone, Serialize)]
pub struct SemigroupCheckReport {
    pub mc: EstimatorReport,
    pub formula: f64,
    pub z: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn concat_semigroup_check(
    spec: &ConcatSpec,
    f: &[f64],
    t: f64,
    x0: usize,
    n: usize,
    stream: RngStream,
    jobs: usize,
) -> Result<SemigroupCheckReport> {
    let (model, c, mu) = restore_parameters(spec)?;
    let c_const = constant_rate(&c)?;
    let formula = restarts_closed_form(&model, &mu, c_const, f, t, x0)?;
    if t > spec.horizon {
        return Err(Error::OutOfDomain {
            t,
            horizon: spec.horizon,
        });
    }
    let tag = model.tag().id;
    let f_obs = f.to_vec();
    let values = replicate(jobs, n, |i| {
        let mut rng = stream.offset(i as u64).rng();
        let sample = simulate_concatenated(spec, &ExtState::Discrete { tag, index: x0 }, &mut rng)?;
        let state = sample.eval(t)?;
        Ok(state.discrete_index().map_or(0.0, |idx| f_obs[idx]))
    })?;
    let mc = EstimatorReport::from_values(
        format!("concat|t={t}|n={n}"),
        &values,
        stream.master_seed,
        stream.stream_id,
    );
    let z = mc.z_against(formula);
    Ok(SemigroupCheckReport { mc, formula, z })
}

fn restore_parameters(spec: &ConcatSpec) -> Result<(RateModel, Vec<f64>, Vec<f64>)> {
    let ConcatMode::Cyclic { block, transfer } = &spec.mode else {
        return Err(Error::Configuration(
            "restore-mode check needs a cyclic concatenation".into(),
        ));
    };
    let model = block
        .kill
        .model
        .ctmc()
        .ok_or_else(|| Error::Configuration("restore-mode check needs a finite-state chain".into()))?
        .clone();
    let c = match block.kill.exp_rates() {
        Some(RateFunction::Discrete { values, .. }) => values.clone(),
        _ => {
            return Err(Error::Configuration(
                "restore-mode check needs rate killing".into(),
            ))
        }
    };
    let RevivalKernel::ConstantDiscrete { weights } = transfer else {
        return Err(Error::Configuration(
            "restore-mode check needs a state-independent revival law".into(),
        ));
    };
    Ok((model, c, weights.clone()))
}

fn constant_rate(c: &[f64]) -> Result<f64> {
    let c0 = c[0];
    if c.iter().any(|&v| (v - c0).abs() > 1e-12) {
        return Err(Error::Configuration(
            "the closed restart formula needs a constant kill rate".into(),
        ));
    }
    if !(c0 > 0.0) {
        return Err(Error::Configuration("restart rate must be positive".into()));
    }
    Ok(c0)
}

/// Difference quotients of the restart operator against the restore generator
/// `L f + diag(c) (mu f - f)`, fitted on a log-log scale over the step grid.
pub fn concat_generator_check(
    spec: &ConcatSpec,
    f: &[f64],
    hs: &[f64],
    band: (f64, f64),
) -> Result<SlopeReport> {
    let (model, c, mu) = restore_parameters(spec)?;
    let c_const = constant_rate(&c)?;
    let n = model.size();
    if f.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: f.len(),
        });
    }
    let mu_f: f64 = mu.iter().zip(f).map(|(w, v)| w * v).sum();
    let lf = mat::mat_vec(model.rates(), f);
    let target: Vec<f64> = (0..n).map(|i| lf[i] + c[i] * (mu_f - f[i])).collect();
    let mut points = Vec::with_capacity(hs.len());
    for &h in hs {
        let phf = restarts_closed_form_vec(&model, &mu, c_const, f, h)?;
        let err = phf
            .iter()
            .zip(f)
            .zip(&target)
            .map(|((pv, fv), tv)| ((pv - fv) / h - tv).abs())
            .fold(0.0f64, f64::max);
        points.push((h, err));
    }
    let report = fit_slope(&points, band)?;
    if !report.pass {
        return Err(Error::GeneratorMismatch {
            slope: report.slope,
            lo: band.0,
            hi: band.1,
            table: points,
        });
    }
    Ok(report)
}

/// Generator matrix of the restore chain: `L + diag(c) (1 mu^T - I)`.
pub fn restore_generator(m: &RateModel, c: &[f64], mu: &[f64]) -> Vec<Vec<f64>> {
    let n = m.size();
    let mut a = m.rates().to_vec();
    for i in 0..n {
        for j in 0..n {
            a[i][j] += c[i] * (mu[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    a
}

/// Invariant law of the restore chain: the normalized left null vector of its
/// generator. Requires the chain (with restart edges) to be irreducible.
pub fn restore_invariant_solve(m: &RateModel, c: &[f64], mu: &[f64]) -> Result<Vec<f64>> {
    let n = m.size();
    if c.len() != n || mu.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: c.len().min(mu.len()),
        });
    }
    check_stochastic(mu, "restart distribution")?;
    let a = restore_generator(m, c, mu);
    if !strongly_connected(&a) {
        return Err(Error::ReducibleChain);
    }
    // pi^T A = 0 with sum pi = 1: solve A^T pi = 0 with the last equation
    // replaced by the normalization (any row of A^T is redundant).
    let mut system: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a[j][i]).collect())
        .collect();
    system[n - 1] = vec![1.0; n];
    let mut rhs = vec![0.0; n];
    rhs[n - 1] = 1.0;
    let mut pi = mat::gauss_solve(&system, &rhs)?;
    for v in pi.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-9 {
                return Err(Error::ReducibleChain);
            }
            *v = 0.0;
        }
    }
    let total: f64 = pi.iter().sum();
    for v in pi.iter_mut() {
        *v /= total;
    }
    let residual = mat::inf_norm(&mat::vec_mat(&pi, &a));
    if residual >= 1e-10 {
        return Err(Error::Configuration(format!(
            "invariant solve residual {residual:e} exceeds 1e-10"
        )));
    }
    Ok(pi)
}

fn strongly_connected(a: &[Vec<f64>]) -> bool {
    let n = a.len();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { a[i][j] } else { a[j][i] };
                if i != j && w > 1e-14 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Markov-property test on a restore chain: conditioned on the state at `s`,
/// the law at `s + t` must be independent of the state at `u < s`.
#[allow(clippy::too_many_arguments)]
pub fn concat_markov_stratification_check(
    spec: &ConcatSpec,
    x0: usize,
    u: f64,
    s: f64,
    t: f64,
    condition_state: usize,
    n: usize,
    stream: RngStream,
    jobs: usize,
) -> Result<crate::killing::StratReport> {
    let (model, _, _) = restore_parameters(spec)?;
    if !(0.0 < u && u < s && t > 0.0 && s + t <= spec.horizon) {
        return Err(Error::Configuration(
            "need 0 < u < s and s + t within the horizon".into(),
        ));
    }
    let states = model.size();
    let tag = model.tag().id;
    let rows = replicate(jobs, n, |i| {
        let mut rng = stream.offset(i as u64).rng();
        let sample = simulate_concatenated(spec, &ExtState::Discrete { tag, index: x0 }, &mut rng)?;
        if sample.eval(s)?.discrete_index() != Some(condition_state) {
            return Ok(None);
        }
        let stratum = sample.eval(u)?.discrete_index().unwrap_or(states);
        let outcome = sample.eval(s + t)?.discrete_index().unwrap_or(states);
        Ok(Some((stratum, outcome)))
    })?;
    let mut table = vec![vec![0u64; states + 1]; states + 1];
    let mut conditioned = 0u64;
    for row in rows.into_iter().flatten() {
        table[row.0][row.1] += 1;
        conditioned += 1;
    }
    let (chi2, p, dof) = crate::verification::chi_square_independence(&table)?;
    Ok(crate::killing::StratReport {
        table,
        conditioned,
        chi2,
        p,
        dof,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extended_state::StateSpaceTag;
    use crate::functionals::TargetSet;
    use crate::killing::{sample_killed, EstimatorMode, Observable};
    use crate::verification::{ks_statistic, ks_two_sample};
    use approx::assert_abs_diff_eq;
    use statrs::distribution::{ContinuousCDF, Gamma};

    fn tag(id: u32, size: usize) -> StateSpaceTag {
        StateSpaceTag::new(id, size).unwrap()
    }

    fn d(tag: u32, index: usize) -> ExtState {
        ExtState::Discrete { tag, index }
    }

    fn chain(id: u32) -> RateModel {
        RateModel::new(
            tag(id, 3),
            vec![
                vec![-1.2, 0.8, 0.4],
                vec![0.5, -0.9, 0.4],
                vec![0.6, 0.6, -1.2],
            ],
        )
        .unwrap()
    }

    fn restore_spec(c: f64, mu: Vec<f64>, horizon: f64) -> ConcatSpec {
        let kill = KillSpec::new(
            BaseModel::Ctmc(chain(0)),
            KillRule::ExpRate(RateFunction::constant(c, 3).unwrap()),
        )
        .unwrap();
        ConcatSpec::cyclic(BlockSpec::new(kill), RevivalKernel::constant(mu).unwrap(), horizon)
            .unwrap()
    }

    #[test]
    fn single_block_reduces_to_killed_process() {
        let kill = KillSpec::new(
            BaseModel::Ctmc(chain(0)),
            KillRule::ExpRate(RateFunction::constant(0.8, 3).unwrap()),
        )
        .unwrap();
        let spec = ConcatSpec::blocks(vec![BlockSpec::new(kill.clone())], vec![], 5.0).unwrap();
        for i in 0..200u64 {
            let stream = RngStream::new(3, i);
            let concat = simulate_concatenated(&spec, &d(0, 0), &mut stream.rng()).unwrap();
            let killed = sample_killed(&kill, &d(0, 0), 5.0, &mut stream.rng()).unwrap();
            for &t in &[0.0, 0.7, 2.3, 4.9] {
                assert_eq!(concat.eval(t).unwrap(), killed.killed.eval(t).unwrap());
            }
        }
    }

    #[test]
    fn deterministic_blocks_renew_on_schedule() {
        let mk_block = |id: u32| {
            BlockSpec::new(
                KillSpec::new(
                    BaseModel::Ctmc(chain(id)),
                    KillRule::Terminal(TerminalRule::Deterministic(1.0)),
                )
                .unwrap(),
            )
        };
        let mu = RevivalKernel::constant(vec![0.0, 1.0, 0.0]).unwrap();
        let spec = ConcatSpec::blocks(vec![mk_block(0), mk_block(1)], vec![mu], 5.0).unwrap();
        for i in 0..50u64 {
            let mut rng = RngStream::new(9, i).rng();
            let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng).unwrap();
            assert_eq!(sample.renewals.len(), 1);
            let renewal = &sample.renewals[0];
            assert_abs_diff_eq!(renewal.sigma, 1.0, epsilon = 1e-12);
            assert_eq!(renewal.revival, d(1, 1));
            assert_eq!(sample.eval(1.0).unwrap(), d(1, 1));
            // explicit list exhausted: dead after the second block's lifetime
            assert_abs_diff_eq!(sample.dead_from.unwrap(), 2.0, epsilon = 1e-12);
            assert_eq!(sample.eval(2.5).unwrap(), ExtState::Dead);
            // exit point is the left limit at the renewal
            assert_eq!(sample.left_limit(1.0).unwrap(), renewal.exit);
        }
    }

    #[test]
    fn zero_lifetime_is_an_error() {
        let kill = KillSpec::new(
            BaseModel::Ctmc(chain(0)),
            KillRule::Terminal(TerminalRule::HitClosedSet(TargetSet::states([0]))),
        )
        .unwrap();
        let spec =
            ConcatSpec::cyclic(BlockSpec::new(kill), RevivalKernel::constant(vec![1.0, 0.0, 0.0]).unwrap(), 5.0)
                .unwrap();
        let mut rng = RngStream::new(4, 0).rng();
        assert!(matches!(
            simulate_concatenated(&spec, &d(0, 0), &mut rng),
            Err(Error::ZeroLifetime { .. })
        ));
    }

    #[test]
    fn renewal_count_is_roughly_poisson() {
        let c = 0.9;
        let horizon = 20.0;
        let spec = restore_spec(c, vec![0.3, 0.3, 0.4], horizon);
        let n = 4_000;
        let mut total = 0.0;
        for i in 0..n {
            let mut rng = RngStream::new(13, i as u64).rng();
            let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng).unwrap();
            total += sample.renewals.len() as f64;
        }
        let mean = total / n as f64;
        let se = (c * horizon / n as f64).sqrt();
        assert!(
            (mean - c * horizon).abs() < 4.0 * se,
            "renewal mean {mean} vs {}",
            c * horizon
        );
    }

    #[test]
    fn sigma_is_the_exact_sum_of_block_lifetimes() {
        let spec = restore_spec(1.1, vec![0.5, 0.25, 0.25], 30.0);
        let mut rng = RngStream::new(17, 5).rng();
        let sample = simulate_concatenated(&spec, &d(0, 1), &mut rng).unwrap();
        assert!(sample.renewals.len() > 3);
        let mut acc = 0.0;
        for renewal in &sample.renewals {
            acc += renewal.block_lifetime;
            assert_eq!(acc, renewal.sigma);
        }
    }

    #[test]
    fn gamma_law_of_third_renewal() {
        let c = 0.7;
        let spec = restore_spec(c, vec![0.2, 0.5, 0.3], 40.0);
        let n = 20_000;
        let mut sigma3 = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = RngStream::new(23, i as u64).rng();
            let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng).unwrap();
            if sample.renewals.len() >= 3 {
                sigma3.push(sample.renewals[2].sigma);
            }
        }
        assert!(sigma3.len() as f64 > 0.999 * n as f64);
        let gamma = Gamma::new(3.0, c).unwrap();
        let (_, p) = ks_statistic(&sigma3, |x| gamma.cdf(x)).unwrap();
        assert!(p > 0.001, "KS p = {p}");
    }

    #[test]
    fn block_lifetimes_are_iid_across_renewals() {
        let spec = restore_spec(0.8, vec![0.4, 0.3, 0.3], 40.0);
        let n = 8_000;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for i in 0..n {
            let mut rng = RngStream::new(29, i as u64).rng();
            let sample = simulate_concatenated(&spec, &d(0, 2), &mut rng).unwrap();
            if sample.renewals.len() >= 2 {
                first.push(sample.renewals[0].block_lifetime);
                second.push(sample.renewals[1].block_lifetime);
            }
        }
        let (_, p) = ks_two_sample(&first, &second).unwrap();
        assert!(p > 0.001, "two-sample KS p = {p}");
    }

    #[test]
    fn revival_law_constant_kernel() {
        let mu = vec![0.2, 0.5, 0.3];
        let spec = restore_spec(1.0, mu.clone(), 20.0);
        let n = 20_000;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = RngStream::new(41, i as u64).rng();
            samples.push(simulate_concatenated(&spec, &d(0, 0), &mut rng).unwrap());
        }
        let kernel = RevivalKernel::constant(mu).unwrap();
        let rows = revival_conditional_test(&samples, 0, &kernel, 3, 3, 30).unwrap();
        for row in rows {
            assert!(!row.skipped);
            assert!(row.p.unwrap() > 0.001, "exit {} p = {:?}", row.exit_state, row.p);
        }
    }

    #[test]
    fn revival_law_identity_kernel_is_deterministic() {
        let kill = KillSpec::new(
            BaseModel::Ctmc(chain(0)),
            KillRule::ExpRate(RateFunction::constant(1.0, 3).unwrap()),
        )
        .unwrap();
        let identity = RevivalKernel::matrix(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let spec = ConcatSpec::cyclic(BlockSpec::new(kill), identity.clone(), 10.0).unwrap();
        let mut samples = Vec::new();
        for i in 0..3_000u64 {
            let mut rng = RngStream::new(43, i).rng();
            samples.push(simulate_concatenated(&spec, &d(0, 1), &mut rng).unwrap());
        }
        for sample in &samples {
            for renewal in &sample.renewals {
                assert_eq!(
                    renewal.exit.discrete_index(),
                    renewal.revival.discrete_index()
                );
            }
        }
        let rows = revival_conditional_test(&samples, 0, &identity, 3, 3, 30).unwrap();
        for row in rows.iter().filter(|r| !r.skipped) {
            assert_abs_diff_eq!(row.chi2.unwrap(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn restart_formula_sanity() {
        let m = chain(0);
        let mu = [0.2, 0.3, 0.5];
        // t = 0 returns f
        let f = [2.0, -1.0, 0.5];
        assert_eq!(restarts_closed_form(&m, &mu, 0.9, &f, 0.0, 1).unwrap(), -1.0);
        // f = 1 is preserved: the operator is stochastic
        let ones = [1.0, 1.0, 1.0];
        for &t in &[0.3, 1.0, 2.7] {
            let v = restarts_closed_form(&m, &mu, 0.9, &ones, t, 0).unwrap();
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn restart_ou_closed_form_matches_quadrature() {
        let (theta, c, x0, xr, t): (f64, f64, f64, f64, f64) = (1.3, 0.6, 0.8, -0.4, 1.7);
        // quadrature route over the restart identity with K_s id (x) = x e^{-theta s}
        let quad = (-c * t).exp() * x0 * (-theta * t).exp()
            + c * adaptive_simpson(|s| (-c * s).exp() * xr * (-theta * s).exp(), 0.0, t, 1e-12);
        assert_abs_diff_eq!(
            restarts_ou_mean(theta, c, x0, xr, t),
            quad,
            epsilon = 1e-9
        );
    }

    #[test]
    fn restore_chain_mc_matches_restart_formula() {
        let spec = restore_spec(0.8, vec![0.5, 0.2, 0.3], 4.0);
        let f = [0.0, 1.0, 0.0];
        let report =
            concat_semigroup_check(&spec, &f, 2.0, 0, 40_000, RngStream::new(47, 0), 2).unwrap();
        assert!(report.z < 3.0, "z = {}", report.z);
    }

    #[test]
    fn restore_chain_stays_stochastic() {
        let spec = restore_spec(0.8, vec![0.5, 0.2, 0.3], 4.0);
        let ones = [1.0, 1.0, 1.0];
        let report =
            concat_semigroup_check(&spec, &ones, 2.0, 0, 5_000, RngStream::new(48, 0), 2).unwrap();
        assert_eq!(report.mc.mean, 1.0);
        assert_abs_diff_eq!(report.formula, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn two_block_formula_agrees_with_simulation() {
        let kill1 = KillSpec::new(
            BaseModel::Ctmc(chain(0)),
            KillRule::ExpRate(RateFunction::discrete(vec![0.5, 1.0, 0.7]).unwrap()),
        )
        .unwrap();
        let kill2 = KillSpec::new(
            BaseModel::Ctmc(chain(1)),
            KillRule::ExpRate(RateFunction::discrete(vec![0.2, 0.4, 0.1]).unwrap()),
        )
        .unwrap();
        let mu_rows = vec![
            vec![0.6, 0.2, 0.2],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
        ];
        let mu = RevivalKernel::matrix(mu_rows).unwrap();
        let spec = ConcatSpec::blocks(
            vec![BlockSpec::new(kill1.clone()), BlockSpec::new(kill2.clone())],
            vec![mu.clone()],
            6.0,
        )
        .unwrap();
        let f1 = [1.0, 0.0, 0.5];
        let f2 = [0.0, 2.0, -1.0];
        let t = 1.5;
        let (m0, m1) = (chain(0), chain(1));
        let formula = two_block_formula(
            (&m0, &[0.5, 1.0, 0.7]),
            &mu,
            (&m1, &[0.2, 0.4, 0.1]),
            &f1,
            &f2,
            t,
            0,
        )
        .unwrap();
        let n = 50_000;
        let values = crate::parallel::replicate(2, n, |i| {
            let mut rng = RngStream::new(53, i as u64).rng();
            let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng)?;
            let state = sample.eval(t)?;
            Ok(match state {
                ExtState::Discrete { tag: 0, index } => f1[index],
                ExtState::Discrete { tag: 1, index } => f2[index],
                _ => 0.0,
            })
        })
        .unwrap();
        let mc = EstimatorReport::from_values("two-block", &values, 53, 0);
        assert!(mc.z_against(formula) < 3.0, "z = {}", mc.z_against(formula));
    }

    #[test]
    fn generator_check_restore_mode() {
        let spec = restore_spec(0.9, vec![0.1, 0.6, 0.3], 4.0);
        let hs = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
        let rep = concat_generator_check(&spec, &[1.0, -1.0, 0.4], &hs, (0.8, 1.2)).unwrap();
        assert!(rep.pass, "slope {}", rep.slope);
    }

    #[test]
    fn invariant_solve_special_cases() {
        let m = chain(0);
        // zero kill rate: the chain's own stationary law
        let pi = restore_invariant_solve(&m, &[0.0; 3], &[0.3, 0.3, 0.4]).unwrap();
        let balance = mat::vec_mat(&pi, m.rates());
        assert!(mat::inf_norm(&balance) < 1e-10);

        // frozen chain with pure restarts: the invariant law is the restart law
        let frozen = RateModel::new(tag(0, 3), vec![vec![0.0; 3]; 3]).unwrap();
        let mu = [0.25, 0.45, 0.3];
        let pi = restore_invariant_solve(&frozen, &[1.3; 3], &mu).unwrap();
        for (a, b) in pi.iter().zip(mu.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn invariant_solve_rejects_reducible() {
        let frozen = RateModel::new(tag(0, 2), vec![vec![0.0; 2]; 2]).unwrap();
        // no rates and no restarts out of state 1
        assert!(matches!(
            restore_invariant_solve(&frozen, &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ReducibleChain)
        ));
    }

    #[test]
    fn occupation_converges_to_invariant_law() {
        let c = vec![0.6, 0.9, 0.3];
        let mu = vec![0.5, 0.3, 0.2];
        let m = chain(0);
        let pi = restore_invariant_solve(&m, &c, &mu).unwrap();
        let kill = KillSpec::new(
            BaseModel::Ctmc(m),
            KillRule::ExpRate(RateFunction::discrete(c).unwrap()),
        )
        .unwrap();
        let spec = ConcatSpec::cyclic(
            BlockSpec::new(kill),
            RevivalKernel::constant(mu).unwrap(),
            10_000.0,
        )
        .unwrap();
        let mut rng = RngStream::new(61, 0).rng();
        let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng).unwrap();
        let occupation = sample.occupation(3).unwrap();
        let tv: f64 = occupation
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "TV distance {tv}");
    }

    #[test]
    fn stratified_outcome_independent_of_history() {
        let spec = restore_spec(0.7, vec![0.4, 0.4, 0.2], 3.0);
        let rep = concat_markov_stratification_check(
            &spec, 0, 0.5, 1.0, 1.0, 1, 30_000, RngStream::new(67, 0), 2,
        )
        .unwrap();
        assert!(rep.conditioned > 1_000);
        assert!(rep.p > 0.001, "p = {}", rep.p);
    }

    #[test]
    fn ou_restart_concatenation_matches_closed_form() {
        let (theta, sigma, c, x0, xr, t) = (1.0, 0.5, 0.8, 1.0, -0.5, 1.2);
        let dt = 1e-3;
        let model = crate::process_models::DiffusionModel::ornstein_uhlenbeck(theta, sigma, dt)
            .unwrap();
        let kill = KillSpec::new(
            BaseModel::Diffusion(model),
            KillRule::ExpRate(RateFunction::continuous(move |_| c, c).unwrap()),
        )
        .unwrap();
        let spec =
            ConcatSpec::cyclic(BlockSpec::new(kill), RevivalKernel::dirac(xr), t + 0.1).unwrap();
        let n = 20_000;
        let values = crate::parallel::replicate(2, n, |i| {
            let mut rng = RngStream::new(71, i as u64).rng();
            let sample = simulate_concatenated(&spec, &ExtState::Real(x0), &mut rng)?;
            Ok(sample.eval(t)?.real_value().unwrap())
        })
        .unwrap();
        let mc = EstimatorReport::from_values("ou-restart", &values, 71, 0);
        let expected = restarts_ou_mean(theta, c, x0, xr, t);
        let tolerance = (3.0 * mc.stderr).max(5.0 * dt);
        assert!(
            (mc.mean - expected).abs() < tolerance,
            "mean {} vs {expected}",
            mc.mean
        );
    }

    #[test]
    fn event_csv_has_expected_columns() {
        let spec = restore_spec(1.0, vec![0.4, 0.3, 0.3], 10.0);
        let mut rng = RngStream::new(73, 0).rng();
        let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng).unwrap();
        let mut buf = Vec::new();
        sample.write_event_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,sigma_k,exit_state,revival_state,block_lifetime"));
        assert_eq!(text.lines().count(), sample.renewals.len() + 1);
    }

    #[test]
    fn weighted_estimator_on_blocks_equals_killed_mc() {
        // a one-block concatenation is exactly the killed process; the killed
        // estimator must agree with the simulated one
        let kill = KillSpec::new(
            BaseModel::Ctmc(chain(0)),
            KillRule::ExpRate(RateFunction::discrete(vec![0.4, 0.9, 0.1]).unwrap()),
        )
        .unwrap();
        let spec = ConcatSpec::blocks(vec![BlockSpec::new(kill.clone())], vec![], 2.0).unwrap();
        let f = [1.0, 0.0, 0.0];
        let t = 1.0;
        let n = 30_000;
        let values = crate::parallel::replicate(2, n, |i| {
            let mut rng = RngStream::new(79, i as u64).rng();
            let sample = simulate_concatenated(&spec, &d(0, 0), &mut rng)?;
            Ok(sample.eval(t)?.discrete_index().map_or(0.0, |idx| f[idx]))
        })
        .unwrap();
        let concat_mc = EstimatorReport::from_values("concat", &values, 79, 0);
        let killed_mc = crate::killing::killed_semigroup_mc(
            &kill,
            &Observable::Discrete(f.to_vec()),
            t,
            &d(0, 0),
            n,
            EstimatorMode::Hard,
            RngStream::new(79, 1 << 33),
            2,
        )
        .unwrap();
        let combined = (concat_mc.stderr.powi(2) + killed_mc.stderr.powi(2)).sqrt();
        assert!((concat_mc.mean - killed_mc.mean).abs() < 3.0 * combined);
    }
}
