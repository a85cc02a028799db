//! Additive and multiplicative functionals along paths, terminal times,
//! hitting times, path lifetimes, and the increments of the nonincreasing
//! weight process `M`.
//!
//! The additive functional is the accumulated kill rate `A_t = int_0^t c(X_s) ds`,
//! exact on jump paths and a left-endpoint sum on grid paths. `M = e^{-A}` and
//! the indicator `1_{[0, tau)}` of a terminal time are the two weight processes
//! everything downstream consumes.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extended_state::ExtState;
use crate::process_models::Path;

/// A time observed before the horizon, or censoring at the horizon. Censoring
/// replaces the value "infinity"; consumers must branch on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EventTime {
    At(f64),
    Censored { horizon: f64 },
}

impl EventTime {
    pub fn time(&self) -> Option<f64> {
        match self {
            EventTime::At(t) => Some(*t),
            EventTime::Censored { .. } => None,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, EventTime::Censored { .. })
    }
}

/// Nonnegative kill rate with a declared upper bound. The bound turns the
/// boundedness hypothesis of the generator identities into a runtime
/// precondition: every evaluation above `c_max` is an error.
#[derive(Clone)]
pub enum RateFunction {
    Discrete { values: Vec<f64>, c_max: f64 },
    Continuous {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        c_max: f64,
    },
}

impl std::fmt::Debug for RateFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RateFunction::Discrete { values, c_max } => f
                .debug_struct("RateFunction::Discrete")
                .field("values", values)
                .field("c_max", c_max)
                .finish(),
            RateFunction::Continuous { c_max, .. } => f
                .debug_struct("RateFunction::Continuous")
                .field("c_max", c_max)
                .finish(),
        }
    }
}

impl RateFunction {
    pub fn discrete(values: Vec<f64>) -> Result<Self> {
        let c_max = values.iter().fold(0.0f64, |m, v| m.max(*v));
        Self::discrete_with_bound(values, c_max)
    }

    pub fn discrete_with_bound(values: Vec<f64>, c_max: f64) -> Result<Self> {
        if !c_max.is_finite() || c_max < 0.0 {
            return Err(Error::InvalidModel(format!(
                "rate bound {c_max} must be finite and nonnegative"
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "rate c[{i}] = {v} must be finite and nonnegative"
                )));
            }
            if v > c_max {
                return Err(Error::RateBound {
                    at: format!("state {i}"),
                    value: v,
                    bound: c_max,
                });
            }
        }
        Ok(RateFunction::Discrete { values, c_max })
    }

    pub fn continuous(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        c_max: f64,
    ) -> Result<Self> {
        if !c_max.is_finite() || c_max < 0.0 {
            return Err(Error::InvalidModel(format!(
                "rate bound {c_max} must be finite and nonnegative"
            )));
        }
        Ok(RateFunction::Continuous {
            f: Arc::new(f),
            c_max,
        })
    }

    pub fn constant(value: f64, states: usize) -> Result<Self> {
        Self::discrete(vec![value; states])
    }

    pub fn c_max(&self) -> f64 {
        match self {
            RateFunction::Discrete { c_max, .. } | RateFunction::Continuous { c_max, .. } => *c_max,
        }
    }

    /// Rate at an extended state; the cemetery carries rate zero.
    pub fn eval(&self, state: &ExtState) -> Result<f64> {
        match (self, state) {
            (_, ExtState::Dead) => Ok(0.0),
            (RateFunction::Discrete { values, c_max }, ExtState::Discrete { index, .. }) => {
                let v = *values.get(*index).ok_or(Error::DimensionMismatch {
                    expected: values.len(),
                    got: *index,
                })?;
                if v > *c_max {
                    return Err(Error::RateBound {
                        at: format!("state {index}"),
                        value: v,
                        bound: *c_max,
                    });
                }
                Ok(v)
            }
            (RateFunction::Continuous { f, c_max }, ExtState::Real(x)) => {
                let v = f(*x);
                if !v.is_finite() || v < 0.0 || v > *c_max {
                    return Err(Error::RateBound {
                        at: format!("x = {x}"),
                        value: v,
                        bound: *c_max,
                    });
                }
                Ok(v)
            }
            _ => Err(Error::InvalidModel(
                "rate function does not match the path's state kind".into(),
            )),
        }
    }
}

/// Accumulated kill rate as a nondecreasing piecewise-linear function, stored
/// by its breakpoints `(t_i, A_{t_i})`.
#[derive(Debug, Clone, PartialEq)]
pub struct AfTrace {
    points: Vec<(f64, f64)>,
}

impl AfTrace {
    fn new(points: Vec<(f64, f64)>) -> Self {
        debug_assert!(points.len() >= 2 || points.len() == 1);
        AfTrace { points }
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn horizon(&self) -> f64 {
        self.points.last().unwrap().0
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        if t < 0.0 || t > self.horizon() || t.is_nan() {
            return Err(Error::OutOfDomain {
                t,
                horizon: self.horizon(),
            });
        }
        let idx = self.points.partition_point(|(s, _)| *s <= t);
        if idx == self.points.len() {
            return Ok(self.points[idx - 1].1);
        }
        let (t0, a0) = self.points[idx - 1];
        let (t1, a1) = self.points[idx];
        if t1 == t0 {
            return Ok(a0);
        }
        Ok(a0 + (a1 - a0) * (t - t0) / (t1 - t0))
    }

    /// First time the trace reaches `level`; censored if it never does.
    pub fn first_passage(&self, level: f64) -> EventTime {
        if level <= 0.0 {
            return EventTime::At(0.0);
        }
        for window in self.points.windows(2) {
            let (t0, a0) = window[0];
            let (t1, a1) = window[1];
            if a1 >= level {
                if a1 == a0 {
                    return EventTime::At(t1);
                }
                let t = t0 + (t1 - t0) * (level - a0) / (a1 - a0);
                return EventTime::At(t.min(t1));
            }
        }
        EventTime::Censored {
            horizon: self.horizon(),
        }
    }

    /// Writes `(t, value)` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "value"]).map_err(csv_err)?;
        for (t, a) in &self.points {
            out.write_record([t.to_string(), a.to_string()]).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Configuration(format!("csv: {e}"))
}

/// Integrates the rate along the path up to `t` and returns the value together
/// with the full trace on `[0, horizon]`.
pub fn additive_integral(p: &Path, c: &RateFunction, t: f64) -> Result<(f64, AfTrace)> {
    let trace = af_trace(p, c)?;
    let value = trace.value(t)?;
    Ok((value, trace))
}

fn af_trace(p: &Path, c: &RateFunction) -> Result<AfTrace> {
    let horizon = p.horizon();
    let mut points = vec![(0.0, 0.0)];
    let mut acc = 0.0;
    match p {
        Path::Jump { events, .. } => {
            for (k, &(t0, state)) in events.iter().enumerate() {
                let t1 = events.get(k + 1).map_or(horizon, |(t, _)| *t);
                let rate = c.eval(&state)?;
                acc += rate * (t1 - t0);
                if t1 > t0 {
                    points.push((t1, acc));
                }
            }
            if points.last().unwrap().0 < horizon {
                points.push((horizon, acc));
            }
        }
        Path::Grid { dt, values } => {
            for (k, state) in values[..values.len() - 1].iter().enumerate() {
                let rate = c.eval(state)?;
                acc += rate * dt;
                points.push(((k + 1) as f64 * dt, acc));
            }
        }
    }
    Ok(AfTrace::new(points))
}

/// Weight process along one path: either `e^{-A}` for an accumulated-rate
/// functional or the indicator of survival up to a terminal time.
#[derive(Debug, Clone, PartialEq)]
pub enum MfTrace {
    Exp(AfTrace),
    Indicator { tau: EventTime, horizon: f64 },
}

impl MfTrace {
    pub fn horizon(&self) -> f64 {
        match self {
            MfTrace::Exp(af) => af.horizon(),
            MfTrace::Indicator { horizon, .. } => *horizon,
        }
    }

    pub fn value(&self, t: f64) -> Result<f64> {
        match self {
            MfTrace::Exp(af) => Ok((-af.value(t)?).exp()),
            MfTrace::Indicator { tau, horizon } => {
                if t < 0.0 || t > *horizon || t.is_nan() {
                    return Err(Error::OutOfDomain {
                        t,
                        horizon: *horizon,
                    });
                }
                Ok(match tau {
                    EventTime::At(tau) if t >= *tau => 0.0,
                    _ => 1.0,
                })
            }
        }
    }

    pub fn initial_value(&self) -> f64 {
        self.value(0.0).expect("0 is always in the domain")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match self {
            MfTrace::Exp(af) => {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(["t", "value"]).map_err(csv_err)?;
                for (t, a) in af.breakpoints() {
                    out.write_record([t.to_string(), (-a).exp().to_string()])
                        .map_err(csv_err)?;
                }
                out.flush()?;
                Ok(())
            }
            MfTrace::Indicator { tau, horizon } => {
                let mut out = csv::Writer::from_writer(w);
                out.write_record(["t", "value"]).map_err(csv_err)?;
                out.write_record(["0".into(), self.value(0.0)?.to_string()])
                    .map_err(csv_err)?;
                if let EventTime::At(t) = tau {
                    out.write_record([t.to_string(), "0".into()]).map_err(csv_err)?;
                }
                out.write_record([horizon.to_string(), self.value(*horizon)?.to_string()])
                    .map_err(csv_err)?;
                out.flush()?;
                Ok(())
            }
        }
    }
}

/// `M_t = e^{-A_t}`.
pub fn mf_from_af(af: AfTrace) -> MfTrace {
    MfTrace::Exp(af)
}

/// Target of a hitting rule: a subset of a finite space, or a closed union of
/// real intervals (endpoints may be infinite).
#[derive(Debug, Clone, PartialEq)]
pub enum TargetSet {
    States(BTreeSet<usize>),
    RealIntervals(Vec<(f64, f64)>),
}

impl TargetSet {
    pub fn states(iter: impl IntoIterator<Item = usize>) -> Self {
        TargetSet::States(iter.into_iter().collect())
    }

    pub fn level_above(a: f64) -> Self {
        TargetSet::RealIntervals(vec![(a, f64::INFINITY)])
    }

    pub fn contains(&self, state: &ExtState) -> bool {
        match (self, state) {
            (TargetSet::States(set), ExtState::Discrete { index, .. }) => set.contains(index),
            (TargetSet::RealIntervals(intervals), ExtState::Real(x)) => {
                intervals.iter().any(|(lo, hi)| *lo <= *x && *x <= *hi)
            }
            _ => false,
        }
    }
}

/// Deterministic or first-hitting kill times. Both satisfy the memorylessness
/// identity `s + tau(shifted path) = tau` on `{s < tau}`.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalRule {
    HitClosedSet(TargetSet),
    Deterministic(f64),
}

/// First time the path sits in the closed target. By right-continuity the
/// infimum is attained: either the returned time satisfies `X_tau in B`, or
/// the path never visits the target and the result is censored.
pub fn hitting_time(p: &Path, target: &TargetSet) -> EventTime {
    match p {
        Path::Jump { events, horizon } => {
            for &(t, state) in events {
                if target.contains(&state) {
                    return EventTime::At(t);
                }
            }
            EventTime::Censored { horizon: *horizon }
        }
        Path::Grid { dt, values } => {
            for (k, state) in values.iter().enumerate() {
                if target.contains(state) {
                    return EventTime::At(k as f64 * dt);
                }
            }
            EventTime::Censored {
                horizon: p.horizon(),
            }
        }
    }
}

/// Survival indicator `1_{[0, tau)}` of a terminal rule along a path.
pub fn mf_terminal(p: &Path, rule: &TerminalRule) -> MfTrace {
    let horizon = p.horizon();
    let tau = match rule {
        TerminalRule::Deterministic(t0) => {
            if *t0 <= horizon {
                EventTime::At(*t0)
            } else {
                EventTime::Censored { horizon }
            }
        }
        TerminalRule::HitClosedSet(target) => hitting_time(p, target),
    };
    MfTrace::Indicator { tau, horizon }
}

/// First entrance into the cemetery. Because the cemetery is a trap, the path
/// is alive strictly before this time and dead from it on; equivalently the
/// lifetime exceeds `t` iff `X_t` is alive.
pub fn path_lifetime(p: &Path) -> EventTime {
    match p {
        Path::Jump { events, horizon } => {
            for &(t, state) in events {
                if !state.is_alive() {
                    return EventTime::At(t);
                }
            }
            EventTime::Censored { horizon: *horizon }
        }
        Path::Grid { dt, values } => {
            for (k, state) in values.iter().enumerate() {
                if !state.is_alive() {
                    return EventTime::At(k as f64 * dt);
                }
            }
            EventTime::Censored {
                horizon: p.horizon(),
            }
        }
    }
}

/// Mass the weight process sheds over `(s, t]`: `M_s - M_t`. Over any
/// partition of `(0, T]` these increments telescope to `M_0 - M_T`.
pub fn ls_increment(m: &MfTrace, s: f64, t: f64) -> Result<f64> {
    if !(0.0 <= s && s < t) {
        return Err(Error::Configuration(format!(
            "increment requires 0 <= s < t, got s = {s}, t = {t}"
        )));
    }
    Ok(m.value(s)? - m.value(t)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process_models::{sample_sde_path, DiffusionModel, RngStream};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn d(index: usize) -> ExtState {
        ExtState::Discrete { tag: 0, index }
    }

    fn two_state_path() -> Path {
        // in state 0 on [0,1), in state 1 from t = 1
        Path::jump(vec![(0.0, d(0)), (1.0, d(1))], 2.0).unwrap()
    }

    #[test]
    fn zero_rate_gives_zero_functional() {
        let p = two_state_path();
        let c = RateFunction::constant(0.0, 2).unwrap();
        let (a, trace) = additive_integral(&p, &c, 2.0).unwrap();
        assert_eq!(a, 0.0);
        assert_eq!(trace.value(1.3).unwrap(), 0.0);
    }

    #[test]
    fn constant_rate_is_linear() {
        let p = two_state_path();
        let c = RateFunction::constant(0.4, 2).unwrap();
        let (a, _) = additive_integral(&p, &c, 1.5).unwrap();
        assert_abs_diff_eq!(a, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn state_dependent_rate_hand_value() {
        let p = two_state_path();
        let c = RateFunction::discrete(vec![2.0, 3.0]).unwrap();
        let (a, _) = additive_integral(&p, &c, 1.5).unwrap();
        assert_abs_diff_eq!(a, 3.5, epsilon = 1e-15);
    }

    #[test]
    fn rate_bound_is_enforced() {
        let p = two_state_path();
        let c = RateFunction::discrete_with_bound(vec![2.0, 3.0], 5.0).unwrap();
        assert!(additive_integral(&p, &c, 1.0).is_ok());
        let err = RateFunction::discrete_with_bound(vec![2.0, 7.0], 5.0);
        assert!(matches!(err, Err(Error::RateBound { .. })));
    }

    #[test]
    fn additivity_under_shift() {
        let p = Path::jump(
            vec![(0.0, d(0)), (0.75, d(1)), (1.25, d(0)), (1.75, d(1))],
            3.0,
        )
        .unwrap();
        let c = RateFunction::discrete(vec![0.7, 1.9]).unwrap();
        for &s in &[0.25, 0.75, 1.0, 1.5] {
            let shifted = p.shift(s).unwrap();
            for &t in &[0.25, 0.5, 1.0] {
                let (whole, _) = additive_integral(&p, &c, s + t).unwrap();
                let (head, _) = additive_integral(&p, &c, s).unwrap();
                let (tail, _) = additive_integral(&shifted, &c, t).unwrap();
                assert_abs_diff_eq!(whole, head + tail, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn grid_additivity_within_tolerance() {
        let m = DiffusionModel::ornstein_uhlenbeck(1.0, 0.5, 0.01).unwrap();
        let mut rng = RngStream::new(2, 0).rng();
        let p = sample_sde_path(&m, 0.3, 2.0, &mut rng).unwrap();
        let c = RateFunction::continuous(|x| x * x, 1e6).unwrap();
        let s = 0.5;
        let shifted = p.shift(s).unwrap();
        for &t in &[0.25, 0.75, 1.5] {
            let (whole, _) = additive_integral(&p, &c, s + t).unwrap();
            let (head, _) = additive_integral(&p, &c, s).unwrap();
            let (tail, _) = additive_integral(&shifted, &c, t).unwrap();
            assert_abs_diff_eq!(whole, head + tail, epsilon = 1e-12);
        }
    }

    #[test]
    fn mf_from_af_matches_closed_forms() {
        let p = two_state_path();
        let zero = RateFunction::constant(0.0, 2).unwrap();
        let m = mf_from_af(additive_integral(&p, &zero, 0.0).unwrap().1);
        assert_eq!(m.value(1.7).unwrap(), 1.0);

        let lam = RateFunction::constant(0.8, 2).unwrap();
        let m = mf_from_af(additive_integral(&p, &lam, 0.0).unwrap().1);
        assert_abs_diff_eq!(m.value(1.5).unwrap(), (-1.2f64).exp(), epsilon = 1e-14);

        let c = RateFunction::discrete(vec![2.0, 3.0]).unwrap();
        let m = mf_from_af(additive_integral(&p, &c, 0.0).unwrap().1);
        assert_abs_diff_eq!(m.value(1.5).unwrap(), (-3.5f64).exp(), epsilon = 1e-14);
        assert_eq!(m.initial_value(), 1.0);
    }

    #[test]
    fn multiplicativity_at_breakpoints() {
        let p = Path::jump(
            vec![(0.0, d(0)), (0.75, d(1)), (1.25, d(0)), (1.75, d(1))],
            3.0,
        )
        .unwrap();
        let c = RateFunction::discrete(vec![0.7, 1.9]).unwrap();
        let m = mf_from_af(additive_integral(&p, &c, 0.0).unwrap().1);
        for &s in &[0.75, 1.25] {
            let shifted = p.shift(s).unwrap();
            let m_tail = mf_from_af(additive_integral(&shifted, &c, 0.0).unwrap().1);
            for &t in &[0.5, 1.0] {
                let lhs = m.value(s + t).unwrap();
                let rhs = m.value(s).unwrap() * m_tail.value(t).unwrap();
                assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn terminal_rule_satisfies_shift_identity() {
        let p = two_state_path();
        let rule = TerminalRule::Deterministic(1.25);
        let m = mf_terminal(&p, &rule);
        assert!(matches!(m, MfTrace::Indicator { tau: EventTime::At(t), .. } if t == 1.25));
        // after shifting by s < tau the remaining time to kill is tau - s
        for &s in &[0.25, 0.5, 1.0] {
            let shifted = p.shift(s).unwrap();
            let m2 = mf_terminal(&shifted, &TerminalRule::Deterministic(1.25 - s));
            match m2 {
                MfTrace::Indicator { tau: EventTime::At(t), .. } => {
                    assert_abs_diff_eq!(s + t, 1.25, epsilon = 1e-12)
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn empty_target_never_hits() {
        let p = two_state_path();
        let m = mf_terminal(&p, &TerminalRule::HitClosedSet(TargetSet::states([])));
        assert_eq!(m.value(2.0).unwrap(), 1.0);
        assert!(matches!(
            m,
            MfTrace::Indicator { tau: EventTime::Censored { .. }, .. }
        ));
    }

    #[test]
    fn hitting_a_state_set() {
        let p = two_state_path();
        let tau = hitting_time(&p, &TargetSet::states([1]));
        assert_eq!(tau, EventTime::At(1.0));
        // hit-at-start and shift identity for hitting rules
        assert_eq!(hitting_time(&p, &TargetSet::states([0])), EventTime::At(0.0));
        let s = 0.5;
        let tau_shifted = hitting_time(&p.shift(s).unwrap(), &TargetSet::states([1]));
        assert_eq!(tau_shifted, EventTime::At(0.5));
    }

    #[test]
    fn hitting_level_set_on_grid_path() {
        let m = DiffusionModel::ornstein_uhlenbeck(-2.0, 0.3, 0.01).unwrap(); // repelling drift
        let mut rng = RngStream::new(10, 3).rng();
        let p = sample_sde_path(&m, 0.5, 4.0, &mut rng).unwrap();
        let target = TargetSet::level_above(1.0);
        match hitting_time(&p, &target) {
            EventTime::At(tau) => {
                let hit = p.eval(tau).unwrap().real_value().unwrap();
                assert!(hit >= 1.0, "X_tau = {hit} must live in the target");
                // strictly before the hit the path stays below the level
                let mut t = 0.0;
                while t < tau - 1e-9 {
                    assert!(p.eval(t).unwrap().real_value().unwrap() < 1.0);
                    t += 0.01;
                }
            }
            EventTime::Censored { .. } => panic!("repelled path should reach the level"),
        }
    }

    #[test]
    fn lifetime_of_paths() {
        let alive = two_state_path();
        assert!(path_lifetime(&alive).is_censored());

        let dead = Path::jump(vec![(0.0, ExtState::Dead)], 2.0).unwrap();
        assert_eq!(path_lifetime(&dead), EventTime::At(0.0));

        let killed = Path::jump(vec![(0.0, d(0)), (1.0, ExtState::Dead)], 2.0).unwrap();
        assert_eq!(path_lifetime(&killed), EventTime::At(1.0));
        // alive strictly before, dead from the lifetime on
        assert!(killed.eval(0.999).unwrap().is_alive());
        assert!(!killed.eval(1.0).unwrap().is_alive());
    }

    #[test]
    fn increments_of_weight_traces() {
        let p = two_state_path();
        let zero = RateFunction::constant(0.0, 2).unwrap();
        let m = mf_from_af(additive_integral(&p, &zero, 0.0).unwrap().1);
        assert_eq!(ls_increment(&m, 0.2, 1.8).unwrap(), 0.0);

        let unit = RateFunction::constant(1.0, 2).unwrap();
        let m = mf_from_af(additive_integral(&p, &unit, 0.0).unwrap().1);
        assert_abs_diff_eq!(
            ls_increment(&m, 0.0, 1.0).unwrap(),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-14
        );
        assert!(ls_increment(&m, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn prop_increments_telescope(cuts in proptest::collection::vec(0.01..1.99f64, 1..12)) {
            let p = Path::jump(vec![(0.0, d(0)), (1.0, d(1))], 2.0).unwrap();
            let c = RateFunction::discrete(vec![0.9, 2.1]).unwrap();
            let m = mf_from_af(additive_integral(&p, &c, 0.0).unwrap().1);
            let mut grid: Vec<f64> = cuts;
            grid.push(0.0);
            grid.push(2.0);
            grid.sort_by(f64::total_cmp);
            grid.dedup();
            let total: f64 = grid
                .windows(2)
                .map(|w| ls_increment(&m, w[0], w[1]).unwrap())
                .sum();
            let expected = m.value(0.0).unwrap() - m.value(2.0).unwrap();
            prop_assert!((total - expected).abs() <= 1e-12);
            prop_assert!(grid.windows(2).all(|w| ls_increment(&m, w[0], w[1]).unwrap() >= 0.0));
        }

        #[test]
        fn prop_af_starts_at_zero_and_is_nondecreasing(
            rates in proptest::collection::vec(0.0..3.0f64, 3),
            jumps in proptest::collection::vec(0.01..0.9f64, 0..4),
        ) {
            let mut t = 0.0;
            let mut events = vec![(0.0, d(0))];
            for (k, gap) in jumps.iter().enumerate() {
                t += gap;
                events.push((t, d((k + 1) % 3)));
            }
            let p = Path::jump(events, t + 1.0).unwrap();
            let c = RateFunction::discrete(rates).unwrap();
            let (_, trace) = additive_integral(&p, &c, 0.0).unwrap();
            prop_assert_eq!(trace.value(0.0).unwrap(), 0.0);
            let mut prev = 0.0;
            for &(bt, av) in trace.breakpoints() {
                prop_assert!(av >= prev - 1e-15, "A must be nondecreasing at t = {}", bt);
                prev = av;
            }
        }
    }

    #[test]
    fn af_csv_export_has_header_and_rows() {
        let p = two_state_path();
        let c = RateFunction::discrete(vec![2.0, 3.0]).unwrap();
        let (_, trace) = additive_integral(&p, &c, 0.0).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,value\n"));
        assert!(text.lines().count() >= 3);
    }
}
