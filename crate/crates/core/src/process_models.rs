//! Concrete process families: finite-state chains in continuous time (exact
//! jump paths) and 1-D Euler-discretized diffusions, together with the exact
//! transition-matrix oracle computed by uniformization.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extended_state::{ExtState, StateSpaceTag, SubKernel};
use crate::mat;

/// Tolerance on rate-matrix row sums (diagonal must cancel the off-diagonal mass).
pub const RATE_ROW_TOLERANCE: f64 = 1e-12;

/// A reproducible random stream: the pair (master seed, stream id) fully
/// determines the number sequence, and distinct stream ids select distinct
/// counter streams of the underlying ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Same master seed, different stream.
    pub fn stream(&self, stream_id: u64) -> Self {
        Self {
            master_seed: self.master_seed,
            stream_id,
        }
    }

    pub fn offset(&self, delta: u64) -> Self {
        self.stream(self.stream_id.wrapping_add(delta))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Conservative rate matrix of a finite-state chain: off-diagonal entries are
/// nonnegative and every row sums to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    tag: StateSpaceTag,
    rates: Vec<Vec<f64>>,
}

impl RateModel {
    pub fn new(tag: StateSpaceTag, rates: Vec<Vec<f64>>) -> Result<Self> {
        let n = tag.size;
        if rates.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rates.len(),
            });
        }
        for (i, row) in rates.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: row.len(),
                });
            }
            let mut sum = 0.0;
            for (j, &r) in row.iter().enumerate() {
                if !r.is_finite() {
                    return Err(Error::InvalidModel(format!("rate ({i},{j}) is not finite")));
                }
                if i != j && r < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "off-diagonal rate ({i},{j}) = {r} is negative"
                    )));
                }
                sum += r;
            }
            if sum.abs() > RATE_ROW_TOLERANCE * row[i].abs().max(1.0) {
                return Err(Error::InvalidModel(format!(
                    "row {i} of the rate matrix sums to {sum}, not 0"
                )));
            }
        }
        Ok(Self { tag, rates })
    }

    /// Builds the diagonal from the off-diagonal entries.
    pub fn from_off_diagonal(tag: StateSpaceTag, mut rates: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rates.iter_mut().enumerate() {
            row[i] = 0.0;
            let sum: f64 = row.iter().sum();
            row[i] = -sum;
        }
        Self::new(tag, rates)
    }

    pub fn tag(&self) -> &StateSpaceTag {
        &self.tag
    }

    pub fn size(&self) -> usize {
        self.tag.size
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }
}

/// 1-D diffusion with Euler-Maruyama stepping.
#[derive(Clone)]
pub struct DiffusionModel {
    drift: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    diffusion: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    dt: f64,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel").field("dt", &self.dt).finish()
    }
}

impl DiffusionModel {
    pub fn new(
        drift: impl Fn(f64) -> f64 + Send + Sync + 'static,
        diffusion: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidModel(format!("dt = {dt} must be positive")));
        }
        Ok(Self {
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            dt,
        })
    }

    pub fn ornstein_uhlenbeck(theta: f64, sigma: f64, dt: f64) -> Result<Self> {
        Self::new(move |x| -theta * x, move |_| sigma, dt)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn drift_at(&self, x: f64) -> f64 {
        (self.drift)(x)
    }

    pub fn diffusion_at(&self, x: f64) -> f64 {
        (self.diffusion)(x)
    }
}

const GRID_ALIGN_TOLERANCE: f64 = 1e-9;

/// Right-continuous trajectory over extended states.
///
/// Jump paths hold the exact event list of a chain; grid paths hold the values
/// of a discretized diffusion at multiples of `dt`. Both enforce the trap rule:
/// once dead, dead forever.
#[derive(Debug, Clone, PartialEq)]
pub enum Path {
    Jump {
        events: Vec<(f64, ExtState)>,
        horizon: f64,
    },
    Grid {
        dt: f64,
        values: Vec<ExtState>,
    },
}

impl Path {
    pub fn jump(events: Vec<(f64, ExtState)>, horizon: f64) -> Result<Self> {
        if events.is_empty() || events[0].0 != 0.0 {
            return Err(Error::InvalidModel("jump path must start at t = 0".into()));
        }
        let mut dead = false;
        let mut prev = -1.0;
        for &(t, state) in &events {
            if t <= prev {
                return Err(Error::InvalidModel(
                    "jump times must be strictly ascending".into(),
                ));
            }
            if dead && state.is_alive() {
                return Err(Error::InvalidModel(
                    "path leaves the dead state, which is a trap".into(),
                ));
            }
            dead = dead || !state.is_alive();
            prev = t;
        }
        if horizon < prev {
            return Err(Error::InvalidModel(
                "horizon must not precede the last event".into(),
            ));
        }
        Ok(Path::Jump { events, horizon })
    }

    pub fn grid(dt: f64, values: Vec<ExtState>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidModel(format!("dt = {dt} must be positive")));
        }
        if values.is_empty() {
            return Err(Error::InvalidModel("grid path must not be empty".into()));
        }
        let mut dead = false;
        for v in &values {
            if dead && v.is_alive() {
                return Err(Error::InvalidModel(
                    "path leaves the dead state, which is a trap".into(),
                ));
            }
            if let ExtState::Real(x) = v {
                if !x.is_finite() {
                    return Err(Error::InvalidModel("grid value is not finite".into()));
                }
            }
            dead = dead || !v.is_alive();
        }
        Ok(Path::Grid { dt, values })
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Path::Jump { horizon, .. } => *horizon,
            Path::Grid { dt, values } => dt * (values.len() - 1) as f64,
        }
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        if t < 0.0 || t > self.horizon() || t.is_nan() {
            return Err(Error::OutOfDomain {
                t,
                horizon: self.horizon(),
            });
        }
        Ok(())
    }

    /// Right-continuous evaluation.
    pub fn eval(&self, t: f64) -> Result<ExtState> {
        self.check_domain(t)?;
        match self {
            Path::Jump { events, .. } => {
                let idx = events.partition_point(|(s, _)| *s <= t);
                Ok(events[idx - 1].1)
            }
            Path::Grid { dt, values } => {
                let ratio = t / dt;
                let nearest = ratio.round();
                // snap to the grid point when t is one of the k*dt up to roundoff
                let idx = if (ratio - nearest).abs() <= GRID_ALIGN_TOLERANCE * ratio.max(1.0) {
                    nearest as usize
                } else {
                    ratio.floor() as usize
                };
                Ok(values[idx.min(values.len() - 1)])
            }
        }
    }

    /// State just before `t`: at a jump time this is the pre-jump state, on a
    /// grid point it is the previous grid value.
    pub fn left_limit(&self, t: f64) -> Result<ExtState> {
        self.check_domain(t)?;
        if t == 0.0 {
            return Err(Error::LeftLimitAtZero);
        }
        match self {
            Path::Jump { events, .. } => {
                let idx = events.partition_point(|(s, _)| *s < t);
                Ok(events[idx - 1].1)
            }
            Path::Grid { dt, values } => {
                let ratio = t / dt;
                let nearest = ratio.round();
                let idx = if (ratio - nearest).abs() <= GRID_ALIGN_TOLERANCE * ratio.max(1.0)
                    && nearest >= 1.0
                {
                    nearest as usize - 1
                } else {
                    ratio.floor() as usize
                };
                Ok(values[idx.min(values.len() - 1)])
            }
        }
    }

    /// Time shift: `shift(p, s).eval(t) == p.eval(s + t)`.
    pub fn shift(&self, s: f64) -> Result<Path> {
        self.check_domain(s)?;
        match self {
            Path::Jump { events, horizon } => {
                let mut shifted = vec![(0.0, self.eval(s)?)];
                for &(t, state) in events.iter().filter(|(t, _)| *t > s) {
                    shifted.push((t - s, state));
                }
                Path::jump(shifted, horizon - s)
            }
            Path::Grid { dt, values } => {
                let ratio = s / dt;
                let k = ratio.round();
                if (ratio - k).abs() > GRID_ALIGN_TOLERANCE * ratio.max(1.0) {
                    return Err(Error::Configuration(format!(
                        "grid path shift requires s = k*dt, got s = {s} with dt = {dt}"
                    )));
                }
                Path::grid(*dt, values[k as usize..].to_vec())
            }
        }
    }
}

/// Simulates the jump chain of a rate model: the holding time in state `x` is
/// exponential with rate `-L[x][x]` and the jump target is drawn proportional
/// to the off-diagonal rates. A zero row is absorbing.
pub fn sample_ctmc_path<R: Rng>(
    m: &RateModel,
    x0: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<Path> {
    if x0 >= m.size() {
        return Err(Error::InvalidModel(format!(
            "start state {x0} outside space of size {}",
            m.size()
        )));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidModel("horizon must be positive".into()));
    }
    let tag = m.tag().id;
    let mut events = vec![(0.0, ExtState::Discrete { tag, index: x0 })];
    let mut t = 0.0;
    let mut x = x0;
    loop {
        let rate = -m.rates[x][x];
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp1.sample(rng);
        t += hold / rate;
        if t > horizon {
            break;
        }
        let u: f64 = rng.random::<f64>() * rate;
        let mut acc = 0.0;
        let mut next = x;
        for (j, &r) in m.rates[x].iter().enumerate() {
            if j == x {
                continue;
            }
            acc += r;
            if u < acc {
                next = j;
                break;
            }
        }
        if next == x {
            // only reachable through rounding at the top of the cumulative scan
            next = m.rates[x]
                .iter()
                .enumerate()
                .rev()
                .find(|(j, &r)| *j != x && r > 0.0)
                .map(|(j, _)| j)
                .unwrap_or(x);
        }
        x = next;
        events.push((t, ExtState::Discrete { tag, index: x }));
    }
    Path::jump(events, horizon)
}

/// Euler-Maruyama path of a 1-D diffusion on the grid `0, dt, 2 dt, ...`
/// covering `[0, horizon]`.
pub fn sample_sde_path<R: Rng>(
    m: &DiffusionModel,
    x0: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<Path> {
    if horizon < m.dt {
        return Err(Error::InvalidModel(
            "horizon must be at least one time step".into(),
        ));
    }
    let steps = (horizon / m.dt - GRID_ALIGN_TOLERANCE).ceil() as usize;
    let mut values = Vec::with_capacity(steps + 1);
    let mut x = x0;
    values.push(ExtState::Real(x));
    for k in 0..steps {
        let noise: f64 = StandardNormal.sample(rng);
        x += m.drift_at(x) * m.dt + m.diffusion_at(x) * m.dt.sqrt() * noise;
        if !x.is_finite() {
            return Err(Error::PathBlowup {
                t: (k + 1) as f64 * m.dt,
            });
        }
        values.push(ExtState::Real(x));
    }
    Path::grid(m.dt, values)
}

/// Matrix exponential `e^{tM}` of a sub-generator (off-diagonal >= 0, row sums
/// <= 0) by uniformization: `e^{tM} = sum_k pois(k; lambda t) P^k` with
/// `P = I + M/lambda`, truncated once the Poisson tail is below 1e-13. All
/// partial terms are substochastic, so the truncation bound is exact.
pub(crate) fn expm_subgenerator(m: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    let n = m.len();
    if t == 0.0 {
        return mat::identity(n);
    }
    let lambda = m
        .iter()
        .enumerate()
        .map(|(i, row)| -row[i])
        .fold(0.0, f64::max);
    if lambda <= 0.0 {
        return mat::identity(n);
    }
    // keep lambda*t moderate so the Poisson weights stay representable
    if lambda * t > 128.0 {
        let half = expm_subgenerator(m, t / 2.0);
        return mat::mat_mul(&half, &half);
    }
    let mut p = mat::identity(n);
    for i in 0..n {
        for j in 0..n {
            p[i][j] += m[i][j] / lambda;
        }
    }
    let mu = lambda * t;
    let mut weight = (-mu).exp();
    let mut cumulative = weight;
    let mut power = mat::identity(n);
    let mut out: Vec<Vec<f64>> = power
        .iter()
        .map(|row| row.iter().map(|v| v * weight).collect())
        .collect();
    let mut k = 0u64;
    while 1.0 - cumulative > 1e-13 {
        k += 1;
        power = mat::mat_mul(&power, &p);
        weight *= mu / k as f64;
        cumulative += weight;
        for i in 0..n {
            for j in 0..n {
                out[i][j] += weight * power[i][j];
            }
        }
        if k > (10.0 * mu) as u64 + 200 {
            break;
        }
    }
    out
}

/// Exact transition matrix of the chain at time `t`, optionally killed at the
/// state-dependent rate `c`: `e^{t L}` or `e^{t(L - diag c)}`.
pub fn ctmc_semigroup_exact(m: &RateModel, c: Option<&[f64]>, t: f64) -> Result<SubKernel> {
    if t < 0.0 {
        return Err(Error::InvalidModel(format!("time {t} must be nonnegative")));
    }
    let n = m.size();
    let mut gen = m.rates.clone();
    if let Some(c) = c {
        if c.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: c.len(),
            });
        }
        for (i, &ci) in c.iter().enumerate() {
            if ci < 0.0 || !ci.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "kill rate c[{i}] = {ci} must be nonnegative"
                )));
            }
            gen[i][i] -= ci;
        }
    }
    let rows = expm_subgenerator(&gen, t);
    // uniformization yields nonnegative entries; clamp sums that exceed one by rounding
    let rows = rows
        .into_iter()
        .map(|row| row.into_iter().map(|v| v.min(1.0)).collect())
        .collect();
    SubKernel::new(m.tag().clone(), rows)
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum PathRepr {
    Jump {
        tag: u32,
        events: Vec<(f64, Option<usize>)>,
        horizon: f64,
    },
    Grid {
        dt: f64,
        values: Vec<Option<f64>>,
    },
}

impl Serialize for Path {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::Error as _;
        let repr = match self {
            Path::Jump { events, horizon } => {
                let tag = events
                    .iter()
                    .find_map(|(_, st)| match st {
                        ExtState::Discrete { tag, .. } => Some(*tag),
                        _ => None,
                    })
                    .unwrap_or(0);
                let events = events
                    .iter()
                    .map(|(t, st)| match st {
                        ExtState::Discrete { index, .. } => Ok((*t, Some(*index))),
                        ExtState::Dead => Ok((*t, None)),
                        ExtState::Real(_) => Err(S::Error::custom(
                            "jump paths serialize discrete states only",
                        )),
                    })
                    .collect::<std::result::Result<_, _>>()?;
                PathRepr::Jump {
                    tag,
                    events,
                    horizon: *horizon,
                }
            }
            Path::Grid { dt, values } => PathRepr::Grid {
                dt: *dt,
                values: values
                    .iter()
                    .map(|st| match st {
                        ExtState::Real(x) => Some(*x),
                        _ => None,
                    })
                    .collect(),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Path {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = PathRepr::deserialize(d)?;
        match repr {
            PathRepr::Jump {
                tag,
                events,
                horizon,
            } => {
                let events = events
                    .into_iter()
                    .map(|(t, st)| {
                        (
                            t,
                            st.map_or(ExtState::Dead, |index| ExtState::Discrete { tag, index }),
                        )
                    })
                    .collect();
                Path::jump(events, horizon).map_err(D::Error::custom)
            }
            PathRepr::Grid { dt, values } => {
                let values = values
                    .into_iter()
                    .map(|v| v.map_or(ExtState::Dead, ExtState::Real))
                    .collect();
                Path::grid(dt, values).map_err(D::Error::custom)
            }
        }
    }
}
