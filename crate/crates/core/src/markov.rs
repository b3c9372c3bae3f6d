//! Finite-state jump Markov processes.
//!
//! A model is a constant off-diagonal rate matrix `Q` on `K` labelled states,
//! optionally multiplied by a positive scalar modulation `m(t)`, so that the
//! rate measure is `v(t, x, {y}) = m(t) Q[x][y]`. Paths are simulated exactly
//! (thinning against `sup m * total_rate(x)` when the rates are modulated), the
//! marginal law comes from the forward Kolmogorov equation, and
//! [`compensated_integral`] evaluates integrals against `q = p - v dt`.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::grid::{CompensatedSum, TimeGrid};

/// Largest supported state space.
pub const MAX_STATES: usize = 10_000;

/// Scalar time modulation `m(t) > 0` of the base rate matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Modulation {
    #[default]
    Constant,
    /// `1 + amplitude * sin(2 pi t / period)`, `0 <= amplitude < 1`.
    Sinusoidal { amplitude: f64, period: f64 },
    /// `1 + slope * t`, required positive on `[0, T]`.
    Linear { slope: f64 },
}

impl Modulation {
    #[inline]
    pub fn factor(&self, t: f64) -> f64 {
        match *self {
            Modulation::Constant => 1.0,
            Modulation::Sinusoidal { amplitude, period } => {
                1.0 + amplitude * (2.0 * PI * t / period).sin()
            }
            Modulation::Linear { slope } => 1.0 + slope * t,
        }
    }

    /// An upper bound of `m` on `[0, horizon]`; the thinning majorant.
    pub fn sup(&self, horizon: f64) -> f64 {
        match *self {
            Modulation::Constant => 1.0,
            Modulation::Sinusoidal { amplitude, .. } => 1.0 + amplitude,
            Modulation::Linear { slope } => 1.0f64.max(1.0 + slope * horizon),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        match *self {
            Modulation::Constant => Ok(()),
            Modulation::Sinusoidal { amplitude, period } => {
                if !(0.0..1.0).contains(&amplitude) || !(period > 0.0 && period.is_finite()) {
                    return domain("sinusoidal modulation needs 0 <= amplitude < 1 and period > 0");
                }
                Ok(())
            }
            Modulation::Linear { slope } => {
                if !slope.is_finite() || 1.0 + slope * horizon <= 0.0 {
                    return domain("linear modulation must stay positive on [0, T]");
                }
                Ok(())
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Modulation::Constant)
    }
}

/// Finite state space with its rate measure and horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovModel {
    labels: Vec<String>,
    /// Row-major `K x K` base rates, zero diagonal.
    base: Vec<f64>,
    base_totals: Vec<f64>,
    horizon: f64,
    modulation: Modulation,
}

impl MarkovModel {
    pub fn new(
        labels: Vec<String>,
        rates: Vec<Vec<f64>>,
        horizon: f64,
        modulation: Modulation,
    ) -> Result<Self> {
        let k = labels.len();
        if k == 0 || k > MAX_STATES {
            return domain(format!("state count {k} outside 1..={MAX_STATES}"));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return domain(format!("duplicate state label {l:?}"));
            }
        }
        if rates.len() != k || rates.iter().any(|r| r.len() != k) {
            return domain(format!("rate matrix must be {k} x {k}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return domain("horizon must be positive and finite");
        }
        modulation.validate(horizon)?;
        let mut base = Vec::with_capacity(k * k);
        for (x, row) in rates.iter().enumerate() {
            for (y, &r) in row.iter().enumerate() {
                if !r.is_finite() || r < 0.0 {
                    return domain(format!("rate ({x},{y}) = {r} is not a finite nonnegative number"));
                }
                if x == y && r != 0.0 {
                    return domain(format!("diagonal rate ({x},{x}) must be zero"));
                }
                base.push(r);
            }
        }
        let base_totals = (0..k).map(|x| base[x * k..(x + 1) * k].iter().sum()).collect();
        Ok(Self {
            labels,
            base,
            base_totals,
            horizon,
            modulation,
        })
    }

    /// Time-homogeneous model with default labels `0..K`.
    pub fn homogeneous(rates: Vec<Vec<f64>>, horizon: f64) -> Result<Self> {
        let labels = (0..rates.len()).map(|i| i.to_string()).collect();
        Self::new(labels, rates, horizon, Modulation::Constant)
    }

    /// Two states with rates `a: 0 -> 1` and `b: 1 -> 0`.
    pub fn two_state(a: f64, b: f64, horizon: f64) -> Result<Self> {
        Self::homogeneous(vec![vec![0.0, a], vec![b, 0.0]], horizon)
    }

    pub fn with_modulation(mut self, modulation: Modulation) -> Result<Self> {
        modulation.validate(self.horizon)?;
        self.modulation = modulation;
        Ok(self)
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, x: usize) -> &str {
        &self.labels[x]
    }

    pub fn modulation(&self) -> Modulation {
        self.modulation
    }

    pub fn state_index(&self, label: &str) -> Result<usize> {
        match self.labels.iter().position(|l| l == label) {
            Some(i) => Ok(i),
            None => domain(format!("unknown state label {label:?}")),
        }
    }

    pub(crate) fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.num_states() {
            return domain(format!("state index {x} out of range"));
        }
        Ok(())
    }

    /// `v(t, x, {y})`.
    #[inline]
    pub fn rate(&self, t: f64, x: usize, y: usize) -> f64 {
        self.modulation.factor(t) * self.base[x * self.num_states() + y]
    }

    /// Writes `v(t, x, {y})` for every `y` into `out`.
    #[inline]
    pub fn rates_row_into(&self, t: f64, x: usize, out: &mut [f64]) {
        let k = self.num_states();
        let m = self.modulation.factor(t);
        for (o, &r) in out.iter_mut().zip(&self.base[x * k..(x + 1) * k]) {
            *o = m * r;
        }
    }

    pub fn rates_row(&self, t: f64, x: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states()];
        self.rates_row_into(t, x, &mut out);
        out
    }

    pub(crate) fn base_row(&self, x: usize) -> &[f64] {
        let k = self.num_states();
        &self.base[x * k..(x + 1) * k]
    }

    /// `v(t, x, Gamma)`, the total jump intensity out of `x`.
    pub fn total_rate(&self, t: f64, x: usize) -> Result<f64> {
        self.check_state(x)?;
        if !(0.0..=self.horizon).contains(&t) {
            return domain(format!("time {t} outside [0, {}]", self.horizon));
        }
        Ok(self.total_rate_unchecked(t, x))
    }

    #[inline]
    pub(crate) fn total_rate_unchecked(&self, t: f64, x: usize) -> f64 {
        self.modulation.factor(t) * self.base_totals[x]
    }

    /// `sup_{t, x} v(t, x, Gamma)`.
    pub fn sup_total_rate(&self) -> f64 {
        let m = self.modulation.sup(self.horizon);
        self.base_totals.iter().fold(0.0f64, |a, &b| a.max(m * b))
    }

    /// `(A(t) u)(x) = sum_y v(t, x, y) (u(y) - u(x))` for every `x`.
    pub(crate) fn apply_generator(&self, t: f64, u: &[f64], out: &mut [f64]) {
        let k = self.num_states();
        let m = self.modulation.factor(t);
        for x in 0..k {
            let row = &self.base[x * k..(x + 1) * k];
            let ux = u[x];
            let s: f64 = row.iter().zip(u).map(|(&r, &uy)| r * (uy - ux)).sum();
            out[x] = m * s;
        }
    }

    /// Exact simulation of one trajectory on `[t0, T]` started at `x0`.
    pub fn simulate_path<R: Rng + ?Sized>(&self, t0: f64, x0: usize, rng: &mut R) -> Result<Trajectory> {
        self.check_state(x0)?;
        if !(t0 >= 0.0 && t0 < self.horizon) {
            return domain(format!("start time {t0} must lie in [0, {})", self.horizon));
        }
        let m_sup = self.modulation.sup(self.horizon);
        let constant = self.modulation.is_constant();
        let mut jumps = Vec::new();
        let mut t = t0;
        let mut x = x0;
        loop {
            let majorant = m_sup * self.base_totals[x];
            if majorant <= 0.0 {
                break;
            }
            let exp = Exp::new(majorant).expect("positive rate");
            t += exp.sample(rng);
            if t > self.horizon {
                break;
            }
            if !constant {
                let accept = self.modulation.factor(t) / m_sup;
                if rng.random::<f64>() >= accept {
                    continue;
                }
            }
            let target = rng.random::<f64>() * self.base_totals[x];
            let row = self.base_row(x);
            let mut acc = 0.0;
            let mut next = None;
            for (y, &r) in row.iter().enumerate() {
                if r > 0.0 {
                    acc += r;
                    next = Some(y);
                    if target < acc {
                        break;
                    }
                }
            }
            x = next.expect("a state with positive total rate has a positive entry");
            jumps.push(Jump { time: t, state: x });
        }
        Ok(Trajectory {
            t0,
            x0,
            jumps,
            horizon: self.horizon,
        })
    }

    /// Deterministic simulation for path `path_id` of the master seed `seed`.
    pub fn simulate(&self, t0: f64, x0: usize, seed: PathSeed) -> Result<Trajectory> {
        self.simulate_path(t0, x0, &mut seed.rng())
    }

    /// Solves the forward Kolmogorov equation on `grid` from `x0` at `grid.start()`.
    pub fn marginal_law(&self, x0: usize, grid: &TimeGrid) -> Result<MarginalLaw> {
        self.check_state(x0)?;
        if grid.start() < 0.0 || (grid.end() - self.horizon).abs() > 1e-12 * (1.0 + self.horizon) {
            return domain(format!(
                "law grid [{}, {}] must end at the horizon {}",
                grid.start(),
                grid.end(),
                self.horizon
            ));
        }
        let k = self.num_states();
        let n = grid.len();
        let mut probs = vec![0.0; n * k];
        probs[x0] = 1.0;
        let mut p = vec![0.0; k];
        p[x0] = 1.0;
        let mut stage = vec![0.0; k];
        let mut k1 = vec![0.0; k];
        let mut k2 = vec![0.0; k];
        let mut k3 = vec![0.0; k];
        let mut k4 = vec![0.0; k];
        for step in 0..n - 1 {
            let (ta, tb) = (grid.time(step), grid.time(step + 1));
            let h = tb - ta;
            let tm = 0.5 * (ta + tb);
            self.forward_rhs(ta, &p, &mut k1);
            axpy_into(&p, 0.5 * h, &k1, &mut stage);
            self.forward_rhs(tm, &stage, &mut k2);
            axpy_into(&p, 0.5 * h, &k2, &mut stage);
            self.forward_rhs(tm, &stage, &mut k3);
            axpy_into(&p, h, &k3, &mut stage);
            self.forward_rhs(tb, &stage, &mut k4);
            for i in 0..k {
                p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let total: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= total;
            }
            probs[(step + 1) * k..(step + 2) * k].copy_from_slice(&p);
        }
        for v in probs.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(MarginalLaw {
            grid: grid.clone(),
            states: k,
            probs,
        })
    }

    /// `dp/dt (y) = sum_x p(x) v(t, x, y) - p(y) v(t, y, Gamma)`.
    fn forward_rhs(&self, t: f64, p: &[f64], out: &mut [f64]) {
        let k = self.num_states();
        let m = self.modulation.factor(t);
        out.iter_mut().for_each(|o| *o = 0.0);
        for x in 0..k {
            let px = p[x];
            if px == 0.0 {
                continue;
            }
            let row = &self.base[x * k..(x + 1) * k];
            for (o, &r) in out.iter_mut().zip(row) {
                *o += m * px * r;
            }
            out[x] -= m * px * self.base_totals[x];
        }
    }
}

fn axpy_into(x: &[f64], a: f64, d: &[f64], out: &mut [f64]) {
    for ((o, &xi), &di) in out.iter_mut().zip(x).zip(d) {
        *o = xi + a * di;
    }
}

/// Master seed plus path counter; each path gets its own ChaCha stream so
/// batch results do not depend on evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathSeed {
    pub master: u64,
    pub path: u64,
}

impl PathSeed {
    pub fn new(master: u64, path: u64) -> Self {
        Self { master, path }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.path);
        rng
    }
}

/// One jump of a trajectory: the jump time and the post-jump state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
}

/// A right-continuous piecewise-constant path on `[t0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub x0: usize,
    pub jumps: Vec<Jump>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn num_jumps(&self) -> usize {
        self.jumps.len()
    }

    /// `X_t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let n = self.jumps.partition_point(|j| j.time <= t);
        if n == 0 {
            self.x0
        } else {
            self.jumps[n - 1].state
        }
    }

    /// `X_{t-}`.
    pub fn state_before(&self, t: f64) -> usize {
        let n = self.jumps.partition_point(|j| j.time < t);
        if n == 0 {
            self.x0
        } else {
            self.jumps[n - 1].state
        }
    }

    /// Constant pieces `(start, end, state)` covering `[t0, horizon]`.
    pub fn segments(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        let n = self.jumps.len();
        (0..=n).map(move |i| {
            let start = if i == 0 { self.t0 } else { self.jumps[i - 1].time };
            let end = if i == n { self.horizon } else { self.jumps[i].time };
            let state = if i == 0 { self.x0 } else { self.jumps[i - 1].state };
            (start, end, state)
        })
    }

    /// Jumps as `(time, pre-jump state, post-jump state)`.
    pub fn transitions(&self) -> impl Iterator<Item = (f64, usize, usize)> + '_ {
        self.jumps.iter().enumerate().map(move |(i, j)| {
            let from = if i == 0 { self.x0 } else { self.jumps[i - 1].state };
            (j.time, from, j.state)
        })
    }

    /// Structural invariants: increasing times inside `(t0, horizon]`, no self-jumps.
    pub fn is_consistent(&self) -> bool {
        let mut last = self.t0;
        let mut state = self.x0;
        for j in &self.jumps {
            if !(j.time > last && j.time <= self.horizon) || j.state == state {
                return false;
            }
            last = j.time;
            state = j.state;
        }
        true
    }
}

/// Marginal distributions of `X` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalLaw {
    grid: TimeGrid,
    states: usize,
    probs: Vec<f64>,
}

impl MarginalLaw {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    /// Distribution at grid node `k`.
    pub fn probs(&self, k: usize) -> &[f64] {
        &self.probs[k * self.states..(k + 1) * self.states]
    }

    /// The law restricted to nodes `first..=last`.
    pub fn restrict(&self, first: usize, last: usize) -> Result<MarginalLaw> {
        let grid = self.grid.slice(first, last)?;
        Ok(MarginalLaw {
            grid,
            states: self.states,
            probs: self.probs[first * self.states..(last + 1) * self.states].to_vec(),
        })
    }

    /// The law on every `stride`-th node, always keeping the last one.
    pub fn thin(&self, stride: usize) -> Result<MarginalLaw> {
        if stride == 0 {
            return domain("thinning stride must be positive");
        }
        let n = self.grid.len();
        let mut nodes: Vec<usize> = (0..n).step_by(stride).collect();
        if nodes.last() != Some(&(n - 1)) {
            nodes.push(n - 1);
        }
        let times = nodes.iter().map(|&k| self.grid.time(k)).collect();
        Ok(MarginalLaw {
            grid: TimeGrid::from_times(times)?,
            states: self.states,
            probs: nodes.iter().flat_map(|&k| self.probs(k).iter().copied()).collect(),
        })
    }

    /// `E[g(X_{s_k})]`.
    pub fn expect(&self, k: usize, g: impl Fn(usize) -> f64) -> f64 {
        self.probs(k).iter().enumerate().map(|(x, &p)| p * g(x)).sum()
    }
}

/// `sum_n z(T_n, X_{T_n-}, X_{T_n}) - int_{t0}^{T} sum_y z(r, X_r, y) v(r, X_r, y) dr`.
///
/// The compensator is integrated with Simpson's rule on every piece of an
/// inter-jump segment cut at the nodes of `grid`, which must cover the path.
pub fn compensated_integral(
    model: &MarkovModel,
    traj: &Trajectory,
    grid: &TimeGrid,
    zfield: impl Fn(f64, usize, usize) -> f64,
) -> Result<f64> {
    let span_tol = 1e-12 * (1.0 + traj.horizon.abs());
    if traj.t0 < grid.start() - span_tol || traj.horizon > grid.end() + span_tol {
        return domain(format!(
            "trajectory on [{}, {}] leaves the field domain [{}, {}]",
            traj.t0,
            traj.horizon,
            grid.start(),
            grid.end()
        ));
    }
    let mut acc = CompensatedSum::default();
    for (t, from, to) in traj.transitions() {
        acc.add(zfield(t, from, to));
    }
    let k = model.num_states();
    for (a, b, x) in traj.segments() {
        let row = model.base_row(x);
        let integrand = |r: f64| {
            let m = model.modulation.factor(r);
            let mut s = 0.0;
            for y in 0..k {
                if row[y] > 0.0 {
                    s += zfield(r, x, y) * m * row[y];
                }
            }
            s
        };
        acc.add(-integrate_on_grid(grid, a, b, integrand));
    }
    Ok(acc.value())
}

/// Simpson's rule on `[a, b]` with one panel per intersected grid cell.
pub(crate) fn integrate_on_grid(grid: &TimeGrid, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let times = grid.times();
    let mut acc = CompensatedSum::default();
    let mut lo = a;
    let mut k = grid.cell_index(a.max(grid.start())).unwrap_or(0);
    while lo < b {
        while k + 1 < times.len() && times[k + 1] <= lo {
            k += 1;
        }
        let hi = if k + 1 < times.len() { times[k + 1].min(b) } else { b };
        let mid = 0.5 * (lo + hi);
        acc.add((hi - lo) / 6.0 * (f(lo) + 4.0 * f(mid) + f(hi)));
        lo = hi;
        k += 1;
    }
    acc.value()
}

/// Writes trajectories as CSV `path_id, jump_index, time, from_state, to_state`.
pub fn write_trajectories_csv<W: Write>(
    out: W,
    model: &MarkovModel,
    paths: &[(u64, Trajectory)],
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["path_id", "jump_index", "time", "from_state", "to_state"])?;
    for (id, traj) in paths {
        for (i, (t, from, to)) in traj.transitions().enumerate() {
            w.write_record([
                id.to_string(),
                i.to_string(),
                t.to_string(),
                model.label(from).to_string(),
                model.label(to).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Model section of a configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub states: Vec<String>,
    /// `K x K` rates per unit time; diagonal must be zero.
    pub rates: Vec<Vec<f64>>,
    /// Time horizon `T`.
    pub horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulation: Option<Modulation>,
}

impl ModelConfig {
    pub fn build(&self) -> Result<MarkovModel> {
        MarkovModel::new(
            self.states.clone(),
            self.rates.clone(),
            self.horizon,
            self.modulation.unwrap_or_default(),
        )
    }
}
