//! Explicit a-priori constants, the `Phi_M` semi-norm on drivers, the
//! difference estimate between two BSDEs and the stability experiment built
//! on it.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{b_distance_parts, weighted_norm, Driver, DriverPoint, TerminalCondition, ValueField};
use crate::error::{domain, Error, Result};
use crate::grid::CompensatedSum;
use crate::markov::{MarginalLaw, MarkovModel};
use crate::solver::SolverChoice;

/// Constants bounding the solution in terms of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriConstants {
    /// Bound on `E|Y_s|^2`.
    pub c1: f64,
    /// Bound on `E int ||Z_r||^2 dr`.
    pub c2: f64,
    /// Bound on `sup |Y_s|^2`, for bounded terminal data.
    pub k1: Option<f64>,
    pub lambda: f64,
    /// Length of the time interval.
    pub horizon: f64,
    pub e_xi_sq: f64,
    pub sup_xi_sq: Option<f64>,
}

/// `C1 = (E xi^2 + 9T) exp((1 + 3 lambda^2) T)`,
/// `C2 = 2 (E xi^2 + 9T) + 2T (1 + 4 lambda^2) C1` and, for bounded data,
/// `K1 = (sup xi^2 + 9T) exp((9T + lambda^2 + 2 lambda) T)`.
pub fn apriori_constants(
    lambda: f64,
    horizon: f64,
    e_xi_sq: f64,
    sup_xi_sq: Option<f64>,
) -> Result<AprioriConstants> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return domain(format!("lambda = {lambda} must be positive"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return domain(format!("horizon T = {horizon} must be nonnegative"));
    }
    if !(e_xi_sq >= 0.0 && e_xi_sq.is_finite()) {
        return domain(format!("E|xi|^2 = {e_xi_sq} must be nonnegative"));
    }
    if let Some(s) = sup_xi_sq {
        if !(s >= 0.0 && s.is_finite()) {
            return domain(format!("sup|xi|^2 = {s} must be nonnegative"));
        }
    }
    let t = horizon;
    let base = e_xi_sq + 9.0 * t;
    let c1 = base * ((1.0 + 3.0 * lambda * lambda) * t).exp();
    let c2 = 2.0 * base + 2.0 * t * (1.0 + 4.0 * lambda * lambda) * c1;
    let k1 = sup_xi_sq.map(|s| (s + 9.0 * t) * ((9.0 * t + lambda * lambda + 2.0 * lambda) * t).exp());
    Ok(AprioriConstants {
        c1,
        c2,
        k1,
        lambda,
        horizon,
        e_xi_sq,
        sup_xi_sq,
    })
}

impl AprioriConstants {
    /// Constants for the problem `(driver, h)` on the time span of `law`.
    pub fn for_problem(law: &MarginalLaw, driver: &Driver, h: &TerminalCondition) -> Result<Self> {
        let grid = law.grid();
        apriori_constants(
            driver.lambda(),
            grid.end() - grid.start(),
            h.mean_sq(law),
            Some(h.sup_sq()),
        )
    }

    fn inputs(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("lambda".into(), self.lambda);
        m.insert("T".into(), self.horizon);
        m.insert("E_xi_sq".into(), self.e_xi_sq);
        if let Some(s) = self.sup_xi_sq {
            m.insert("sup_xi_sq".into(), s);
        }
        m
    }
}

/// One bound compared with its measured counterpart.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub bound_name: String,
    pub formula_inputs: BTreeMap<String, f64>,
    pub bound_value: f64,
    pub measured_value: f64,
    pub pass: bool,
}

impl BoundRow {
    pub fn new(name: impl Into<String>, inputs: BTreeMap<String, f64>, bound: f64, measured: f64) -> Self {
        Self {
            bound_name: name.into(),
            formula_inputs: inputs,
            bound_value: bound,
            measured_value: measured,
            pass: measured <= bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn passes(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    /// CSV `bound_name, formula_inputs, bound_value, measured_value, pass`, with
    /// the inputs written as `key=value` pairs separated by `;`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["bound_name", "formula_inputs", "bound_value", "measured_value", "pass"])?;
        for r in &self.rows {
            let inputs = r
                .formula_inputs
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                r.bound_name.clone(),
                inputs,
                r.bound_value.to_string(),
                r.measured_value.to_string(),
                r.pass.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-node second moments `E|u(s, X_s)|^2` and `E||z_u(s, X_s)||^2`.
pub(crate) struct Moments {
    pub y_sq: Vec<f64>,
    pub z_sq: Vec<f64>,
}

pub(crate) fn moments(model: &MarkovModel, law: &MarginalLaw, u: &ValueField) -> Result<Moments> {
    if !u.grid().same_as(law.grid()) || u.num_states() != model.num_states() {
        return domain("value field and marginal law live on different grids");
    }
    let k = u.num_states();
    let mut rates = vec![0.0; k];
    let mut y_sq = Vec::with_capacity(u.grid().len());
    let mut z_sq = Vec::with_capacity(u.grid().len());
    for (node, &t) in law.grid().times().iter().enumerate() {
        let row = u.row(node);
        let p = law.probs(node);
        let mut ey = 0.0;
        let mut ez = 0.0;
        for x in 0..k {
            if p[x] == 0.0 {
                continue;
            }
            ey += p[x] * row[x] * row[x];
            model.rates_row_into(t, x, &mut rates);
            let zz: f64 = row
                .iter()
                .zip(&rates)
                .map(|(&v, &r)| (v - row[x]) * (v - row[x]) * r)
                .sum();
            ez += p[x] * zz;
        }
        y_sq.push(ey);
        z_sq.push(ez);
    }
    Ok(Moments { y_sq, z_sq })
}

fn trapezoid(law: &MarginalLaw, values: &[f64]) -> f64 {
    law.grid()
        .trapezoid_weights()
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .collect::<CompensatedSum>()
        .value()
}

/// Compares a solved field with the a-priori constants: the largest
/// `E|Y_s|^2` with `C1`, `E int ||Z||^2` with `C2` and, when `K1` is
/// available, `max |u|^2` over the grid and all states with `K1`.
pub fn check_apriori(
    model: &MarkovModel,
    law: &MarginalLaw,
    u: &ValueField,
    constants: &AprioriConstants,
) -> Result<BoundReport> {
    let m = moments(model, law, u)?;
    let max_ey = m.y_sq.iter().copied().fold(0.0, f64::max);
    let z_int = trapezoid(law, &m.z_sq);
    let mut rows = vec![
        BoundRow::new("E|Y_s|^2 <= C1", constants.inputs(), constants.c1, max_ey),
        BoundRow::new("E int ||Z||^2 <= C2", constants.inputs(), constants.c2, z_int),
    ];
    if let Some(k1) = constants.k1 {
        let sup = u.values().iter().fold(0.0f64, |a, v| a.max(v * v));
        rows.push(BoundRow::new("sup |u|^2 <= K1", constants.inputs(), k1, sup));
    }
    Ok(BoundReport { rows })
}

/// Radical inverse of `i` in base `b`.
fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut scale = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % b) as f64 * scale;
        i /= b;
        scale *= inv;
    }
    out
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

/// Halton points on the unit ball: `y` in `[-1, 1]`, a radius in `[0, 1)` and
/// a raw direction in `[-1, 1]^K`.
struct UnitBallSet {
    y: Vec<f64>,
    r: Vec<f64>,
    dir: Vec<Vec<f64>>,
}

impl UnitBallSet {
    fn new(samples: usize, states: usize) -> Self {
        let primes = first_primes(states + 2);
        let mut y = Vec::with_capacity(samples);
        let mut r = Vec::with_capacity(samples);
        let mut dir = Vec::with_capacity(samples);
        for i in 1..=samples as u64 {
            y.push(2.0 * radical_inverse(i, primes[0]) - 1.0);
            r.push(radical_inverse(i, primes[1]));
            dir.push(
                (0..states)
                    .map(|j| 2.0 * radical_inverse(i, primes[j + 2]) - 1.0)
                    .collect(),
            );
        }
        Self { y, r, dir }
    }

    /// Unit-scale extent of point `i`.
    fn extent(&self, i: usize) -> f64 {
        self.y[i].abs().max(self.r[i])
    }
}

/// `Phi_M(f1 - f2)` for one radius; see [`phi_seminorm_profile`].
pub fn phi_seminorm(
    model: &MarkovModel,
    law: &MarginalLaw,
    f1: &Driver,
    f2: &Driver,
    m: f64,
    ball_samples: usize,
) -> Result<f64> {
    Ok(phi_seminorm_profile(model, law, f1, f2, &[m], ball_samples)?[0])
}

/// `Phi_M(f1 - f2) = (E int sup_{|y|, ||z|| <= M} |f1 - f2|^2 (s, X_s, y, z) ds)^(1/2)`
/// for every `M` in `radii`.
///
/// The supremum runs over the dyadic dilations `2^j U`, `j >= -3`, of a fixed
/// Halton set `U` of `ball_samples` points, intersected with the ball; the
/// sampled sets are therefore nested and the result is nondecreasing in `M`.
/// The `z` argument vanishes at the current state and its norm is measured
/// with the jump rates at `(s, x)`.
pub fn phi_seminorm_profile(
    model: &MarkovModel,
    law: &MarginalLaw,
    f1: &Driver,
    f2: &Driver,
    radii: &[f64],
    ball_samples: usize,
) -> Result<Vec<f64>> {
    if radii.is_empty() {
        return domain("phi_seminorm needs at least one radius");
    }
    if let Some(m) = radii.iter().find(|&&m| !(m >= 1.0 && m.is_finite())) {
        return domain(format!("ball radius M = {m} must be at least 1"));
    }
    if ball_samples < 1000 {
        return domain("phi_seminorm needs at least 1000 ball samples");
    }
    let k = model.num_states();
    if law.num_states() != k {
        return domain("marginal law and model have different state counts");
    }
    let m_max = radii.iter().copied().fold(0.0, f64::max);
    let unit = UnitBallSet::new(ball_samples, k);
    let min_extent = (0..ball_samples)
        .map(|i| unit.extent(i))
        .fold(f64::INFINITY, f64::min)
        .max(f64::MIN_POSITIVE);
    // (scale, point) pairs that can land inside the largest ball
    let slack = 1.0 + 1e-9;
    let mut candidates = Vec::new();
    let mut j = -3i32;
    while 2f64.powi(j) * min_extent <= m_max * slack {
        let s = 2f64.powi(j);
        for i in 0..ball_samples {
            if s * unit.extent(i) <= m_max * slack {
                candidates.push((s, i));
            }
        }
        j += 1;
    }

    let grid = law.grid();
    let per_node: Vec<Vec<f64>> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let t = grid.time(node);
            let p = law.probs(node);
            let mut rates = vec![0.0; k];
            let mut z = vec![0.0; k];
            let mut acc = vec![0.0; radii.len()];
            for x in 0..k {
                if p[x] == 0.0 {
                    continue;
                }
                model.rates_row_into(t, x, &mut rates);
                let mut sup = vec![0.0f64; radii.len()];
                for &(s, i) in &candidates {
                    z.copy_from_slice(&unit.dir[i]);
                    z[x] = 0.0;
                    let dn = weighted_norm(&z, &rates);
                    let target = s * unit.r[i];
                    if dn > 0.0 {
                        z.iter_mut().for_each(|v| *v *= target / dn);
                    } else {
                        z.iter_mut().for_each(|v| *v = 0.0);
                    }
                    let y = s * unit.y[i];
                    let extent = y.abs().max(weighted_norm(&z, &rates));
                    if extent > m_max {
                        continue;
                    }
                    let pt = DriverPoint {
                        t,
                        state: x,
                        y,
                        z: &z,
                        rates: &rates,
                    };
                    let d = f1.eval(&pt) - f2.eval(&pt);
                    let d2 = d * d;
                    for (sm, &m) in sup.iter_mut().zip(radii) {
                        if extent <= m && d2 > *sm {
                            *sm = d2;
                        }
                    }
                }
                for (a, s) in acc.iter_mut().zip(&sup) {
                    *a += p[x] * s;
                }
            }
            acc
        })
        .collect();
    let weights = grid.trapezoid_weights();
    Ok((0..radii.len())
        .map(|r| {
            weights
                .iter()
                .zip(&per_node)
                .map(|(w, v)| w * v[r])
                .collect::<CompensatedSum>()
                .value()
                .sqrt()
        })
        .collect())
}

/// `C = 6 lambda^2 [2T + 2 (C1 T)^a ((C1 + C2)(T + 1))^(1 - a)
///      + 2 C2^(a/2) ((C1 + C2)(T + 1))^(1 - a/2)]`, the constant of the
/// difference estimate evaluated from the a-priori constants of both problems.
pub fn difference_envelope(lambda: f64, horizon: f64, alpha: f64, c1: f64, c2: f64) -> f64 {
    let t = horizon;
    let mass = (c1 + c2) * (t + 1.0);
    6.0 * lambda * lambda
        * (2.0 * t
            + 2.0 * (c1 * t).powf(alpha) * mass.powf(1.0 - alpha)
            + 2.0 * c2.powf(alpha / 2.0) * mass.powf(1.0 - alpha / 2.0))
}

/// Data of the difference estimate between two BSDEs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifferenceBoundInputs {
    /// The constant `C(xi1, xi2, lambda)`.
    pub envelope: f64,
    /// `E|xi1 - xi2|^2`.
    pub e_xi_diff_sq: f64,
    /// `Phi_M(f1 - f)`.
    pub phi1: f64,
    /// `Phi_M(f - f2)`.
    pub phi2: f64,
    /// Lipschitz constant of the reference driver on `B(0, M)`.
    pub l_m: f64,
    pub m: f64,
    pub alpha: f64,
    /// Terminal time.
    pub horizon_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifferenceBound {
    pub inputs: DifferenceBoundInputs,
    pub s: f64,
    /// Bound on `E|Y1_s - Y2_s|^2`.
    pub y_bound: f64,
}

impl DifferenceBoundInputs {
    fn check(&self) -> Result<()> {
        let named = [
            ("envelope", self.envelope),
            ("E_xi_diff_sq", self.e_xi_diff_sq),
            ("phi1", self.phi1),
            ("phi2", self.phi2),
            ("L_M", self.l_m),
            ("alpha", self.alpha),
        ];
        if let Some((n, v)) = named.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return domain(format!("{n} = {v} must be nonnegative"));
        }
        if !(self.m > 1.0) {
            return domain(format!("ball radius M = {} must exceed 1", self.m));
        }
        Ok(())
    }

    /// Bracket `E|xi_bar|^2 + phi1^2 + phi2^2 + C / ((1 + 2 L_M^2) M^(2(1 - alpha)))`.
    fn bracket(&self) -> f64 {
        self.e_xi_diff_sq
            + self.phi1 * self.phi1
            + self.phi2 * self.phi2
            + self.envelope / ((1.0 + 2.0 * self.l_m * self.l_m) * self.m.powf(2.0 * (1.0 - self.alpha)))
    }

    fn rate(&self) -> f64 {
        4.0 + 4.0 * self.l_m * self.l_m
    }

    /// `int_a^T y_bound(s) ds`.
    pub fn integrated_y_bound(&self, a: f64) -> f64 {
        let r = self.rate();
        self.bracket() * (r * (self.horizon_end - a)).exp_m1() / r
    }
}

/// The difference estimate at time `s`.
pub fn difference_bound(inputs: DifferenceBoundInputs, s: f64) -> Result<DifferenceBound> {
    inputs.check()?;
    if !(s <= inputs.horizon_end) {
        return domain(format!("time s = {s} lies after the terminal time"));
    }
    let y_bound = inputs.bracket() * (inputs.rate() * (inputs.horizon_end - s)).exp();
    Ok(DifferenceBound { inputs, s, y_bound })
}

impl DifferenceBound {
    /// `C [E|xi_bar|^2 + y_root]`, where `y_root` is the measured
    /// `(E int_s^T |Y1 - Y2|^2 dr)^(1/2)`; bounds `E int_s^T ||Z1 - Z2||^2 dr`.
    pub fn z_bound(&self, y_root: f64) -> f64 {
        self.inputs.envelope * (self.inputs.e_xi_diff_sq + y_root)
    }
}

/// A perturbed problem `(f_n, h_n)` indexed by `n`.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub n: f64,
    pub driver: Driver,
    pub terminal: TerminalCondition,
}

/// `f_n = f + 1/n`, `h_n = h + 1/n`.
pub fn additive_perturbations(driver: &Driver, h: &TerminalCondition, ns: &[f64]) -> Result<Vec<Perturbation>> {
    ns.iter()
        .map(|&n| {
            if !(n > 0.0 && n.is_finite()) {
                return domain(format!("perturbation index n = {n} must be positive"));
            }
            Ok(Perturbation {
                n,
                driver: driver.shifted(1.0 / n),
                terminal: h.shifted(1.0 / n)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityOptions {
    pub tol: f64,
    /// Candidate radii `M > 1`; each run reports the one giving the smallest bound.
    pub bound_radii: Vec<f64>,
    pub ball_samples: usize,
    /// Largest number of time nodes at which the driver seminorm is
    /// evaluated; finer grids are thinned evenly.
    pub phi_nodes: usize,
    pub growth_samples: usize,
    pub seed: u64,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            bound_radii: vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0],
            ball_samples: 1000,
            phi_nodes: 201,
            growth_samples: 2000,
            seed: 0x5eed,
        }
    }
}

/// One perturbed problem compared with the base problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityRun {
    pub index: usize,
    pub n: f64,
    /// Squared distance between perturbed and base solutions.
    pub sq_b_distance: f64,
    pub y_part: f64,
    pub z_part: f64,
    /// Radius at which the bound below was evaluated.
    pub radius: f64,
    pub bound: DifferenceBoundInputs,
    /// `int_{t0}^T` of the pointwise `Y` bound.
    pub y_bound: f64,
    pub z_bound: f64,
    /// `E|Y_bar_s|^2` below the pointwise bound at every node.
    pub pointwise_y_ok: bool,
    pub within_bound: bool,
}

impl StabilityRun {
    pub fn predicted(&self) -> f64 {
        self.y_bound + self.z_bound
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub runs: Vec<StabilityRun>,
    /// Common growth constant of the perturbed drivers.
    pub uniform_lambda: f64,
    pub tol: f64,
}

impl StabilityReport {
    pub fn distances(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.sq_b_distance).collect()
    }

    pub fn non_increasing(&self) -> bool {
        self.runs.windows(2).all(|w| w[1].sq_b_distance <= w[0].sq_b_distance)
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.runs.windows(2).all(|w| w[1].sq_b_distance < w[0].sq_b_distance)
    }

    /// Distances non-increasing, the last below `tol` and every run inside its bound.
    pub fn passes(&self) -> bool {
        self.non_increasing()
            && self.runs.last().is_none_or(|r| r.sq_b_distance < self.tol)
            && self.runs.iter().all(|r| r.within_bound)
    }

    pub fn bound_rows(&self) -> BoundReport {
        let rows = self
            .runs
            .iter()
            .map(|r| {
                let mut inputs = BTreeMap::new();
                inputs.insert("n".into(), r.n);
                inputs.insert("M".into(), r.radius);
                inputs.insert("L_M".into(), r.bound.l_m);
                inputs.insert("C".into(), r.bound.envelope);
                inputs.insert("E_xi_diff_sq".into(), r.bound.e_xi_diff_sq);
                inputs.insert("phi1".into(), r.bound.phi1);
                inputs.insert("phi2".into(), r.bound.phi2);
                inputs.insert("alpha".into(), r.bound.alpha);
                BoundRow {
                    bound_name: format!("difference estimate n={}", r.n),
                    formula_inputs: inputs,
                    bound_value: r.predicted(),
                    measured_value: r.sq_b_distance,
                    pass: r.within_bound,
                }
            })
            .collect();
        BoundReport { rows }
    }

    /// CSV `index, n, sq_b_distance, y_part, z_part, radius, y_bound, z_bound, within_bound`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "index",
            "n",
            "sq_b_distance",
            "y_part",
            "z_part",
            "radius",
            "y_bound",
            "z_bound",
            "within_bound",
        ])?;
        for r in &self.runs {
            w.write_record([
                r.index.to_string(),
                r.n.to_string(),
                r.sq_b_distance.to_string(),
                r.y_part.to_string(),
                r.z_part.to_string(),
                r.radius.to_string(),
                r.y_bound.to_string(),
                r.z_bound.to_string(),
                r.within_bound.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sample check of `|f_n| <= lambda_bar [1 + |y|^alpha + ||z||^alpha]` with a
/// common `lambda_bar`; returns it.
fn uniform_growth(model: &MarkovModel, base: &Driver, drivers: &[&Driver], samples: usize, seed: u64) -> Result<f64> {
    let lambda = drivers.iter().map(|d| d.lambda()).fold(base.lambda(), f64::max);
    let alpha = base.alpha();
    let k = model.num_states();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; k];
    for s in 0..samples {
        let radius = 10f64.powi((s % 5) as i32 - 1);
        let t = rng.random::<f64>() * model.horizon();
        let x = rng.random_range(0..k);
        let rates = model.rates_row(t, x);
        let y = radius * (2.0 * rng.random::<f64>() - 1.0);
        for (j, v) in z.iter_mut().enumerate() {
            *v = if j == x { 0.0 } else { radius * (2.0 * rng.random::<f64>() - 1.0) };
        }
        let p = DriverPoint {
            t,
            state: x,
            y,
            z: &z,
            rates: &rates,
        };
        let bound = lambda * (1.0 + y.abs().powf(alpha) + p.z_norm().powf(alpha));
        for (i, d) in drivers.iter().enumerate() {
            let v = d.eval(&p);
            if v.abs() > bound * (1.0 + 1e-12) {
                return domain(format!(
                    "perturbed driver {i} violates the uniform growth bound at y = {y}: |f| = {} > {bound}",
                    v.abs()
                ));
            }
        }
    }
    Ok(lambda)
}

/// Solves the base problem and every perturbed one, measures the squared
/// distances and evaluates the difference estimate with the base driver as
/// reference, at the radius that makes it smallest.
pub fn stability_experiment(
    model: &MarkovModel,
    law: &MarginalLaw,
    driver: &Driver,
    h: &TerminalCondition,
    perturbations: &[Perturbation],
    solver: &SolverChoice,
    opts: &StabilityOptions,
) -> Result<StabilityReport> {
    if !(opts.tol > 0.0) {
        return domain("stability tolerance must be positive");
    }
    let radii: Vec<f64> = opts.bound_radii.iter().copied().filter(|&m| m > 1.0).collect();
    if radii.is_empty() {
        return domain("stability experiment needs a bound radius above 1");
    }
    let drivers: Vec<&Driver> = perturbations.iter().map(|p| &p.driver).collect();
    let uniform_lambda = uniform_growth(model, driver, &drivers, opts.growth_samples, opts.seed)?;

    if opts.phi_nodes < 2 {
        return domain("the driver seminorm needs at least 2 time nodes");
    }
    let phi_law = law.thin((law.grid().len() - 1).div_ceil(opts.phi_nodes - 1))?;

    let base_constants = AprioriConstants::for_problem(law, driver, h)?;
    let grid = law.grid();
    let t0 = grid.start();
    let horizon = grid.end() - t0;
    let solved: Vec<Result<ValueField>> = std::iter::once((driver, h))
        .chain(perturbations.iter().map(|p| (&p.driver, &p.terminal)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .enumerate()
        .map(|(i, (f, hh))| {
            solver.solve(model, law, f, hh).map_err(|e| Error::Run {
                index: i,
                source: Box::new(e),
            })
        })
        .collect();
    let mut solved = solved.into_iter();
    let base = solved.next().expect("base run")?;

    let mut runs = Vec::with_capacity(perturbations.len());
    for (i, (p, u)) in perturbations.iter().zip(solved).enumerate() {
        let u = u?;
        let parts = b_distance_parts(model, law, &u, &base)?;
        let pert_constants = AprioriConstants::for_problem(law, &p.driver, &p.terminal)?;
        let lambda = driver.lambda().max(p.driver.lambda());
        let envelope = difference_envelope(
            lambda,
            horizon,
            driver.alpha(),
            base_constants.c1.max(pert_constants.c1),
            base_constants.c2.max(pert_constants.c2),
        );
        let e_xi_diff_sq = law.expect(grid.len() - 1, |x| (p.terminal.get(x) - h.get(x)).powi(2));
        let phis = phi_seminorm_profile(model, &phi_law, &p.driver, driver, &radii, opts.ball_samples)?;
        let candidates: Vec<DifferenceBoundInputs> = radii
            .iter()
            .zip(&phis)
            .map(|(&m, &phi1)| DifferenceBoundInputs {
                envelope,
                e_xi_diff_sq,
                phi1,
                phi2: 0.0,
                l_m: driver.lipschitz_profile(m),
                m,
                alpha: driver.alpha(),
                horizon_end: grid.end(),
            })
            .collect();
        let z_bound_of = |inp: &DifferenceBoundInputs| inp.envelope * (inp.e_xi_diff_sq + parts.y_part.sqrt());
        let best = candidates
            .iter()
            .min_by(|a, b| {
                let ta = a.integrated_y_bound(t0) + z_bound_of(a);
                let tb = b.integrated_y_bound(t0) + z_bound_of(b);
                ta.total_cmp(&tb)
            })
            .copied()
            .expect("at least one radius");
        let diff = ValueField::from_raw(
            grid.clone(),
            model.num_states(),
            u.values().iter().zip(base.values()).map(|(a, b)| a - b).collect(),
        );
        let m = moments(model, law, &diff)?;
        let mut pointwise_y_ok = true;
        for (node, &ey) in m.y_sq.iter().enumerate() {
            if ey > difference_bound(best, grid.time(node))?.y_bound {
                pointwise_y_ok = false;
            }
        }
        let y_bound = best.integrated_y_bound(t0);
        let z_bound = difference_bound(best, t0)?.z_bound(parts.y_part.sqrt());
        runs.push(StabilityRun {
            index: i,
            n: p.n,
            sq_b_distance: parts.total(),
            y_part: parts.y_part,
            z_part: parts.z_part,
            radius: best.m,
            bound: best,
            y_bound,
            z_bound,
            pointwise_y_ok,
            within_bound: pointwise_y_ok && parts.y_part <= y_bound && parts.z_part <= z_bound,
        });
    }
    Ok(StabilityReport {
        runs,
        uniform_lambda,
        tol: opts.tol,
    })
}
