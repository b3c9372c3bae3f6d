//! Locally Lipschitz drivers.
//!
//! A driver whose Lipschitz constant on `B(0, M)` grows at most like
//! `L + sqrt(ln M)` is approximated by the globally Lipschitz truncations
//! `f_n(t, x, y, z) = f(t, x, rho_n(y), rho_n(z))`, where `rho_n` is the radial
//! projection onto the ball of radius `n`. The horizon is cut into pieces no
//! longer than `delta < (1 - alpha) / 4`; walking backward piece by piece, every
//! truncation level is solved by Picard iteration with the terminal value left
//! by the same level on the later piece. Successive levels are compared in the
//! solution-space norm to monitor the Cauchy property.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::{b_distance, weighted_norm, Driver, DriverPoint, TerminalCondition, ValueField};
use crate::error::{domain, Error, Result};
use crate::markov::{MarginalLaw, MarkovModel};
use crate::solver::lipschitz::{iterate, solve_linear_fk, PicardOptions};

/// Truncation radii and the subinterval length.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationSchedule {
    radii: Vec<f64>,
    delta: f64,
    alpha: f64,
}

impl TruncationSchedule {
    /// Requires strictly increasing radii `>= 1` and `0 < delta < (1 - alpha) / 4`.
    pub fn new(radii: Vec<f64>, delta: f64, alpha: f64) -> Result<Self> {
        if radii.is_empty() {
            return domain("truncation schedule needs at least one radius");
        }
        if radii.iter().any(|&r| !(r >= 1.0 && r.is_finite())) {
            return domain("truncation radii must be finite and at least 1");
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) {
            return domain("truncation radii must be strictly increasing");
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return domain(format!("growth exponent alpha = {alpha} must lie in (0, 1)"));
        }
        let limit = (1.0 - alpha) / 4.0;
        if !(delta > 0.0 && delta < limit) {
            return domain(format!(
                "subinterval length delta = {delta} must lie in (0, (1 - alpha)/4 = {limit})"
            ));
        }
        Ok(Self { radii, delta, alpha })
    }

    /// Schedule with the default `delta = 0.9 (1 - alpha) / 4`.
    pub fn with_default_delta(radii: Vec<f64>, alpha: f64) -> Result<Self> {
        Self::new(radii, Self::default_delta(alpha), alpha)
    }

    pub fn default_delta(alpha: f64) -> f64 {
        0.9 * (1.0 - alpha) / 4.0
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[inline]
fn clamp_scalar(y: f64, n: f64) -> f64 {
    if y.abs() <= n {
        y
    } else {
        y * (n / y.abs())
    }
}

/// The truncation `f_n(t, x, y, z) = f(t, x, rho_n(y), rho_n(z))`.
///
/// `f_n` coincides with `f` on `|y| <= n, ||z|| <= n` and is globally
/// Lipschitz with constant `L_n`; growth data are inherited.
pub fn truncate_driver(driver: &Driver, n: f64) -> Driver {
    let inner = driver.generator();
    let profile = driver.profile_fn();
    let l_n = profile(n);
    let generator = Arc::new(move |p: &DriverPoint<'_>| {
        let y = clamp_scalar(p.y, n);
        let norm = weighted_norm(p.z, p.rates);
        if norm <= n {
            inner(&DriverPoint { y, ..*p })
        } else {
            let scale = n / norm;
            let z: Vec<f64> = p.z.iter().map(|v| v * scale).collect();
            inner(&DriverPoint { y, z: &z, ..*p })
        }
    });
    let outer_profile = profile.clone();
    driver.with_generator(
        format!("{}|n={n}", driver.name()),
        generator,
        Arc::new(move |m| outer_profile(m).min(l_n)),
        Some(l_n),
    )
}

/// One row of [`LipschitzReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEntry {
    pub radius: f64,
    /// Largest sampled difference quotient in the ball.
    pub estimate: f64,
    /// `L + sqrt(ln M)` when the driver declares `L`.
    pub log_bound: Option<f64>,
    /// The declared `L_M`.
    pub declared: f64,
    pub pairs: usize,
}

impl LipschitzEntry {
    pub fn within_log_bound(&self) -> bool {
        self.log_bound.is_none_or(|b| self.estimate <= b)
    }

    pub fn declared_dominates(&self) -> bool {
        // quotients at the smallest steps carry cancellation error
        self.estimate <= self.declared * (1.0 + 1e-6)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LipschitzReport {
    pub entries: Vec<LipschitzEntry>,
}

impl LipschitzReport {
    pub fn passes(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.within_log_bound() && e.declared_dominates())
    }
}

/// A sampled point of `[0, T] x Gamma x B(0, M)`, with `z(x) = 0`.
struct BallPoint {
    t: f64,
    state: usize,
    y: f64,
    z: Vec<f64>,
    rates: Vec<f64>,
}

impl BallPoint {
    fn sample(model: &MarkovModel, m: f64, rng: &mut ChaCha8Rng) -> Self {
        let k = model.num_states();
        let t = rng.random::<f64>() * model.horizon();
        let state = rng.random_range(0..k);
        let rates = model.rates_row(t, state);
        let y = m * (2.0 * rng.random::<f64>() - 1.0);
        let mut z: Vec<f64> = (0..k).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        z[state] = 0.0;
        let norm = weighted_norm(&z, &rates);
        let radius = m * rng.random::<f64>();
        if norm > 0.0 {
            z.iter_mut().for_each(|v| *v *= radius / norm);
        }
        Self { t, state, y, z, rates }
    }

    fn eval(&self, f: &Driver) -> f64 {
        f.eval(&DriverPoint {
            t: self.t,
            state: self.state,
            y: self.y,
            z: &self.z,
            rates: &self.rates,
        })
    }

    /// A nearby point inside the ball, moved along `y`, along `z`, or both.
    fn neighbour(&self, m: f64, eps: f64, kind: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = self.z.len();
        let mut y = self.y;
        let mut z = self.z.clone();
        if kind != 1 {
            y = (y + eps * (2.0 * rng.random::<f64>() - 1.0)).clamp(-m, m);
        }
        if kind != 0 {
            let mut dz: Vec<f64> = (0..k).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
            dz[self.state] = 0.0;
            let dn = weighted_norm(&dz, &self.rates);
            if dn > 0.0 {
                for (zi, d) in z.iter_mut().zip(&dz) {
                    *zi += eps * d / dn;
                }
            }
            let norm = weighted_norm(&z, &self.rates);
            if norm > m {
                z.iter_mut().for_each(|v| *v *= m / norm);
            }
        }
        Self {
            t: self.t,
            state: self.state,
            y,
            z,
            rates: self.rates.clone(),
        }
    }
}

/// Estimates `L_M` on every ball by maximising difference quotients over
/// sampled pairs, and compares with `L + sqrt(ln M)` and the declared profile.
pub fn lipschitz_profile_check(
    model: &MarkovModel,
    driver: &Driver,
    radii: &[f64],
    samples_per_ball: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    if radii.is_empty() {
        return domain("lipschitz_profile_check needs at least one radius");
    }
    if samples_per_ball < 1000 {
        return domain("lipschitz_profile_check needs at least 1000 samples per ball");
    }
    let mut entries = Vec::with_capacity(radii.len());
    for (i, &m) in radii.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut estimate = 0.0f64;
        let mut pairs = 0;
        for s in 0..samples_per_ball {
            let p = BallPoint::sample(model, m, &mut rng);
            let fp = p.eval(driver);
            // step sizes from M/10 down to M * 1e-6
            let eps = m * 10f64.powi(-1 - (s % 6) as i32);
            for kind in 0..3 {
                let q = p.neighbour(m, eps, kind, &mut rng);
                let dz: Vec<f64> = p.z.iter().zip(&q.z).map(|(a, b)| a - b).collect();
                let dist = (p.y - q.y).abs() + weighted_norm(&dz, &p.rates);
                if dist > 0.0 {
                    estimate = estimate.max((fp - q.eval(driver)).abs() / dist);
                    pairs += 1;
                }
            }
        }
        entries.push(LipschitzEntry {
            radius: m,
            estimate,
            log_bound: driver.log_growth_constant().map(|l| l + m.ln().max(0.0).sqrt()),
            declared: driver.lipschitz_profile(m),
            pairs,
        });
    }
    Ok(LipschitzReport { entries })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalOptions {
    /// Inner Picard stopping rule on each piece.
    pub picard: PicardOptions,
    /// Threshold on the last Cauchy distance.
    pub cascade_tol: f64,
    pub lipschitz_samples: usize,
    pub seed: u64,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            picard: PicardOptions {
                tol: 1e-22,
                max_iter: 200,
            },
            cascade_tol: 1e-2,
            lipschitz_samples: 1000,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CascadeDiagnostics {
    pub radii: Vec<f64>,
    /// Full-horizon solution for every radius.
    pub fields: Vec<ValueField>,
    /// Squared distance between the solutions of consecutive radii.
    pub cauchy_distances: Vec<f64>,
    pub lipschitz: LipschitzReport,
    /// `(start, end)` of every piece, in forward order.
    pub subintervals: Vec<(f64, f64)>,
    /// Picard steps per radius and piece.
    pub picard_iters: Vec<Vec<usize>>,
    /// Distances non-increasing and the last one below the cascade tolerance.
    pub converged: bool,
}

impl CascadeDiagnostics {
    pub fn strictly_decreasing(&self) -> bool {
        self.cauchy_distances.windows(2).all(|w| w[1] < w[0])
    }

    /// CSV `radius, subinterval, picard_iters, sq_b_distance_to_previous_radius, L_estimate, L_bound`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "radius",
            "subinterval",
            "picard_iters",
            "sq_b_distance_to_previous_radius",
            "L_estimate",
            "L_bound",
        ])?;
        for (i, &r) in self.radii.iter().enumerate() {
            let dist = if i == 0 {
                String::new()
            } else {
                self.cauchy_distances[i - 1].to_string()
            };
            let entry = &self.lipschitz.entries[i];
            let bound = entry.log_bound.map(|b| b.to_string()).unwrap_or_default();
            for (s, iters) in self.picard_iters[i].iter().enumerate() {
                w.write_record([
                    r.to_string(),
                    s.to_string(),
                    iters.to_string(),
                    dist.clone(),
                    entry.estimate.to_string(),
                    bound.clone(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Node ranges `(first, last)` of pieces no longer than `delta`.
pub(crate) fn partition(times: &[f64], delta: f64) -> Result<Vec<(usize, usize)>> {
    let steps = times.len() - 1;
    let span = times[steps] - times[0];
    let mut pieces = ((span / delta).ceil() as usize).max(1);
    loop {
        if pieces > steps {
            return domain(format!("grid too coarse for subintervals of length {delta}"));
        }
        let base = steps / pieces;
        let extra = steps % pieces;
        let mut out = Vec::with_capacity(pieces);
        let mut first = 0;
        for p in 0..pieces {
            let len = base + usize::from(p < extra);
            out.push((first, first + len));
            first += len;
        }
        if out.iter().all(|&(a, b)| times[b] - times[a] <= delta) {
            return Ok(out);
        }
        pieces += 1;
    }
}

/// Solves the locally Lipschitz BSDE through the truncation cascade.
///
/// Returns the field of the largest radius. Inner Picard failures are errors;
/// a cascade whose distances do not decrease is reported through
/// `converged = false`.
pub fn solve_local(
    model: &MarkovModel,
    law: &MarginalLaw,
    driver: &Driver,
    h: &TerminalCondition,
    schedule: &TruncationSchedule,
    opts: LocalOptions,
) -> Result<(ValueField, CascadeDiagnostics)> {
    h.check_states(model)?;
    if !(opts.cascade_tol > 0.0) {
        return domain("cascade tolerance must be positive");
    }
    let grid = law.grid();
    let k = model.num_states();
    let n_nodes = grid.len();
    let pieces = partition(grid.times(), schedule.delta())?;
    let radii = schedule.radii().to_vec();
    let truncated: Vec<Driver> = radii.iter().map(|&n| truncate_driver(driver, n)).collect();

    let mut values: Vec<Vec<f64>> = vec![vec![0.0; n_nodes * k]; radii.len()];
    let mut terminals: Vec<Vec<f64>> = vec![h.values().to_vec(); radii.len()];
    let mut iters: Vec<Vec<usize>> = vec![vec![0; pieces.len()]; radii.len()];

    for (piece, &(first, last)) in pieces.iter().enumerate().rev() {
        let sublaw = law.restrict(first, last)?;
        let mut warm: Option<ValueField> = None;
        for (ri, f_n) in truncated.iter().enumerate() {
            let terminal = TerminalCondition::new(terminals[ri].clone())?;
            let init = match warm.take() {
                Some(u) => u,
                None => solve_linear_fk(model, sublaw.grid(), |_, _| 0.0, &terminal)?,
            };
            let (u, diag) = iterate(model, &sublaw, f_n, terminal.values(), opts.picard, init).map_err(
                |e| Error::Cascade {
                    radius: radii[ri],
                    subinterval: piece,
                    reason: e.to_string(),
                },
            )?;
            if !diag.converged {
                return Err(Error::Cascade {
                    radius: radii[ri],
                    subinterval: piece,
                    reason: format!(
                        "Picard iteration did not converge in {} steps (last squared distance {:e})",
                        diag.iterates,
                        diag.distances.last().copied().unwrap_or(f64::NAN)
                    ),
                });
            }
            iters[ri][piece] = diag.iterates;
            values[ri][first * k..(last + 1) * k].copy_from_slice(u.values());
            terminals[ri] = u.initial().to_vec();
            warm = Some(u);
        }
    }

    let fields: Vec<ValueField> = values
        .into_iter()
        .map(|v| ValueField::new(grid.clone(), k, v))
        .collect::<Result<_>>()?;
    let cauchy_distances = fields
        .windows(2)
        .map(|w| b_distance(model, law, &w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let lipschitz = lipschitz_profile_check(model, driver, &radii, opts.lipschitz_samples, opts.seed)?;
    let converged = cauchy_distances.windows(2).all(|w| w[1] <= w[0])
        && cauchy_distances.last().is_none_or(|&d| d < opts.cascade_tol);
    let subintervals = pieces
        .iter()
        .map(|&(a, b)| (grid.time(a), grid.time(b)))
        .collect();
    let result = fields.last().expect("schedule has a radius").clone();
    Ok((
        result,
        CascadeDiagnostics {
            radii,
            fields,
            cauchy_distances,
            lipschitz,
            subintervals,
            picard_iters: iters,
            converged,
        },
    ))
}
