//! Path-by-path verification of a solved field.
//!
//! Along a simulated path the field must satisfy
//! `u(s, X_s) = h(X_T) + int_s^T f(r, X_r, u, z_u) dr - int_s^T int z_u dq`,
//! where `q` is the compensated jump measure. The residual of that identity is
//! measured at ten equispaced checkpoints; the compensated integral over the
//! whole path is also collected, since its mean must vanish.

use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{Driver, DriverPoint, TerminalCondition, ValueField};
use crate::error::{domain, Result};
use crate::grid::CompensatedSum;
use crate::markov::{compensated_integral, integrate_on_grid, MarginalLaw, MarkovModel, PathSeed, Trajectory};

/// Number of checkpoints per path.
pub const CHECKPOINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualStats {
    pub paths: usize,
    /// Number of grid steps of the verified field.
    pub grid_steps: usize,
    pub max_abs_residual: f64,
    pub mean_abs_residual: f64,
    /// Mean of the compensated integral over `[t0, T]`.
    pub martingale_mean: f64,
    pub martingale_stderr: f64,
    pub checkpoint_times: Vec<f64>,
    /// Largest absolute residual at each checkpoint.
    pub checkpoint_max: Vec<f64>,
}

impl ResidualStats {
    /// Checkpoints whose largest residual exceeds `tol`.
    pub fn flagged(&self, tol: f64) -> Vec<usize> {
        (0..self.checkpoint_max.len())
            .filter(|&j| !(self.checkpoint_max[j] <= tol))
            .collect()
    }

    /// `|mean| <= k * stderr`.
    pub fn martingale_within(&self, k: f64) -> bool {
        self.martingale_mean.abs() <= k * self.martingale_stderr
    }
}

/// Reads `u` and `z_u` at time `r` in state `x` by linear interpolation.
struct FieldProbe<'a> {
    model: &'a MarkovModel,
    driver: &'a Driver,
    u: &'a ValueField,
    row: Vec<f64>,
    z: Vec<f64>,
    rates: Vec<f64>,
}

impl<'a> FieldProbe<'a> {
    fn new(model: &'a MarkovModel, driver: &'a Driver, u: &'a ValueField) -> Self {
        let k = model.num_states();
        Self {
            model,
            driver,
            u,
            row: vec![0.0; k],
            z: vec![0.0; k],
            rates: vec![0.0; k],
        }
    }

    fn load(&mut self, r: f64, x: usize) {
        let k = self
            .u
            .grid()
            .cell_index(r)
            .expect("path stays inside the field's time span");
        for (y, v) in self.row.iter_mut().enumerate() {
            *v = self.u.interpolate_in_cell(k, r, y);
        }
        for (zy, v) in self.z.iter_mut().zip(&self.row) {
            *zy = v - self.row[x];
        }
        self.model.rates_row_into(r, x, &mut self.rates);
    }

    /// `f(r, x, u, z_u) + sum_y z_u(y) v(r, x, y)`.
    fn integrand(&mut self, r: f64, x: usize) -> f64 {
        self.load(r, x);
        let f = self.driver.eval(&DriverPoint {
            t: r,
            state: x,
            y: self.row[x],
            z: &self.z,
            rates: &self.rates,
        });
        let comp: f64 = self.z.iter().zip(&self.rates).map(|(z, v)| z * v).sum();
        f + comp
    }
}

fn checkpoint_times(t0: f64, t_end: f64) -> Vec<f64> {
    (0..CHECKPOINTS)
        .map(|j| t0 + j as f64 * (t_end - t0) / CHECKPOINTS as f64)
        .collect()
}

/// Residuals at the checkpoints for one path.
fn path_residuals(
    model: &MarkovModel,
    driver: &Driver,
    u: &ValueField,
    h: &TerminalCondition,
    traj: &Trajectory,
    checkpoints: &[f64],
) -> Vec<f64> {
    let grid = u.grid();
    let mut probe = FieldProbe::new(model, driver, u);
    // per-bucket integrals and jump sums, bucket j covering (s_j, s_{j+1}]
    let nb = checkpoints.len();
    let bucket_of = |t: f64| checkpoints.partition_point(|&s| s < t).saturating_sub(1);
    let mut integral = vec![CompensatedSum::default(); nb];
    let mut jumps = vec![CompensatedSum::default(); nb];
    for (a, b, x) in traj.segments() {
        let mut lo = a;
        while lo < b {
            let j = checkpoints.partition_point(|&s| s <= lo).saturating_sub(1);
            let hi = if j + 1 < nb { checkpoints[j + 1].min(b) } else { b };
            integral[j].add(integrate_on_grid(grid, lo, hi, |r| probe.integrand(r, x)));
            lo = hi;
        }
    }
    for (t, from, to) in traj.transitions() {
        let k = grid.cell_index(t).expect("jump inside the field's time span");
        let dz = u.interpolate_in_cell(k, t, to) - u.interpolate_in_cell(k, t, from);
        jumps[bucket_of(t)].add(dz);
    }
    let terminal = h.get(traj.state_at(traj.horizon));
    let mut out = vec![0.0; nb];
    let mut tail_int = CompensatedSum::default();
    let mut tail_jump = CompensatedSum::default();
    for j in (0..nb).rev() {
        tail_int.add(integral[j].value());
        tail_jump.add(jumps[j].value());
        let s = checkpoints[j];
        let x = traj.state_at(s);
        let k = grid.cell_index(s).expect("checkpoint inside the field's time span");
        let lhs = u.interpolate_in_cell(k, s, x);
        out[j] = lhs - terminal - tail_int.value() + tail_jump.value();
    }
    out
}

fn check_span(model: &MarkovModel, u: &ValueField, h: &TerminalCondition, t0: f64, x0: usize) -> Result<()> {
    model.check_state(x0)?;
    if u.num_states() != model.num_states() {
        return domain("value field and model have different state counts");
    }
    if h.len() != model.num_states() {
        return domain("terminal condition and model have different state counts");
    }
    let grid = u.grid();
    let tol = 1e-12 * (1.0 + model.horizon().abs());
    if t0 < grid.start() - tol || t0 >= model.horizon() {
        return domain(format!(
            "start time {t0} outside the field span [{}, {}]",
            grid.start(),
            grid.end()
        ));
    }
    if (grid.end() - model.horizon()).abs() > tol {
        return domain("value field must end at the model horizon");
    }
    Ok(())
}

/// Simulates `paths` trajectories from `(t0, x0)` and measures the residual of
/// the backward equation along each of them.
#[allow(clippy::too_many_arguments)]
pub fn verify_pathwise(
    model: &MarkovModel,
    driver: &Driver,
    u: &ValueField,
    h: &TerminalCondition,
    t0: f64,
    x0: usize,
    paths: usize,
    seed: u64,
) -> Result<ResidualStats> {
    check_span(model, u, h, t0, x0)?;
    if paths == 0 {
        return domain("verify_pathwise needs at least one path");
    }
    let checkpoints = checkpoint_times(t0, model.horizon());
    let per_path: Vec<Result<(Vec<f64>, f64)>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let traj = model.simulate(t0, x0, PathSeed::new(seed, i))?;
            let res = path_residuals(model, driver, u, h, &traj, &checkpoints);
            let mart = compensated_integral(model, &traj, u.grid(), |r, x, y| {
                let k = u.grid().cell_index(r).expect("inside span");
                u.interpolate_in_cell(k, r, y) - u.interpolate_in_cell(k, r, x)
            })?;
            Ok((res, mart))
        })
        .collect();

    let mut checkpoint_max = vec![0.0f64; CHECKPOINTS];
    let mut abs_sum = CompensatedSum::default();
    let mut m_sum = CompensatedSum::default();
    let mut m_sq = CompensatedSum::default();
    for r in per_path {
        let (res, mart) = r?;
        for (cm, v) in checkpoint_max.iter_mut().zip(&res) {
            // NaN must surface as a failure
            if !(v.abs() <= *cm) {
                *cm = if v.is_nan() { f64::INFINITY } else { v.abs() };
            }
            abs_sum.add(v.abs());
        }
        m_sum.add(mart);
        m_sq.add(mart * mart);
    }
    let n = paths as f64;
    let mean = m_sum.value() / n;
    let var = if paths > 1 {
        ((m_sq.value() - n * mean * mean) / (n - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(ResidualStats {
        paths,
        grid_steps: u.grid().steps(),
        max_abs_residual: checkpoint_max.iter().copied().fold(0.0, f64::max),
        mean_abs_residual: abs_sum.value() / (n * CHECKPOINTS as f64),
        martingale_mean: mean,
        martingale_stderr: (var / n).sqrt(),
        checkpoint_times: checkpoints,
        checkpoint_max,
    })
}

/// Monte Carlo mean of `u(s, X_s)` next to its exact value under the law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectationCheck {
    pub time: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub exact: f64,
}

impl ExpectationCheck {
    pub fn within(&self, k: f64) -> bool {
        (self.mc_mean - self.exact).abs() <= k * self.mc_stderr
    }
}

/// Compares the path average of `u(s, X_s)` with `sum_x P(X_s = x) u(s, x)`;
/// `s` must be a node of the law's grid, which starts at the paths' start.
pub fn expectation_check(
    model: &MarkovModel,
    law: &MarginalLaw,
    u: &ValueField,
    x0: usize,
    s: f64,
    paths: usize,
    seed: u64,
) -> Result<ExpectationCheck> {
    model.check_state(x0)?;
    let Some(node) = law.grid().node_index(s) else {
        return domain(format!("time {s} is not a node of the law's grid"));
    };
    if paths < 2 {
        return domain("expectation_check needs at least two paths");
    }
    let t0 = law.grid().start();
    let exact = law.expect(node, |x| u.interpolate(s, x).unwrap_or(f64::NAN));
    let samples: Vec<Result<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let traj = model.simulate(t0, x0, PathSeed::new(seed, i))?;
            u.interpolate(s, traj.state_at(s))
        })
        .collect();
    let mut sum = CompensatedSum::default();
    let mut sq = CompensatedSum::default();
    for v in samples {
        let v = v?;
        sum.add(v);
        sq.add(v * v);
    }
    let n = paths as f64;
    let mean = sum.value() / n;
    let var = ((sq.value() - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(ExpectationCheck {
        time: s,
        mc_mean: mean,
        mc_stderr: (var / n).sqrt(),
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::DriverSpec;
    use crate::grid::TimeGrid;
    use crate::solver::{solve_linear_fk, solve_picard, PicardOptions};

    fn three_state() -> MarkovModel {
        MarkovModel::homogeneous(
            vec![vec![0.0, 1.0, 0.5], vec![0.7, 0.0, 1.2], vec![0.3, 0.9, 0.0]],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn constant_solution_has_zero_residual() {
        let m = three_state();
        let g = TimeGrid::uniform(0.0, 1.0, 100).unwrap();
        let h = TerminalCondition::constant(2.5, 3).unwrap();
        let u = solve_linear_fk(&m, &g, |_, _| 0.0, &h).unwrap();
        let zero = DriverSpec::Zero.build().unwrap();
        let s = verify_pathwise(&m, &zero, &u, &h, 0.0, 0, 500, 7).unwrap();
        assert!(s.max_abs_residual < 1e-10, "{s:?}");
        assert_eq!(s.martingale_mean, 0.0);
        assert_eq!(s.checkpoint_times.len(), CHECKPOINTS);
        assert!(s.max_abs_residual >= s.mean_abs_residual);
    }

    #[test]
    fn linear_solution_has_small_residual_and_centred_martingale() {
        let m = three_state();
        let g = TimeGrid::uniform(0.0, 1.0, 400).unwrap();
        let law = m.marginal_law(1, &g).unwrap();
        let f = DriverSpec::Linear { a: -0.5, b: 0.3, c: 0.2 }.build().unwrap();
        let h = TerminalCondition::new(vec![1.0, 0.0, -2.0]).unwrap();
        let (u, _) = solve_picard(&m, &law, &f, &h, PicardOptions::default()).unwrap();
        let s = verify_pathwise(&m, &f, &u, &h, 0.0, 1, 2000, 11).unwrap();
        assert!(s.max_abs_residual < 1e-4, "{s:?}");
        assert!(s.martingale_within(3.0), "{s:?}");
        assert!(s.martingale_stderr > 0.0);
        let e = expectation_check(&m, &law, &u, 1, 0.5, 4000, 3).unwrap();
        assert!(e.within(3.0), "{e:?}");
    }

    #[test]
    fn stats_do_not_depend_on_the_thread_pool() {
        let m = three_state();
        let g = TimeGrid::uniform(0.0, 1.0, 100).unwrap();
        let law = m.marginal_law(0, &g).unwrap();
        let f = DriverSpec::osc_default().build().unwrap();
        let f = crate::solver::truncate_driver(&f, 8.0);
        let h = TerminalCondition::new(vec![1.0, 3.0, -2.0]).unwrap();
        let (u, _) = solve_picard(&m, &law, &f, &h, PicardOptions::default()).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| verify_pathwise(&m, &f, &u, &h, 0.0, 0, 300, 5).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn rejects_bad_spans() {
        let m = three_state();
        let g = TimeGrid::uniform(0.0, 0.5, 10).unwrap();
        let u = ValueField::from_fn(g, 3, |_, _| 0.0).unwrap();
        let h = TerminalCondition::constant(0.0, 3).unwrap();
        let zero = DriverSpec::Zero.build().unwrap();
        assert!(verify_pathwise(&m, &zero, &u, &h, 0.0, 0, 10, 1).is_err());
    }
}
