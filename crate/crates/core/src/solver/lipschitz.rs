//! Globally Lipschitz drivers: the linear backward sweep, Picard iteration on
//! it, and a direct RK4 integration of the nonlinear system used as an
//! independent cross-check.

use std::io::Write;

use crate::bsde::{b_distance, Driver, DriverPoint, TerminalCondition, ValueField};
use crate::error::{domain, Result};
use crate::grid::{local_cubic, TimeGrid};
use crate::markov::{MarginalLaw, MarkovModel};
use crate::ode::{backward_rk4, Stage};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardOptions {
    /// Stopping threshold on the squared distance between successive iterates.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PicardDiagnostics {
    /// Number of Picard steps taken.
    pub iterates: usize,
    /// `d_k = |u^k - u^{k-1}|_B^2` for `k = 1..=iterates`.
    pub distances: Vec<f64>,
    pub converged: bool,
    /// `d_{k+1} / d_k`.
    pub contraction_ratios: Vec<f64>,
}

impl PicardDiagnostics {
    /// CSV `iteration, sq_b_distance, contraction_ratio`.
    pub fn write_csv<W: Write>(&self, out: W) -> crate::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["iteration", "sq_b_distance", "contraction_ratio"])?;
        for (i, d) in self.distances.iter().enumerate() {
            let ratio = if i == 0 {
                String::new()
            } else {
                self.contraction_ratios[i - 1].to_string()
            };
            w.write_record([(i + 1).to_string(), d.to_string(), ratio])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_grid(model: &MarkovModel, grid: &TimeGrid) -> Result<()> {
    if grid.len() < 2 {
        return domain("grid too coarse: need at least 2 points");
    }
    let eps = 1e-12 * (1.0 + model.horizon());
    if grid.start() < -eps || grid.end() > model.horizon() + eps {
        return domain(format!(
            "grid [{}, {}] leaves [0, {}]",
            grid.start(),
            grid.end(),
            model.horizon()
        ));
    }
    Ok(())
}

/// Backward sweep of `du/dt = -sum_y [u(y) - u(x)] v(t, x, y) - g(t, x)`, `u(end) = h`.
pub fn solve_linear_fk(
    model: &MarkovModel,
    grid: &TimeGrid,
    g: impl Fn(f64, usize) -> f64,
    h: &TerminalCondition,
) -> Result<ValueField> {
    check_grid(model, grid)?;
    h.check_states(model)?;
    backward_rk4(model, grid, h.values(), |_, t, _, out| {
        for (x, o) in out.iter_mut().enumerate() {
            *o = g(t, x);
        }
    })
}

/// The source `f(t, x, u(t, x), z_u(t, x, .))` frozen at the nodes and at the
/// cell midpoints (where `u` is interpolated with local cubics).
struct FrozenSource {
    states: usize,
    nodes: Vec<f64>,
    mids: Vec<f64>,
}

impl FrozenSource {
    fn new(model: &MarkovModel, driver: &Driver, u: &ValueField) -> Self {
        let grid = u.grid();
        let k = model.num_states();
        let n = grid.len();
        let mut nodes = vec![0.0; n * k];
        let mut mids = vec![0.0; (n - 1) * k];
        let mut z = vec![0.0; k];
        let mut rates = vec![0.0; k];
        let mut row = vec![0.0; k];
        for node in 0..n {
            let t = grid.time(node);
            eval_row(model, driver, t, u.row(node), &mut z, &mut rates, &mut nodes[node * k..(node + 1) * k]);
        }
        for cell in 0..n - 1 {
            let t = 0.5 * (grid.time(cell) + grid.time(cell + 1));
            for (x, r) in row.iter_mut().enumerate() {
                *r = local_cubic(grid, cell, t, |j| u.value(j, x));
            }
            eval_row(model, driver, t, &row, &mut z, &mut rates, &mut mids[cell * k..(cell + 1) * k]);
        }
        Self { states: k, nodes, mids }
    }

    fn write(&self, at: Stage, out: &mut [f64]) {
        let k = self.states;
        let src = match at {
            Stage::Node(j) => &self.nodes[j * k..(j + 1) * k],
            Stage::Mid(j) => &self.mids[j * k..(j + 1) * k],
        };
        out.copy_from_slice(src);
    }
}

/// `out[x] = f(t, x, u[x], u - u[x])` for every state.
#[inline]
pub(crate) fn eval_row(
    model: &MarkovModel,
    driver: &Driver,
    t: f64,
    u: &[f64],
    z: &mut [f64],
    rates: &mut [f64],
    out: &mut [f64],
) {
    for (x, o) in out.iter_mut().enumerate() {
        let ux = u[x];
        for (zy, &uy) in z.iter_mut().zip(u) {
            *zy = uy - ux;
        }
        model.rates_row_into(t, x, rates);
        *o = driver.eval(&DriverPoint {
            t,
            state: x,
            y: ux,
            z,
            rates,
        });
    }
}

fn require_global(driver: &Driver) -> Result<()> {
    if driver.global_lipschitz().is_none() {
        return domain(format!(
            "driver {} is not declared globally Lipschitz",
            driver.name()
        ));
    }
    Ok(())
}

/// One application of the fixed-point map: the linear sweep with the source
/// frozen at `u_prev`.
pub fn picard_step(
    model: &MarkovModel,
    driver: &Driver,
    u_prev: &ValueField,
    h: &TerminalCondition,
) -> Result<ValueField> {
    require_global(driver)?;
    step_unchecked(model, driver, u_prev, h.values())
}

pub(crate) fn step_unchecked(
    model: &MarkovModel,
    driver: &Driver,
    u_prev: &ValueField,
    terminal: &[f64],
) -> Result<ValueField> {
    check_grid(model, u_prev.grid())?;
    if u_prev.num_states() != model.num_states() || terminal.len() != model.num_states() {
        return domain("iterate and model have different state counts");
    }
    let src = FrozenSource::new(model, driver, u_prev);
    backward_rk4(model, u_prev.grid(), terminal, |at, _, _, out| src.write(at, out))
}

/// Picard iteration started from the zero-driver solution.
pub fn solve_picard(
    model: &MarkovModel,
    law: &MarginalLaw,
    driver: &Driver,
    h: &TerminalCondition,
    opts: PicardOptions,
) -> Result<(ValueField, PicardDiagnostics)> {
    let init = solve_linear_fk(model, law.grid(), |_, _| 0.0, h)?;
    solve_picard_from(model, law, driver, h, opts, init)
}

/// Picard iteration from a given initial field.
///
/// Running out of iterations is reported through `converged = false`, not as an error.
pub fn solve_picard_from(
    model: &MarkovModel,
    law: &MarginalLaw,
    driver: &Driver,
    h: &TerminalCondition,
    opts: PicardOptions,
    init: ValueField,
) -> Result<(ValueField, PicardDiagnostics)> {
    require_global(driver)?;
    h.check_states(model)?;
    if !(opts.tol > 0.0) {
        return domain("Picard tolerance must be positive");
    }
    if !init.grid().same_as(law.grid()) {
        return domain("initial iterate and marginal law live on different grids");
    }
    iterate(model, law, driver, h.values(), opts, init)
}

pub(crate) fn iterate(
    model: &MarkovModel,
    law: &MarginalLaw,
    driver: &Driver,
    terminal: &[f64],
    opts: PicardOptions,
    init: ValueField,
) -> Result<(ValueField, PicardDiagnostics)> {
    let mut diag = PicardDiagnostics::default();
    let mut current = init;
    while diag.iterates < opts.max_iter {
        let next = step_unchecked(model, driver, &current, terminal)?;
        let d = b_distance(model, law, &next, &current)?;
        if let Some(&prev) = diag.distances.last() {
            diag.contraction_ratios.push(if prev > 0.0 { d / prev } else { 0.0 });
        }
        diag.distances.push(d);
        diag.iterates += 1;
        current = next;
        if d < opts.tol {
            diag.converged = true;
            break;
        }
    }
    Ok((current, diag))
}

/// Direct RK4 integration of the coupled nonlinear backward system.
pub fn solve_direct(
    model: &MarkovModel,
    driver: &Driver,
    h: &TerminalCondition,
    grid: &TimeGrid,
) -> Result<ValueField> {
    h.check_states(model)?;
    direct_with_terminal(model, driver, h.values(), grid)
}

pub(crate) fn direct_with_terminal(
    model: &MarkovModel,
    driver: &Driver,
    terminal: &[f64],
    grid: &TimeGrid,
) -> Result<ValueField> {
    check_grid(model, grid)?;
    let k = model.num_states();
    let mut z = vec![0.0; k];
    let mut rates = vec![0.0; k];
    backward_rk4(model, grid, terminal, |_, t, u, out| {
        eval_row(model, driver, t, u, &mut z, &mut rates, out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::DriverSpec;

    fn sym() -> MarkovModel {
        MarkovModel::two_state(1.0, 1.0, 1.0).unwrap()
    }

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::uniform(0.0, 1.0, n).unwrap()
    }

    #[test]
    fn constants_are_harmonic() {
        let m = sym();
        let h = TerminalCondition::constant(2.5, 2).unwrap();
        let u = solve_linear_fk(&m, &grid(50), |_, _| 0.0, &h).unwrap();
        assert!(u.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn unit_source_accumulates_time_to_go() {
        let m = MarkovModel::homogeneous(
            vec![vec![0.0, 2.0, 1.0], vec![0.5, 0.0, 0.5], vec![1.0, 3.0, 0.0]],
            1.0,
        )
        .unwrap();
        let g = grid(40);
        let h = TerminalCondition::constant(0.0, 3).unwrap();
        let u = solve_linear_fk(&m, &g, |_, _| 1.0, &h).unwrap();
        for (k, &t) in g.times().iter().enumerate() {
            for x in 0..3 {
                assert!((u.value(k, x) - (1.0 - t)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_state_matrix_exponential() {
        let m = sym();
        let h = TerminalCondition::new(vec![1.0, 0.0]).unwrap();
        let u = solve_linear_fk(&m, &grid(1000), |_, _| 0.0, &h).unwrap();
        let exact = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((u.value(0, 0) - exact).abs() < 1e-8);
    }

    #[test]
    fn linear_sweep_rejects_bad_input() {
        let m = sym();
        let h = TerminalCondition::new(vec![1.0, 0.0, 3.0]).unwrap();
        assert!(solve_linear_fk(&m, &grid(10), |_, _| 0.0, &h).is_err());
        let long = TimeGrid::uniform(0.0, 2.0, 10).unwrap();
        let h = TerminalCondition::new(vec![1.0, 0.0]).unwrap();
        assert!(solve_linear_fk(&m, &long, |_, _| 0.0, &h).is_err());
    }

    #[test]
    fn step_ignores_iterate_for_constant_drivers() {
        let m = sym();
        let g = grid(20);
        let h = TerminalCondition::new(vec![1.0, -1.0]).unwrap();
        let junk = ValueField::from_fn(g.clone(), 2, |t, x| (7.0 * t).cos() * x as f64).unwrap();
        let zero = DriverSpec::Zero.build().unwrap();
        let a = picard_step(&m, &zero, &junk, &h).unwrap();
        assert_eq!(a, solve_linear_fk(&m, &g, |_, _| 0.0, &h).unwrap());
        let c = DriverSpec::Const { c: 0.3 }.build().unwrap();
        let b = picard_step(&m, &c, &junk, &h).unwrap();
        assert_eq!(b, solve_linear_fk(&m, &g, |_, _| 0.3, &h).unwrap());
    }

    #[test]
    fn picard_requires_global_lipschitz() {
        let m = sym();
        let g = grid(10);
        let law = m.marginal_law(0, &g).unwrap();
        let h = TerminalCondition::new(vec![1.0, 0.0]).unwrap();
        let osc = DriverSpec::osc_default().build().unwrap();
        assert!(solve_picard(&m, &law, &osc, &h, PicardOptions::default()).is_err());
        let zero = DriverSpec::Zero.build().unwrap();
        let bad = PicardOptions { tol: 0.0, max_iter: 5 };
        assert!(solve_picard(&m, &law, &zero, &h, bad).is_err());
    }

    #[test]
    fn zero_driver_converges_in_one_step() {
        let m = sym();
        let g = grid(100);
        let law = m.marginal_law(0, &g).unwrap();
        let h = TerminalCondition::new(vec![1.0, 0.0]).unwrap();
        let zero = DriverSpec::Zero.build().unwrap();
        let (u, diag) = solve_picard(&m, &law, &zero, &h, PicardOptions::default()).unwrap();
        assert!(diag.converged);
        assert_eq!(diag.iterates, 1);
        assert_eq!(u, solve_linear_fk(&m, &g, |_, _| 0.0, &h).unwrap());
    }

    #[test]
    fn exhausted_iterations_are_reported() {
        let m = sym();
        let g = grid(100);
        let law = m.marginal_law(0, &g).unwrap();
        let h = TerminalCondition::new(vec![1.0, 0.0]).unwrap();
        let lin = DriverSpec::Linear { a: -0.5, b: 0.5, c: 0.2 }.build().unwrap();
        let opts = PicardOptions { tol: 1e-30, max_iter: 3 };
        let (_, diag) = solve_picard(&m, &law, &lin, &h, opts).unwrap();
        assert!(!diag.converged);
        assert_eq!(diag.iterates, 3);
        assert_eq!(diag.distances.len(), 3);
        assert_eq!(diag.contraction_ratios.len(), 2);
        assert!(diag.distances.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn terminal_values_are_pinned() {
        let m = sym();
        let g = grid(64);
        let law = m.marginal_law(1, &g).unwrap();
        let h = TerminalCondition::new(vec![0.125, -3.0]).unwrap();
        let lin = DriverSpec::Linear { a: 0.4, b: -0.2, c: 1.0 }.build().unwrap();
        let (u, _) = solve_picard(&m, &law, &lin, &h, PicardOptions::default()).unwrap();
        assert_eq!(u.terminal(), h.values());
        let d = solve_direct(&m, &lin, &h, &g).unwrap();
        assert_eq!(d.terminal(), h.values());
    }

    #[test]
    fn direct_reports_divergence() {
        let m = sym();
        let blowup = Driver::new("cube", 1.0, 1.0, |p| p.y.powi(5), |_| 1.0).unwrap();
        let h = TerminalCondition::new(vec![10.0, 10.0]).unwrap();
        let err = solve_direct(&m, &blowup, &h, &grid(50)).unwrap_err();
        assert!(matches!(err, crate::Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn diagnostics_csv_layout() {
        let diag = PicardDiagnostics {
            iterates: 2,
            distances: vec![0.5, 0.25],
            converged: false,
            contraction_ratios: vec![0.5],
        };
        let mut buf = Vec::new();
        diag.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,sq_b_distance,contraction_ratio\n1,0.5,\n2,0.25,0.5\n"
        );
    }
}
