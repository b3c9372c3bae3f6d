//! Fixed-step classical Runge-Kutta sweep for the backward systems
//! `du/dt = -(A(t) u + g(t, u))`, `u(T) = h`.

use crate::bsde::ValueField;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::markov::MarkovModel;

/// Where a stage of the sweep evaluates the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    /// Grid node `k`.
    Node(usize),
    /// Midpoint of cell `[s_k, s_{k+1}]`.
    Mid(usize),
}

/// Integrates backward from `terminal` at `grid.end()` to `grid.start()`.
///
/// `source(stage, t, u, out)` writes `g(t, u)` for every state into `out`.
pub(crate) fn backward_rk4<F>(
    model: &MarkovModel,
    grid: &TimeGrid,
    terminal: &[f64],
    mut source: F,
) -> Result<ValueField>
where
    F: FnMut(Stage, f64, &[f64], &mut [f64]),
{
    let k = model.num_states();
    let n = grid.len();
    let mut values = vec![0.0; n * k];
    values[(n - 1) * k..].copy_from_slice(terminal);

    let mut u = terminal.to_vec();
    let mut stage = vec![0.0; k];
    let mut gen = vec![0.0; k];
    let mut k1 = vec![0.0; k];
    let mut k2 = vec![0.0; k];
    let mut k3 = vec![0.0; k];
    let mut k4 = vec![0.0; k];

    let mut rhs = |at: Stage, t: f64, u: &[f64], out: &mut [f64], gen: &mut [f64]| {
        model.apply_generator(t, u, gen);
        source(at, t, u, out);
        for (o, g) in out.iter_mut().zip(gen.iter()) {
            *o += g;
        }
    };

    for cell in (0..n - 1).rev() {
        let (ta, tb) = (grid.time(cell), grid.time(cell + 1));
        let h = tb - ta;
        let tm = 0.5 * (ta + tb);
        rhs(Stage::Node(cell + 1), tb, &u, &mut k1, &mut gen);
        for i in 0..k {
            stage[i] = u[i] + 0.5 * h * k1[i];
        }
        rhs(Stage::Mid(cell), tm, &stage, &mut k2, &mut gen);
        for i in 0..k {
            stage[i] = u[i] + 0.5 * h * k2[i];
        }
        rhs(Stage::Mid(cell), tm, &stage, &mut k3, &mut gen);
        for i in 0..k {
            stage[i] = u[i] + h * k3[i];
        }
        rhs(Stage::Node(cell), ta, &stage, &mut k4, &mut gen);
        for i in 0..k {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if let Some(x) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                time: ta,
                index: cell,
                state: x,
            });
        }
        values[cell * k..(cell + 1) * k].copy_from_slice(&u);
    }
    Ok(ValueField::from_raw(grid.clone(), k, values))
}
