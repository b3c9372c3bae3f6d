//! BSDE data: terminal conditions, drivers, value fields, the Z-field induced
//! by a value field and the squared norm of the solution space.
//!
//! Solutions are represented as deterministic fields `u(t, x)` with
//! `Y_s = u(s, X_s)` and `Z_s(y) = u(s, y) - u(s, X_{s-})`.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{domain, Result};
use crate::grid::{CompensatedSum, TimeGrid};
use crate::markov::{MarginalLaw, MarkovModel};

/// Terminal condition `h`, one value per state.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCondition {
    values: Vec<f64>,
}

impl TerminalCondition {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return domain("terminal condition needs at least one state");
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return domain(format!("terminal value for state {i} is not finite"));
        }
        Ok(Self { values })
    }

    pub fn constant(c: f64, states: usize) -> Result<Self> {
        Self::new(vec![c; states])
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize) -> f64 {
        self.values[x]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `h + c`.
    pub fn shifted(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| v + c).collect())
    }

    /// `sup_x |h(x)|^2`.
    pub fn sup_sq(&self) -> f64 {
        self.values.iter().fold(0.0f64, |a, v| a.max(v * v))
    }

    /// `E|h(X_T)|^2` under the last row of `law`.
    pub fn mean_sq(&self, law: &MarginalLaw) -> f64 {
        law.expect(law.grid().len() - 1, |x| self.values[x].powi(2))
    }

    pub(crate) fn check_states(&self, model: &MarkovModel) -> Result<()> {
        if self.values.len() != model.num_states() {
            return domain(format!(
                "terminal condition has {} values for {} states",
                self.values.len(),
                model.num_states()
            ));
        }
        Ok(())
    }
}

/// Arguments of a driver evaluation: `(t, x, y, z(.))` plus the rate row
/// `v(t, x, .)` that defines the norm of `z`.
#[derive(Debug, Clone, Copy)]
pub struct DriverPoint<'a> {
    pub t: f64,
    pub state: usize,
    pub y: f64,
    pub z: &'a [f64],
    pub rates: &'a [f64],
}

impl DriverPoint<'_> {
    /// `||z|| = (sum_y |z(y)|^2 v(t, x, y))^(1/2)`.
    #[inline]
    pub fn z_norm(&self) -> f64 {
        weighted_norm(self.z, self.rates)
    }

    /// `sum_y z(y) v(t, x, y) / sqrt(v(t, x, Gamma))`, a linear functional
    /// bounded by `||z||`; zero when the state is absorbing.
    #[inline]
    pub fn z_mean(&self) -> f64 {
        let total: f64 = self.rates.iter().sum();
        if total <= 0.0 {
            return 0.0;
        }
        let s: f64 = self.z.iter().zip(self.rates).map(|(z, v)| z * v).sum();
        s / total.sqrt()
    }
}

#[inline]
pub(crate) fn weighted_norm(z: &[f64], rates: &[f64]) -> f64 {
    z.iter()
        .zip(rates)
        .map(|(z, v)| z * z * v)
        .sum::<f64>()
        .sqrt()
}

pub type GeneratorFn = dyn Fn(&DriverPoint<'_>) -> f64 + Send + Sync;
pub type ProfileFn = dyn Fn(f64) -> f64 + Send + Sync;

/// A generator `f(t, x, y, z(.))` with its declared growth and Lipschitz data.
///
/// * growth: `|f| <= lambda [1 + |y|^alpha + ||z||^alpha]`, `alpha` in `(0, 1]`
///   (`alpha = 1` marks linear growth, used by the globally Lipschitz fixtures);
/// * `lipschitz_profile(M)` bounds the Lipschitz constant on the ball `B(0, M)`;
/// * `global_l` is set for globally Lipschitz drivers;
/// * `log_growth_l` is the constant `L` for which `L_M <= L + sqrt(ln M)`.
#[derive(Clone)]
pub struct Driver {
    name: String,
    generator: Arc<GeneratorFn>,
    lambda: f64,
    alpha: f64,
    profile: Arc<ProfileFn>,
    global_l: Option<f64>,
    log_growth_l: Option<f64>,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Driver")
            .field("name", &self.name)
            .field("lambda", &self.lambda)
            .field("alpha", &self.alpha)
            .field("global_l", &self.global_l)
            .field("log_growth_l", &self.log_growth_l)
            .finish()
    }
}

impl Driver {
    pub fn new(
        name: impl Into<String>,
        lambda: f64,
        alpha: f64,
        generator: impl Fn(&DriverPoint<'_>) -> f64 + Send + Sync + 'static,
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return domain(format!("growth constant lambda = {lambda} must be positive"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return domain(format!("growth exponent alpha = {alpha} must lie in (0, 1]"));
        }
        Ok(Self {
            name: name.into(),
            generator: Arc::new(generator),
            lambda,
            alpha,
            profile: Arc::new(profile),
            global_l: None,
            log_growth_l: None,
        })
    }

    pub fn with_global_lipschitz(mut self, l: f64) -> Self {
        self.global_l = Some(l);
        self
    }

    pub fn with_log_growth(mut self, l: f64) -> Self {
        self.log_growth_l = Some(l);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn global_lipschitz(&self) -> Option<f64> {
        self.global_l
    }

    pub fn log_growth_constant(&self) -> Option<f64> {
        self.log_growth_l
    }

    /// Declared Lipschitz bound `L_M` on the ball of radius `m`.
    pub fn lipschitz_profile(&self, m: f64) -> f64 {
        (self.profile)(m)
    }

    #[inline]
    pub fn eval(&self, p: &DriverPoint<'_>) -> f64 {
        (self.generator)(p)
    }

    /// `lambda [1 + |y|^alpha + ||z||^alpha]`.
    pub fn growth_bound(&self, y: f64, z_norm: f64) -> f64 {
        self.lambda * (1.0 + y.abs().powf(self.alpha) + z_norm.powf(self.alpha))
    }

    /// The driver `f + c`; the growth constant becomes `lambda + |c|`.
    pub fn shifted(&self, c: f64) -> Driver {
        let inner = self.generator.clone();
        let profile = self.profile.clone();
        Driver {
            name: format!("{}+{c}", self.name),
            generator: Arc::new(move |p| inner(p) + c),
            lambda: self.lambda + c.abs(),
            alpha: self.alpha,
            profile: Arc::new(move |m| profile(m)),
            global_l: self.global_l,
            log_growth_l: self.log_growth_l,
        }
    }

    /// Replaces the generator while keeping the declared profile data.
    pub(crate) fn with_generator(
        &self,
        name: String,
        generator: Arc<GeneratorFn>,
        profile: Arc<ProfileFn>,
        global_l: Option<f64>,
    ) -> Driver {
        Driver {
            name,
            generator,
            lambda: self.lambda,
            alpha: self.alpha,
            profile,
            global_l,
            log_growth_l: self.log_growth_l,
        }
    }

    pub(crate) fn generator(&self) -> Arc<GeneratorFn> {
        self.generator.clone()
    }

    pub(crate) fn profile_fn(&self) -> Arc<ProfileFn> {
        self.profile.clone()
    }
}

/// A field `u(t, x)` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: TimeGrid,
    states: usize,
    values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: TimeGrid, states: usize, values: Vec<f64>) -> Result<Self> {
        if states == 0 || values.len() != grid.len() * states {
            return domain(format!(
                "value field needs {} entries, got {}",
                grid.len() * states,
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return domain(format!(
                "value field entry at grid index {}, state {} is not finite",
                i / states,
                i % states
            ));
        }
        Ok(Self { grid, states, values })
    }

    /// `u(t, x) = g(t, x)` sampled at the nodes.
    pub fn from_fn(grid: TimeGrid, states: usize, g: impl Fn(f64, usize) -> f64) -> Result<Self> {
        let values = grid
            .times()
            .iter()
            .flat_map(|&t| (0..states).map(move |x| (t, x)))
            .map(|(t, x)| g(t, x))
            .collect();
        Self::new(grid, states, values)
    }

    pub(crate) fn from_raw(grid: TimeGrid, states: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len() * states);
        Self { grid, states, values }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    /// `u(s_k, .)`.
    #[inline]
    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.states..(k + 1) * self.states]
    }

    #[inline]
    pub fn value(&self, k: usize, x: usize) -> f64 {
        self.values[k * self.states + x]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminal(&self) -> &[f64] {
        self.row(self.grid.len() - 1)
    }

    pub fn initial(&self) -> &[f64] {
        self.row(0)
    }

    /// Linear interpolation in time at an arbitrary `t` in the grid span.
    pub fn interpolate(&self, t: f64, x: usize) -> Result<f64> {
        let Some(k) = self.grid.cell_index(t) else {
            return domain(format!(
                "time {t} outside the field span [{}, {}]",
                self.grid.start(),
                self.grid.end()
            ));
        };
        Ok(self.interpolate_in_cell(k, t, x))
    }

    #[inline]
    pub(crate) fn interpolate_in_cell(&self, k: usize, t: f64, x: usize) -> f64 {
        let (ta, tb) = (self.grid.time(k), self.grid.time(k + 1));
        let w = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        let (a, b) = (self.value(k, x), self.value(k + 1, x));
        a + w * (b - a)
    }

    /// `sup |u - v|` over nodes and states.
    pub fn max_abs_diff(&self, other: &ValueField) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs())))
    }

    pub(crate) fn check_compatible(&self, other: &ValueField) -> Result<()> {
        if self.states != other.states || !self.grid.same_as(&other.grid) {
            return domain("value fields live on different grids or state spaces");
        }
        Ok(())
    }

    /// Nodes `first..=last` of the field.
    pub fn slice(&self, first: usize, last: usize) -> Result<ValueField> {
        let grid = self.grid.slice(first, last)?;
        Ok(ValueField {
            grid,
            states: self.states,
            values: self.values[first * self.states..(last + 1) * self.states].to_vec(),
        })
    }

    /// Z-field at node `k`: `z(y) = u(s_k, y) - u(s_k, x)`.
    #[inline]
    pub(crate) fn z_into(&self, k: usize, x: usize, out: &mut [f64]) {
        let row = self.row(k);
        let ux = row[x];
        for (o, &uy) in out.iter_mut().zip(row) {
            *o = uy - ux;
        }
    }

    /// CSV `time, state, u`, rows ordered by time then state.
    pub fn write_csv<W: Write>(&self, out: W, model: &MarkovModel) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["time", "state", "u"])?;
        for (k, &t) in self.grid.times().iter().enumerate() {
            for x in 0..self.states {
                w.write_record([t.to_string(), model.label(x).to_string(), self.value(k, x).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout produced by [`ValueField::write_csv`]; lines starting
    /// with `#` are ignored.
    pub fn read_csv<R: Read>(input: R, model: &MarkovModel) -> Result<ValueField> {
        let k = model.num_states();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let mut times: Vec<f64> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        let mut seen: Vec<bool> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return domain(format!("value field row has {} columns, expected 3", rec.len()));
            }
            let t: f64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| crate::Error::Domain(format!("bad time {:?}", &rec[0])))?;
            let x = model.state_index(rec[1].trim())?;
            let u: f64 = rec[2]
                .trim()
                .parse()
                .map_err(|_| crate::Error::Domain(format!("bad value {:?}", &rec[2])))?;
            if times.last() != Some(&t) {
                if times.last().is_some_and(|&last| t <= last) {
                    return domain("value field rows must be ordered by increasing time");
                }
                times.push(t);
                values.extend(std::iter::repeat_n(0.0, k));
                seen.extend(std::iter::repeat_n(false, k));
            }
            let idx = (times.len() - 1) * k + x;
            if seen[idx] {
                return domain(format!("duplicate entry for time {t}, state {}", model.label(x)));
            }
            seen[idx] = true;
            values[idx] = u;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return domain(format!(
                "missing entry for time {}, state {}",
                times[i / k],
                model.label(i % k)
            ));
        }
        ValueField::new(TimeGrid::from_times(times)?, k, values)
    }
}

/// `z(y) = u(t, y) - u(t, x)` for a grid time `t`.
pub fn z_field_from_value(u: &ValueField, t: f64, x: usize) -> Result<Vec<f64>> {
    let Some(k) = u.grid.node_index(t) else {
        return domain(format!("time {t} is not a grid node"));
    };
    if x >= u.states {
        return domain(format!("state index {x} out of range"));
    }
    let mut z = vec![0.0; u.states];
    u.z_into(k, x, &mut z);
    Ok(z)
}

/// `||z|| = (sum_y |z(y)|^2 v(t, x, y))^(1/2)`.
pub fn z_norm(model: &MarkovModel, t: f64, x: usize, z: &[f64]) -> f64 {
    weighted_norm(z, &model.rates_row(t, x))
}

/// The two parts of the squared distance in the solution space.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BDistance {
    /// `E int |Y1 - Y2|^2 dr`.
    pub y_part: f64,
    /// `E int ||Z1 - Z2||^2 dr`.
    pub z_part: f64,
}

impl BDistance {
    pub fn total(&self) -> f64 {
        self.y_part + self.z_part
    }
}

/// Squared distance `E int |Y1 - Y2|^2 dr + E int ||Z1 - Z2||^2 dr`, with the
/// expectation taken against `law` and the time integral by the trapezoid rule.
pub fn b_distance(model: &MarkovModel, law: &MarginalLaw, u1: &ValueField, u2: &ValueField) -> Result<f64> {
    Ok(b_distance_parts(model, law, u1, u2)?.total())
}

pub fn b_distance_parts(
    model: &MarkovModel,
    law: &MarginalLaw,
    u1: &ValueField,
    u2: &ValueField,
) -> Result<BDistance> {
    u1.check_compatible(u2)?;
    if !u1.grid.same_as(law.grid()) || u1.states != model.num_states() {
        return domain("value fields and marginal law live on different grids");
    }
    let k = u1.states;
    let weights = law.grid().trapezoid_weights();
    let mut diff = vec![0.0; k];
    let mut rates = vec![0.0; k];
    let mut y_acc = CompensatedSum::default();
    let mut z_acc = CompensatedSum::default();
    for (node, (&w, &t)) in weights.iter().zip(law.grid().times()).enumerate() {
        for (d, (a, b)) in diff.iter_mut().zip(u1.row(node).iter().zip(u2.row(node))) {
            *d = a - b;
        }
        let p = law.probs(node);
        let mut y_term = 0.0;
        let mut z_term = 0.0;
        for x in 0..k {
            if p[x] == 0.0 {
                continue;
            }
            y_term += p[x] * diff[x] * diff[x];
            model.rates_row_into(t, x, &mut rates);
            let dx = diff[x];
            let zz: f64 = diff
                .iter()
                .zip(&rates)
                .map(|(&dy, &v)| (dy - dx) * (dy - dx) * v)
                .sum();
            z_term += p[x] * zz;
        }
        y_acc.add(w * y_term);
        z_acc.add(w * z_term);
    }
    Ok(BDistance {
        y_part: y_acc.value(),
        z_part: z_acc.value(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> MarkovModel {
        MarkovModel::homogeneous(
            vec![
                vec![0.0, 1.0, 0.5],
                vec![2.0, 0.0, 1.0],
                vec![0.3, 0.7, 0.0],
            ],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn z_field_examples() {
        let g = TimeGrid::uniform(0.0, 1.0, 4).unwrap();
        let flat = ValueField::from_fn(g.clone(), 2, |t, _| t).unwrap();
        assert_eq!(z_field_from_value(&flat, 0.5, 1).unwrap(), vec![0.0, 0.0]);
        let u = ValueField::from_fn(g.clone(), 2, |_, x| if x == 0 { 2.0 } else { 5.0 }).unwrap();
        assert_eq!(z_field_from_value(&u, 0.25, 0).unwrap(), vec![0.0, 3.0]);
        assert!(z_field_from_value(&u, 0.3, 0).is_err());
        let z = z_field_from_value(&u, 1.0, 1).unwrap();
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn z_norm_examples() {
        let m = MarkovModel::two_state(4.0, 1.0, 1.0).unwrap();
        assert_eq!(z_norm(&m, 0.0, 0, &[0.0, 0.0]), 0.0);
        assert_eq!(z_norm(&m, 0.0, 0, &[0.0, 3.0]), 6.0);
        let z = [0.0, 3.0];
        let scaled = [0.0, -6.0];
        assert_eq!(z_norm(&m, 0.0, 0, &scaled), 2.0 * z_norm(&m, 0.0, 0, &z));
    }

    #[test]
    fn b_distance_of_constant_offset_without_jumps() {
        let m = MarkovModel::two_state(0.0, 0.0, 1.0).unwrap();
        let g = TimeGrid::uniform(0.25, 1.0, 30).unwrap();
        let law = m.marginal_law(0, &g).unwrap();
        let u1 = ValueField::from_fn(g.clone(), 2, |t, x| t * x as f64 + 1.5).unwrap();
        let u2 = ValueField::from_fn(g.clone(), 2, |t, x| t * x as f64 - 0.5).unwrap();
        let d = b_distance(&m, &law, &u1, &u2).unwrap();
        assert!((d - 4.0 * 0.75).abs() < 1e-14);
        assert_eq!(b_distance(&m, &law, &u1, &u1).unwrap(), 0.0);
        let other = TimeGrid::uniform(0.25, 1.0, 31).unwrap();
        let u3 = ValueField::from_fn(other, 2, |_, _| 0.0).unwrap();
        assert!(b_distance(&m, &law, &u1, &u3).is_err());
    }

    #[test]
    fn driver_validation() {
        assert!(Driver::new("x", 0.0, 0.5, |_| 0.0, |_| 0.0).is_err());
        assert!(Driver::new("x", 1.0, 0.0, |_| 0.0, |_| 0.0).is_err());
        assert!(Driver::new("x", 1.0, 1.5, |_| 0.0, |_| 0.0).is_err());
        let d = Driver::new("x", 1.0, 0.5, |p| p.y, |_| 1.0).unwrap().shifted(0.25);
        let z = [0.0, 0.0];
        let r = [0.0, 1.0];
        let p = DriverPoint { t: 0.0, state: 0, y: 2.0, z: &z, rates: &r };
        assert_eq!(d.eval(&p), 2.25);
        assert_eq!(d.lambda(), 1.25);
    }

    #[test]
    fn value_field_csv_roundtrip() {
        let m = model();
        let g = TimeGrid::uniform(0.0, 1.0, 5).unwrap();
        let u = ValueField::from_fn(g, 3, |t, x| (t * 3.0 + x as f64).sin() / 7.0).unwrap();
        let mut buf = Vec::new();
        u.write_csv(&mut buf, &m).unwrap();
        let mut with_comment = b"# fingerprint=abc\n".to_vec();
        with_comment.extend_from_slice(&buf);
        let back = ValueField::read_csv(&with_comment[..], &m).unwrap();
        assert_eq!(back, u);
        let truncated = &buf[..buf.len() - 20];
        assert!(ValueField::read_csv(truncated, &m).is_err());
    }

    fn field_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 11 * 3)
    }

    proptest! {
        #[test]
        fn z_field_is_antisymmetric(vals in field_strategy(), k in 0usize..11, x in 0usize..3, y in 0usize..3) {
            let g = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
            let u = ValueField::new(g.clone(), 3, vals).unwrap();
            let t = g.time(k);
            let zx = z_field_from_value(&u, t, x).unwrap();
            let zy = z_field_from_value(&u, t, y).unwrap();
            prop_assert_eq!(zx[y], -zy[x]);
        }

        #[test]
        fn b_distance_is_a_squared_metric(a in field_strategy(), b in field_strategy(), c in field_strategy()) {
            let m = model();
            let g = TimeGrid::uniform(0.0, 1.0, 10).unwrap();
            let law = m.marginal_law(0, &g).unwrap();
            let u1 = ValueField::new(g.clone(), 3, a).unwrap();
            let u2 = ValueField::new(g.clone(), 3, b).unwrap();
            let u3 = ValueField::new(g.clone(), 3, c).unwrap();
            let d12 = b_distance(&m, &law, &u1, &u2).unwrap();
            let d21 = b_distance(&m, &law, &u2, &u1).unwrap();
            let d13 = b_distance(&m, &law, &u1, &u3).unwrap();
            let d23 = b_distance(&m, &law, &u2, &u3).unwrap();
            prop_assert!(d12 >= 0.0);
            prop_assert!((d12 - d21).abs() <= 1e-12 * (1.0 + d12));
            prop_assert!(d13.sqrt() <= d12.sqrt() + d23.sqrt() + 1e-12);
            if u1.max_abs_diff(&u2).unwrap() > 1e-6 {
                prop_assert!(d12 > 0.0);
            }
        }
    }
}
