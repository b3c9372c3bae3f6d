//! Pricing a claim from a jump-driven wealth equation.
//!
//! The wealth generator `g(t, x, y, pi)` acts on the strategy
//! `pi(y') = z(y') / sigma(x, y')`, so the claim value solves the BSDE with
//! driver `f(t, x, y, z) = g(t, x, y, z / sigma)`. Nonnegativity of the price
//! follows from comparison when `g(t, x, 0, 0) >= 0` and the payoff is
//! nonnegative; bounded payoffs also give a bounded price.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{Driver, DriverPoint, TerminalCondition, ValueField};
use crate::error::{Error, Result};
use crate::estimates::apriori_constants;
use crate::markov::{MarginalLaw, MarkovModel};
use crate::solver::SolverChoice;

/// Volatility per edge `(x, y)`; a scalar applies to every edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Volatility {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl Volatility {
    fn edge(&self, x: usize, y: usize) -> f64 {
        match self {
            Volatility::Scalar(s) => *s,
            Volatility::Matrix(m) => m[x][y],
        }
    }
}

/// Market data: the state model, volatilities, wealth generator and payoff.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    model: MarkovModel,
    sigma: Volatility,
    g: Driver,
    h: TerminalCondition,
    sigma_min: f64,
    sigma_max: f64,
}

impl MarketSpec {
    /// Requires a nonnegative payoff and volatilities bounded away from zero
    /// and infinity on every edge the chain can use.
    pub fn new(model: MarkovModel, sigma: Volatility, g: Driver, h: TerminalCondition) -> Result<Self> {
        let k = model.num_states();
        h.check_states(&model)?;
        if let Some(x) = h.values().iter().position(|&v| v < 0.0) {
            return Err(Error::Config(format!(
                "payoff must be nonnegative; h({}) = {}",
                model.label(x),
                h.get(x)
            )));
        }
        if let Volatility::Matrix(m) = &sigma {
            if m.len() != k || m.iter().any(|r| r.len() != k) {
                return Err(Error::Config(format!("volatility matrix must be {k} x {k}")));
            }
        }
        let mut sigma_min = f64::INFINITY;
        let mut sigma_max = 0.0f64;
        for x in 0..k {
            let row = model.base_row(x);
            for y in 0..k {
                if y == x || row[y] == 0.0 {
                    continue;
                }
                let s = sigma.edge(x, y);
                if !(s.is_finite() && s != 0.0) {
                    return Err(Error::Config(format!(
                        "volatility on edge ({}, {}) must be finite and nonzero, got {s}",
                        model.label(x),
                        model.label(y)
                    )));
                }
                sigma_min = sigma_min.min(s.abs());
                sigma_max = sigma_max.max(s.abs());
            }
        }
        if sigma_min == f64::INFINITY {
            // no edges: any bound works
            sigma_min = 1.0;
            sigma_max = 1.0;
        }
        Ok(Self {
            model,
            sigma,
            g,
            h,
            sigma_min,
            sigma_max,
        })
    }

    pub fn model(&self) -> &MarkovModel {
        &self.model
    }

    pub fn payoff(&self) -> &TerminalCondition {
        &self.h
    }

    pub fn generator(&self) -> &Driver {
        &self.g
    }

    pub fn sigma(&self, x: usize, y: usize) -> f64 {
        self.sigma.edge(x, y)
    }

    pub fn sigma_bounds(&self) -> (f64, f64) {
        (self.sigma_min, self.sigma_max)
    }

    /// `f(t, x, y, z) = g(t, x, y, z / sigma(x, .))`.
    ///
    /// With `s = max(1, 1/sigma_min)`, the growth constant becomes
    /// `lambda s^alpha` and Lipschitz bounds `L(sM) s`.
    pub fn induced_driver(&self) -> Driver {
        let k = self.model.num_states();
        let sigma: Vec<f64> = (0..k)
            .flat_map(|x| (0..k).map(move |y| (x, y)))
            .map(|(x, y)| if x == y { 1.0 } else { self.sigma.edge(x, y) })
            .collect();
        let inner = self.g.generator();
        let generator = move |p: &DriverPoint<'_>| {
            let row = &sigma[p.state * k..(p.state + 1) * k];
            let pi: Vec<f64> = p
                .z
                .iter()
                .zip(row)
                .map(|(z, s)| if *s == 0.0 { 0.0 } else { z / s })
                .collect();
            inner(&DriverPoint { z: &pi, ..*p })
        };
        let s = (1.0 / self.sigma_min).max(1.0);
        let alpha = self.g.alpha();
        let profile = self.g.profile_fn();
        let outer = Arc::new(move |m: f64| profile(s * m) * s);
        let mut f = Driver::new(
            format!("{}/sigma", self.g.name()),
            self.g.lambda() * s.powf(alpha),
            alpha,
            generator,
            move |m| outer(m),
        )
        .expect("growth data inherited from a valid driver");
        if let Some(l) = self.g.global_lipschitz() {
            f = f.with_global_lipschitz(l * s);
        }
        if let Some(l) = self.g.log_growth_constant() {
            if s == 1.0 {
                f = f.with_log_growth(l);
            }
        }
        f
    }
}

/// Price field and hedging strategy.
#[derive(Debug, Clone)]
pub struct PricingResult {
    pub price: ValueField,
    /// `pi(t_k, x, y)` stored as `[node][x][y]`; zero on the diagonal.
    strategy: Vec<f64>,
    states: usize,
    /// `min u` over nodes and states.
    pub feasibility_min: f64,
    /// `K1` for the induced problem (payoffs are finite, hence bounded).
    pub k1: f64,
}

impl PricingResult {
    pub fn strategy(&self, node: usize, x: usize) -> &[f64] {
        let k = self.states;
        &self.strategy[(node * k + x) * k..(node * k + x + 1) * k]
    }

    /// Smallest and largest `pi(t_k, x, y)` over the reachable `y != x`.
    pub fn strategy_range(&self, model: &MarkovModel, node: usize, x: usize) -> (f64, f64) {
        let row = model.base_row(x);
        let pi = self.strategy(node, x);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (y, &p) in pi.iter().enumerate() {
            if y != x && row[y] > 0.0 {
                lo = lo.min(p);
                hi = hi.max(p);
            }
        }
        if lo > hi {
            (0.0, 0.0)
        } else {
            (lo, hi)
        }
    }

    /// CSV `time, state, price, min_strategy, max_strategy`.
    pub fn write_csv<W: Write>(&self, out: W, model: &MarkovModel) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["time", "state", "price", "min_strategy", "max_strategy"])?;
        for (node, &t) in self.price.grid().times().iter().enumerate() {
            for x in 0..self.states {
                let (lo, hi) = self.strategy_range(model, node, x);
                w.write_record([
                    t.to_string(),
                    model.label(x).to_string(),
                    self.price.value(node, x).to_string(),
                    lo.to_string(),
                    hi.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Solves for the claim value and extracts `pi = z_u / sigma`.
pub fn price_claim(spec: &MarketSpec, law: &MarginalLaw, solver: &SolverChoice) -> Result<PricingResult> {
    let f = spec.induced_driver();
    match solver {
        SolverChoice::Picard(_) if f.global_lipschitz().is_none() => {
            return Err(Error::Config(format!(
                "generator {} is not globally Lipschitz, which the Picard solver requires",
                spec.g.name()
            )))
        }
        SolverChoice::Local(..) if f.alpha() >= 1.0 => {
            return Err(Error::Config(format!(
                "generator {} must grow with exponent alpha < 1 for the truncation solver",
                spec.g.name()
            )))
        }
        _ => {}
    }
    let model = &spec.model;
    let price = solver.solve(model, law, &f, &spec.h)?;
    let k = model.num_states();
    let n = price.grid().len();
    let mut strategy = vec![0.0; n * k * k];
    for node in 0..n {
        let row = price.row(node);
        for x in 0..k {
            for y in 0..k {
                if y != x {
                    strategy[(node * k + x) * k + y] = (row[y] - row[x]) / spec.sigma.edge(x, y);
                }
            }
        }
    }
    let feasibility_min = price.values().iter().copied().fold(f64::INFINITY, f64::min);
    let grid = law.grid();
    let k1 = apriori_constants(
        f.lambda(),
        grid.end() - grid.start(),
        spec.h.mean_sq(law),
        Some(spec.h.sup_sq()),
    )?
    .k1
    .expect("sup given");
    Ok(PricingResult {
        price,
        strategy,
        states: k,
        feasibility_min,
        k1,
    })
}

/// Tolerance on the sign of the price.
pub const NONNEGATIVITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityRow {
    pub check: String,
    pub value: f64,
    pub threshold: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub rows: Vec<FeasibilityRow>,
    /// The sufficient condition for nonnegativity holds.
    pub sufficient_condition: bool,
    pub pass: bool,
}

/// Checks (a) `g(t, x, 0, 0) >= 0` on all nodes and states, (b) `h >= 0`,
/// (c) `min u >= -1e-9` and (d) `max u^2 <= K1`. Passes when (a) and (b)
/// together entail (c), and (d) holds.
pub fn feasibility_check(spec: &MarketSpec, result: &PricingResult) -> FeasibilityReport {
    let model = &spec.model;
    let k = model.num_states();
    let zero = vec![0.0; k];
    let mut rates = vec![0.0; k];
    let mut g_min = f64::INFINITY;
    for &t in result.price.grid().times() {
        for x in 0..k {
            model.rates_row_into(t, x, &mut rates);
            let v = spec.g.eval(&DriverPoint {
                t,
                state: x,
                y: 0.0,
                z: &zero,
                rates: &rates,
            });
            g_min = g_min.min(v);
        }
    }
    let h_min = spec.h.values().iter().copied().fold(f64::INFINITY, f64::min);
    let u_sup_sq = result.price.values().iter().fold(0.0f64, |a, v| a.max(v * v));
    let rows = vec![
        FeasibilityRow {
            check: "min g(t,x,0,0) >= 0".into(),
            value: g_min,
            threshold: 0.0,
            holds: g_min >= 0.0,
        },
        FeasibilityRow {
            check: "min h >= 0".into(),
            value: h_min,
            threshold: 0.0,
            holds: h_min >= 0.0,
        },
        FeasibilityRow {
            check: "min u >= -1e-9".into(),
            value: result.feasibility_min,
            threshold: -NONNEGATIVITY_TOL,
            holds: result.feasibility_min >= -NONNEGATIVITY_TOL,
        },
        FeasibilityRow {
            check: "sup u^2 <= K1".into(),
            value: u_sup_sq,
            threshold: result.k1,
            holds: u_sup_sq <= result.k1,
        },
    ];
    let sufficient_condition = rows[0].holds && rows[1].holds;
    let pass = (!sufficient_condition || rows[2].holds) && rows[3].holds;
    FeasibilityReport {
        rows,
        sufficient_condition,
        pass,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::DriverSpec;
    use crate::grid::TimeGrid;
    use crate::solver::{PicardOptions, TruncationSchedule, LocalOptions};

    fn picard() -> SolverChoice {
        SolverChoice::Picard(PicardOptions::default())
    }

    fn market(g: DriverSpec, h: Vec<f64>, sigma: Volatility) -> (MarketSpec, MarginalLaw) {
        let m = MarkovModel::two_state(1.0, 1.0, 1.0).unwrap();
        let grid = TimeGrid::uniform(0.0, 1.0, 1000).unwrap();
        let law = m.marginal_law(0, &grid).unwrap();
        let spec = MarketSpec::new(m, sigma, g.build().unwrap(), TerminalCondition::new(h).unwrap()).unwrap();
        (spec, law)
    }

    #[test]
    fn discounting_matches_closed_form() {
        let r = 0.05;
        let (spec, law) = market(DriverSpec::FinanceDiscount { r, delta: 0.0 }, vec![1.0, 0.0], Volatility::Scalar(1.0));
        let res = price_claim(&spec, &law, &picard()).unwrap();
        // two-state unit-rate chain: P(X_T = 0 | X_0 = 0) = (1 + e^{-2T}) / 2
        let p00 = 0.5 * (1.0 + (-2.0f64).exp());
        assert!((res.price.value(0, 0) - (-r).exp() * p00).abs() < 1e-6);
        assert!((res.price.value(0, 1) - (-r).exp() * (1.0 - p00)).abs() < 1e-6);
    }

    #[test]
    fn constant_payoff_discounts_exponentially() {
        let r = 0.05;
        let (spec, law) = market(DriverSpec::FinanceDiscount { r, delta: 0.0 }, vec![2.0, 2.0], Volatility::Scalar(0.5));
        let res = price_claim(&spec, &law, &picard()).unwrap();
        for (node, &t) in res.price.grid().times().iter().enumerate() {
            for x in 0..2 {
                assert!((res.price.value(node, x) - 2.0 * (-r * (1.0 - t)).exp()).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn unit_volatility_strategy_is_z() {
        let (spec, law) = market(DriverSpec::FinanceDiscount { r: 0.05, delta: 0.1 }, vec![1.0, 0.3], Volatility::Scalar(1.0));
        let res = price_claim(&spec, &law, &picard()).unwrap();
        for node in [0, 500, 1000] {
            let row = res.price.row(node);
            assert_eq!(res.strategy(node, 0)[1], row[1] - row[0]);
            assert_eq!(res.strategy(node, 1)[0], row[0] - row[1]);
        }
    }

    #[test]
    fn substitution_is_coherent() {
        let sigma = Volatility::Matrix(vec![vec![1.0, 0.5], vec![2.0, 1.0]]);
        let (spec, law) = market(DriverSpec::Linear { a: -0.3, b: 0.4, c: 0.1 }, vec![1.0, 0.5], sigma);
        let res = price_claim(&spec, &law, &picard()).unwrap();
        // the same driver written directly in terms of z
        let direct = Driver::new(
            "direct",
            1.0,
            1.0,
            |p| {
                let pi = [p.z[0] / if p.state == 1 { 2.0 } else { 1.0 }, p.z[1] / if p.state == 0 { 0.5 } else { 1.0 }];
                let q = DriverPoint { z: &pi, ..*p };
                -0.3 * p.y + 0.4 * q.z_mean() + 0.1
            },
            |_| 0.8,
        )
        .unwrap()
        .with_global_lipschitz(0.8);
        let (u, _) = crate::solver::solve_picard(spec.model(), &law, &direct, spec.payoff(), PicardOptions::default()).unwrap();
        assert!(res.price.max_abs_diff(&u).unwrap() < 1e-12);
        let row = u.row(0);
        assert!((res.strategy(0, 0)[1] - (row[1] - row[0]) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn feasibility_with_positive_generator() {
        let (spec, law) = market(DriverSpec::FinanceDiscount { r: 0.05, delta: 0.1 }, vec![0.0, 1.0], Volatility::Scalar(1.0));
        let res = price_claim(&spec, &law, &picard()).unwrap();
        let rep = feasibility_check(&spec, &res);
        assert!(rep.sufficient_condition && rep.pass, "{rep:?}");
        assert!(res.feasibility_min >= -NONNEGATIVITY_TOL);
    }

    #[test]
    fn zero_problem_is_feasible_with_equality() {
        let (spec, law) = market(DriverSpec::Zero, vec![0.0, 0.0], Volatility::Scalar(1.0));
        let res = price_claim(&spec, &law, &picard()).unwrap();
        let rep = feasibility_check(&spec, &res);
        assert!(rep.pass);
        assert_eq!(res.feasibility_min, 0.0);
        assert!(rep.rows.iter().all(|r| r.value == 0.0 || r.check.starts_with("sup")));
    }

    #[test]
    fn payoff_monotonicity() {
        let g = DriverSpec::Linear { a: -0.2, b: 0.5, c: 0.0 };
        let (lo, law) = market(g.clone(), vec![0.2, 1.0], Volatility::Scalar(0.8));
        let (hi, _) = market(g, vec![0.3, 1.0], Volatility::Scalar(0.8));
        let a = price_claim(&lo, &law, &picard()).unwrap();
        let b = price_claim(&hi, &law, &picard()).unwrap();
        for (x, y) in a.price.values().iter().zip(b.price.values()) {
            assert!(*y >= x - 1e-9);
        }
    }

    #[test]
    fn invalid_markets_are_rejected() {
        let m = MarkovModel::two_state(1.0, 1.0, 1.0).unwrap();
        let g = DriverSpec::Zero.build().unwrap();
        let neg = TerminalCondition::new(vec![-1.0, 0.0]).unwrap();
        let ok = TerminalCondition::new(vec![1.0, 0.0]).unwrap();
        assert!(matches!(MarketSpec::new(m.clone(), Volatility::Scalar(1.0), g.clone(), neg), Err(Error::Config(_))));
        assert!(MarketSpec::new(m.clone(), Volatility::Scalar(0.0), g.clone(), ok.clone()).is_err());
        assert!(MarketSpec::new(m.clone(), Volatility::Matrix(vec![vec![1.0]]), g, ok.clone()).is_err());
        let osc = MarketSpec::new(m.clone(), Volatility::Scalar(1.0), DriverSpec::osc_default().build().unwrap(), ok).unwrap();
        let law = m.marginal_law(0, &TimeGrid::uniform(0.0, 1.0, 100).unwrap()).unwrap();
        assert!(matches!(price_claim(&osc, &law, &picard()), Err(Error::Config(_))));
        let lin = MarketSpec::new(m, Volatility::Scalar(1.0), DriverSpec::Zero.build().unwrap(), TerminalCondition::new(vec![1.0, 0.0]).unwrap()).unwrap();
        let local = SolverChoice::Local(
            TruncationSchedule::with_default_delta(vec![2.0], 0.5).unwrap(),
            LocalOptions::default(),
        );
        assert!(matches!(price_claim(&lin, &law, &local), Err(Error::Config(_))));
    }
}
