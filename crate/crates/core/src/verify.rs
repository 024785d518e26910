//! Self-checks run by `stgnrde verify`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::logsig::{chen_mul, is_lyndon, logsig_polyline, sig_polyline, witt_dimension, LyndonBasis};
use crate::model::{GnnKind, ModelConfig, Variant};
use crate::solver::{convergence_order, Method, SolveSpec};
use crate::train::gradcheck;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Logsig,
    Grad,
    Solver,
    All,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logsig" => Ok(Suite::Logsig),
            "grad" => Ok(Suite::Grad),
            "solver" => Ok(Suite::Solver),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite '{s}' (logsig|grad|solver|all)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{mark}  {:<7} {:<34} {}", self.suite, self.name, self.detail)
    }
}

fn check(suite: &'static str, name: impl Into<String>, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

fn random_polyline(rng: &mut ChaCha8Rng, dim: usize, points: usize) -> Vec<Vec<f64>> {
    (0..points)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn all_words(dim: usize, len: usize) -> Vec<Vec<usize>> {
    let mut words = vec![vec![]];
    for _ in 0..len {
        words = words
            .into_iter()
            .flat_map(|w| {
                (0..dim).map(move |l| {
                    let mut x = w.clone();
                    x.push(l);
                    x
                })
            })
            .collect();
    }
    words
}

fn logsig_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (d, depth) in [(2, 2), (2, 3), (3, 2), (2, 4)] {
        let brute: usize = (1..=depth).map(|k| all_words(d, k).iter().filter(|w| is_lyndon(w)).count()).sum();
        let basis = LyndonBasis::new(d, depth)?.len();
        let witt = witt_dimension(d, depth);
        out.push(check(
            "logsig",
            format!("basis size d={d} D={depth}"),
            basis == brute && witt == brute,
            format!("basis {basis}, formula {witt}, enumeration {brute}"),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut chen = 0.0f64;
    for i in 0..100 {
        let dim = 2 + i % 2;
        let pts = random_polyline(&mut rng, dim, 6);
        let whole = sig_polyline(&pts, 4)?;
        let joined = chen_mul(&sig_polyline(&pts[..3], 4)?, &sig_polyline(&pts[2..], 4)?)?;
        chen = chen.max(whole.max_abs_diff(&joined));
    }
    out.push(check("logsig", "Chen identity (100 polylines)", chen < 1e-9, format!("max diff {chen:.2e}")));

    let basis = LyndonBasis::new(3, 3)?;
    let mut chord = 0.0f64;
    for _ in 0..50 {
        let pts = random_polyline(&mut rng, 3, 2);
        let ls = logsig_polyline(&pts, &basis)?;
        for (w, c) in basis.words().iter().zip(&ls) {
            if w.len() > 1 {
                chord = chord.max(c.abs());
            }
        }
    }
    out.push(check("logsig", "single chord has no higher terms", chord < 1e-12, format!("max {chord:.2e}")));

    let mut shuffle = 0.0f64;
    for _ in 0..50 {
        let s = sig_polyline(&random_polyline(&mut rng, 2, 5), 2)?;
        let lhs = s.coeff(&[0]) * s.coeff(&[1]);
        let rhs = s.coeff(&[0, 1]) + s.coeff(&[1, 0]);
        shuffle = shuffle.max((lhs - rhs).abs());
    }
    out.push(check("logsig", "shuffle identity", shuffle < 1e-10, format!("max diff {shuffle:.2e}")));

    // Area of (t, t²) over [0, 1] against a midpoint-rule iterated integral.
    let n = 2000;
    let pts: Vec<Vec<f64>> = (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            vec![t, t * t]
        })
        .collect();
    let area = logsig_polyline(&pts, &LyndonBasis::new(2, 2)?)?[2];
    let m = 100_000;
    let h = 1.0 / m as f64;
    let (mut s12, mut s21) = (0.0, 0.0);
    for i in 0..m {
        let t = (i as f64 + 0.5) * h;
        s12 += t * 2.0 * t * h;
        s21 += t * t * h;
    }
    let quad = 0.5 * (s12 - s21);
    out.push(check(
        "logsig",
        "(t, t^2) area",
        (area - quad).abs() < 1e-6 && (area - 1.0 / 6.0).abs() < 1e-6,
        format!("{area:.9} vs quadrature {quad:.9}"),
    ));
    Ok(out)
}

/// The tiny configuration used for gradient checks.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        num_nodes: 4,
        in_channels: 1,
        horizon: 3,
        out_channels: 1,
        dim_h: 4,
        dim_z: 4,
        num_layers: 1,
        embed_dim: 2,
        sig_depth: 2,
        subpath_len: 2,
        variant,
        gnn_kind: GnnKind::Adaptive,
    }
}

fn grad_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for variant in [Variant::Full, Variant::TemporalOnly, Variant::SpatialOnly] {
        for method in [Method::Euler, Method::Rk4] {
            let solve = SolveSpec {
                method,
                steps_per_window: 2,
            };
            let r = gradcheck(&tiny_config(variant), &solve, 6, 7)?;
            out.push(check(
                "grad",
                format!("{variant} / {method}"),
                r.max_rel_error < 1e-4,
                format!("max rel. error {:.2e} ({}, {} scalars)", r.max_rel_error, r.worst_param, r.checked),
            ));
        }
    }
    Ok(out)
}

fn solver_suite() -> Result<Vec<Check>> {
    let e = convergence_order(Method::Euler)?;
    let r = convergence_order(Method::Rk4)?;
    Ok(vec![
        check("solver", "Euler order", (e - 1.0).abs() <= 0.2, format!("measured {e:.3}")),
        check("solver", "RK4 order", (r - 4.0).abs() <= 0.5, format!("measured {r:.3}")),
    ])
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Logsig | Suite::All) {
        out.extend(logsig_suite()?);
    }
    if matches!(suite, Suite::Grad | Suite::All) {
        out.extend(grad_suite()?);
    }
    if matches!(suite, Suite::Solver | Suite::All) {
        out.extend(solver_suite()?);
    }
    Ok(out)
}
