//! Fixed-step explicit integration over a window grid.
//!
//! The control is piecewise constant, so each window is integrated with its
//! own right-hand side and steps never straddle a window boundary. All
//! intermediate states live on the caller's tape, which makes the solve
//! differentiable end to end.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            _ => Err(Error::Config(format!("unknown solver method '{s}' (euler|rk4)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveSpec {
    pub method: Method,
    pub steps_per_window: usize,
}

impl Default for SolveSpec {
    fn default() -> Self {
        SolveSpec {
            method: Method::Rk4,
            steps_per_window: 2,
        }
    }
}

impl SolveSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_window == 0 {
            return Err(Error::Config("steps_per_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// `y + c·k` componentwise.
fn axpy(tape: &mut Tape, y: &[Var], c: f64, k: &[Var]) -> Result<Vec<Var>> {
    y.iter()
        .zip(k)
        .map(|(&a, &b)| {
            let s = tape.scale(b, c)?;
            tape.add(a, s)
        })
        .collect()
}

fn step(
    tape: &mut Tape,
    method: Method,
    y: &[Var],
    h: f64,
    rhs: &mut impl FnMut(&mut Tape, &[Var]) -> Result<Vec<Var>>,
) -> Result<Vec<Var>> {
    match method {
        Method::Euler => {
            let k1 = rhs(tape, y)?;
            axpy(tape, y, h, &k1)
        }
        Method::Rk4 => {
            let k1 = rhs(tape, y)?;
            let y2 = axpy(tape, y, 0.5 * h, &k1)?;
            let k2 = rhs(tape, &y2)?;
            let y3 = axpy(tape, y, 0.5 * h, &k2)?;
            let k3 = rhs(tape, &y3)?;
            let y4 = axpy(tape, y, h, &k3)?;
            let k4 = rhs(tape, &y4)?;
            let mut out = Vec::with_capacity(y.len());
            for i in 0..y.len() {
                let a = tape.add(k2[i], k3[i])?;
                let a = tape.scale(a, 2.0)?;
                let b = tape.add(k1[i], k4[i])?;
                let s = tape.add(a, b)?;
                let s = tape.scale(s, h / 6.0)?;
                out.push(tape.add(y[i], s)?);
            }
            Ok(out)
        }
    }
}

/// Integrates `dy/dt = rhs(window, y)` over consecutive windows of the
/// given lengths, `steps_per_window` equal steps each.
pub fn integrate<F>(
    tape: &mut Tape,
    init: Vec<Var>,
    window_lengths: &[f64],
    spec: &SolveSpec,
    mut rhs: F,
) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, usize, &[Var]) -> Result<Vec<Var>>,
{
    spec.validate()?;
    if window_lengths.is_empty() {
        return Err(Error::Contract("integration needs at least one window".into()));
    }
    let mut y = init;
    let mut t = 0.0;
    for (w, &len) in window_lengths.iter().enumerate() {
        let h = len / spec.steps_per_window as f64;
        for s in 0..spec.steps_per_window {
            let blow_up = |detail: String| Error::BlowUp {
                window: w,
                step: s,
                detail: format!("{detail} (t = {t})"),
            };
            let mut f = |tape: &mut Tape, state: &[Var]| rhs(tape, w, state);
            y = step(tape, spec.method, &y, h, &mut f).map_err(|e| match e {
                Error::NonFinite(op) => blow_up(format!("non-finite value in {op}")),
                other => other,
            })?;
            t += h;
        }
    }
    Ok(y)
}

/// Measured convergence order of `method` on `z' = -z`, `z(0) = 1`, over
/// `[0, 1]`: the least-squares slope of log error against log step size for
/// `h ∈ {1/4, 1/8, 1/16, 1/32, 1/64}`.
pub fn convergence_order(method: Method) -> Result<f64> {
    let exact = (-1.0f64).exp();
    let mut pts = Vec::new();
    for steps in [4usize, 8, 16, 32, 64] {
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::scalar(1.0));
        let spec = SolveSpec {
            method,
            steps_per_window: steps,
        };
        let out = integrate(&mut tape, vec![z0], &[1.0], &spec, |tape, _, y| {
            Ok(vec![tape.scale(y[0], -1.0)?])
        })?;
        let err = (tape.value(out[0]).data()[0] - exact).abs();
        pts.push(((1.0 / steps as f64).ln(), err.ln()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_decay(method: Method, steps: usize, len: f64, lambda: f64) -> f64 {
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::scalar(1.0));
        let spec = SolveSpec {
            method,
            steps_per_window: steps,
        };
        let out = integrate(&mut tape, vec![z0], &[len], &spec, |tape, _, y| {
            Ok(vec![tape.scale(y[0], lambda)?])
        })
        .unwrap();
        tape.value(out[0]).data()[0]
    }

    #[test]
    fn euler_single_step_hits_zero() {
        assert_eq!(scalar_decay(Method::Euler, 1, 1.0, -1.0), 0.0);
    }

    #[test]
    fn rk4_two_half_steps_match_closed_form_update() {
        // One classical RK4 step on z' = -z multiplies by 1 - h + h²/2 - h³/6 + h⁴/24.
        let h: f64 = 0.5;
        let factor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        let got = scalar_decay(Method::Rk4, 2, 1.0, -1.0);
        assert!((got - factor * factor).abs() < 1e-15);
        assert!((got - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn euler_halving_step_halves_error() {
        let exact = (-1.0f64).exp();
        let e1 = (scalar_decay(Method::Euler, 16, 1.0, -1.0) - exact).abs();
        let e2 = (scalar_decay(Method::Euler, 32, 1.0, -1.0) - exact).abs();
        let ratio = e1 / e2;
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn orders() {
        let e = convergence_order(Method::Euler).unwrap();
        let r = convergence_order(Method::Rk4).unwrap();
        assert!((e - 1.0).abs() < 0.2, "euler {e}");
        assert!((r - 4.0).abs() < 0.5, "rk4 {r}");
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let out = integrate(&mut tape, vec![z0], &[2.0, 2.0, 1.0], &SolveSpec::default(), |tape, _, y| {
            Ok(vec![tape.scale(y[0], 0.0)?])
        })
        .unwrap();
        assert_eq!(tape.value(out[0]).data(), &[0.3, -0.7]);
    }

    #[test]
    fn windows_are_visited_in_order_with_fixed_steps() {
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::scalar(0.0));
        let mut seen = Vec::new();
        let spec = SolveSpec {
            method: Method::Euler,
            steps_per_window: 3,
        };
        // dz/dt = 1 everywhere: integral over windows equals total length exactly.
        let one = tape.constant(Tensor::scalar(1.0));
        let out = integrate(&mut tape, vec![z0], &[2.0, 2.0, 1.0], &spec, |tape, w, y| {
            seen.push(w);
            let zero = tape.scale(y[0], 0.0)?;
            Ok(vec![tape.add(zero, one)?])
        })
        .unwrap();
        assert_eq!(seen, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
        assert!((tape.value(out[0]).data()[0] - 5.0).abs() < 1e-14);
    }

    #[test]
    fn blow_up_reports_window_and_step() {
        let mut tape = Tape::new();
        let z0 = tape.constant(Tensor::scalar(1.0));
        let spec = SolveSpec {
            method: Method::Euler,
            steps_per_window: 4,
        };
        let err = integrate(&mut tape, vec![z0], &[1.0, 1.0], &spec, |tape, _, y| {
            Ok(vec![tape.scale(y[0], 1e200)?])
        })
        .unwrap_err();
        assert!(matches!(err, Error::BlowUp { window: 0, step: 1, .. }), "{err}");
    }

    #[test]
    fn method_parsing() {
        assert_eq!("rk4".parse::<Method>().unwrap(), Method::Rk4);
        assert!("dopri".parse::<Method>().is_err());
    }
}
