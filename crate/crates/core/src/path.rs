//! Continuous paths from discrete, possibly irregular, per-node observations.
//!
//! Each node's observed points are joined by a natural cubic spline (one per
//! data channel) and a time channel is appended as the last path channel.
//! The time channel is exact: `t` rescaled linearly to `[0, 1]` over the
//! series' time grid.

use crate::error::{dim_err, Error, Result};

/// Observations of `nodes × timesteps × channels` values on a shared time grid.
#[derive(Clone, Debug)]
pub struct RawSeries {
    nodes: usize,
    timesteps: usize,
    channels: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
    times: Vec<f64>,
}

impl RawSeries {
    /// `values` is node-major (`[node][t][channel]`), `mask` is `[node][t]`.
    pub fn new(
        nodes: usize,
        channels: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
        times: Vec<f64>,
    ) -> Result<Self> {
        let timesteps = times.len();
        if values.len() != nodes * timesteps * channels {
            return dim_err(format!(
                "values hold {} entries, expected {nodes}x{timesteps}x{channels}",
                values.len()
            ));
        }
        if mask.len() != nodes * timesteps {
            return dim_err("mask must be nodes x timesteps");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("times must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw series values".into()));
        }
        Ok(RawSeries {
            nodes,
            timesteps,
            channels,
            values,
            mask,
            times,
        })
    }

    /// Fully observed series on the integer grid `0, 1, …, timesteps-1`.
    pub fn regular(nodes: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        let timesteps = if nodes * channels == 0 {
            0
        } else {
            values.len() / (nodes * channels)
        };
        let times = (0..timesteps).map(|t| t as f64).collect();
        RawSeries::new(nodes, channels, values, vec![true; nodes * timesteps], times)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.nodes * self.timesteps {
            return dim_err("mask must be nodes x timesteps");
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn value(&self, node: usize, t: usize, channel: usize) -> f64 {
        self.values[(node * self.timesteps + t) * self.channels + channel]
    }

    pub fn observed(&self, node: usize, t: usize) -> bool {
        self.mask[node * self.timesteps + t]
    }
}

/// Cubic `a + b·s + c·s² + d·s³` with `s = t - knot`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cubic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Cubic {
    /// Value at offset `s` from the piece's left knot.
    pub fn value(&self, s: f64) -> f64 {
        self.a + s * (self.b + s * (self.c + s * self.d))
    }

    fn slope(&self, s: f64) -> f64 {
        self.b + s * (2.0 * self.c + 3.0 * s * self.d)
    }

    fn curvature(&self, s: f64) -> f64 {
        2.0 * self.c + 6.0 * s * self.d
    }
}

#[derive(Clone, Debug)]
struct NodeSpline {
    knots: Vec<f64>,
    /// `[channel][interval]`
    pieces: Vec<Vec<Cubic>>,
}

/// Natural cubic spline through `(xs, ys)`.
pub fn natural_cubic(xs: &[f64], ys: &[f64]) -> Vec<Cubic> {
    let n = xs.len() - 1;
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives at the knots; zero at both ends.
    let mut m = vec![0.0; n + 1];
    if n >= 2 {
        // Thomas algorithm on the interior unknowns m[1..n].
        let k = n - 1;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            let j = i + 1;
            diag[i] = 2.0 * (h[j - 1] + h[j]);
            rhs[i] = 6.0 * ((ys[j + 1] - ys[j]) / h[j] - (ys[j] - ys[j - 1]) / h[j - 1]);
        }
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
        }
    }
    (0..n)
        .map(|i| Cubic {
            a: ys[i],
            b: (ys[i + 1] - ys[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0,
            c: m[i] / 2.0,
            d: (m[i + 1] - m[i]) / (6.0 * h[i]),
        })
        .collect()
}

/// Per-node continuous paths with `channels + 1` components (time last).
#[derive(Clone, Debug)]
pub struct SplinePath {
    channels: usize,
    t_start: f64,
    t_end: f64,
    nodes: Vec<NodeSpline>,
}

/// Fits one natural cubic spline per node and data channel through the
/// observed points only.
pub fn fit_spline(series: &RawSeries) -> Result<SplinePath> {
    let times = series.times();
    let last = series.timesteps().saturating_sub(1);
    let mut nodes = Vec::with_capacity(series.nodes());
    for v in 0..series.nodes() {
        let idx: Vec<usize> = (0..series.timesteps()).filter(|&t| series.observed(v, t)).collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "node {v} has {} observed points; a spline needs at least 2",
                idx.len()
            )));
        }
        if idx[0] != 0 || *idx.last().unwrap() != last {
            return Err(Error::Data(format!(
                "node {v} must be observed at the first and last timestep"
            )));
        }
        let knots: Vec<f64> = idx.iter().map(|&t| times[t]).collect();
        let pieces = (0..series.channels())
            .map(|c| {
                let ys: Vec<f64> = idx.iter().map(|&t| series.value(v, t, c)).collect();
                natural_cubic(&knots, &ys)
            })
            .collect();
        nodes.push(NodeSpline { knots, pieces });
    }
    Ok(SplinePath {
        channels: series.channels(),
        t_start: times[0],
        t_end: times[last],
        nodes,
    })
}

impl SplinePath {
    pub fn nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Path width: data channels plus the time channel.
    pub fn path_channels(&self) -> usize {
        self.channels + 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn knots(&self, node: usize) -> &[f64] {
        &self.nodes[node].knots
    }

    pub fn pieces(&self, node: usize, channel: usize) -> &[Cubic] {
        &self.nodes[node].pieces[channel]
    }

    fn locate(&self, node: usize, t: f64) -> Result<(usize, f64)> {
        let ns = self
            .nodes
            .get(node)
            .ok_or_else(|| Error::Domain(format!("node {node} out of range")))?;
        let (lo, hi) = (ns.knots[0], *ns.knots.last().unwrap());
        if !(lo..=hi).contains(&t) {
            return Err(Error::Domain(format!("t = {t} outside [{lo}, {hi}]")));
        }
        let i = match ns.knots.partition_point(|&k| k <= t) {
            0 => 0,
            p => (p - 1).min(ns.knots.len() - 2),
        };
        Ok((i, t - ns.knots[i]))
    }

    fn time_scale(&self) -> f64 {
        1.0 / (self.t_end - self.t_start)
    }

    /// Path value at `t`, time channel included.
    pub fn eval(&self, node: usize, t: f64) -> Result<Vec<f64>> {
        let (i, s) = self.locate(node, t)?;
        let mut out: Vec<f64> = self.nodes[node].pieces.iter().map(|p| p[i].value(s)).collect();
        out.push((t - self.t_start) * self.time_scale());
        Ok(out)
    }

    /// First derivative in `t`, time channel included.
    pub fn derivative(&self, node: usize, t: f64) -> Result<Vec<f64>> {
        let (i, s) = self.locate(node, t)?;
        let mut out: Vec<f64> = self.nodes[node].pieces.iter().map(|p| p[i].slope(s)).collect();
        out.push(self.time_scale());
        Ok(out)
    }

    /// Second derivative in `t` of the data channels.
    pub fn second_derivative(&self, node: usize, t: f64) -> Result<Vec<f64>> {
        let (i, s) = self.locate(node, t)?;
        Ok(self.nodes[node].pieces.iter().map(|p| p[i].curvature(s)).collect())
    }

    /// `substeps + 1` evenly spaced samples over `[start, end]`, endpoints included.
    pub fn sample_chords(&self, node: usize, start: f64, end: f64, substeps: usize) -> Result<Vec<Vec<f64>>> {
        if substeps == 0 {
            return Err(Error::Contract("substeps must be at least 1".into()));
        }
        if start < self.t_start || end > self.t_end || start > end {
            return Err(Error::Domain(format!(
                "window [{start}, {end}] outside path domain [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        (0..=substeps)
            .map(|j| {
                let t = if j == substeps {
                    end
                } else {
                    start + (end - start) * j as f64 / substeps as f64
                };
                self.eval(node, t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense solve of the two-piece natural spline through (0,0),(1,1),(2,0):
    /// unknowns are the 8 coefficients of both cubics in global `t`.
    fn two_piece_oracle(t: f64) -> f64 {
        // Rows: p0(0)=0, p0(1)=1, p1(1)=1, p1(2)=0, p0'(1)=p1'(1),
        // p0''(1)=p1''(1), p0''(0)=0, p1''(2)=0. Coefficients [1,t,t²,t³].
        let v = |x: f64| [1.0, x, x * x, x * x * x];
        let d1 = |x: f64| [0.0, 1.0, 2.0 * x, 3.0 * x * x];
        let d2 = |x: f64| [0.0, 0.0, 2.0, 6.0 * x];
        let mut a = vec![[0.0f64; 9]; 8];
        let put = |row: &mut [f64; 9], off: usize, c: [f64; 4], sign: f64| {
            for k in 0..4 {
                row[off + k] += sign * c[k];
            }
        };
        put(&mut a[0], 0, v(0.0), 1.0);
        put(&mut a[1], 0, v(1.0), 1.0);
        a[1][8] = 1.0;
        put(&mut a[2], 4, v(1.0), 1.0);
        a[2][8] = 1.0;
        put(&mut a[3], 4, v(2.0), 1.0);
        put(&mut a[4], 0, d1(1.0), 1.0);
        put(&mut a[4], 4, d1(1.0), -1.0);
        put(&mut a[5], 0, d2(1.0), 1.0);
        put(&mut a[5], 4, d2(1.0), -1.0);
        put(&mut a[6], 0, d2(0.0), 1.0);
        put(&mut a[7], 4, d2(2.0), 1.0);
        // Gaussian elimination with partial pivoting.
        for col in 0..8 {
            let piv = (col..8)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            for r in 0..8 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..9 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let coef: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
        let piece = if t <= 1.0 { 0 } else { 4 };
        (0..4).map(|k| coef[piece + k] * t.powi(k as i32)).sum()
    }

    fn series(values: &[f64]) -> RawSeries {
        RawSeries::regular(1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn two_points_give_a_line() {
        let p = fit_spline(&series(&[1.0, 3.0])).unwrap();
        let c = p.pieces(0, 0)[0];
        assert!(c.c.abs() < 1e-12 && c.d.abs() < 1e-12);
        assert!((p.eval(0, 0.5).unwrap()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn three_knot_value_matches_dense_oracle() {
        let p = fit_spline(&series(&[0.0, 1.0, 0.0])).unwrap();
        let oracle = two_piece_oracle(0.5);
        assert!((p.eval(0, 0.5).unwrap()[0] - oracle).abs() < 1e-12);
        assert!((oracle - 0.6875).abs() < 1e-12);
        assert!((p.eval(0, 1.7).unwrap()[0] - two_piece_oracle(1.7)).abs() < 1e-12);
    }

    #[test]
    fn eval_at_knots_reproduces_data_and_time_channel() {
        let ys = [0.3, -1.2, 4.0, 2.2, 0.0, 1.5];
        let p = fit_spline(&series(&ys)).unwrap();
        for (t, y) in ys.iter().enumerate() {
            let v = p.eval(0, t as f64).unwrap();
            assert!((v[0] - y).abs() < 1e-10);
            assert!((v[1] - t as f64 / 5.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_data_midpoint_is_mean() {
        let p = fit_spline(&series(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert!((p.eval(0, 1.5).unwrap()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn continuity_and_natural_ends() {
        let ys = [0.3, -1.2, 4.0, 2.2, 0.0, 1.5, -0.7];
        let p = fit_spline(&series(&ys)).unwrap();
        let pieces = p.pieces(0, 0);
        for i in 0..pieces.len() - 1 {
            let (l, r) = (pieces[i], pieces[i + 1]);
            assert!((l.value(1.0) - r.value(0.0)).abs() < 1e-9);
            assert!((l.slope(1.0) - r.slope(0.0)).abs() < 1e-9);
            assert!((l.curvature(1.0) - r.curvature(0.0)).abs() < 1e-9);
        }
        assert!(p.second_derivative(0, 0.0).unwrap()[0].abs() < 1e-9);
        assert!(p.second_derivative(0, 6.0).unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn dropped_interior_point_keeps_observed_knots() {
        let ys = [0.3, -1.2, 4.0, 2.2, 0.0, 1.5];
        let full = fit_spline(&series(&ys)).unwrap();
        let mut mask = vec![true; 6];
        mask[2] = false;
        let sparse = fit_spline(&series(&ys).with_mask(mask).unwrap()).unwrap();
        assert_eq!(sparse.knots(0), &[0.0, 1.0, 3.0, 4.0, 5.0]);
        for t in [0usize, 1, 3, 4, 5] {
            let a = full.eval(0, t as f64).unwrap();
            let b = sparse.eval(0, t as f64).unwrap();
            assert!((a[0] - b[0]).abs() < 1e-10);
        }
        assert!((full.eval(0, 2.0).unwrap()[0] - sparse.eval(0, 2.0).unwrap()[0]).abs() > 1e-3);
    }

    #[test]
    fn too_few_points_names_the_node() {
        let s = RawSeries::regular(2, 1, vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let mut mask = vec![true; 6];
        mask[3] = false;
        mask[5] = false;
        let err = fit_spline(&s.with_mask(mask).unwrap()).unwrap_err();
        assert!(err.to_string().contains("node 1"), "{err}");
    }

    #[test]
    fn eval_outside_domain_errors() {
        let p = fit_spline(&series(&[0.0, 1.0, 0.0])).unwrap();
        assert!(matches!(p.eval(0, 2.5), Err(Error::Domain(_))));
        assert!(matches!(p.eval(0, -0.1), Err(Error::Domain(_))));
        assert!(matches!(p.sample_chords(0, 0.0, 3.0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn chords_single_step_are_endpoints() {
        let p = fit_spline(&series(&[0.0, 1.0, 0.0])).unwrap();
        let s = p.sample_chords(0, 0.0, 2.0, 1).unwrap();
        assert_eq!(s, vec![p.eval(0, 0.0).unwrap(), p.eval(0, 2.0).unwrap()]);
    }

    #[test]
    fn constant_data_chords() {
        let p = fit_spline(&series(&[2.0; 5])).unwrap();
        let s = p.sample_chords(0, 0.0, 4.0, 8).unwrap();
        for (j, x) in s.iter().enumerate() {
            assert!((x[0] - 2.0).abs() < 1e-14);
            assert!((x[1] - j as f64 / 8.0).abs() < 1e-14);
        }
    }

    #[test]
    fn chord_polyline_converges_quadratically() {
        let ys: Vec<f64> = (0..9).map(|t| (t as f64 * 0.7).sin()).collect();
        let p = fit_spline(&series(&ys)).unwrap();
        // Max deviation between chord polyline and spline, probed at chord midpoints.
        let dev = |n: usize| {
            let pts = p.sample_chords(0, 0.0, 8.0, n).unwrap();
            (0..n)
                .map(|j| {
                    let tm = 8.0 * (j as f64 + 0.5) / n as f64;
                    let mid = 0.5 * (pts[j][0] + pts[j + 1][0]);
                    (p.eval(0, tm).unwrap()[0] - mid).abs()
                })
                .fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (dev(16), dev(32), dev(64));
        assert!(e2 < e1 / 3.0 && e3 < e2 / 3.0, "{e1} {e2} {e3}");
    }

    #[test]
    fn rejects_unsorted_times() {
        assert!(RawSeries::new(1, 1, vec![0.0, 1.0], vec![true; 2], vec![1.0, 0.0]).is_err());
    }
}
