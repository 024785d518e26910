//! Truncated signatures and log-signatures of piecewise-linear paths.
//!
//! Signatures live in the truncated tensor algebra over `R^d`: a scalar plus
//! one dense array of `d^k` entries per level `k ≤ depth`, indexed row-major
//! by words `(i_1, …, i_k)`. A straight segment with increment `v` has
//! signature `exp(v)`, i.e. level `k` is `v^{⊗k}/k!`, and concatenating paths
//! multiplies signatures. The log-signature is the truncated tensor
//! logarithm, a Lie element, reported in coordinates of the Lyndon bracket
//! basis.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::path::SplinePath;

/// Element of the tensor algebra truncated at `depth`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedTensor {
    dim: usize,
    depth: usize,
    scalar: f64,
    /// `levels[k-1]` holds the `dim^k` level-`k` coefficients.
    levels: Vec<Vec<f64>>,
}

impl TruncatedTensor {
    pub fn zero(dim: usize, depth: usize) -> Self {
        let levels = (1..=depth).map(|k| vec![0.0; dim.pow(k as u32)]).collect();
        TruncatedTensor {
            dim,
            depth,
            scalar: 0.0,
            levels,
        }
    }

    /// The unit `1`.
    pub fn identity(dim: usize, depth: usize) -> Self {
        TruncatedTensor {
            scalar: 1.0,
            ..Self::zero(dim, depth)
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn scalar(&self) -> f64 {
        self.scalar
    }

    /// Level `k ≥ 1` coefficients.
    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k - 1]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k - 1]
    }

    /// Coefficient of the word `w` (empty word = scalar).
    pub fn coeff(&self, word: &[usize]) -> f64 {
        if word.is_empty() {
            return self.scalar;
        }
        self.levels[word.len() - 1][word_index(word, self.dim)]
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim || self.depth != other.depth {
            return dim_err(format!(
                "tensor algebra mismatch: d={} D={} vs d={} D={}",
                self.dim, self.depth, other.dim, other.depth
            ));
        }
        Ok(())
    }

    fn level_or_scalar(&self, k: usize) -> LevelRef<'_> {
        if k == 0 {
            LevelRef::Scalar(self.scalar)
        } else {
            LevelRef::Array(&self.levels[k - 1])
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        out.scalar -= other.scalar;
        for (a, b) in out.levels.iter_mut().zip(&other.levels) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x -= y);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut m = (self.scalar - other.scalar).abs();
        for (a, b) in self.levels.iter().zip(&other.levels) {
            for (x, y) in a.iter().zip(b) {
                m = m.max((x - y).abs());
            }
        }
        m
    }

    fn scaled(mut self, c: f64) -> Self {
        self.scalar *= c;
        for l in &mut self.levels {
            l.iter_mut().for_each(|x| *x *= c);
        }
        self
    }

    fn add_assign(&mut self, other: &Self) {
        self.scalar += other.scalar;
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

enum LevelRef<'a> {
    Scalar(f64),
    Array(&'a [f64]),
}

/// Row-major index of a word within its level array.
pub fn word_index(word: &[usize], dim: usize) -> usize {
    word.iter().fold(0, |acc, &l| acc * dim + l)
}

/// Signature of a straight segment: the truncated exponential of `increment`.
pub fn sig_linear(increment: &[f64], depth: usize) -> TruncatedTensor {
    let d = increment.len();
    let mut out = TruncatedTensor::identity(d, depth);
    if depth == 0 {
        return out;
    }
    out.levels[0].copy_from_slice(increment);
    for k in 2..=depth {
        let (prev, cur) = out.levels.split_at_mut(k - 1);
        let prev = &prev[k - 2];
        let inv_k = 1.0 / k as f64;
        for (i, p) in prev.iter().enumerate() {
            for (j, v) in increment.iter().enumerate() {
                cur[0][i * d + j] = p * v * inv_k;
            }
        }
    }
    out
}

/// Truncated tensor-algebra product `a ⊗ b`.
pub fn chen_mul(a: &TruncatedTensor, b: &TruncatedTensor) -> Result<TruncatedTensor> {
    a.check_compatible(b)?;
    let d = a.dim;
    let mut out = TruncatedTensor::zero(d, a.depth);
    out.scalar = a.scalar * b.scalar;
    for n in 1..=a.depth {
        let target = &mut out.levels[n - 1];
        for i in 0..=n {
            let j = n - i;
            match (a.level_or_scalar(i), b.level_or_scalar(j)) {
                (LevelRef::Scalar(s), LevelRef::Array(bj)) => {
                    if s != 0.0 {
                        target.iter_mut().zip(bj).for_each(|(t, x)| *t += s * x);
                    }
                }
                (LevelRef::Array(ai), LevelRef::Scalar(s)) => {
                    if s != 0.0 {
                        target.iter_mut().zip(ai).for_each(|(t, x)| *t += s * x);
                    }
                }
                (LevelRef::Array(ai), LevelRef::Array(bj)) => {
                    let w = bj.len();
                    for (p, x) in ai.iter().enumerate() {
                        if *x == 0.0 {
                            continue;
                        }
                        let row = &mut target[p * w..(p + 1) * w];
                        row.iter_mut().zip(bj).for_each(|(t, y)| *t += x * y);
                    }
                }
                (LevelRef::Scalar(_), LevelRef::Scalar(_)) => unreachable!("n ≥ 1"),
            }
        }
    }
    Ok(out)
}

/// Signature of the polyline through `points` (each of length `d`).
pub fn sig_polyline(points: &[Vec<f64>], depth: usize) -> Result<TruncatedTensor> {
    let d = points.first().map_or(0, Vec::len);
    let mut sig = TruncatedTensor::identity(d, depth);
    for w in points.windows(2) {
        if w[1].len() != d {
            return dim_err("polyline points have differing widths");
        }
        let inc: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
        sig = chen_mul(&sig, &sig_linear(&inc, depth))?;
    }
    Ok(sig)
}

/// Truncated logarithm `Σ_{n≥1} (-1)^{n+1} (s-1)^{⊗n}/n`.
pub fn tensor_log(s: &TruncatedTensor) -> Result<TruncatedTensor> {
    if (s.scalar - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!(
            "logarithm needs scalar part 1, got {}",
            s.scalar
        )));
    }
    let mut x = s.clone();
    x.scalar = 0.0;
    let mut out = TruncatedTensor::zero(s.dim, s.depth);
    let mut power = x.clone();
    for n in 1..=s.depth {
        let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
        out.add_assign(&power.clone().scaled(sign / n as f64));
        if n < s.depth {
            power = chen_mul(&power, &x)?;
        }
    }
    Ok(out)
}

/// Truncated exponential `Σ_{n≥0} x^{⊗n}/n!` of an element with zero scalar part.
pub fn tensor_exp(x: &TruncatedTensor) -> Result<TruncatedTensor> {
    if x.scalar.abs() > 1e-12 {
        return Err(Error::Contract("exponential needs a zero scalar part".into()));
    }
    let mut out = TruncatedTensor::identity(x.dim, x.depth);
    let mut term = TruncatedTensor::identity(x.dim, x.depth);
    for n in 1..=x.depth {
        term = chen_mul(&term, x)?.scaled(1.0 / n as f64);
        out.add_assign(&term);
    }
    Ok(out)
}

/// Number of Lyndon words of length ≤ `depth` over `dim` letters (Witt's formula).
pub fn witt_dimension(dim: usize, depth: usize) -> usize {
    (1..=depth)
        .map(|k| {
            let total: i64 = (1..=k)
                .filter(|e| k % e == 0)
                .map(|e| mobius(e) * (dim as i64).pow((k / e) as u32))
                .sum();
            (total / k as i64) as usize
        })
        .sum()
}

fn mobius(mut n: usize) -> i64 {
    let mut result = 1;
    let mut p = 2;
    while p * p <= n {
        if n % p == 0 {
            n /= p;
            if n % p == 0 {
                return 0;
            }
            result = -result;
        }
        p += 1;
    }
    if n > 1 {
        result = -result;
    }
    result
}

/// Lyndon words of length 1..=max_len over `0..dim`, in lexicographic order.
fn lyndon_words(dim: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if dim == 0 || max_len == 0 {
        return out;
    }
    // Duval's generation algorithm.
    let mut w: Vec<usize> = vec![0];
    loop {
        out.push(w.clone());
        let m = w.len();
        while w.len() < max_len {
            w.push(w[w.len() - m]);
        }
        while w.last() == Some(&(dim - 1)) {
            w.pop();
        }
        match w.last_mut() {
            Some(l) => *l += 1,
            None => break,
        }
    }
    out
}

/// True when `w` is strictly smaller than each of its proper rotations.
pub fn is_lyndon(w: &[usize]) -> bool {
    (1..w.len()).all(|i| {
        let rot: Vec<usize> = w[i..].iter().chain(&w[..i]).copied().collect();
        w < rot.as_slice()
    })
}

type Poly = BTreeMap<Vec<usize>, f64>;

fn poly_mul(a: &Poly, b: &Poly) -> Poly {
    let mut out = Poly::new();
    for (wa, ca) in a {
        for (wb, cb) in b {
            let mut w = wa.clone();
            w.extend_from_slice(wb);
            *out.entry(w).or_insert(0.0) += ca * cb;
        }
    }
    out
}

fn poly_bracket(a: &Poly, b: &Poly) -> Poly {
    let mut out = poly_mul(a, b);
    for (w, c) in poly_mul(b, a) {
        *out.entry(w).or_insert(0.0) -= c;
    }
    out.retain(|_, c| *c != 0.0);
    out
}

/// Lyndon bracket basis of the free Lie algebra truncated at `depth`.
#[derive(Clone, Debug)]
pub struct LyndonBasis {
    dim: usize,
    depth: usize,
    words: Vec<Vec<usize>>,
    /// Standard factorisation `w = u·v` as basis indices (None for letters).
    factors: Vec<Option<(usize, usize)>>,
    /// Tensor expansion of each bracket: (index within its level, coefficient).
    expansions: Vec<Vec<(usize, f64)>>,
}

impl LyndonBasis {
    pub fn new(dim: usize, depth: usize) -> Result<Self> {
        if dim == 0 || depth == 0 {
            return Err(Error::Contract("Lyndon basis needs d ≥ 1 and depth ≥ 1".into()));
        }
        let mut words = lyndon_words(dim, depth);
        words.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        let index: BTreeMap<Vec<usize>, usize> =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();

        let mut factors = Vec::with_capacity(words.len());
        let mut polys: Vec<Poly> = Vec::with_capacity(words.len());
        for w in &words {
            if w.len() == 1 {
                factors.push(None);
                polys.push(Poly::from([(w.clone(), 1.0)]));
                continue;
            }
            // Longest proper suffix that is itself Lyndon.
            let split = (1..w.len()).find(|&i| index.contains_key(&w[i..])).unwrap();
            let (u, v) = (index[&w[..split]], index[&w[split..]]);
            factors.push(Some((u, v)));
            polys.push(poly_bracket(&polys[u], &polys[v]));
        }
        let expansions = polys
            .iter()
            .map(|p| p.iter().map(|(w, c)| (word_index(w, dim), *c)).collect())
            .collect();
        Ok(LyndonBasis {
            dim,
            depth,
            words,
            factors,
            expansions,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn words(&self) -> &[Vec<usize>] {
        &self.words
    }

    /// Bracketed form of basis element `i`, letters printed 1-based.
    pub fn bracket(&self, i: usize) -> String {
        match self.factors[i] {
            None => (self.words[i][0] + 1).to_string(),
            Some((u, v)) => format!("[{},{}]", self.bracket(u), self.bracket(v)),
        }
    }

    /// Tensor-algebra element `Σ_i c_i · P(w_i)`.
    pub fn expand(&self, coords: &[f64]) -> Result<TruncatedTensor> {
        if coords.len() != self.len() {
            return dim_err(format!("{} coordinates for a basis of {}", coords.len(), self.len()));
        }
        let mut out = TruncatedTensor::zero(self.dim, self.depth);
        for ((w, exp), c) in self.words.iter().zip(&self.expansions).zip(coords) {
            let level = out.level_mut(w.len());
            for &(idx, e) in exp {
                level[idx] += c * e;
            }
        }
        Ok(out)
    }

    /// Coordinates of a Lie element in this basis.
    ///
    /// The bracket `P(w)` of a Lyndon word has `w` as its lexicographically
    /// smallest word, with coefficient 1, so walking each level's Lyndon words
    /// in increasing order gives a triangular solve.
    pub fn project(&self, lie: &TruncatedTensor) -> Result<Vec<f64>> {
        if lie.dim != self.dim || lie.depth != self.depth {
            return dim_err("projection onto a basis of different d or depth");
        }
        let mut residual = lie.clone();
        let mut coords = vec![0.0; self.len()];
        for (i, w) in self.words.iter().enumerate() {
            let level = residual.level_mut(w.len());
            let c = level[word_index(w, self.dim)];
            coords[i] = c;
            if c != 0.0 {
                for &(idx, e) in &self.expansions[i] {
                    level[idx] -= c * e;
                }
            }
        }
        let worst = residual
            .levels
            .iter()
            .flatten()
            .fold(residual.scalar.abs(), |m, x| m.max(x.abs()));
        if worst > 1e-8 {
            return Err(Error::Contract(format!(
                "element is not in the free Lie algebra (residual {worst:e})"
            )));
        }
        Ok(coords)
    }
}

/// Log-signature coordinates of the polyline through `points`.
pub fn logsig_polyline(points: &[Vec<f64>], basis: &LyndonBasis) -> Result<Vec<f64>> {
    let sig = sig_polyline(points, basis.depth())?;
    basis.project(&tensor_log(&sig)?)
}

/// Log-signatures of every (window, node) pair of a path.
#[derive(Clone, Debug, PartialEq)]
pub struct LogSigSequence {
    windows: usize,
    nodes: usize,
    width: usize,
    data: Vec<f64>,
    boundaries: Vec<f64>,
}

impl LogSigSequence {
    pub fn new(nodes: usize, width: usize, data: Vec<f64>, boundaries: Vec<f64>) -> Result<Self> {
        let windows = boundaries.len().saturating_sub(1);
        if data.len() != windows * nodes * width {
            return dim_err("log-signature buffer does not match windows x nodes x width");
        }
        Ok(LogSigSequence {
            windows,
            nodes,
            width,
            data,
            boundaries,
        })
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Basis size `L`.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Window length `r_{i+1} - r_i`.
    pub fn divisor(&self, window: usize) -> f64 {
        self.boundaries[window + 1] - self.boundaries[window]
    }

    pub fn get(&self, window: usize, node: usize) -> &[f64] {
        let off = (window * self.nodes + node) * self.width;
        &self.data[off..off + self.width]
    }

    /// All nodes' coordinates for one window, `nodes × width` row-major.
    pub fn window_block(&self, window: usize) -> &[f64] {
        let n = self.nodes * self.width;
        &self.data[window * n..(window + 1) * n]
    }
}

/// Knot-index window grid: `ceil(n/P)` windows `[iP, min((i+1)P, n)]` over
/// the indices `0..=n`, the last possibly short.
pub fn window_grid(intervals: usize, subpath: usize) -> Result<Vec<(usize, usize)>> {
    if subpath == 0 {
        return Err(Error::Contract("sub-path length must be at least 1".into()));
    }
    if intervals < subpath {
        return Err(Error::Data(format!(
            "series spans {intervals} intervals, shorter than sub-path length {subpath}"
        )));
    }
    Ok((0..intervals.div_ceil(subpath))
        .map(|i| (i * subpath, ((i + 1) * subpath).min(intervals)))
        .collect())
}

/// Log-signature of each window of the path, per node.
///
/// `knot_times` is the full time grid the path was built on (observed or
/// not); each window is sampled with `substeps` chords per grid interval.
pub fn window_logsig(
    path: &SplinePath,
    knot_times: &[f64],
    basis: &LyndonBasis,
    subpath: usize,
    substeps: usize,
) -> Result<LogSigSequence> {
    if basis.dim() != path.path_channels() {
        return dim_err(format!(
            "basis alphabet {} vs path width {}",
            basis.dim(),
            path.path_channels()
        ));
    }
    let grid = window_grid(knot_times.len().saturating_sub(1), subpath)?;
    let mut boundaries: Vec<f64> = grid.iter().map(|&(s, _)| knot_times[s]).collect();
    boundaries.push(knot_times[grid.last().unwrap().1]);
    let mut data = Vec::with_capacity(grid.len() * path.nodes() * basis.len());
    for &(s, e) in &grid {
        for v in 0..path.nodes() {
            let pts = path.sample_chords(v, knot_times[s], knot_times[e], substeps * (e - s))?;
            data.extend(logsig_polyline(&pts, basis)?);
        }
    }
    LogSigSequence::new(path.nodes(), basis.len(), data, boundaries)
}
