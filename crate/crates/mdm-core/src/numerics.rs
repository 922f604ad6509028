//! Dense matrix arithmetic, a deterministic PRNG, and the central-difference
//! gradient oracle that every other module's tests lean on.
//!
//! All arithmetic is carried out in f64; file formats downcast to f32 at the
//! I/O boundary only.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};

/// Row count below which matmul stays sequential; per-row parallelism above it
/// is bit-identical to the sequential path because each output row is
/// accumulated independently in a fixed order.
const PAR_ROW_THRESHOLD: usize = 64;

/// Dense row-major f64 matrix. The universal numeric carrier.
///
/// Invariants: `data.len() == rows * cols` and every stored value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MdmError::Shape(format!(
                "buffer of {} values cannot fill {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MdmError::Numeric(format!(
                "non-finite value at flat index {} ({})",
                i, data[i]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(MdmError::Shape("ragged row lengths".into()));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(v.is_finite(), "refusing to store non-finite value {v}");
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of the given rows, in order. Indices must be in range.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(MdmError::Data(format!(
                    "row index {} out of range for {} rows",
                    i, self.rows
                )));
            }
            out.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data: out,
        })
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(MdmError::Shape(format!(
                "hcat row mismatch: {} vs {}",
                self.rows, other.rows
            )));
        }
        let mut data = Vec::with_capacity(self.rows * (self.cols + other.cols));
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols + other.cols,
            data,
        })
    }

    /// Split columns at `at`: returns (left `[rows x at]`, right `[rows x cols-at]`).
    pub fn split_cols(&self, at: usize) -> Result<(Matrix, Matrix)> {
        if at > self.cols {
            return Err(MdmError::Shape(format!(
                "cannot split {} cols at {}",
                self.cols, at
            )));
        }
        let mut left = Vec::with_capacity(self.rows * at);
        let mut right = Vec::with_capacity(self.rows * (self.cols - at));
        for r in 0..self.rows {
            let row = self.row(r);
            left.extend_from_slice(&row[..at]);
            right.extend_from_slice(&row[at..]);
        }
        Ok((
            Matrix {
                rows: self.rows,
                cols: at,
                data: left,
            },
            Matrix {
                rows: self.rows,
                cols: self.cols - at,
                data: right,
            },
        ))
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Standard matrix product with f64 accumulation.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(MdmError::Shape(format!(
                "matmul {}x{} . {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut data = vec![0.0; n * m];
        let fill_row = |(r, out_row): (usize, &mut [f64])| {
            let a_row = &self.data[r * k..(r + 1) * k];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * m..(kk + 1) * m];
                for (c, &b) in b_row.iter().enumerate() {
                    out_row[c] += a * b;
                }
            }
        };
        if n >= PAR_ROW_THRESHOLD {
            data.par_chunks_mut(m)
                .enumerate()
                .for_each(|(r, row)| fill_row((r, row)));
        } else {
            data.chunks_mut(m)
                .enumerate()
                .for_each(|(r, row)| fill_row((r, row)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MdmError::Numeric(format!(
                "matmul produced non-finite value at flat index {i}"
            )));
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data,
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Matrix> {
        let data: Vec<f64> = self.data.iter().map(|v| v * s).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MdmError::Numeric(format!("scale by {s} overflowed")));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MdmError::Shape(format!(
                "{op} {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MdmError::Numeric(format!("{op} produced non-finite value")));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Flat dot product over all entries; shapes must match.
    pub fn flat_dot(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MdmError::Shape(format!(
                "flat_dot {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Square root of the sum of squares over all entries of all inputs.
/// The clip norm of an update is this quantity taken over every gradient
/// tensor jointly.
pub fn global_l2_norm<'a, I>(mats: I) -> f64
where
    I: IntoIterator<Item = &'a Matrix>,
{
    let mut acc = 0.0;
    for m in mats {
        for v in m.data() {
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// Central-difference gradient of a scalar function of a matrix:
/// `(f(x + h e_ij) - f(x - h e_ij)) / (2h)` per entry.
///
/// The oracle against which every analytic gradient in this crate is checked.
pub fn finite_diff_grad<F>(mut f: F, x: &Matrix, h: f64) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if h <= 0.0 {
        return Err(MdmError::Config(format!("step size must be > 0, got {h}")));
    }
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = probe.get(r, c);
            probe.set(r, c, orig + h);
            let fp = f(&probe);
            probe.set(r, c, orig - h);
            let fm = f(&probe);
            probe.set(r, c, orig);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(MdmError::Numeric(format!(
                    "function non-finite at perturbation of entry ({r},{c})"
                )));
            }
            grad.set(r, c, (fp - fm) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// Guarded relative error between an analytic and a reference value.
pub fn rel_err(analytic: f64, reference: f64) -> f64 {
    (analytic - reference).abs() / analytic.abs().max(reference.abs()).max(1e-6)
}

/// Deterministic PRNG: xoshiro256** seeded through SplitMix64, with
/// Box-Muller for Gaussian draws. Identical seeds produce identical streams
/// within one build; the stream is not specified to match other
/// implementations.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    spare_gauss: Option<f64>,
}

/// Serializable snapshot of an [`Rng`], used for split-run resume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub s: [u64; 4],
    pub spare_gauss: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        // SplitMix64 expansion of the seed into the xoshiro state.
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_add(0x9E3779B97F4A7C15);
            let mut z = x;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        };
        Rng {
            s: [next(), next(), next(), next()],
            spare_gauss: None,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            s: self.s,
            spare_gauss: self.spare_gauss,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        Rng {
            s: state.s,
            spare_gauss: state.spare_gauss,
        }
    }

    /// Derive an independent child generator from this stream.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        // xoshiro256** step.
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller over the uniform stream; the second
    /// value of each pair is cached.
    pub fn gauss(&mut self) -> f64 {
        if let Some(g) = self.spare_gauss.take() {
            return g;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_gauss = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `0..n` (partial Fisher-Yates).
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    /// Gaussian matrix with entries `mean + std * N(0,1)`.
    pub fn gauss_matrix(&mut self, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, mean + std * self.gauss());
            }
        }
        m
    }
}
