//! Dense row-major matrices, activations, dropout, seeded randomness and the
//! AdaGrad-with-momentum update shared by the recurrent models.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn zeros_like(&self) -> Self {
        Matrix::zeros(self.rows, self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(rows.len(), self.cols);
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same("Matrix::add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same("Matrix::hadamard", other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let src = &other.data[k * other.cols..(k + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!(
                    "{}x{} times ({}x{})^T",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self += aᵀ · b`, the usual weight-gradient accumulation.
    pub fn add_t_matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.rows != b.rows || self.rows != a.cols || self.cols != b.cols {
            return Err(Error::shape(
                "add_t_matmul",
                format!(
                    "acc {}x{} += ({}x{})^T {}x{}",
                    self.rows, self.cols, a.rows, a.cols, b.rows, b.cols
                ),
            ));
        }
        for r in 0..a.rows {
            let brow = b.row(r);
            for k in 0..a.cols {
                let av = a.data[r * a.cols + k];
                if av == 0.0 {
                    continue;
                }
                let dst = &mut self.data[k * self.cols..(k + 1) * self.cols];
                for (d, s) in dst.iter_mut().zip(brow) {
                    *d += av * s;
                }
            }
        }
        Ok(())
    }

    /// Adds `v` to every row (bias broadcast).
    pub fn add_row_broadcast(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("row of {} onto {} columns", v.len(), self.cols),
            ));
        }
        for r in 0..self.rows {
            for (d, s) in self.row_mut(r).iter_mut().zip(v) {
                *d += s;
            }
        }
        Ok(())
    }

    /// Sum over rows, as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (d, s) in out.data.iter_mut().zip(self.row(r)) {
                *d += s;
            }
        }
        out
    }

    fn check_same(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(())
    }

    /// Little-endian: `rows: u64`, `cols: u64`, then row-major `f64` values.
    pub fn write_le<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_le<R: Read>(r: &mut R) -> std::io::Result<Matrix> {
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, "matrix size overflow")
        })?;
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Ok(Matrix { rows, cols, data })
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x · W + b` with `x: B x d_in`, `W: d_in x d_out`, `b: d_out`.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut out = x.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// Softmax along each row.
    Softmax,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of one row, shifted by its maximum.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn apply_activation(x: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::Identity => x.clone(),
        Activation::Softmax => {
            let mut out = x.clone();
            for r in 0..x.rows() {
                let s = softmax(x.row(r));
                out.row_mut(r).copy_from_slice(&s);
            }
            out
        }
    }
}

/// Seeded random stream. Identical `(seed, stream)` pairs yield identical
/// sequences on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for the same seed, e.g. one per search trial.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1 / (1 - p)`. With `p == 0` the mask is all ones and no randomness is drawn.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let mut mask = Matrix::zeros(rows, cols);
    if p <= 0.0 {
        mask.fill(1.0);
        return mask;
    }
    let keep = 1.0 / (1.0 - p);
    for v in mask.data_mut() {
        *v = if rng.uniform() < p { 0.0 } else { keep };
    }
    mask
}

pub fn dropout(x: &Matrix, p: f64, rng: &mut Rng, training: bool) -> Matrix {
    if !training || p <= 0.0 {
        return x.clone();
    }
    let mask = dropout_mask(x.rows(), x.cols(), p, rng);
    x.hadamard(&mask).expect("mask built with the input's shape")
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.uniform_range(-bound, bound);
    }
    m
}

/// Hyper-parameters of AdaGrad with classical momentum applied on top of the
/// AdaGrad-scaled gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaGradMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
}

impl AdaGradMomentum {
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        AdaGradMomentum {
            learning_rate,
            momentum,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn step(&self, param: &mut [f64], grad: &[f64], state: &mut OptState) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(param.len(), state.accum.len());
        // Without momentum a zero gradient leaves the entry untouched.
        let skip_zero = self.momentum == 0.0;
        for (((p, &g), acc), vel) in param
            .iter_mut()
            .zip(grad)
            .zip(state.accum.iter_mut())
            .zip(state.velocity.iter_mut())
        {
            if g == 0.0 && skip_zero {
                continue;
            }
            *acc += g * g;
            let adjusted = g / (acc.sqrt() + self.epsilon);
            *vel = self.momentum * *vel + self.learning_rate * adjusted;
            *p -= *vel;
        }
    }
}

/// Per-parameter accumulator and velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub accum: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        OptState {
            accum: vec![0.0; len],
            velocity: vec![0.0; len],
        }
    }
}

/// Optimizer state for an ordered list of parameter matrices. The list order
/// must be the same on every call.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub rule: AdaGradMomentum,
    states: Vec<OptState>,
}

impl Optimizer {
    pub fn new(rule: AdaGradMomentum) -> Self {
        Optimizer {
            rule,
            states: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.states.is_empty() {
            self.states = params.iter().map(|p| OptState::new(p.data().len())).collect();
        }
        assert_eq!(self.states.len(), params.len(), "parameter list changed");
        for ((p, g), st) in params.into_iter().zip(grads).zip(self.states.iter_mut()) {
            self.rule.step(p.data_mut(), g.data(), st);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn naive_affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), w.cols());
        for i in 0..x.rows() {
            for j in 0..w.cols() {
                let mut acc = b[j];
                for k in 0..x.cols() {
                    acc += x.get(i, k) * w.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn affine_identity_and_bias_only() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let out = affine(&Matrix::identity(2), &w, &[0.0, 0.0]).unwrap();
        assert_eq!(out, w);

        let out = affine(&Matrix::zeros(3, 2), &w, &[0.5, -1.0]).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.5, -1.0]);
        }
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(2, 2);
        assert!(matches!(affine(&x, &w, &[0.0, 0.0]), Err(Error::Shape { .. })));
        let w = Matrix::zeros(3, 2);
        assert!(affine(&x, &w, &[0.0]).is_err());
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = Rng::new(3);
        let x = glorot_uniform(3, 4, &mut rng);
        let w = glorot_uniform(4, 2, &mut rng);
        let b = [rng.uniform(), rng.uniform()];
        let got = affine(&x, &w, &b).unwrap();
        let want = naive_affine(&x, &w, &b);
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn affine_matches_naive_on_random_shapes(
            rows in 1usize..6, inner in 1usize..7, cols in 1usize..6, seed in any::<u64>()
        ) {
            let mut rng = Rng::new(seed);
            let x = glorot_uniform(rows, inner, &mut rng);
            let w = glorot_uniform(inner, cols, &mut rng);
            let b: Vec<f64> = (0..cols).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            let got = affine(&x, &w, &b).unwrap();
            let want = naive_affine(&x, &w, &b);
            for (g, e) in got.data().iter().zip(want.data()) {
                prop_assert!((g - e).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0
        ) {
            let p = softmax(&row);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activation_fixed_points() {
        let zero = Matrix::zeros(1, 3);
        assert_eq!(apply_activation(&zero, Activation::Sigmoid).data(), &[0.5; 3]);
        assert_eq!(apply_activation(&zero, Activation::Tanh).data(), &[0.0; 3]);
        let sm = apply_activation(&zero, Activation::Softmax);
        for v in sm.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // tanh(1) = (e^2 - 1) / (e^2 + 1), evaluated from the exponential series
        let e2: f64 = (0..40).fold((1.0, 1.0), |(sum, term), k| {
            let term = term * 2.0 / (k as f64 + 1.0);
            (sum + term, term)
        }).0;
        let want = (e2 - 1.0) / (e2 + 1.0);
        let got = apply_activation(&Matrix::row_vector(&[1.0]), Activation::Tanh);
        assert!((got.get(0, 0) - want).abs() < 1e-15);
        assert!((want - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = Rng::new(1);
        let x = glorot_uniform(4, 5, &mut rng);
        assert_eq!(dropout(&x, 0.0, &mut rng, true), x);
        assert_eq!(dropout(&x, 0.7, &mut rng, false), x);
    }

    #[test]
    fn dropout_statistics() {
        let mut rng = Rng::new(11);
        let n = 100_000;
        let x = Matrix::from_vec(1, n, vec![1.0; n]).unwrap();
        let y = dropout(&x, 0.5, &mut rng, true);
        let survivors = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.5).abs() < 0.01, "survivor fraction {survivors}");
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let ma = dropout_mask(8, 8, 0.3, &mut a);
        let mb = dropout_mask(8, 8, 0.3, &mut b);
        assert_eq!(ma, mb);
        assert_eq!(glorot_uniform(3, 3, &mut a), glorot_uniform(3, 3, &mut b));
        let mut c = Rng::with_stream(42, 1);
        let mut d = Rng::with_stream(42, 2);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn optimizer_zero_gradient_is_noop() {
        let opt = AdaGradMomentum::new(0.1, 0.5);
        let mut p = vec![1.0, -2.0];
        let mut st = OptState::new(2);
        opt.step(&mut p, &[0.0, 0.0], &mut st);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn optimizer_first_step_has_magnitude_lr() {
        let opt = AdaGradMomentum::new(0.1, 0.0);
        let mut p = vec![0.0, 0.0];
        let mut st = OptState::new(2);
        opt.step(&mut p, &[3.0, -0.5], &mut st);
        assert!((p[0] + 0.1 * 3.0 / (3.0 + 1e-6)).abs() < 1e-15);
        assert!((p[1] - 0.1 * 0.5 / (0.5 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn optimizer_two_steps_match_scalar_recurrence() {
        // accum 1 -> 2; velocity 0.1/(1+eps) -> 0.1*v1 + 0.1/(sqrt2+eps)
        let eps = 1e-6;
        let v1 = 0.1 * 1.0 / (1.0 + eps);
        let v2 = 0.1 * v1 + 0.1 * 1.0 / (2f64.sqrt() + eps);
        let want = 1.0 - v1 - v2;

        let opt = AdaGradMomentum::new(0.1, 0.1);
        let mut p = vec![1.0];
        let mut st = OptState::new(1);
        opt.step(&mut p, &[1.0], &mut st);
        opt.step(&mut p, &[1.0], &mut st);
        assert!((p[0] - want).abs() < 1e-15);
        assert_eq!(st.accum, vec![2.0]);
    }

    proptest! {
        #[test]
        fn accumulator_never_decreases(grads in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
            let opt = AdaGradMomentum::new(0.05, 0.3);
            let mut p = vec![0.0];
            let mut st = OptState::new(1);
            let mut prev = 0.0;
            for g in grads {
                opt.step(&mut p, &[g], &mut st);
                prop_assert!(st.accum[0] >= prev);
                prev = st.accum[0];
            }
        }
    }

    #[test]
    fn matrix_serialization_round_trip() {
        let mut rng = Rng::new(5);
        let m = glorot_uniform(3, 7, &mut rng);
        let mut buf = Vec::new();
        m.write_le(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 21 * 8);
        assert_eq!(&buf[..8], &3u64.to_le_bytes());
        let back = Matrix::read_le(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn transpose_products_match_matmul() {
        let mut rng = Rng::new(8);
        let a = glorot_uniform(3, 4, &mut rng);
        let b = glorot_uniform(5, 4, &mut rng);
        let abt = a.matmul_t(&b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(j, k)).sum();
                assert!((abt.get(i, j) - want).abs() < 1e-14);
            }
        }
        let c = glorot_uniform(3, 2, &mut rng);
        let mut acc = Matrix::zeros(4, 2);
        acc.add_t_matmul(&a, &c).unwrap();
        for k in 0..4 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|i| a.get(i, k) * c.get(i, j)).sum();
                assert!((acc.get(k, j) - want).abs() < 1e-14);
            }
        }
    }
}
