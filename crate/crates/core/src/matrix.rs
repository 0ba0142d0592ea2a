//! Dense row-major f64 matrices plus the activations, losses and seeded
//! initialization the rest of the crate is built on. Everything here is a pure
//! function of its inputs; shape violations panic with both shapes in the
//! message.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a parallel dispatch costs more than it saves.
#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 16;

/// Dense 2-D array of f64, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Hadamard,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive, got {rows}x{cols}");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "data length {} does not match shape {rows}x{cols}",
            data.len()
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows: {} vs {}", r.len(), cols);
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn assert_same_shape(&self, other: &Matrix, op: &str) {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "{op}: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }

    pub fn elementwise(&self, other: &Matrix, op: ElemOp) -> Matrix {
        self.assert_same_shape(other, "elementwise");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| match op {
                ElemOp::Add => a + b,
                ElemOp::Sub => a - b,
                ElemOp::Hadamard => a * b,
            })
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.elementwise(other, ElemOp::Add)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.elementwise(other, ElemOp::Sub)
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.elementwise(other, ElemOp::Hadamard)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        self.assert_same_shape(other, "add_assign");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn sigmoid(&self) -> Matrix {
        self.map(sigmoid_scalar)
    }

    pub fn tanh(&self) -> Matrix {
        self.map(f64::tanh)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = out.row_mut(r);
            let mut sum = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *out.at_mut(c, r) = self.at(r, c);
            }
        }
        out
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|x| x * k)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn check_finite(&self, context: &str) {
        for (i, &x) in self.data.iter().enumerate() {
            assert!(
                x.is_finite(),
                "{context}: non-finite entry {x} at ({}, {})",
                i / self.cols,
                i % self.cols
            );
        }
    }

    /// Adds a 1xC row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) {
        assert!(
            bias.rows == 1 && bias.cols == self.cols,
            "bias broadcast: {}x{} onto {}x{}",
            bias.rows,
            bias.cols,
            self.rows,
            self.cols
        );
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
    }

    /// Column sums as a 1xC matrix.
    pub fn col_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    /// self (RxK) * b (KxC).
    pub fn matmul(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, b.cols);
        out.acc_matmul(self, b);
        out
    }

    /// self (RxK) * b^T where b is CxK.
    pub fn matmul_nt(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows, b.rows);
        out.acc_matmul_nt(self, b);
        out
    }

    /// self^T * b: self is NxR, b is NxC, result RxC.
    pub fn matmul_tn(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.cols, b.cols);
        out.acc_matmul_tn(self, b);
        out
    }

    /// out += a * b.
    pub fn acc_matmul(&mut self, a: &Matrix, b: &Matrix) {
        assert_eq!(
            a.cols, b.rows,
            "matmul: inner dims differ, {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
        assert!(
            self.rows == a.rows && self.cols == b.cols,
            "matmul out: {}x{} for {}x{} * {}x{}",
            self.rows, self.cols, a.rows, a.cols, b.rows, b.cols
        );
        let run = |out_row: &mut [f64], arow: &[f64]| {
            for (k, &aik) in arow.iter().enumerate() {
                let brow = b.row(k);
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        };
        #[cfg(feature = "parallel")]
        if a.rows * a.cols * b.cols >= PAR_MIN_WORK {
            self.data
                .par_chunks_mut(b.cols)
                .zip(a.data.par_chunks(a.cols))
                .for_each(|(orow, arow)| run(orow, arow));
            return;
        }
        for (orow, arow) in self.data.chunks_mut(b.cols).zip(a.data.chunks(a.cols)) {
            run(orow, arow);
        }
    }

    /// out += a * b^T (rows of a dotted with rows of b).
    pub fn acc_matmul_nt(&mut self, a: &Matrix, b: &Matrix) {
        assert_eq!(
            a.cols, b.cols,
            "matmul_nt: inner dims differ, {}x{} * ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        );
        assert!(
            self.rows == a.rows && self.cols == b.rows,
            "matmul_nt out: {}x{} for {}x{} * ({}x{})^T",
            self.rows, self.cols, a.rows, a.cols, b.rows, b.cols
        );
        let run = |out_row: &mut [f64], arow: &[f64]| {
            for (o, j) in out_row.iter_mut().zip(0..b.rows) {
                let brow = b.row(j);
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *o += acc;
            }
        };
        #[cfg(feature = "parallel")]
        if a.rows * a.cols * b.rows >= PAR_MIN_WORK {
            self.data
                .par_chunks_mut(b.rows)
                .zip(a.data.par_chunks(a.cols))
                .for_each(|(orow, arow)| run(orow, arow));
            return;
        }
        for (orow, arow) in self.data.chunks_mut(b.rows).zip(a.data.chunks(a.cols)) {
            run(orow, arow);
        }
    }

    /// out += a^T * b (a is NxR, b is NxC, out RxC).
    pub fn acc_matmul_tn(&mut self, a: &Matrix, b: &Matrix) {
        assert_eq!(
            a.rows, b.rows,
            "matmul_tn: outer dims differ, ({}x{})^T * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        );
        assert!(
            self.rows == a.cols && self.cols == b.cols,
            "matmul_tn out: {}x{} for ({}x{})^T * {}x{}",
            self.rows, self.cols, a.rows, a.cols, b.rows, b.cols
        );
        let a_cols = a.cols;
        let run = |out_row: &mut [f64], j: usize| {
            for i in 0..a.rows {
                let aij = a.data[i * a_cols + j];
                if aij != 0.0 {
                    let brow = b.row(i);
                    for (o, &bv) in out_row.iter_mut().zip(brow) {
                        *o += aij * bv;
                    }
                }
            }
        };
        #[cfg(feature = "parallel")]
        if a.rows * a.cols * b.cols >= PAR_MIN_WORK {
            self.data
                .par_chunks_mut(b.cols)
                .enumerate()
                .for_each(|(j, orow)| run(orow, j));
            return;
        }
        for (j, orow) in self.data.chunks_mut(b.cols).enumerate() {
            run(orow, j);
        }
    }

    /// Sequential matmul regardless of the `parallel` feature; used by the
    /// bench suite as the comparison baseline.
    pub fn matmul_seq(&self, b: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, b.rows,
            "matmul: inner dims differ, {}x{} * {}x{}",
            self.rows, self.cols, b.rows, b.cols
        );
        let mut out = Matrix::zeros(self.rows, b.cols);
        for (orow, arow) in out.data.chunks_mut(b.cols).zip(self.data.chunks(self.cols)) {
            for (k, &aik) in arow.iter().enumerate() {
                let brow = b.row(k);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        out
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over rows of -ln(probs[row, target]).
pub fn cross_entropy(probs: &Matrix, targets: &[usize]) -> f64 {
    assert_eq!(
        probs.rows,
        targets.len(),
        "cross_entropy: {} prob rows vs {} targets",
        probs.rows,
        targets.len()
    );
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        assert!(t < probs.cols, "cross_entropy: target {t} out of range for {} classes", probs.cols);
        total += -probs.at(r, t).ln();
    }
    total / probs.rows as f64
}

/// 1 x width row with a single 1 at `index`.
pub fn one_hot(index: usize, width: usize) -> Matrix {
    assert!(index < width, "one_hot: index {index} >= width {width}");
    let mut m = Matrix::zeros(1, width);
    m.data[index] = 1.0;
    m
}

/// Uniform on +-sqrt(6 / (rows + cols)).
pub fn glorot_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let mut m = Matrix::zeros(rows, cols);
    for x in m.data.iter_mut() {
        *x = rng.uniform(-bound, bound);
    }
    m
}

/// Deterministic seeded generator. Same seed, same draw sequence.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        // Fisher-Yates
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// `k` distinct values from 0..n, sorted ascending.
    pub fn sorted_sample(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample {k} from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.inner.gen_range(i..n);
            pool.swap(i, j);
        }
        let mut picked = pool[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for x in m.data.iter_mut() {
            *x = rng.uniform(-2.0, 2.0);
        }
        m
    }

    /// Brute-force triple loop, the independent oracle for matmul.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for k in 0..a.cols {
                    acc += a.at(i, k) * b.at(k, j);
                }
                *out.at_mut(i, j) = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(i2.matmul(&a), a);
    }

    #[test]
    fn matmul_hand_computed() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.at(0, 0), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(11);
        let a = rand_matrix(3, 4, &mut rng);
        let b = rand_matrix(4, 2, &mut rng);
        let got = a.matmul(&b);
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-12);
        }
        // and on 5x5 random instances
        for seed in 0..5 {
            let mut rng = Rng::new(seed);
            let a = rand_matrix(5, 5, &mut rng);
            let b = rand_matrix(5, 5, &mut rng);
            let got = a.matmul(&b);
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let mut rng = Rng::new(3);
        let a = rand_matrix(4, 6, &mut rng);
        let b = rand_matrix(5, 6, &mut rng);
        let nt = a.matmul_nt(&b);
        let want = matmul_oracle(&a, &b.transpose());
        for (g, w) in nt.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-12);
        }
        let c = rand_matrix(4, 3, &mut rng);
        let tn = a.matmul_tn(&c);
        let want = matmul_oracle(&a.transpose(), &c);
        for (g, w) in tn.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_seq_equals_dispatched() {
        let mut rng = Rng::new(9);
        let a = rand_matrix(64, 48, &mut rng);
        let b = rand_matrix(48, 64, &mut rng);
        assert_eq!(a.matmul(&b), a.matmul_seq(&b));
    }

    #[test]
    #[should_panic(expected = "inner dims differ")]
    fn matmul_shape_mismatch_panics() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        a.matmul(&b);
    }

    #[test]
    fn elementwise_ops() {
        let a = Matrix::from_rows(&[vec![2.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![4.0, 5.0]]);
        assert_eq!(a.hadamard(&b).data, vec![8.0, 15.0]);
        let z = Matrix::zeros(1, 2);
        assert_eq!(a.add(&z), a);
        assert_eq!(a.sub(&a), z);
    }

    #[test]
    fn sigmoid_tanh_basics() {
        let z = Matrix::zeros(1, 1);
        assert_eq!(z.sigmoid().at(0, 0), 0.5);
        assert_eq!(z.tanh().at(0, 0), 0.0);
        // symmetry and open-range bounds on sampled points; stay below the
        // range where f64 tanh/sigmoid round to exactly +-1
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let x = rng.uniform(-15.0, 15.0);
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-12);
            let sx = sigmoid_scalar(x);
            assert!(sx > 0.0 && sx < 1.0);
            let tx = x.tanh();
            assert!(tx > -1.0 && tx < 1.0);
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let z = Matrix::zeros(1, 4);
        let p = z.softmax_rows();
        for &x in &p.data {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let big = Matrix::from_rows(&[vec![1000.0, 0.0]]);
        let p = big.softmax_rows();
        p.check_finite("softmax stability");
        assert!((p.at(0, 0) - 1.0).abs() < 1e-12);
        assert!(p.at(0, 1).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_preserve_argmax() {
        let mut rng = Rng::new(8);
        let m = rand_matrix(6, 5, &mut rng);
        let p = m.softmax_rows();
        for r in 0..m.rows {
            let sum: f64 = p.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let argmax_in = (0..m.cols).max_by(|&a, &b| m.at(r, a).total_cmp(&m.at(r, b))).unwrap();
            let argmax_out = (0..m.cols).max_by(|&a, &b| p.at(r, a).total_cmp(&p.at(r, b))).unwrap();
            assert_eq!(argmax_in, argmax_out);
            for &x in p.row(r) {
                assert!((0.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let uniform = Matrix::from_vec(1, 8, vec![0.125; 8]);
        assert!((cross_entropy(&uniform, &[3]) - 8.0_f64.ln()).abs() < 1e-12);

        let mut perfect = Matrix::zeros(1, 4);
        *perfect.at_mut(0, 2) = 1.0;
        assert_eq!(cross_entropy(&perfect, &[2]), 0.0);

        // two-row batch equals mean of per-row values
        let rows = Matrix::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]);
        let both = cross_entropy(&rows, &[0, 1]);
        let r0 = cross_entropy(&Matrix::from_rows(&[vec![0.7, 0.3]]), &[0]);
        let r1 = cross_entropy(&Matrix::from_rows(&[vec![0.2, 0.8]]), &[1]);
        assert!((both - (r0 + r1) / 2.0).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn cross_entropy_bad_target_panics() {
        let p = Matrix::from_vec(1, 2, vec![0.5, 0.5]);
        cross_entropy(&p, &[2]);
    }

    #[test]
    fn glorot_bound_holds_over_many_draws() {
        let mut rng = Rng::new(1);
        // 100x100 = 1e4 draws
        let m = glorot_init(100, 100, &mut rng);
        let bound = (6.0 / 200.0_f64).sqrt();
        for &x in &m.data {
            assert!(x.abs() <= bound);
        }
    }

    #[test]
    fn one_hot_and_zeros() {
        let m = one_hot(2, 4);
        assert_eq!(m.data, vec![0.0, 0.0, 1.0, 0.0]);
        assert!(Matrix::zeros(2, 2).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn transpose_scale_frobenius() {
        let mut rng = Rng::new(2);
        let a = rand_matrix(3, 5, &mut rng);
        assert_eq!(a.transpose().transpose(), a);
        assert!(a.scale(0.0).data.iter().all(|&x| x == 0.0));
        let i3 = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert!((i3.frobenius_norm() - 3.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rng_is_seed_deterministic() {
        let mut a = Rng::new(77);
        let mut b = Rng::new(77);
        let ma = glorot_init(4, 4, &mut a);
        let mb = glorot_init(4, 4, &mut b);
        assert_eq!(ma, mb);
        let mut c = Rng::new(78);
        assert_ne!(glorot_init(4, 4, &mut c), ma);
    }

    #[test]
    fn sorted_sample_is_distinct_and_sorted() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let s = rng.sorted_sample(30, 10);
            assert_eq!(s.len(), 10);
            for w in s.windows(2) {
                assert!(w[0] < w[1]);
            }
        }
    }
}
