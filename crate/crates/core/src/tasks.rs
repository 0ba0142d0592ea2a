//! Seeded generators for the two synthetic long-range benchmarks and their
//! analytic memoryless-baseline losses.
//!
//! Copy task (10 input symbols a0..a9): a row is
//!   [10 data symbols from a0..a7][T-1 blanks a8][1 marker a9][10 blanks a8]
//! and the target is [T+10 blanks][the 10 data symbols in order]. Outputs
//! range over 9 classes (a0..a8); the marker is never a target.
//!
//! Denoise task (11 input symbols a0..a10): 10 data symbols from a0..a8 sit at
//! sorted random positions among the first T steps, everything else in the
//! first T+9 steps is noise a9, the marker a10 sits at position T+9, and the
//! target is noise-class for the first T+10 steps then the data in order.
//! Outputs range over 10 classes (9 data + noise).
//!
//! All positions are 0-based. Sequence length is always T + 20.

use crate::matrix::{Matrix, Rng};

pub const COPY_N_IN: usize = 10;
pub const COPY_N_OUT: usize = 9;
pub const COPY_BLANK: usize = 8;
pub const COPY_MARKER: usize = 9;

pub const DENOISE_N_IN: usize = 11;
pub const DENOISE_N_OUT: usize = 10;
pub const DENOISE_NOISE: usize = 9;
pub const DENOISE_MARKER: usize = 10;

/// One batch of one-hot input sequences with per-step target classes.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    /// T+20 matrices, each batch x n_in, one-hot rows.
    pub inputs: Vec<Matrix>,
    /// targets[t][row], class indices over n_out.
    pub targets: Vec<Vec<usize>>,
    /// Analytic loss of the memoryless predictor for this T.
    pub baseline: f64,
    pub t_len: usize,
}

impl TaskBatch {
    pub fn seq_len(&self) -> usize {
        self.t_len + 20
    }

    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows
    }

    /// Human-auditable text: space-separated symbol indices, one sequence per
    /// line, inputs then a `|` then targets.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for row in 0..self.batch_size() {
            let mut fields: Vec<String> = Vec::new();
            for m in &self.inputs {
                let sym = m.row(row).iter().position(|&v| v == 1.0).expect("one-hot row");
                fields.push(sym.to_string());
            }
            fields.push("|".to_string());
            for t in &self.targets {
                fields.push(t[row].to_string());
            }
            out.push_str(&fields.join(" "));
            out.push('\n');
        }
        out
    }
}

fn build_batch(symbols: &[Vec<usize>], targets_rows: &[Vec<usize>], n_in: usize, baseline: f64, t_len: usize) -> TaskBatch {
    let batch = symbols.len();
    let seq_len = symbols[0].len();
    let mut inputs = Vec::with_capacity(seq_len);
    let mut targets = Vec::with_capacity(seq_len);
    for t in 0..seq_len {
        let mut m = Matrix::zeros(batch, n_in);
        let mut col = Vec::with_capacity(batch);
        for row in 0..batch {
            *m.at_mut(row, symbols[row][t]) = 1.0;
            col.push(targets_rows[row][t]);
        }
        inputs.push(m);
        targets.push(col);
    }
    TaskBatch { inputs, targets, baseline, t_len }
}

/// Memory copying task: remember 10 symbols across T blank steps.
pub fn gen_copy(t_len: usize, batch: usize, rng: &mut Rng) -> TaskBatch {
    assert!(t_len >= 1 && batch >= 1, "gen_copy: T={t_len} batch={batch}");
    let seq_len = t_len + 20;
    let mut symbols = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let data: Vec<usize> = (0..10).map(|_| rng.below(8)).collect();
        let mut row = Vec::with_capacity(seq_len);
        row.extend_from_slice(&data);
        row.extend(std::iter::repeat(COPY_BLANK).take(t_len - 1));
        row.push(COPY_MARKER);
        row.extend(std::iter::repeat(COPY_BLANK).take(10));
        debug_assert_eq!(row.len(), seq_len);

        let mut tgt = vec![COPY_BLANK; t_len + 10];
        tgt.extend_from_slice(&data);
        symbols.push(row);
        targets.push(tgt);
    }
    build_batch(&symbols, &targets, COPY_N_IN, baseline_copy(t_len), t_len)
}

/// Denoise task: extract 10 data symbols scattered among noise.
pub fn gen_denoise(t_len: usize, batch: usize, rng: &mut Rng) -> TaskBatch {
    assert!(t_len >= 10, "gen_denoise: T={t_len} must be >= 10 to fit the data symbols");
    assert!(batch >= 1);
    let seq_len = t_len + 20;
    let mut symbols = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let positions = rng.sorted_sample(t_len, 10);
        let data: Vec<usize> = (0..10).map(|_| rng.below(9)).collect();
        let mut row = vec![DENOISE_NOISE; seq_len];
        for (p, &d) in positions.iter().zip(&data) {
            row[*p] = d;
        }
        row[t_len + 9] = DENOISE_MARKER;

        let mut tgt = vec![DENOISE_NOISE; t_len + 10];
        tgt.extend_from_slice(&data);
        symbols.push(row);
        targets.push(tgt);
    }
    build_batch(&symbols, &targets, DENOISE_N_IN, baseline_denoise(t_len), t_len)
}

/// 10 ln(8) / (T + 20): the copy-task loss of a predictor that emits blanks
/// with certainty and guesses uniformly over the 8 data categories.
pub fn baseline_copy(t_len: usize) -> f64 {
    10.0 * 8.0_f64.ln() / (t_len + 20) as f64
}

/// 10 ln(9) / (T + 20), the denoise analogue over 9 data categories.
pub fn baseline_denoise(t_len: usize) -> f64 {
    assert!(t_len >= 10);
    10.0 * 9.0_f64.ln() / (t_len + 20) as f64
}

/// The memoryless predictor's probability rows for one sequence: certain
/// blank/noise for the first T+10 steps, uniform over the data categories for
/// the last 10. Used to confirm the closed-form baselines through the actual
/// cross-entropy path.
pub fn memoryless_predictor_probs(t_len: usize, n_out: usize, blank: usize, n_data: usize) -> Matrix {
    let seq_len = t_len + 20;
    let mut probs = Matrix::zeros(seq_len, n_out);
    for t in 0..t_len + 10 {
        *probs.at_mut(t, blank) = 1.0;
    }
    for t in t_len + 10..seq_len {
        for c in 0..n_data {
            *probs.at_mut(t, c) = 1.0 / n_data as f64;
        }
    }
    probs
}
