//! A small laboratory for gated recurrent cells built from scratch on dense
//! f64 matrices: vanilla RNN, GRU, LSTM and a single-gate GRU variant, plus a
//! gated skip connection that feeds the hidden state from two steps back
//! directly into the current step. Includes exact-gradient BPTT with a
//! finite-difference oracle, the memory copying and denoise benchmarks, a
//! Jacobian-norm gradient probe, RMSProp/Adam training, and a bAbI question
//! answering pipeline.

pub mod babi;
pub mod bptt;
pub mod cells;
pub mod matrix;
pub mod optim;
pub mod tasks;
pub mod train;
