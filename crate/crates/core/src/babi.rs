//! bAbI question-answering pipeline: corpus parser, train-split vocabulary,
//! mean-pooled sentence encoding, per-subtask training (loss at the question
//! step only) and accuracy evaluation.
//!
//! Files follow the v1.2 line format: `<n> <sentence>` for statements and
//! `<n> <question>\t<answer>\t<supporting ids>` for questions, with line
//! number 1 resetting the story. Supporting ids are remapped to 1-based
//! positions within the story's statement list (question lines excluded).

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::bptt::{bptt_gradients, LossMask, SequenceModel};
use crate::cells::CellKind;
use crate::matrix::{glorot_init, Matrix, Rng};
use crate::optim::{OptimizerKind, OptimizerState};

pub const TASK_NAMES: [&str; 20] = [
    "Single Supporting Fact",
    "Two Supporting Facts",
    "Three Supporting Facts",
    "Two Arg. Relations",
    "Three Arg. Relations",
    "Yes/No Questions",
    "Counting",
    "Lists/Sets",
    "Simple Negation",
    "Indefinite Knowledge",
    "Basic Coreference",
    "Conjunction",
    "Compound Coref",
    "Time Reasoning",
    "Basic Deduction",
    "Basic Induction",
    "Positional Reasoning",
    "Size Reasoning",
    "Path Finding",
    "Agent's Motivations",
];

/// Reference mean accuracies reported for this protocol, printed alongside
/// measured numbers in run reports (never asserted).
pub const REFERENCE_MEANS: [(&str, f64); 3] =
    [("tfc-sgru", 66.45), ("lstm", 63.87), ("gru", 63.70)];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAExample {
    /// Story statements seen before the question, in order, tokenized.
    pub sentences: Vec<Vec<String>>,
    pub question: Vec<String>,
    /// Multi-word answers stay comma-joined as a single label.
    pub answer: String,
    /// 1-based indices into `sentences`.
    pub supporting: Vec<usize>,
}

#[derive(Debug)]
pub enum BabiError {
    Parse { line: usize, message: String },
    MissingData { expected: String },
}

impl fmt::Display for BabiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BabiError::Parse { line, message } => write!(f, "line {line}: {message}"),
            BabiError::MissingData { expected } => write!(f, "missing data file: {expected}"),
        }
    }
}

impl std::error::Error for BabiError {}

/// Lowercase, strip terminal punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_end_matches(['.', '?', '!']).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn parse_babi(text: &str) -> Result<Vec<QAExample>, BabiError> {
    let mut examples = Vec::new();
    let mut sentences: Vec<Vec<String>> = Vec::new();
    // raw line number within the story -> 1-based statement position
    let mut line_to_sentence: HashMap<usize, usize> = HashMap::new();
    for (file_line_no, raw) in text.lines().enumerate() {
        let file_line = file_line_no + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let (num_str, rest) = raw
            .split_once(' ')
            .ok_or_else(|| BabiError::Parse { line: file_line, message: "no content after line number".into() })?;
        let story_line: usize = num_str.parse().map_err(|_| BabiError::Parse {
            line: file_line,
            message: format!("expected a leading integer, got {num_str:?}"),
        })?;
        if story_line == 1 {
            sentences.clear();
            line_to_sentence.clear();
        }
        if rest.contains('\t') {
            let fields: Vec<&str> = rest.split('\t').collect();
            if fields.len() < 2 {
                return Err(BabiError::Parse {
                    line: file_line,
                    message: "question line needs <question>\\t<answer>[\\t<supporting>]".into(),
                });
            }
            let question = tokenize(fields[0]);
            if question.is_empty() {
                return Err(BabiError::Parse { line: file_line, message: "empty question".into() });
            }
            let answer = fields[1].trim().to_lowercase();
            if answer.is_empty() {
                return Err(BabiError::Parse { line: file_line, message: "empty answer".into() });
            }
            let mut supporting = Vec::new();
            if fields.len() > 2 {
                for id in fields[2].split_whitespace() {
                    let raw_id: usize = id.parse().map_err(|_| BabiError::Parse {
                        line: file_line,
                        message: format!("bad supporting id {id:?}"),
                    })?;
                    let mapped = *line_to_sentence.get(&raw_id).ok_or_else(|| BabiError::Parse {
                        line: file_line,
                        message: format!("supporting id {raw_id} does not name a story statement"),
                    })?;
                    supporting.push(mapped);
                }
            }
            examples.push(QAExample { sentences: sentences.clone(), question, answer, supporting });
        } else {
            sentences.push(tokenize(rest));
            line_to_sentence.insert(story_line, sentences.len());
        }
    }
    Ok(examples)
}

/// Re-emits examples in bAbI line format, one self-contained story per
/// example (statements 1..n, question at n+1). parse(serialize(parse(f)))
/// equals parse(f) for any well-formed input.
pub fn serialize_examples(examples: &[QAExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        for (i, s) in ex.sentences.iter().enumerate() {
            out.push_str(&format!("{} {}.\n", i + 1, s.join(" ")));
        }
        let ids: Vec<String> = ex.supporting.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!(
            "{} {}?\t{}\t{}\n",
            ex.sentences.len() + 1,
            ex.question.join(" "),
            ex.answer,
            ids.join(" ")
        ));
    }
    out
}

/// Token and answer-label index maps built from the training split only.
/// Token index 0 is the unknown slot; ordering is first occurrence.
#[derive(Clone, Debug)]
pub struct Vocab {
    pub tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub answers: Vec<String>,
    answer_index: HashMap<String, usize>,
}

pub const UNK: usize = 0;

impl Vocab {
    pub fn build(train: &[QAExample]) -> Vocab {
        let mut vocab = Vocab {
            tokens: vec!["<unk>".to_string()],
            index: HashMap::from([("<unk>".to_string(), 0)]),
            answers: Vec::new(),
            answer_index: HashMap::new(),
        };
        for ex in train {
            for sentence in ex.sentences.iter().chain(std::iter::once(&ex.question)) {
                for tok in sentence {
                    if !vocab.index.contains_key(tok) {
                        vocab.index.insert(tok.clone(), vocab.tokens.len());
                        vocab.tokens.push(tok.clone());
                    }
                }
            }
            if !vocab.answer_index.contains_key(&ex.answer) {
                vocab.answer_index.insert(ex.answer.clone(), vocab.answers.len());
                vocab.answers.push(ex.answer.clone());
            }
        }
        vocab
    }

    pub fn token_index(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn answer_label(&self, answer: &str) -> Option<usize> {
        self.answer_index.get(answer).copied()
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_answers(&self) -> usize {
        self.answers.len()
    }
}

/// Hyperparameters for the QA pipeline.
#[derive(Clone, Debug)]
pub struct BabiConfig {
    pub hidden: usize,
    pub layers: usize,
    pub embedding: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for BabiConfig {
    fn default() -> Self {
        BabiConfig {
            hidden: 40,
            layers: 2,
            embedding: 128,
            batch: 128,
            learning_rate: 0.001,
            epochs: 20,
            seed: 42,
        }
    }
}

/// Sequence classifier over mean-pooled sentence embeddings; the embedding
/// table trains jointly with the recurrent model.
#[derive(Clone, Debug)]
pub struct BabiModel {
    pub embedding: Matrix,
    pub seq: SequenceModel,
    pub vocab: Vocab,
}

/// Token-index steps for one example: each sentence, then the question.
fn step_tokens(ex: &QAExample, vocab: &Vocab) -> Vec<Vec<usize>> {
    let mut steps: Vec<Vec<usize>> = ex
        .sentences
        .iter()
        .map(|s| s.iter().map(|t| vocab.token_index(t)).collect())
        .collect();
    steps.push(ex.question.iter().map(|t| vocab.token_index(t)).collect());
    steps
}

/// Mean of the step's token embeddings as a 1 x d row.
fn pool_step(tokens: &[usize], embedding: &Matrix) -> Vec<f64> {
    let d = embedding.cols;
    let mut row = vec![0.0; d];
    if tokens.is_empty() {
        return row;
    }
    for &tok in tokens {
        for (acc, &e) in row.iter_mut().zip(embedding.row(tok)) {
            *acc += e;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    for v in row.iter_mut() {
        *v *= inv;
    }
    row
}

/// Dense step vectors for one example: [sentence_1 .. sentence_n, question].
pub fn encode_example(ex: &QAExample, vocab: &Vocab, embedding: &Matrix) -> Vec<Matrix> {
    step_tokens(ex, vocab)
        .iter()
        .map(|toks| Matrix::from_vec(1, embedding.cols, pool_step(toks, embedding)))
        .collect()
}

struct PreparedBatch {
    /// T_max matrices of batch x d_emb, zero-padded on the right.
    inputs: Vec<Matrix>,
    targets: Vec<Vec<usize>>,
    mask: LossMask,
    /// tokens[row][t]
    tokens: Vec<Vec<Vec<usize>>>,
    lengths: Vec<usize>,
}

fn prepare_batch(examples: &[&QAExample], vocab: &Vocab, embedding: &Matrix) -> PreparedBatch {
    let batch = examples.len();
    let tokens: Vec<Vec<Vec<usize>>> = examples.iter().map(|ex| step_tokens(ex, vocab)).collect();
    let lengths: Vec<usize> = tokens.iter().map(Vec::len).collect();
    let t_max = *lengths.iter().max().unwrap();
    let mut inputs = Vec::with_capacity(t_max);
    let mut targets = vec![vec![0usize; batch]; t_max];
    for t in 0..t_max {
        let mut m = Matrix::zeros(batch, embedding.cols);
        for (row, toks) in tokens.iter().enumerate() {
            if t < toks.len() {
                m.row_mut(row).copy_from_slice(&pool_step(&toks[t], embedding));
            }
        }
        inputs.push(m);
    }
    for (row, ex) in examples.iter().enumerate() {
        let label = vocab.answer_label(&ex.answer).expect("train answers must be in vocab");
        targets[lengths[row] - 1][row] = label;
    }
    PreparedBatch {
        inputs,
        targets,
        mask: LossMask::FinalStep(lengths.iter().map(|l| l - 1).collect()),
        tokens,
        lengths,
    }
}

/// Trains one subtask. Returns the model and the mean training loss per epoch.
pub fn train_babi_task(
    train: &[QAExample],
    kind: CellKind,
    with_tfc: bool,
    cfg: &BabiConfig,
) -> (BabiModel, Vec<f64>) {
    assert!(!train.is_empty(), "empty training split");
    let vocab = Vocab::build(train);
    let mut rng = Rng::new(cfg.seed);
    let mut embedding = glorot_init(vocab.n_tokens(), cfg.embedding, &mut rng);
    let mut seq = SequenceModel::new(
        kind,
        cfg.embedding,
        cfg.hidden,
        vocab.n_answers(),
        cfg.layers,
        with_tfc,
        &mut rng,
    );

    let mut opt = {
        let flat = seq.flatten();
        let mut refs: Vec<&Matrix> = flat.iter().map(|(_, m)| &**m).collect();
        refs.push(&embedding);
        OptimizerState::new(OptimizerKind::Adam, &refs)
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let examples: Vec<&QAExample> = chunk.iter().map(|&i| &train[i]).collect();
            let prep = prepare_batch(&examples, &vocab, &embedding);
            let (loss, grads, d_inputs) =
                bptt_gradients(&seq, &prep.inputs, &prep.targets, &prep.mask);
            epoch_loss += loss;
            batches += 1;

            // scatter input gradients back onto the embedding rows
            let mut emb_grad = Matrix::zeros(embedding.rows, embedding.cols);
            for (row, toks) in prep.tokens.iter().enumerate() {
                for (t, step) in toks.iter().enumerate() {
                    if step.is_empty() {
                        continue;
                    }
                    debug_assert!(t < prep.lengths[row]);
                    let inv = 1.0 / step.len() as f64;
                    let d_row = d_inputs[t].row(row);
                    for &tok in step {
                        for (g, &d) in emb_grad.row_mut(tok).iter_mut().zip(d_row) {
                            *g += d * inv;
                        }
                    }
                }
            }

            let grad_flat = grads.flatten();
            let mut grad_refs: Vec<&Matrix> = grad_flat.iter().map(|(_, m)| &**m).collect();
            grad_refs.push(&emb_grad);
            let mut param_flat = seq.flatten_mut();
            let mut param_refs: Vec<&mut Matrix> =
                param_flat.iter_mut().map(|(_, m)| &mut **m).collect();
            param_refs.push(&mut embedding);
            opt.update(&mut param_refs, &grad_refs, cfg.learning_rate, 0.9);
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }
    (BabiModel { embedding, seq, vocab }, epoch_losses)
}

/// Fraction of test questions answered correctly, as a percentage.
pub fn eval_accuracy(model: &BabiModel, test: &[QAExample]) -> f64 {
    assert!(!test.is_empty(), "empty test split");
    let mut correct = 0usize;
    for ex in test {
        let inputs = encode_example(ex, &model.vocab, &model.embedding);
        let (probs, _) = model.seq.forward_sequence(&inputs);
        let last = probs.last().unwrap();
        let pred = (0..last.cols).max_by(|&a, &b| last.at(0, a).total_cmp(&last.at(0, b))).unwrap();
        if model.vocab.answer_label(&ex.answer) == Some(pred) {
            correct += 1;
        }
    }
    100.0 * correct as f64 / test.len() as f64
}

/// Accuracy of always predicting the training split's most common answer.
pub fn majority_accuracy(train: &[QAExample], test: &[QAExample]) -> f64 {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for ex in train {
        *counts.entry(ex.answer.as_str()).or_insert(0) += 1;
    }
    let majority = counts
        .iter()
        .max_by_key(|(label, count)| (**count, std::cmp::Reverse(*label)))
        .map(|(label, _)| *label)
        .expect("empty training split");
    let hits = test.iter().filter(|ex| ex.answer == majority).count();
    100.0 * hits as f64 / test.len() as f64
}

/// Locates `qa<N>_*_{train,test}.txt` under `dir`.
pub fn find_task_files(dir: &Path, task_id: usize) -> Result<(PathBuf, PathBuf), BabiError> {
    assert!((1..=20).contains(&task_id));
    let prefix = format!("qa{task_id}_");
    let mut train = None;
    let mut test = None;
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().to_string();
            if name.starts_with(&prefix) && name.ends_with("_train.txt") {
                train = Some(entry.path());
            } else if name.starts_with(&prefix) && name.ends_with("_test.txt") {
                test = Some(entry.path());
            }
        }
    }
    match (train, test) {
        (Some(a), Some(b)) => Ok((a, b)),
        (None, _) => Err(BabiError::MissingData {
            expected: dir.join(format!("{prefix}*_train.txt")).display().to_string(),
        }),
        (_, None) => Err(BabiError::MissingData {
            expected: dir.join(format!("{prefix}*_test.txt")).display().to_string(),
        }),
    }
}

pub fn load_task(dir: &Path, task_id: usize) -> Result<(Vec<QAExample>, Vec<QAExample>), BabiError> {
    let (train_path, test_path) = find_task_files(dir, task_id)?;
    let read = |p: &Path| -> Result<String, BabiError> {
        std::fs::read_to_string(p)
            .map_err(|_| BabiError::MissingData { expected: p.display().to_string() })
    };
    let train = parse_babi(&read(&train_path)?)?;
    let test = parse_babi(&read(&test_path)?)?;
    Ok((train, test))
}
