//! Experiment runner. Exit codes: 0 success, 1 usage error, 2 numeric abort,
//! 3 missing data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tfc_rnn::babi::{
    eval_accuracy, load_task, majority_accuracy, train_babi_task, BabiConfig, BabiError,
    REFERENCE_MEANS, TASK_NAMES,
};
use tfc_rnn::bptt::{
    bptt_gradients, finite_diff_gradient, gradient_probe, linear_probe_model, max_relative_error,
    LossMask, SequenceModel,
};
use tfc_rnn::cells::CellKind;
use tfc_rnn::matrix::{Matrix, Rng};
use tfc_rnn::optim::{OptimizerKind, TrainConfig};
use tfc_rnn::train::{train_task, TaskKind};

#[derive(Parser)]
#[command(name = "tfc-rnn", about = "Recurrent-cell laboratory: synthetic memory tasks, gradient diagnostics, bAbI QA", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the memory copying task
    TrainCopy(TrainArgs),
    /// Train on the memory denoising task
    TrainDenoise(TrainArgs),
    /// Train and evaluate bAbI question-answering subtasks
    TrainBabi(BabiArgs),
    /// Check analytic BPTT gradients against finite differences
    GradCheck(GradCheckArgs),
    /// Emit Jacobian norms ||dh^T/dh^k|| across time offsets
    GradProbe(GradProbeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Recurrent cell: rnn, gru, lstm or sgru
    #[arg(long, default_value = "sgru")]
    cell: String,
    /// Wrap each layer with the gated t-2 skip connection
    #[arg(long)]
    tfc: bool,
    /// Data length T (total sequence length is T+20)
    #[arg(long, default_value_t = 100)]
    time_steps: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    decay: f64,
    /// rmsprop or adam
    #[arg(long, default_value = "rmsprop")]
    optimizer: String,
    #[arg(long, default_value_t = 3000)]
    max_steps: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Global-norm clipping threshold (off by default)
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Record a loss row every N steps
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Stop as soon as the loss first drops below the baseline
    #[arg(long)]
    stop_at_crossing: bool,
    /// Write the training CSV here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BabiArgs {
    /// Subtask id in 1..=20
    #[arg(long)]
    task: Option<usize>,
    /// Run all 20 subtasks and report the mean
    #[arg(long)]
    all: bool,
    #[arg(long, default_value = "sgru")]
    cell: String,
    #[arg(long)]
    tfc: bool,
    #[arg(long, default_value_t = 40)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    embedding: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Directory holding qa<N>_*_{train,test}.txt (or env BABI_DIR)
    #[arg(long)]
    babi_dir: Option<PathBuf>,
    #[arg(long, default_value = "babi_results.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Test hook: perturb one analytic gradient so the check must fail
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct GradProbeArgs {
    #[arg(long, default_value_t = 20)]
    time_steps: usize,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Use the linear V=0.5I vanilla cell with identity activation
    #[arg(long)]
    linear: bool,
    /// Saturate the skip gate closed so the t-2 carry is an identity
    #[arg(long)]
    force_carry: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_MISSING_DATA: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.cmd {
        Cmd::TrainCopy(args) => cmd_train(TaskKind::Copy, &args),
        Cmd::TrainDenoise(args) => cmd_train(TaskKind::Denoise, &args),
        Cmd::TrainBabi(args) => cmd_train_babi(&args),
        Cmd::GradCheck(args) => cmd_grad_check(&args),
        Cmd::GradProbe(args) => cmd_grad_probe(&args),
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(EXIT_USAGE)
}

fn parse_cell(name: &str) -> Result<CellKind, ExitCode> {
    CellKind::parse(name)
        .ok_or_else(|| usage_error(&format!("unknown cell {name:?}; valid cells: rnn, gru, lstm, sgru")))
}

fn parse_optimizer(name: &str) -> Result<OptimizerKind, ExitCode> {
    match name {
        "rmsprop" => Ok(OptimizerKind::RmsProp),
        "adam" => Ok(OptimizerKind::Adam),
        other => Err(usage_error(&format!("unknown optimizer {other:?}; valid optimizers: rmsprop, adam"))),
    }
}

fn require_positive(value: usize, name: &str) -> Result<(), ExitCode> {
    if value == 0 {
        Err(usage_error(&format!("--{name} must be positive")))
    } else {
        Ok(())
    }
}

fn write_out(path: &PathBuf, contents: &str) -> Result<(), ExitCode> {
    std::fs::write(path, contents).map_err(|e| {
        eprintln!("error: cannot write {}: {e}", path.display());
        ExitCode::from(EXIT_USAGE)
    })
}

fn cmd_train(task: TaskKind, args: &TrainArgs) -> ExitCode {
    let (cell, optimizer) = match (parse_cell(&args.cell), parse_optimizer(&args.optimizer)) {
        (Ok(c), Ok(o)) => (c, o),
        (Err(code), _) | (_, Err(code)) => return code,
    };
    for (v, n) in [
        (args.time_steps, "time-steps"),
        (args.hidden, "hidden"),
        (args.layers, "layers"),
        (args.batch, "batch"),
        (args.eval_every, "eval-every"),
    ] {
        if let Err(code) = require_positive(v, n) {
            return code;
        }
    }
    if args.lr <= 0.0 {
        return usage_error("--lr must be positive");
    }
    if !(0.0 < args.decay && args.decay < 1.0) {
        return usage_error("--decay must lie in (0, 1)");
    }

    let cfg = TrainConfig {
        learning_rate: args.lr,
        decay_rate: args.decay,
        batch_size: args.batch,
        max_steps: args.max_steps,
        seed: args.seed,
        optimizer,
        grad_clip: args.grad_clip,
        eval_every: args.eval_every,
        stop_at_crossing: args.stop_at_crossing,
    };
    let mut rng = Rng::new(args.seed);
    let mut model = SequenceModel::new(
        cell,
        task.n_in(),
        args.hidden,
        task.n_out(),
        args.layers,
        args.tfc,
        &mut rng,
    );
    eprintln!(
        "# task={} cell={} tfc={} T={} hidden={} layers={} params={}",
        task.name(),
        cell.name(),
        args.tfc,
        args.time_steps,
        args.hidden,
        args.layers,
        model.param_count()
    );
    match train_task(&mut model, task, args.time_steps, &cfg) {
        Ok(log) => {
            if let Some(path) = &args.out {
                if let Err(code) = write_out(path, &log.to_csv()) {
                    return code;
                }
            }
            println!("{}", log.summary());
            ExitCode::SUCCESS
        }
        Err(abort) => {
            eprintln!("numeric abort: {abort}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}

fn cmd_grad_check(args: &GradCheckArgs) -> ExitCode {
    let mut rng = Rng::new(args.seed);
    let (d_x, d_h, t_len, batch, n_classes) = (3, 4, 6, 2, 3);
    let mut all_pass = true;
    let mut first = true;
    for kind in CellKind::ALL {
        for with_tfc in [false, true] {
            let mut model = SequenceModel::new(kind, d_x, d_h, n_classes, 1, with_tfc, &mut rng);
            let mut inputs = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..t_len {
                let mut m = Matrix::zeros(batch, d_x);
                let mut row = Vec::new();
                for r in 0..batch {
                    *m.at_mut(r, rng.below(d_x)) = 1.0;
                    row.push(rng.below(n_classes));
                }
                inputs.push(m);
                targets.push(row);
            }
            let (_, mut analytic, _) = bptt_gradients(&model, &inputs, &targets, &LossMask::All);
            if args.inject_fault && first {
                analytic.proj_b.data[0] += 1.0;
                first = false;
            }
            let oracle = finite_diff_gradient(&mut model, &inputs, &targets, &LossMask::All, 1e-5);
            let (err, name) = max_relative_error(&analytic, &oracle);
            let pass = err < 1e-4;
            all_pass &= pass;
            println!(
                "cell={} tfc={with_tfc} max_rel_err={err:.3e} worst={name} {}",
                kind.name(),
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NUMERIC)
    }
}

fn cmd_grad_probe(args: &GradProbeArgs) -> ExitCode {
    if args.time_steps < 2 {
        return usage_error("--time-steps must be at least 2");
    }
    if args.hidden == 0 {
        return usage_error("--hidden must be positive");
    }
    let d_x = 3;
    let t_len = args.time_steps;
    let mut rng = Rng::new(args.seed);
    let vanilla = if args.linear {
        linear_probe_model(d_x, args.hidden, 0.5, &mut rng)
    } else {
        SequenceModel::new(CellKind::VanillaRnn, d_x, args.hidden, 2, 1, false, &mut rng)
    };
    let mut tfc = SequenceModel::new(CellKind::Sgru, d_x, args.hidden, 2, 1, true, &mut rng);
    if args.force_carry {
        tfc.layers[0].saturate_tfc_gate(false);
    }
    let inputs: Vec<Matrix> =
        (0..t_len).map(|_| tfc_rnn::matrix::one_hot(rng.below(d_x), d_x)).collect();
    let norms_vanilla = gradient_probe(&vanilla, &inputs);
    let norms_tfc = gradient_probe(&tfc, &inputs);

    let mut csv = String::from("k,norm_vanilla,norm_tfc\n");
    for k in 1..t_len {
        csv.push_str(&format!("{k},{},{}\n", norms_vanilla[k - 1], norms_tfc[k - 1]));
    }
    if let Some(path) = &args.out {
        if let Err(code) = write_out(path, &csv) {
            return code;
        }
    }
    print!("{csv}");
    ExitCode::SUCCESS
}

fn cmd_train_babi(args: &BabiArgs) -> ExitCode {
    let cell = match parse_cell(&args.cell) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if args.all == args.task.is_some() {
        return usage_error("pass exactly one of --task <1..=20> or --all");
    }
    if let Some(task) = args.task {
        if !(1..=20).contains(&task) {
            return usage_error(&format!("--task must lie in 1..=20, got {task}"));
        }
    }
    for (v, n) in [
        (args.hidden, "hidden"),
        (args.layers, "layers"),
        (args.embedding, "embedding"),
        (args.batch, "batch"),
        (args.epochs, "epochs"),
    ] {
        if let Err(code) = require_positive(v, n) {
            return code;
        }
    }
    let dir = match args.babi_dir.clone().or_else(|| std::env::var_os("BABI_DIR").map(PathBuf::from)) {
        Some(d) => d,
        None => return usage_error("no data directory: pass --babi-dir or set BABI_DIR"),
    };
    let cfg = BabiConfig {
        hidden: args.hidden,
        layers: args.layers,
        embedding: args.embedding,
        batch: args.batch,
        learning_rate: args.lr,
        epochs: args.epochs,
        seed: args.seed,
    };
    let cell_label = if args.tfc { format!("tfc-{}", cell.name()) } else { cell.name().to_string() };

    let task_ids: Vec<usize> = match args.task {
        Some(t) => vec![t],
        None => (1..=20).collect(),
    };
    let mut rows = Vec::new();
    for &task_id in &task_ids {
        let (train, test) = match load_task(&dir, task_id) {
            Ok(splits) => splits,
            Err(BabiError::MissingData { expected }) => {
                eprintln!("missing data: expected {expected}");
                return ExitCode::from(EXIT_MISSING_DATA);
            }
            Err(e) => {
                eprintln!("parse error in task {task_id}: {e}");
                return ExitCode::from(EXIT_USAGE);
            }
        };
        eprintln!(
            "# task {task_id} ({}): {} train / {} test examples",
            TASK_NAMES[task_id - 1],
            train.len(),
            test.len()
        );
        let (model, losses) = train_babi_task(&train, cell, args.tfc, &cfg);
        let accuracy = eval_accuracy(&model, &test);
        let majority = majority_accuracy(&train, &test);
        println!(
            "task {task_id:2} {:<24} cell={cell_label} accuracy={accuracy:.2} majority={majority:.2} final_train_loss={:.4}",
            TASK_NAMES[task_id - 1],
            losses.last().copied().unwrap_or(f64::NAN)
        );
        rows.push((task_id, accuracy));
    }

    let mut csv = String::from("task_id,task_name,cell,accuracy\n");
    for &(task_id, accuracy) in &rows {
        csv.push_str(&format!("{task_id},{},{cell_label},{accuracy}\n", TASK_NAMES[task_id - 1]));
    }
    if let Err(code) = write_out(&args.out, &csv) {
        return code;
    }
    if args.all {
        let mean = rows.iter().map(|&(_, a)| a).sum::<f64>() / rows.len() as f64;
        println!("mean accuracy over {} tasks: {mean:.2}", rows.len());
        let refs: Vec<String> =
            REFERENCE_MEANS.iter().map(|(name, m)| format!("{name}={m:.2}")).collect();
        println!("reference means: {}", refs.join(" "));
    }
    ExitCode::SUCCESS
}
