//! RMSProp and Adam updates plus global-norm gradient clipping.

use crate::matrix::Matrix;

pub const EPS: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    RmsProp,
    Adam,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::RmsProp => "rmsprop",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Training hyperparameters shared by the synthetic-task loop and bAbI.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    /// Stop as soon as the training loss first falls below the baseline.
    pub stop_at_crossing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            decay_rate: 0.9,
            batch_size: 128,
            max_steps: 3000,
            seed: 42,
            optimizer: OptimizerKind::RmsProp,
            grad_clip: None,
            eval_every: 10,
            stop_at_crossing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) {
        assert!(self.learning_rate > 0.0, "learning_rate must be > 0");
        assert!(
            self.decay_rate > 0.0 && self.decay_rate < 1.0,
            "decay_rate must be in (0, 1), got {}",
            self.decay_rate
        );
        assert!(self.batch_size >= 1, "batch_size must be >= 1");
        assert!(self.eval_every >= 1, "eval_every must be >= 1");
    }
}

/// Per-parameter accumulators. RMSProp uses `second` only; Adam also keeps
/// `first` and the bias-correction step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: usize,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[&Matrix]) -> OptimizerState {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        OptimizerState { kind, first: zeros.clone(), second: zeros, step: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update in place. `params` and `grads` must be the same
    /// parameter list, in the same order, as at construction.
    pub fn update(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64, decay: f64) {
        assert_eq!(params.len(), self.second.len(), "parameter list changed size");
        match self.kind {
            OptimizerKind::RmsProp => rmsprop_update(params, grads, &mut self.second, lr, decay),
            OptimizerKind::Adam => {
                self.step += 1;
                adam_update(params, grads, &mut self.first, &mut self.second, self.step, lr);
            }
        }
    }
}

/// acc <- decay*acc + (1-decay)*g^2 ; theta <- theta - lr*g/(sqrt(acc)+eps)
pub fn rmsprop_update(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    acc: &mut [Matrix],
    lr: f64,
    decay: f64,
) {
    for ((p, g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
        assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
        for ((pv, &gv), av) in p.data.iter_mut().zip(&g.data).zip(a.data.iter_mut()) {
            *av = decay * *av + (1.0 - decay) * gv * gv;
            *pv -= lr * gv / (av.sqrt() + EPS);
        }
    }
}

/// Bias-corrected Adam with beta1=0.9, beta2=0.999, eps=1e-8.
pub fn adam_update(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    m: &mut [Matrix],
    v: &mut [Matrix],
    step: usize,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for (((p, g), mm), vv) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
        for (((pv, &gv), mv), vvv) in
            p.data.iter_mut().zip(&g.data).zip(mm.data.iter_mut()).zip(vv.data.iter_mut())
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vvv = ADAM_BETA2 * *vvv + (1.0 - ADAM_BETA2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vvv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Global L2 norm over a gradient list.
pub fn global_norm(grads: &[&Matrix]) -> f64 {
    grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Scales all gradients so the global norm is at most `threshold`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [&mut Matrix], threshold: f64) -> f64 {
    let norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.data.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
