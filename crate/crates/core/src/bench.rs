//! Synthetic multi-task teacher/student harness.
//!
//! The teacher is drawn from the MoR hypothesis class itself: one shared
//! low-rank pair `(A*, B*)` and, per task `k`, scaling vectors `(a_k, b_k)`
//! so that `ΔW_k = (alpha / r) diag(b_k) B* diag(a_k) A*`. The first
//! `tag_width` input coordinates one-hot encode the task id; the rest are
//! standard Gaussian noise. A student with `N ≥ K` experts can represent
//! every task exactly, so recovery error is a meaningful training signal.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{Adapter, LoraLayer, MoeLoraLayer, MorLayer, RouterKind};
use crate::error::{MorError, Result};
use crate::grads::Differentiable;
use crate::matcore::{Matrix, Rng, Vector};

/// Default scaling factor `alpha`.
pub const DEFAULT_ALPHA: f64 = 32.0;
/// Default shared rank.
pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_LR: f64 = 2e-4;
pub const DEFAULT_BATCH: usize = 8;
pub const DEFAULT_DROPOUT: f64 = 0.05;
pub const DEFAULT_LOG_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherDims {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub tasks: usize,
    pub tag_width: usize,
}

impl TeacherDims {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MorError::InvalidArgument(m));
        if self.d_in == 0 || self.d_out == 0 || self.rank == 0 || self.tasks == 0 {
            return bad("teacher dims must be positive".into());
        }
        if self.rank > self.d_in.min(self.d_out) {
            return bad(format!("rank {} exceeds min(d_in, d_out)", self.rank));
        }
        if self.tasks > self.tag_width || self.tag_width > self.d_in {
            return bad(format!(
                "need tasks <= tag_width <= d_in, got {} <= {} <= {}",
                self.tasks, self.tag_width, self.d_in
            ));
        }
        Ok(())
    }
}

/// Realizable multi-task target.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub dims: TeacherDims,
    pub alpha: f64,
    /// Frozen `d_out × d_in`, shared with every student.
    pub base: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    /// `K × r`, row `k` is `a_k`.
    pub task_a: Matrix,
    /// `K × d_out`, row `k` is `b_k`.
    pub task_b: Matrix,
}

/// `W ~ N(0, 1/d_in)`, `A* ~ N(0, 1/d_in)`, `B* ~ N(0, 1/(s² r))` with
/// `s = alpha / r`, so base and adapter outputs are both of order one.
/// Task scalings are uniform in `[0.5, 1.5]`.
pub fn make_teacher(dims: TeacherDims, alpha: f64, seed: u64) -> Result<TeacherSpec> {
    dims.validate()?;
    if !(alpha > 0.0) {
        return Err(MorError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = Rng::new(seed);
    let s = alpha / dims.rank as f64;
    let in_sd = 1.0 / (dims.d_in as f64).sqrt();
    let base = rng.gaussian_matrix(dims.d_out, dims.d_in, 0.0, in_sd)?;
    let a = rng.gaussian_matrix(dims.rank, dims.d_in, 0.0, in_sd)?;
    let b = rng.gaussian_matrix(dims.d_out, dims.rank, 0.0, 1.0 / (s * (dims.rank as f64).sqrt()))?;
    let task_a = Matrix::from_fn(dims.tasks, dims.rank, |_, _| rng.uniform(0.5, 1.5));
    let task_b = Matrix::from_fn(dims.tasks, dims.d_out, |_, _| rng.uniform(0.5, 1.5));
    Ok(TeacherSpec {
        dims,
        alpha,
        base,
        a,
        b,
        task_a,
        task_b,
    })
}

impl TeacherSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.dims.rank as f64
    }

    fn check_task(&self, k: usize) -> Result<()> {
        if k >= self.dims.tasks {
            return Err(MorError::InvalidArgument(format!(
                "task {k} out of range for {} tasks",
                self.dims.tasks
            )));
        }
        Ok(())
    }

    /// Dense `ΔW_k`.
    pub fn delta_weight(&self, k: usize) -> Result<Matrix> {
        self.check_task(k)?;
        let b_hat = self.b.scale_rows(self.task_b.row(k))?;
        let a_hat = self.a.scale_rows(self.task_a.row(k))?;
        Ok(b_hat.matmul(&a_hat)?.scale(self.scaling()))
    }

    /// `W x + ΔW_k x` in factored form.
    pub fn forward(&self, k: usize, x: &[f64]) -> Result<Vector> {
        self.check_task(k)?;
        let v = self.a.matvec(x)?.hadamard(self.task_a.row(k));
        let q = self.b.matvec(&v)?.hadamard(self.task_b.row(k));
        let mut y = self.base.matvec(x)?;
        let s = self.scaling();
        y.iter_mut().zip(q.iter()).for_each(|(y, q)| *y += s * q);
        Ok(y)
    }

    /// Input row for task `k`: one-hot tag followed by Gaussian noise.
    pub fn sample_input(&self, k: usize, rng: &mut Rng) -> Vec<f64> {
        let mut x = vec![0.0; self.dims.d_in];
        x[k] = 1.0;
        for v in x.iter_mut().skip(self.dims.tag_width) {
            *v = rng.gaussian();
        }
        x
    }

    /// A MoR layer with `N = K` experts reproducing the teacher; the router
    /// reads the tag coordinates with weight `router_gain`.
    pub fn to_mor_layer(&self, router_gain: f64) -> Result<MorLayer> {
        let k = self.dims.tasks;
        let router = Matrix::from_fn(k, self.dims.d_in, |i, j| if i == j { router_gain } else { 0.0 });
        MorLayer::new(
            self.base.clone(),
            self.a.clone(),
            self.b.clone(),
            self.task_a.clone(),
            self.task_b.clone(),
            router,
            self.alpha,
            RouterKind::Learnable,
        )
    }
}

/// `n` rows of task `k` and the teacher targets.
pub fn sample_batch(teacher: &TeacherSpec, k: usize, n: usize, rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    teacher.check_task(k)?;
    let tasks = vec![k; n];
    batch_for_tasks(teacher, &tasks, rng)
}

/// Rows with a uniformly drawn task each. Returns `(X, Y*, tasks)`.
pub fn sample_mixed_batch(teacher: &TeacherSpec, n: usize, rng: &mut Rng) -> Result<(Matrix, Matrix, Vec<usize>)> {
    let tasks: Vec<usize> = (0..n).map(|_| rng.below(teacher.dims.tasks)).collect();
    let (x, y) = batch_for_tasks(teacher, &tasks, rng)?;
    Ok((x, y, tasks))
}

fn batch_for_tasks(teacher: &TeacherSpec, tasks: &[usize], rng: &mut Rng) -> Result<(Matrix, Matrix)> {
    let d = teacher.dims;
    let mut x = Matrix::zeros(tasks.len(), d.d_in);
    let mut y = Matrix::zeros(tasks.len(), d.d_out);
    for (r, &k) in tasks.iter().enumerate() {
        let row = teacher.sample_input(k, rng);
        y.row_mut(r).copy_from_slice(&teacher.forward(k, &row)?);
        x.row_mut(r).copy_from_slice(&row);
    }
    Ok((x, y))
}

/// Inverted-dropout copy of `x`: entries zeroed with probability `rate`,
/// survivors scaled by `1 / (1 − rate)`.
pub fn dropout(x: &Matrix, rate: f64, rng: &mut Rng) -> Matrix {
    if rate <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 / (1.0 - rate);
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = if rng.bernoulli(rate) { 0.0 } else { *v * keep };
    }
    out
}

// ---------------------------------------------------------------------------
// Optimizers

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    debug_assert_eq!(params.len(), grads.len());
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub log_every: usize,
    /// Held-out rows per task used for logged losses and errors.
    pub eval_rows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Optimizer::default(),
            lr: DEFAULT_LR,
            steps: 20_000,
            batch_size: DEFAULT_BATCH,
            dropout: DEFAULT_DROPOUT,
            seed: 0,
            log_every: DEFAULT_LOG_EVERY,
            eval_rows: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MorError::InvalidArgument(m.into()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 || self.log_every == 0 || self.eval_rows == 0 {
            return bad("batch_size, log_every and eval_rows must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogPoint {
    pub step: usize,
    /// Held-out objective (MSE plus any auxiliary router loss).
    pub loss: f64,
    /// Mean per-task relative output error on the held-out set.
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogPoint>,
    /// Final per-task relative output error.
    pub task_errors: Vec<f64>,
    /// `K × N` mean router weights per task, when the student has a router.
    pub router_mass: Option<Vec<Vec<f64>>>,
    pub trainable_params: usize,
    /// SHA-256 over the final trainable parameters' bit patterns.
    pub params_sha256: String,
}

impl TrainReport {
    pub fn mean_task_error(&self) -> f64 {
        self.task_errors.iter().sum::<f64>() / self.task_errors.len() as f64
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for p in &self.log {
            s.push_str(&format!("{},{:e}\n", p.step, p.loss));
        }
        s
    }
}

pub fn params_digest(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed held-out set: `rows` inputs per task, derived from `seed` only.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub x: Vec<Matrix>,
    pub y: Vec<Matrix>,
}

pub fn eval_set(teacher: &TeacherSpec, rows: usize, seed: u64) -> Result<EvalSet> {
    let mut rng = Rng::new(seed ^ 0xE7A1_5E7D_0000_0001);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for k in 0..teacher.dims.tasks {
        let (xk, yk) = sample_batch(teacher, k, rows, &mut rng)?;
        x.push(xk);
        y.push(yk);
    }
    Ok(EvalSet { x, y })
}

/// `‖Y_student − Y*‖_F / ‖Y* − X Wᵀ‖_F`: error relative to the adapter's
/// share of the target.
pub fn relative_error_on<A: Adapter>(student: &A, x: &Matrix, y_star: &Matrix) -> Result<f64> {
    let y = student.forward_batch(x)?.y;
    let base_out = x.matmul_t(student.base())?;
    let num = y.sub(y_star)?.frobenius();
    let den = y_star.sub(&base_out)?.frobenius();
    if den == 0.0 {
        return Err(MorError::InvalidArgument("teacher adapter contribution is zero".into()));
    }
    Ok(num / den)
}

/// Relative error on a fresh batch of `n_eval` task-`k` rows.
pub fn eval_task_error<A: Adapter>(student: &A, teacher: &TeacherSpec, k: usize, n_eval: usize, rng: &mut Rng) -> Result<f64> {
    let (x, y) = sample_batch(teacher, k, n_eval, rng)?;
    relative_error_on(student, &x, &y)
}

/// Row `k` is the mean router weight over `n_per_task` fresh task-`k` inputs.
pub fn router_report<A: Adapter>(student: &A, teacher: &TeacherSpec, n_per_task: usize, rng: &mut Rng) -> Result<Matrix> {
    let mut rows = Vec::new();
    for k in 0..teacher.dims.tasks {
        let (x, _) = sample_batch(teacher, k, n_per_task, rng)?;
        rows.push(mean_gates(student, &x)?);
    }
    Matrix::from_rows(&rows)
}

fn mean_gates<A: Adapter>(student: &A, x: &Matrix) -> Result<Vec<f64>> {
    let g = student
        .forward_batch(x)?
        .gates
        .ok_or_else(|| MorError::InvalidArgument("student has no router".into()))?;
    let n = x.rows() as f64;
    Ok((0..g.cols())
        .map(|j| (0..g.rows()).map(|r| g.get(r, j)).sum::<f64>() / n)
        .collect())
}

fn check_student<A: Adapter>(teacher: &TeacherSpec, student: &A) -> Result<()> {
    if student.base() != &teacher.base {
        return Err(MorError::InvalidArgument(
            "student base weight must equal the teacher's frozen weight".into(),
        ));
    }
    Ok(())
}

fn eval_point<A: Differentiable>(student: &A, set: &EvalSet) -> Result<(f64, f64, Vec<f64>)> {
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut aux = 0.0;
    let mut errs = Vec::with_capacity(set.x.len());
    for (x, y_star) in set.x.iter().zip(&set.y) {
        let out = student.forward_batch(x)?;
        sq += out.y.sub(y_star)?.frobenius_sq();
        count += y_star.data().len();
        aux += student.aux_loss(&out)?;
        let base_out = x.matmul_t(student.base())?;
        errs.push(out.y.sub(y_star)?.frobenius() / y_star.sub(&base_out)?.frobenius());
    }
    let loss = sq / count as f64 + aux / set.x.len() as f64;
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    Ok((loss, mean, errs))
}

/// Minimizes MSE to the teacher over uniformly mixed task batches (plus the
/// balance loss for balanced routers). Single-threaded and deterministic
/// given `config.seed`. Logs at step 0, every `log_every` steps and at the
/// final step.
pub fn train_student<A: Differentiable>(teacher: &TeacherSpec, student: &mut A, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    check_student(teacher, student)?;
    let mut rng = Rng::new(config.seed);
    let mut data_rng = rng.fork();
    let mut drop_rng = rng.fork();
    let set = eval_set(teacher, config.eval_rows, config.seed)?;

    let mut params = student.trainable_params();
    let mut adam = AdamState::new(params.len());
    let mut log = Vec::new();
    let d_out = teacher.dims.d_out;

    for step in 0..=config.steps {
        if step % config.log_every == 0 || step == config.steps {
            let (loss, mean_error, _) = eval_point(student, &set)?;
            if !loss.is_finite() {
                return Err(MorError::Divergence { step });
            }
            log.push(LogPoint { step, loss, mean_error });
        }
        if step == config.steps {
            break;
        }
        let (x, y_star, _) = sample_mixed_batch(teacher, config.batch_size, &mut data_rng)?;
        let x_adapter = dropout(&x, config.dropout, &mut drop_rng);
        let out = student.forward_batch_masked(&x, &x_adapter)?;
        let diff = out.y.sub(&y_star)?;
        let norm = (config.batch_size * d_out) as f64;
        let loss = diff.frobenius_sq() / norm + student.aux_loss(&out)?;
        if !loss.is_finite() {
            return Err(MorError::Divergence { step });
        }
        let dy = diff.scale(2.0 / norm);
        let grads = student.backward_flat(&x, &x_adapter, &dy)?;
        match config.optimizer {
            Optimizer::Sgd => sgd_step(&mut params, &grads, config.lr),
            Optimizer::Adam { beta1, beta2, eps } => adam_step(&mut params, &grads, &mut adam, config.lr, beta1, beta2, eps),
        }
        student.set_trainable_params(&params)?;
    }

    let (_, _, task_errors) = eval_point(student, &set)?;
    let router_mass = match student.forward_batch(&set.x[0])?.gates {
        Some(_) => Some(set.x.iter().map(|x| mean_gates(student, x)).collect::<Result<_>>()?),
        None => None,
    };
    Ok(TrainReport {
        log,
        task_errors,
        router_mass,
        trainable_params: params.len(),
        params_sha256: params_digest(&params),
    })
}

/// Re-evaluates a trained student on the run's held-out set.
pub fn evaluate_student<A: Differentiable>(teacher: &TeacherSpec, student: &A, config: &TrainConfig) -> Result<Vec<f64>> {
    check_student(teacher, student)?;
    let set = eval_set(teacher, config.eval_rows, config.seed)?;
    Ok(eval_point(student, &set)?.2)
}

// ---------------------------------------------------------------------------
// Student selection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudentMethod {
    Lora,
    MoeLora,
    Mor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Student {
    Lora(LoraLayer),
    MoeLora(MoeLoraLayer),
    Mor(MorLayer),
}

impl Student {
    /// Fresh student sharing the teacher's frozen weight.
    pub fn init(
        method: StudentMethod,
        teacher: &TeacherSpec,
        rank: usize,
        n_experts: usize,
        alpha: f64,
        router: RouterKind,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(seed ^ 0x5EED_0F57_0DE7_0000);
        let base = teacher.base.clone();
        Ok(match method {
            StudentMethod::Lora => Student::Lora(LoraLayer::init(base, rank, alpha, &mut rng)?),
            StudentMethod::MoeLora => Student::MoeLora(MoeLoraLayer::init(base, rank, n_experts, alpha, &mut rng)?),
            StudentMethod::Mor => Student::Mor(MorLayer::init(base, rank, n_experts, alpha, router, &mut rng)?),
        })
    }

    pub fn train(&mut self, teacher: &TeacherSpec, config: &TrainConfig) -> Result<TrainReport> {
        match self {
            Student::Lora(l) => train_student(teacher, l, config),
            Student::MoeLora(l) => train_student(teacher, l, config),
            Student::Mor(l) => train_student(teacher, l, config),
        }
    }

    pub fn evaluate(&self, teacher: &TeacherSpec, config: &TrainConfig) -> Result<Vec<f64>> {
        match self {
            Student::Lora(l) => evaluate_student(teacher, l, config),
            Student::MoeLora(l) => evaluate_student(teacher, l, config),
            Student::Mor(l) => evaluate_student(teacher, l, config),
        }
    }

    pub fn router_report(&self, teacher: &TeacherSpec, n_per_task: usize, rng: &mut Rng) -> Result<Matrix> {
        match self {
            Student::Lora(_) => Err(MorError::InvalidArgument("LoRA student has no router".into())),
            Student::MoeLora(l) => router_report(l, teacher, n_per_task, rng),
            Student::Mor(l) => router_report(l, teacher, n_per_task, rng),
        }
    }

    pub fn base(&self) -> &Matrix {
        match self {
            Student::Lora(l) => l.base(),
            Student::MoeLora(l) => l.base(),
            Student::Mor(l) => l.base(),
        }
    }

    pub fn num_trainable(&self) -> usize {
        match self {
            Student::Lora(l) => l.num_trainable(),
            Student::MoeLora(l) => l.num_trainable(),
            Student::Mor(l) => l.num_trainable(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(tasks: usize) -> TeacherDims {
        TeacherDims {
            d_in: 12,
            d_out: 8,
            rank: 4,
            tasks,
            tag_width: 4,
        }
    }

    #[test]
    fn teacher_is_deterministic_and_validated() {
        let a = make_teacher(dims(3), 32.0, 7).unwrap();
        let b = make_teacher(dims(3), 32.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(make_teacher(TeacherDims { tag_width: 2, ..dims(3) }, 32.0, 7).is_err());
        assert!(make_teacher(TeacherDims { rank: 9, ..dims(3) }, 32.0, 7).is_err());
        assert!(a.task_a.data().iter().all(|v| (0.5..1.5).contains(v)));
    }

    #[test]
    fn single_task_teacher_is_lora_shaped() {
        let t = make_teacher(dims(1), 32.0, 1).unwrap();
        let x = Rng::new(2).gaussian_vec(12, 0.0, 1.0);
        let y = t.forward(0, &x).unwrap();
        let dense = t.base.add(&t.delta_weight(0).unwrap()).unwrap().matvec(&x).unwrap();
        assert!(y.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn teacher_tasks_differ() {
        let t = make_teacher(dims(4), 32.0, 3).unwrap();
        let mut x = Rng::new(4).gaussian_vec(12, 0.0, 1.0);
        x[..4].fill(0.0);
        let outs: Vec<Vector> = (0..4).map(|k| t.forward(k, &x).unwrap()).collect();
        let mut max_dist: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                max_dist = max_dist.max(outs[i].max_abs_diff(&outs[j]));
            }
        }
        assert!(max_dist > 0.0);
    }

    #[test]
    fn sample_batch_tags_and_targets() {
        let t = make_teacher(dims(3), 32.0, 5).unwrap();
        let mut rng = Rng::new(6);
        let (x, y) = sample_batch(&t, 2, 10, &mut rng).unwrap();
        let dense = t.base.add(&t.delta_weight(2).unwrap()).unwrap();
        for r in 0..10 {
            assert_eq!(&x.row(r)[..4], &[0.0, 0.0, 1.0, 0.0]);
            let expect = dense.matvec(x.row(r)).unwrap();
            assert!(expect.max_abs_diff(y.row(r)) < 1e-12);
        }
        assert!(sample_batch(&t, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn no_noise_dims_gives_constant_targets() {
        let t = make_teacher(TeacherDims { d_in: 4, d_out: 4, rank: 2, tasks: 3, tag_width: 4 }, 32.0, 8).unwrap();
        let (_, y) = sample_batch(&t, 1, 5, &mut Rng::new(9)).unwrap();
        for r in 1..5 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, 0.9, 0.999, 1e-8);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[5.0, -3.0], &mut st, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);

        // f(p) = ½‖p‖² from [1, 1]
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(2);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let g = p.clone();
            adam_step(&mut p, &g, &mut st, 1e-2, 0.9, 0.999, 1e-8);
            let norm = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(norm < prev);
            prev = norm;
        }
    }

    #[test]
    fn dropout_scales_survivors() {
        let x = Matrix::filled(20, 20, 1.0);
        let d = dropout(&x, 0.25, &mut Rng::new(1));
        assert!(d.data().iter().all(|v| *v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-15));
        assert!(d.data().contains(&0.0));
        assert_eq!(dropout(&x, 0.0, &mut Rng::new(1)), x);
    }

    #[test]
    fn exact_student_has_zero_error_and_untrained_has_one() {
        let t = make_teacher(dims(3), 32.0, 10).unwrap();
        let exact = t.to_mor_layer(1000.0).unwrap();
        let mut rng = Rng::new(11);
        for k in 0..3 {
            assert!(eval_task_error(&exact, &t, k, 16, &mut rng).unwrap() < 1e-14);
        }
        let fresh = MorLayer::init(t.base.clone(), 4, 3, 32.0, RouterKind::Learnable, &mut rng).unwrap();
        assert_eq!(eval_task_error(&fresh, &t, 1, 16, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn router_report_rows() {
        let t = make_teacher(dims(3), 32.0, 12).unwrap();
        let mut rng = Rng::new(13);
        let mp = MorLayer::init(t.base.clone(), 4, 4, 32.0, RouterKind::MeanPool, &mut rng).unwrap();
        let rep = router_report(&mp, &t, 10, &mut rng).unwrap();
        assert_eq!(rep.shape(), (3, 4));
        assert!(rep.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));

        let one = MorLayer::init(t.base.clone(), 4, 1, 32.0, RouterKind::Learnable, &mut rng).unwrap();
        let rep = router_report(&one, &t, 10, &mut rng).unwrap();
        assert!(rep.data().iter().all(|v| *v == 1.0));

        let lora = LoraLayer::init(t.base.clone(), 4, 32.0, &mut rng).unwrap();
        assert!(router_report(&lora, &t, 10, &mut rng).is_err());
    }

    fn short_config(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            lr,
            steps,
            dropout: 0.0,
            seed: 3,
            eval_rows: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let t = make_teacher(dims(2), 32.0, 14).unwrap();
        let mut s = Student::init(StudentMethod::Mor, &t, 4, 2, 32.0, RouterKind::Learnable, 1).unwrap();
        let before = s.clone();
        let rep = s.train(&t, &short_config(0.0, 200)).unwrap();
        assert!(rep.log.windows(2).all(|w| w[0].loss == w[1].loss));
        assert_eq!(s, before);
    }

    #[test]
    fn training_does_not_touch_base() {
        let t = make_teacher(dims(2), 32.0, 15).unwrap();
        let mut s = Student::init(StudentMethod::Mor, &t, 4, 2, 32.0, RouterKind::Learnable, 1).unwrap();
        let bits: Vec<u64> = s.base().data().iter().map(|v| v.to_bits()).collect();
        s.train(&t, &TrainConfig { dropout: 0.05, ..short_config(1e-2, 100) }).unwrap();
        let after: Vec<u64> = s.base().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, after);
    }

    #[test]
    fn training_reduces_error_for_every_student() {
        let t = make_teacher(dims(2), 32.0, 16).unwrap();
        for method in [StudentMethod::Lora, StudentMethod::MoeLora, StudentMethod::Mor] {
            let mut s = Student::init(method, &t, 4, 2, 32.0, RouterKind::Learnable, 2).unwrap();
            let rep = s.train(&t, &short_config(5e-3, 400)).unwrap();
            assert!(rep.log.last().unwrap().mean_error < 0.8 * rep.log[0].mean_error, "{method:?}");
            assert_eq!(rep.router_mass.is_some(), method != StudentMethod::Lora);
        }
    }

    #[test]
    fn mismatched_base_rejected() {
        let t = make_teacher(dims(2), 32.0, 17).unwrap();
        let mut rng = Rng::new(0);
        let mut s = MorLayer::init(Matrix::zeros(8, 12), 4, 2, 32.0, RouterKind::Learnable, &mut rng).unwrap();
        assert!(train_student(&t, &mut s, &short_config(1e-3, 1)).is_err());
    }
}
