//! Forward semantics of LoRA, MoE-style LoRA and Mixture-of-Ranks layers.
//!
//! Diagonal scalings are stored as vectors (rows of `omega_a` / `omega_b`)
//! and applied elementwise; dense diagonals only appear in test oracles.
//! The frozen base weight is private to each layer and exposed read-only.

use serde::{Deserialize, Serialize};

use crate::error::{MorError, Result};
use crate::matcore::{softmax_stable, Matrix, Rng, Vector};
use crate::par::{self, Exec};

/// Standard deviation of the router weight at initialization.
pub const ROUTER_INIT_STDDEV: f64 = 0.02;

/// Batches smaller than this run sequentially even under [`Exec::Parallel`].
pub const PAR_MIN_ROWS: usize = 64;

/// How expert weights are produced from an input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouterKind {
    /// `softmax(W_r x)`.
    Learnable,
    /// Uniform `1/N`; ignores `W_r`, which then receives no gradient.
    MeanPool,
    /// `softmax(W_r x)` trained with an added switch-style balance loss.
    Balanced { aux_coefficient: f64 },
}

impl RouterKind {
    pub fn aux_coefficient(&self) -> f64 {
        match self {
            RouterKind::Balanced { aux_coefficient } => *aux_coefficient,
            _ => 0.0,
        }
    }

    pub fn is_learnable(&self) -> bool {
        !matches!(self, RouterKind::MeanPool)
    }

    fn validate(&self) -> Result<()> {
        if let RouterKind::Balanced { aux_coefficient } = self {
            if !(*aux_coefficient >= 0.0) || !aux_coefficient.is_finite() {
                return Err(MorError::InvalidArgument(format!(
                    "aux_coefficient must be finite and >= 0, got {aux_coefficient}"
                )));
            }
        }
        Ok(())
    }
}

/// Output of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `batch × d_out`.
    pub y: Matrix,
    /// `batch × N` router weights, when the adapter has a router.
    pub gates: Option<Matrix>,
}

/// Common surface used by the training harness and the gradient checks.
///
/// Trainable tensors are exchanged as one flat vector whose layout is fixed
/// per adapter type (documented on each implementor).
pub trait Adapter: Clone + Send + Sync {
    fn base(&self) -> &Matrix;

    fn d_in(&self) -> usize {
        self.base().cols()
    }

    fn d_out(&self) -> usize {
        self.base().rows()
    }

    /// Forward over a batch. `x_adapter` feeds the low-rank path and equals
    /// `x` outside training-mode dropout; the base weight and router always
    /// see `x`.
    fn forward_batch_masked(&self, x: &Matrix, x_adapter: &Matrix) -> Result<BatchOutput>;

    fn forward_batch(&self, x: &Matrix) -> Result<BatchOutput> {
        self.forward_batch_masked(x, x)
    }

    fn trainable_params(&self) -> Vec<f64>;

    fn set_trainable_params(&mut self, params: &[f64]) -> Result<()>;

    fn num_trainable(&self) -> usize;
}

fn check_shape(op: &'static str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(MorError::shape(op, m.shape(), (rows, cols)));
    }
    Ok(())
}

fn check_len(op: &'static str, x: &[f64], len: usize) -> Result<()> {
    if x.len() != len {
        return Err(MorError::shape(op, (x.len(), 1), (len, 1)));
    }
    Ok(())
}

fn check_common(base: &Matrix, rank: usize, alpha: f64) -> Result<()> {
    let (d_out, d_in) = base.shape();
    if d_out == 0 || d_in == 0 {
        return Err(MorError::InvalidArgument("base weight must be non-empty".into()));
    }
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(MorError::InvalidArgument(format!(
            "rank {rank} must be in 1..={}",
            d_in.min(d_out)
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(MorError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

fn copy_into(dst: &mut Matrix, src: &[f64]) {
    dst.data_mut().copy_from_slice(src);
}

fn set_flat(params: &[f64], expected: usize, targets: &mut [&mut Matrix]) -> Result<()> {
    if params.len() != expected {
        return Err(MorError::shape("set_trainable_params", (params.len(), 1), (expected, 1)));
    }
    let mut offset = 0;
    for t in targets.iter_mut() {
        let n = t.data().len();
        copy_into(t, &params[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

fn stack_rows(rows: Vec<Vec<f64>>, cols: usize) -> Matrix {
    let n = rows.len();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    Matrix::new(n, cols, data).expect("rows have uniform width")
}

/// Runs `f` over batch rows, switching to sequential for small batches.
fn map_rows<T: Send>(exec: Exec, rows: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    let exec = if rows < PAR_MIN_ROWS { Exec::Sequential } else { exec };
    par::try_map_range(exec, rows, f)
}

fn check_batch(x: &Matrix, x_adapter: &Matrix, d_in: usize) -> Result<()> {
    if x.cols() != d_in {
        return Err(MorError::shape("forward_batch", x.shape(), (x.rows(), d_in)));
    }
    if x_adapter.shape() != x.shape() {
        return Err(MorError::shape("forward_batch", x_adapter.shape(), x.shape()));
    }
    if x.rows() == 0 {
        return Err(MorError::Empty("forward_batch"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// LoRA

/// Plain LoRA: `y = W x + (alpha / r) B A x`.
///
/// Flat parameter layout: `A` then `B`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    base: Matrix,
    /// `r × d_in`.
    pub a: Matrix,
    /// `d_out × r`.
    pub b: Matrix,
    alpha: f64,
}

impl LoraLayer {
    pub fn new(base: Matrix, a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let layer = LoraLayer { base, a, b, alpha };
        layer.validate()?;
        Ok(layer)
    }

    /// `A ~ N(0, 1/r)`, `B = 0`, so the initial update is zero.
    pub fn init(base: Matrix, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        check_common(&base, rank, alpha)?;
        let a = rng.gaussian_matrix(rank, base.cols(), 0.0, 1.0 / (rank as f64).sqrt())?;
        let b = Matrix::zeros(base.rows(), rank);
        LoraLayer::new(base, a, b, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        check_common(&self.base, self.rank(), self.alpha)?;
        check_shape("lora A", &self.a, self.rank(), self.d_in())?;
        check_shape("lora B", &self.b, self.d_out(), self.rank())
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// Dense `(alpha / r) B A`.
    pub fn delta_weight(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }

    /// Forward for one input vector.
    pub fn forward(&self, x: &[f64]) -> Result<Vector> {
        self.validate()?;
        check_len("lora_forward", x, self.d_in())?;
        Ok(self.forward_row(x, x))
    }

    fn forward_row(&self, x: &[f64], x_adapter: &[f64]) -> Vector {
        let u = self.a.matvec(x_adapter).expect("validated");
        let p = self.b.matvec(&u).expect("validated");
        let mut y = self.base.matvec(x).expect("validated");
        let s = self.scaling();
        y.iter_mut().zip(p.iter()).for_each(|(y, p)| *y += s * p);
        y
    }
}

impl Adapter for LoraLayer {
    fn base(&self) -> &Matrix {
        &self.base
    }

    fn forward_batch_masked(&self, x: &Matrix, x_adapter: &Matrix) -> Result<BatchOutput> {
        self.validate()?;
        check_batch(x, x_adapter, self.d_in())?;
        let rows = map_rows(Exec::Sequential, x.rows(), |i| {
            Ok(self.forward_row(x.row(i), x_adapter.row(i)).into_inner())
        })?;
        Ok(BatchOutput {
            y: stack_rows(rows, self.d_out()),
            gates: None,
        })
    }

    fn trainable_params(&self) -> Vec<f64> {
        [self.a.data(), self.b.data()].concat()
    }

    fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.num_trainable();
        set_flat(params, n, &mut [&mut self.a, &mut self.b])
    }

    fn num_trainable(&self) -> usize {
        self.a.data().len() + self.b.data().len()
    }
}

// ---------------------------------------------------------------------------
// MoE-style LoRA

#[derive(Debug, Clone, PartialEq)]
pub struct LoraExpert {
    /// `r × d_in`.
    pub a: Matrix,
    /// `d_out × r`.
    pub b: Matrix,
}

/// Dense soft mixture of `N` independent LoRA experts:
/// `y = W x + sum_i g_i (alpha / r) B_i A_i x`, `g = softmax(W_r x)`.
///
/// Flat parameter layout: `A_0, B_0, …, A_{N-1}, B_{N-1}, W_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraLayer {
    base: Matrix,
    pub experts: Vec<LoraExpert>,
    /// `N × d_in`.
    pub router: Matrix,
    alpha: f64,
}

impl MoeLoraLayer {
    pub fn new(base: Matrix, experts: Vec<LoraExpert>, router: Matrix, alpha: f64) -> Result<Self> {
        let layer = MoeLoraLayer {
            base,
            experts,
            router,
            alpha,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn init(base: Matrix, rank: usize, n_experts: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        check_common(&base, rank, alpha)?;
        if n_experts == 0 {
            return Err(MorError::InvalidArgument("need at least one expert".into()));
        }
        let (d_out, d_in) = base.shape();
        let mut experts = Vec::with_capacity(n_experts);
        for _ in 0..n_experts {
            experts.push(LoraExpert {
                a: rng.gaussian_matrix(rank, d_in, 0.0, 1.0 / (rank as f64).sqrt())?,
                b: Matrix::zeros(d_out, rank),
            });
        }
        let router = rng.gaussian_matrix(n_experts, d_in, 0.0, ROUTER_INIT_STDDEV)?;
        MoeLoraLayer::new(base, experts, router, alpha)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .experts
            .first()
            .ok_or_else(|| MorError::InvalidArgument("need at least one expert".into()))?;
        let rank = first.a.rows();
        check_common(&self.base, rank, self.alpha)?;
        for e in &self.experts {
            check_shape("moelora A_i", &e.a, rank, self.d_in())?;
            check_shape("moelora B_i", &e.b, self.d_out(), rank)?;
        }
        check_shape("moelora router", &self.router, self.n_experts(), self.d_in())
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn rank(&self) -> usize {
        self.experts[0].a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn router_weights(&self, x: &[f64]) -> Result<Vector> {
        check_len("moelora router", x, self.d_in())?;
        softmax_stable(&self.router.matvec(x)?)
    }

    /// Returns `(y, g)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vector, Vector)> {
        self.validate()?;
        check_len("moelora_forward", x, self.d_in())?;
        self.forward_row(x, x)
    }

    fn forward_row(&self, x: &[f64], x_adapter: &[f64]) -> Result<(Vector, Vector)> {
        let g = self.router_weights(x)?;
        let mut y = self.base.matvec(x)?;
        let s = self.scaling();
        for (gi, e) in g.iter().zip(&self.experts) {
            let p = e.b.matvec(&e.a.matvec(x_adapter)?)?;
            y.iter_mut().zip(p.iter()).for_each(|(y, p)| *y += gi * (s * p));
        }
        Ok((y, g))
    }
}

impl Adapter for MoeLoraLayer {
    fn base(&self) -> &Matrix {
        &self.base
    }

    fn forward_batch_masked(&self, x: &Matrix, x_adapter: &Matrix) -> Result<BatchOutput> {
        self.validate()?;
        check_batch(x, x_adapter, self.d_in())?;
        let rows = map_rows(Exec::Sequential, x.rows(), |i| self.forward_row(x.row(i), x_adapter.row(i)))?;
        let (ys, gs): (Vec<_>, Vec<_>) = rows.into_iter().map(|(y, g)| (y.into_inner(), g.into_inner())).unzip();
        Ok(BatchOutput {
            y: stack_rows(ys, self.d_out()),
            gates: Some(stack_rows(gs, self.n_experts())),
        })
    }

    fn trainable_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_trainable());
        for e in &self.experts {
            out.extend_from_slice(e.a.data());
            out.extend_from_slice(e.b.data());
        }
        out.extend_from_slice(self.router.data());
        out
    }

    fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.num_trainable();
        let mut targets: Vec<&mut Matrix> = Vec::new();
        for e in self.experts.iter_mut() {
            targets.push(&mut e.a);
            targets.push(&mut e.b);
        }
        targets.push(&mut self.router);
        set_flat(params, n, &mut targets)
    }

    fn num_trainable(&self) -> usize {
        self.experts
            .iter()
            .map(|e| e.a.data().len() + e.b.data().len())
            .sum::<usize>()
            + self.router.data().len()
    }
}

// ---------------------------------------------------------------------------
// Mixture of Ranks

/// Shared `(A, B)` specialized by per-expert diagonal scalings.
///
/// Expert `i` applies `D_i x = (alpha / r) diag(omega_b[i]) B diag(omega_a[i]) A x`
/// and the layer returns `W x + sum_i g_i(x) D_i x`.
///
/// Flat parameter layout: `A, B, omega_a, omega_b, router`.
#[derive(Debug, Clone, PartialEq)]
pub struct MorLayer {
    base: Matrix,
    /// Shared `r × d_in`.
    pub a: Matrix,
    /// Shared `d_out × r`.
    pub b: Matrix,
    /// `N × r`; row `i` is expert `i`'s scaling of the rank dimension.
    pub omega_a: Matrix,
    /// `N × d_out`; row `i` is expert `i`'s scaling of the output dimension.
    pub omega_b: Matrix,
    /// `N × d_in`.
    pub router: Matrix,
    alpha: f64,
    router_kind: RouterKind,
}

impl MorLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base: Matrix,
        a: Matrix,
        b: Matrix,
        omega_a: Matrix,
        omega_b: Matrix,
        router: Matrix,
        alpha: f64,
        router_kind: RouterKind,
    ) -> Result<Self> {
        let layer = MorLayer {
            base,
            a,
            b,
            omega_a,
            omega_b,
            router,
            alpha,
            router_kind,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// `A ~ N(0, 1/r)`, `B = 0`, scalings all one, `W_r ~ N(0, 0.02²)`.
    pub fn init(
        base: Matrix,
        rank: usize,
        n_experts: usize,
        alpha: f64,
        router_kind: RouterKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        check_common(&base, rank, alpha)?;
        if n_experts == 0 {
            return Err(MorError::InvalidArgument("need at least one expert".into()));
        }
        let (d_out, d_in) = base.shape();
        let a = rng.gaussian_matrix(rank, d_in, 0.0, 1.0 / (rank as f64).sqrt())?;
        let router = rng.gaussian_matrix(n_experts, d_in, 0.0, ROUTER_INIT_STDDEV)?;
        MorLayer::new(
            base,
            a,
            Matrix::zeros(d_out, rank),
            Matrix::filled(n_experts, rank, 1.0),
            Matrix::filled(n_experts, d_out, 1.0),
            router,
            alpha,
            router_kind,
        )
    }

    pub fn validate(&self) -> Result<()> {
        check_common(&self.base, self.rank(), self.alpha)?;
        self.router_kind.validate()?;
        let n = self.n_experts();
        if n == 0 {
            return Err(MorError::InvalidArgument("need at least one expert".into()));
        }
        check_shape("mor A", &self.a, self.rank(), self.d_in())?;
        check_shape("mor B", &self.b, self.d_out(), self.rank())?;
        check_shape("mor omega_a", &self.omega_a, n, self.rank())?;
        check_shape("mor omega_b", &self.omega_b, n, self.d_out())?;
        check_shape("mor router", &self.router, n, self.d_in())
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.omega_a.rows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn router_kind(&self) -> RouterKind {
        self.router_kind
    }

    pub fn set_router_kind(&mut self, kind: RouterKind) -> Result<()> {
        kind.validate()?;
        self.router_kind = kind;
        Ok(())
    }

    /// `D_i x` for a single expert.
    pub fn expert_apply(&self, i: usize, x: &[f64]) -> Result<Vector> {
        self.validate()?;
        if i >= self.n_experts() {
            return Err(MorError::ExpertIndex {
                index: i,
                count: self.n_experts(),
            });
        }
        check_len("mor_expert_apply", x, self.d_in())?;
        let v = self.a.matvec(x)?.hadamard(self.omega_a.row(i));
        let q = self.b.matvec(&v)?.hadamard(self.omega_b.row(i));
        Ok(q.scale(self.scaling()))
    }

    /// Router weights on the probability simplex.
    pub fn router_weights(&self, x: &[f64]) -> Result<Vector> {
        check_len("router_weights", x, self.d_in())?;
        check_shape("mor router", &self.router, self.n_experts(), self.d_in())?;
        match self.router_kind {
            RouterKind::MeanPool => Ok(Vector::filled(self.n_experts(), 1.0 / self.n_experts() as f64)),
            RouterKind::Learnable | RouterKind::Balanced { .. } => softmax_stable(&self.router.matvec(x)?),
        }
    }

    /// Per-expert loop form: returns `(y, g)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vector, Vector)> {
        self.validate()?;
        check_len("mor_forward", x, self.d_in())?;
        let g = self.router_weights(x)?;
        let mut y = self.base.matvec(x)?;
        for (i, gi) in g.iter().enumerate() {
            let d = self.expert_apply(i, x)?;
            y.iter_mut().zip(d.iter()).for_each(|(y, d)| *y += gi * d);
        }
        Ok((y, g))
    }

    /// Stacked form over a batch: for each row, `u = A x`,
    /// `V = omega_a ⊙ u`, `P = V Bᵀ`, `Q = omega_b ⊙ P`,
    /// `y = W x + (alpha / r) gᵀ Q`. Returns `(Y, G)`.
    pub fn forward_stacked(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.forward_stacked_with(Exec::default(), x, x)
    }

    pub fn forward_stacked_with(&self, exec: Exec, x: &Matrix, x_adapter: &Matrix) -> Result<(Matrix, Matrix)> {
        self.validate()?;
        check_batch(x, x_adapter, self.d_in())?;
        let rows = map_rows(exec, x.rows(), |i| self.stacked_row(x.row(i), x_adapter.row(i)))?;
        let (ys, gs): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Ok((stack_rows(ys, self.d_out()), stack_rows(gs, self.n_experts())))
    }

    fn stacked_row(&self, x: &[f64], x_adapter: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.n_experts();
        let g = self.router_weights(x)?;
        let u = self.a.matvec(x_adapter)?;
        // V = omega_a ⊙ u (row broadcast)
        let v = Matrix::from_fn(n, self.rank(), |i, j| self.omega_a.get(i, j) * u[j]);
        let q = v.matmul_t(&self.b)?.hadamard(&self.omega_b)?;
        let s = self.scaling();
        let mut y = self.base.matvec(x)?.into_inner();
        for (o, yo) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += g[i] * q.get(i, o);
            }
            *yo += s * acc;
        }
        Ok((y, g.into_inner()))
    }

    /// Dense `D_i` (for oracles and diagnostics).
    pub fn expert_delta_weight(&self, i: usize) -> Result<Matrix> {
        if i >= self.n_experts() {
            return Err(MorError::ExpertIndex {
                index: i,
                count: self.n_experts(),
            });
        }
        let a_hat = self.a.scale_rows(self.omega_a.row(i))?;
        let b_hat = self.b.scale_rows(self.omega_b.row(i))?;
        Ok(b_hat.matmul(&a_hat)?.scale(self.scaling()))
    }
}

impl Adapter for MorLayer {
    fn base(&self) -> &Matrix {
        &self.base
    }

    fn forward_batch_masked(&self, x: &Matrix, x_adapter: &Matrix) -> Result<BatchOutput> {
        let (y, g) = self.forward_stacked_with(Exec::Sequential, x, x_adapter)?;
        Ok(BatchOutput { y, gates: Some(g) })
    }

    fn trainable_params(&self) -> Vec<f64> {
        [
            self.a.data(),
            self.b.data(),
            self.omega_a.data(),
            self.omega_b.data(),
            self.router.data(),
        ]
        .concat()
    }

    fn set_trainable_params(&mut self, params: &[f64]) -> Result<()> {
        let n = self.num_trainable();
        set_flat(
            params,
            n,
            &mut [
                &mut self.a,
                &mut self.b,
                &mut self.omega_a,
                &mut self.omega_b,
                &mut self.router,
            ],
        )
    }

    fn num_trainable(&self) -> usize {
        self.a.data().len()
            + self.b.data().len()
            + self.omega_a.data().len()
            + self.omega_b.data().len()
            + self.router.data().len()
    }
}

// ---------------------------------------------------------------------------
// Balance loss and the absorbed-transform identity

/// Expert index with the largest weight; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax is each expert.
pub fn dispatch_fractions(gates: &Matrix) -> Vec<f64> {
    let n = gates.cols();
    let mut f = vec![0.0; n];
    for r in 0..gates.rows() {
        f[argmax(gates.row(r))] += 1.0;
    }
    let batch = gates.rows() as f64;
    f.iter_mut().for_each(|v| *v /= batch);
    f
}

/// Switch-style balance loss `N · sum_i f_i P_i`, with `f_i` the argmax
/// dispatch fraction and `P_i` the column mean of `gates`.
pub fn balance_loss(gates: &Matrix) -> Result<f64> {
    if gates.rows() == 0 || gates.cols() == 0 {
        return Err(MorError::Empty("balance_loss"));
    }
    let n = gates.cols();
    let batch = gates.rows() as f64;
    let f = dispatch_fractions(gates);
    let mut total = 0.0;
    for (i, fi) in f.iter().enumerate() {
        let p: f64 = (0..gates.rows()).map(|r| gates.get(r, i)).sum::<f64>() / batch;
        total += fi * p;
    }
    Ok(n as f64 * total)
}

/// `∂ balance_loss / ∂ gates` with `f` held constant: every row gets
/// `N f_i / batch`.
pub fn balance_loss_grad(gates: &Matrix) -> Result<Matrix> {
    if gates.rows() == 0 || gates.cols() == 0 {
        return Err(MorError::Empty("balance_loss_grad"));
    }
    let n = gates.cols() as f64;
    let batch = gates.rows() as f64;
    let f = dispatch_fractions(gates);
    Ok(Matrix::from_fn(gates.rows(), gates.cols(), |_, i| n * f[i] / batch))
}

/// `‖diag(λ_B) B diag(λ_A) A − B̂ Â‖_F` with `Â = Λ_A A`, `B̂ = Λ_B B`.
///
/// The left side is built from dense diagonal matrices, the right side from
/// row scalings, so the two differ only by floating-point reassociation.
pub fn highrank_transform_check(b: &Matrix, a: &Matrix, lambda_a: &[f64], lambda_b: &[f64]) -> Result<f64> {
    let left = Matrix::diag(lambda_b)
        .matmul(b)?
        .matmul(&Matrix::diag(lambda_a))?
        .matmul(a)?;
    let a_hat = a.scale_rows(lambda_a)?;
    let b_hat = b.scale_rows(lambda_b)?;
    let right = b_hat.matmul(&a_hat)?;
    Ok(left.sub(&right)?.frobenius())
}
