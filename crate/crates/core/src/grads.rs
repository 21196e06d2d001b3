//! Hand-derived reverse-mode gradients for every adapter, plus the
//! central finite-difference oracle that checks them.
//!
//! Gradients are only produced for trainable tensors; the frozen base
//! weight never receives one. Per-row contributions are accumulated in row
//! order so results do not depend on the execution policy.

use crate::adapters::{balance_loss, balance_loss_grad, Adapter, BatchOutput, LoraLayer, MoeLoraLayer, MorLayer, RouterKind};
use crate::error::{MorError, Result};
use crate::matcore::{dot, Matrix, Vector};
use crate::par::{self, Exec};

/// Floor of the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;
/// Step for [`grad_check`]'s fourth-order stencil.
pub const FD_STEP: f64 = 2e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraGrads {
    pub fn flatten(&self) -> Vec<f64> {
        [self.a.data(), self.b.data()].concat()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLoraGrads {
    pub experts: Vec<LoraGrads>,
    pub router: Matrix,
}

impl MoeLoraGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.experts {
            out.extend_from_slice(e.a.data());
            out.extend_from_slice(e.b.data());
        }
        out.extend_from_slice(self.router.data());
        out
    }
}

/// Gradients for the five trainable MoR tensors; shapes mirror the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MorGrads {
    pub a: Matrix,
    pub b: Matrix,
    pub omega_a: Matrix,
    pub omega_b: Matrix,
    pub router: Matrix,
}

impl MorGrads {
    fn zeros(layer: &MorLayer) -> Self {
        MorGrads {
            a: Matrix::zeros(layer.a.rows(), layer.a.cols()),
            b: Matrix::zeros(layer.b.rows(), layer.b.cols()),
            omega_a: Matrix::zeros(layer.omega_a.rows(), layer.omega_a.cols()),
            omega_b: Matrix::zeros(layer.omega_b.rows(), layer.omega_b.cols()),
            router: Matrix::zeros(layer.router.rows(), layer.router.cols()),
        }
    }

    fn accumulate(&mut self, other: &MorGrads) {
        for (dst, src) in [
            (&mut self.a, &other.a),
            (&mut self.b, &other.b),
            (&mut self.omega_a, &other.omega_a),
            (&mut self.omega_b, &other.omega_b),
            (&mut self.router, &other.router),
        ] {
            dst.axpy(1.0, src).expect("same layer shapes");
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        [
            self.a.data(),
            self.b.data(),
            self.omega_a.data(),
            self.omega_b.data(),
            self.router.data(),
        ]
        .concat()
    }

    pub fn is_finite(&self) -> bool {
        [&self.a, &self.b, &self.omega_a, &self.omega_b, &self.router]
            .iter()
            .all(|m| m.is_finite())
    }
}

fn check_backward_shapes(x: &Matrix, x_adapter: &Matrix, dy: &Matrix, d_in: usize, d_out: usize) -> Result<()> {
    if x.cols() != d_in || x_adapter.shape() != x.shape() {
        return Err(MorError::shape("backward input", x.shape(), (x.rows(), d_in)));
    }
    if dy.shape() != (x.rows(), d_out) {
        return Err(MorError::shape("backward dY", dy.shape(), (x.rows(), d_out)));
    }
    if x.rows() == 0 {
        return Err(MorError::Empty("backward"));
    }
    Ok(())
}

/// Adds `k · a bᵀ` into `m`.
fn add_outer(m: &mut Matrix, k: f64, a: &[f64], b: &[f64]) {
    for (i, ai) in a.iter().enumerate() {
        let coef = k * ai;
        if coef == 0.0 {
            continue;
        }
        for (dst, bj) in m.row_mut(i).iter_mut().zip(b) {
            *dst += coef * bj;
        }
    }
}

/// Softmax backward: `dz_l = g_l (dg_l − sum_i g_i dg_i)`.
fn softmax_backward(g: &[f64], dg: &[f64]) -> Vec<f64> {
    let mean = dot(g, dg);
    g.iter().zip(dg).map(|(gl, dgl)| gl * (dgl - mean)).collect()
}

// ---------------------------------------------------------------------------
// LoRA

/// `∂L/∂{A, B}` given `dY = ∂L/∂Y`.
pub fn lora_backward(layer: &LoraLayer, x: &Matrix, dy: &Matrix) -> Result<LoraGrads> {
    lora_backward_masked(layer, x, x, dy)
}

pub fn lora_backward_masked(layer: &LoraLayer, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<LoraGrads> {
    layer.validate()?;
    check_backward_shapes(x, x_adapter, dy, layer.d_in(), layer.d_out())?;
    let s = layer.scaling();
    let mut grads = LoraGrads {
        a: Matrix::zeros(layer.a.rows(), layer.a.cols()),
        b: Matrix::zeros(layer.b.rows(), layer.b.cols()),
    };
    for row in 0..x.rows() {
        let xa = x_adapter.row(row);
        let d = dy.row(row);
        let u = layer.a.matvec(xa)?;
        add_outer(&mut grads.b, s, d, &u);
        let du = layer.b.t_matvec(d)?;
        add_outer(&mut grads.a, s, &du, xa);
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// MoE-LoRA

/// Per-expert `∂L/∂{A_i, B_i}` plus `∂L/∂W_r` through the softmax router.
pub fn moelora_backward(layer: &MoeLoraLayer, x: &Matrix, dy: &Matrix) -> Result<MoeLoraGrads> {
    moelora_backward_masked(layer, x, x, dy)
}

pub fn moelora_backward_masked(layer: &MoeLoraLayer, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<MoeLoraGrads> {
    layer.validate()?;
    check_backward_shapes(x, x_adapter, dy, layer.d_in(), layer.d_out())?;
    let s = layer.scaling();
    let n = layer.n_experts();
    let mut grads = MoeLoraGrads {
        experts: layer
            .experts
            .iter()
            .map(|e| LoraGrads {
                a: Matrix::zeros(e.a.rows(), e.a.cols()),
                b: Matrix::zeros(e.b.rows(), e.b.cols()),
            })
            .collect(),
        router: Matrix::zeros(layer.router.rows(), layer.router.cols()),
    };
    for row in 0..x.rows() {
        let xr = x.row(row);
        let xa = x_adapter.row(row);
        let d = dy.row(row);
        let g = layer.router_weights(xr)?;
        let mut dg = vec![0.0; n];
        for (i, (e, ge)) in layer.experts.iter().zip(grads.experts.iter_mut()).enumerate() {
            let u = e.a.matvec(xa)?;
            let p = e.b.matvec(&u)?;
            dg[i] = s * dot(d, &p);
            add_outer(&mut ge.b, s * g[i], d, &u);
            let du = e.b.t_matvec(d)?;
            add_outer(&mut ge.a, s * g[i], &du, xa);
        }
        let dz = softmax_backward(&g, &dg);
        add_outer(&mut grads.router, 1.0, &dz, xr);
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// MoR

/// `∂L/∂{A, B, Ω_A, Ω_B, W_r}` for the stacked MoR forward.
///
/// With a [`RouterKind::Balanced`] router the gradient of
/// `aux_coefficient · balance_loss(G)` is included, treating the dispatch
/// fractions as constants. A mean-pool router gets a zero `W_r` gradient.
pub fn mor_backward(layer: &MorLayer, x: &Matrix, dy: &Matrix) -> Result<MorGrads> {
    mor_backward_with(Exec::Sequential, layer, x, x, dy)
}

pub fn mor_backward_with(exec: Exec, layer: &MorLayer, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<MorGrads> {
    layer.validate()?;
    check_backward_shapes(x, x_adapter, dy, layer.d_in(), layer.d_out())?;
    let batch = x.rows();
    let gates: Vec<Vector> = (0..batch)
        .map(|r| layer.router_weights(x.row(r)))
        .collect::<Result<_>>()?;
    let aux = match layer.router_kind() {
        RouterKind::Balanced { aux_coefficient } if aux_coefficient > 0.0 => {
            let g = Matrix::from_fn(batch, layer.n_experts(), |r, i| gates[r][i]);
            Some(balance_loss_grad(&g)?.scale(aux_coefficient))
        }
        _ => None,
    };
    let exec = if batch < crate::adapters::PAR_MIN_ROWS { Exec::Sequential } else { exec };
    let per_row = par::try_map_range(exec, batch, |r| {
        mor_row_backward(layer, x.row(r), x_adapter.row(r), dy.row(r), &gates[r], aux.as_ref().map(|m| m.row(r)))
    })?;
    let mut total = MorGrads::zeros(layer);
    for g in &per_row {
        total.accumulate(g);
    }
    Ok(total)
}

fn mor_row_backward(
    layer: &MorLayer,
    xr: &[f64],
    xa: &[f64],
    d: &[f64],
    g: &[f64],
    aux_dg: Option<&[f64]>,
) -> Result<MorGrads> {
    let n = layer.n_experts();
    let s = layer.scaling();
    let mut grads = MorGrads::zeros(layer);
    let u = layer.a.matvec(xa)?;
    let mut du = vec![0.0; layer.rank()];
    let mut dg = vec![0.0; n];
    for i in 0..n {
        let la = layer.omega_a.row(i);
        let lb = layer.omega_b.row(i);
        let v = u.hadamard(la);
        let p = layer.b.matvec(&v)?;
        // e_i = s * (lb ⊙ p)
        dg[i] = s * p.iter().zip(lb).zip(d).map(|((p, l), d)| p * l * d).sum::<f64>();
        let k = s * g[i];
        // dq_i = k * d ; dΩ_B[i] = dq_i ⊙ p ; dp_i = dq_i ⊙ lb
        let dp: Vec<f64> = d.iter().zip(lb).map(|(d, l)| k * d * l).collect();
        for ((dst, dq), p) in grads.omega_b.row_mut(i).iter_mut().zip(d).zip(p.iter()) {
            *dst += k * dq * p;
        }
        add_outer(&mut grads.b, 1.0, &dp, &v);
        let dv = layer.b.t_matvec(&dp)?;
        for ((dst, dvj), uj) in grads.omega_a.row_mut(i).iter_mut().zip(dv.iter()).zip(u.iter()) {
            *dst += dvj * uj;
        }
        for ((acc, dvj), laj) in du.iter_mut().zip(dv.iter()).zip(la) {
            *acc += dvj * laj;
        }
    }
    add_outer(&mut grads.a, 1.0, &du, xa);
    if layer.router_kind().is_learnable() {
        if let Some(aux) = aux_dg {
            dg.iter_mut().zip(aux).for_each(|(a, b)| *a += b);
        }
        let dz = softmax_backward(g, &dg);
        add_outer(&mut grads.router, 1.0, &dz, xr);
    }
    Ok(grads)
}

/// Gradient of `sum_i f_i P_i` (one balance-loss term without the `N`
/// factor) with respect to the router logits, for explicit dispatch
/// fractions `f`. Exposed to state the stationarity property.
pub fn balance_logit_grad(gates: &Matrix, fractions: &[f64]) -> Result<Matrix> {
    if gates.cols() != fractions.len() {
        return Err(MorError::shape("balance_logit_grad", gates.shape(), (1, fractions.len())));
    }
    if gates.rows() == 0 {
        return Err(MorError::Empty("balance_logit_grad"));
    }
    let batch = gates.rows() as f64;
    let dg: Vec<f64> = fractions.iter().map(|f| f / batch).collect();
    let mut out = Matrix::zeros(gates.rows(), gates.cols());
    for r in 0..gates.rows() {
        out.row_mut(r).copy_from_slice(&softmax_backward(gates.row(r), &dg));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Uniform surface

/// Adapters with an analytic backward pass over their flat parameters.
pub trait Differentiable: Adapter {
    /// Names and lengths of the trainable tensors, in flat order.
    fn param_blocks(&self) -> Vec<(String, usize)>;

    /// Flat gradient (same layout as [`Adapter::trainable_params`]) of
    /// `L(Y) + aux_loss`, given `dy = ∂L/∂Y`.
    fn backward_flat(&self, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<Vec<f64>>;

    /// Regularizer added to the data loss (zero unless the router is balanced).
    fn aux_loss(&self, _out: &BatchOutput) -> Result<f64> {
        Ok(0.0)
    }
}

impl Differentiable for LoraLayer {
    fn param_blocks(&self) -> Vec<(String, usize)> {
        vec![("A".into(), self.a.data().len()), ("B".into(), self.b.data().len())]
    }

    fn backward_flat(&self, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<Vec<f64>> {
        Ok(lora_backward_masked(self, x, x_adapter, dy)?.flatten())
    }
}

impl Differentiable for MoeLoraLayer {
    fn param_blocks(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, e) in self.experts.iter().enumerate() {
            out.push((format!("A_{i}"), e.a.data().len()));
            out.push((format!("B_{i}"), e.b.data().len()));
        }
        out.push(("W_r".into(), self.router.data().len()));
        out
    }

    fn backward_flat(&self, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<Vec<f64>> {
        Ok(moelora_backward_masked(self, x, x_adapter, dy)?.flatten())
    }
}

impl Differentiable for MorLayer {
    fn param_blocks(&self) -> Vec<(String, usize)> {
        vec![
            ("A".into(), self.a.data().len()),
            ("B".into(), self.b.data().len()),
            ("Omega_A".into(), self.omega_a.data().len()),
            ("Omega_B".into(), self.omega_b.data().len()),
            ("W_r".into(), self.router.data().len()),
        ]
    }

    fn backward_flat(&self, x: &Matrix, x_adapter: &Matrix, dy: &Matrix) -> Result<Vec<f64>> {
        Ok(mor_backward_with(Exec::Sequential, self, x, x_adapter, dy)?.flatten())
    }

    fn aux_loss(&self, out: &BatchOutput) -> Result<f64> {
        match (self.router_kind(), &out.gates) {
            (RouterKind::Balanced { aux_coefficient }, Some(g)) if aux_coefficient > 0.0 => {
                Ok(aux_coefficient * balance_loss(g)?)
            }
            _ => Ok(0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Finite differences

/// Difference formula used per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p + h) − f(p − h)) / 2h`, error `O(h²)`.
    Central,
    /// `(f(p − 2h) − 8 f(p − h) + 8 f(p + h) − f(p + 2h)) / 12h`, error `O(h⁴)`.
    Central4,
}

/// Central differences `(f(p + h e_i) − f(p − h e_i)) / 2h` per coordinate.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    finite_diff_with(Exec::default(), Stencil::Central, f, params, h)
}

pub fn finite_diff_check_with<F>(exec: Exec, f: F, params: &[f64], h: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    finite_diff_with(exec, Stencil::Central, f, params, h)
}

pub fn finite_diff_with<F>(exec: Exec, stencil: Stencil, f: F, params: &[f64], h: f64) -> Result<Vector>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(MorError::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let grads = par::try_map_range(exec, params.len(), |i| {
        let mut p = params.to_vec();
        let mut at = |offset: f64| -> Result<f64> {
            p[i] = params[i] + offset;
            let v = f(&p);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(MorError::NonFiniteLoss(i))
            }
        };
        Ok::<_, MorError>(match stencil {
            Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
            Stencil::Central4 => {
                // differences first, so a flat direction yields exactly zero
                let near = at(h)? - at(-h)?;
                let far = at(2.0 * h)? - at(-2.0 * h)?;
                (8.0 * near - far) / (12.0 * h)
            }
        })
    })?;
    Ok(Vector::from(grads))
}

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Per-tensor maximum relative error of analytic vs numeric gradients.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub per_param: Vec<(String, f64)>,
    pub threshold: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

/// Loss `½‖Y‖² + aux` on a fixed batch, as a function of the flat params.
pub fn half_sq_loss<A: Differentiable>(layer: &A, x: &Matrix, params: &[f64]) -> f64 {
    let mut l = layer.clone();
    if l.set_trainable_params(params).is_err() {
        return f64::NAN;
    }
    match l.forward_batch(x) {
        Ok(out) => 0.5 * out.y.frobenius_sq() + l.aux_loss(&out).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

/// Checks the analytic gradient of `½‖Y‖² + aux` against fourth-order
/// central differences at step `h`.
pub fn grad_check<A: Differentiable>(layer: &A, x: &Matrix, h: f64, threshold: f64) -> Result<GradReport> {
    let out = layer.forward_batch(x)?;
    let analytic = layer.backward_flat(x, x, &out.y)?;
    let params = layer.trainable_params();
    let numeric = finite_diff_with(Exec::default(), Stencil::Central4, |p| half_sq_loss(layer, x, p), &params, h)?;
    let mut per_param = Vec::new();
    let mut offset = 0;
    for (name, len) in layer.param_blocks() {
        let err = (offset..offset + len)
            .map(|i| relative_error(analytic[i], numeric[i]))
            .fold(0.0, f64::max);
        per_param.push((name, err));
        offset += len;
    }
    let pass = per_param.iter().all(|(_, e)| *e < threshold);
    Ok(GradReport {
        per_param,
        threshold,
        pass,
    })
}
