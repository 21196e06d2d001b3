//! Self-hosted oracle suites behind `mor verify`.
//!
//! Each suite is pure and seeded, so suites run concurrently and the
//! outcome depends only on the seed.

use crate::adapters::{
    balance_loss, highrank_transform_check, Adapter, LoraExpert, LoraLayer, MoeLoraLayer, MorLayer, RouterKind,
};
use crate::error::Result;
use crate::grads::{grad_check, FD_STEP};
use crate::matcore::{Matrix, Rng};
use crate::par::{self, Exec};
use crate::rankops::{block_reconstruct, block_split, truncation_curve};

pub const STACKED_TOLERANCE: f64 = 1e-12;
pub const BLOCK_TOLERANCE: f64 = 1e-13;
pub const TRANSFORM_TOLERANCE: f64 = 1e-12;
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Suite = fn(u64) -> Result<(bool, String)>;

const SUITES: [(&str, Suite); 6] = [
    ("stacked-vs-loop", stacked_vs_loop),
    ("block-decomposition", block_decomposition),
    ("high-rank-transform", high_rank_transform),
    ("truncation-curve", truncation),
    ("gradient-check", gradients),
    ("router-simplex", router_simplex),
];

/// Runs every suite; an error inside a suite counts as a failure.
pub fn run_suites(exec: Exec, seed: u64) -> Vec<SuiteResult> {
    par::map_range(exec, SUITES.len(), |i| {
        let (name, suite) = SUITES[i];
        match suite(seed.wrapping_add(i as u64)) {
            Ok((pass, detail)) => SuiteResult { name, pass, detail },
            Err(e) => SuiteResult {
                name,
                pass: false,
                detail: format!("error: {e}"),
            },
        }
    })
}

fn random_mor(rng: &mut Rng, d_in: usize, d_out: usize, r: usize, n: usize, kind: RouterKind) -> Result<MorLayer> {
    MorLayer::new(
        rng.gaussian_matrix(d_out, d_in, 0.0, 1.0)?,
        rng.gaussian_matrix(r, d_in, 0.0, 0.5)?,
        rng.gaussian_matrix(d_out, r, 0.0, 0.5)?,
        rng.gaussian_matrix(n, r, 1.0, 0.3)?,
        rng.gaussian_matrix(n, d_out, 1.0, 0.3)?,
        rng.gaussian_matrix(n, d_in, 0.0, 1.0)?,
        4.0,
        kind,
    )
}

fn stacked_vs_loop(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let d_in = 1 + rng.below(64);
        let d_out = 1 + rng.below(64);
        let r = 1 + rng.below(16.min(d_in.min(d_out)));
        let n = 1 + rng.below(12);
        let layer = random_mor(&mut rng, d_in, d_out, r, n, RouterKind::Learnable)?;
        let batch = 1 + rng.below(32);
        let x = rng.gaussian_matrix(batch, d_in, 0.0, 1.0)?;
        let (y, _) = layer.forward_stacked(&x)?;
        for i in 0..x.rows() {
            let (yl, _) = layer.forward(x.row(i))?;
            worst = worst.max(yl.max_abs_diff(y.row(i)));
        }
    }
    Ok((worst < STACKED_TOLERANCE, format!("max |stacked - loop| = {worst:.3e}")))
}

fn block_decomposition(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let r = 1 + rng.below(16);
        let d_out = r + rng.below(24);
        let d_in = r + rng.below(24);
        let b = rng.gaussian_matrix(d_out, r, 0.0, 1.0)?;
        let a = rng.gaussian_matrix(r, d_in, 0.0, 1.0)?;
        let ba = b.matmul(&a)?;
        for n in (1..=r).filter(|n| r.is_multiple_of(*n)) {
            let rec = block_reconstruct(&block_split(&b, &a, n)?)?;
            worst = worst.max(rec.sub(&ba)?.frobenius());
        }
    }
    Ok((worst < BLOCK_TOLERANCE, format!("max ||sum B_i A_i - BA||_F = {worst:.3e}")))
}

fn high_rank_transform(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let r = 1 + rng.below(8);
        let (d_out, d_in) = (r + rng.below(10), r + rng.below(10));
        let b = rng.gaussian_matrix(d_out, r, 0.0, 1.0)?;
        let a = rng.gaussian_matrix(r, d_in, 0.0, 1.0)?;
        let la = rng.gaussian_vec(r, 1.0, 0.5);
        let lb = rng.gaussian_vec(b.rows(), 1.0, 0.5);
        worst = worst.max(highrank_transform_check(&b, &a, &la, &lb)?);
    }
    Ok((worst < TRANSFORM_TOLERANCE, format!("max absorbed-vs-dense deviation = {worst:.3e}")))
}

fn truncation(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed);
    let mut ok = true;
    let mut worst_drop: f64 = 0.0;
    for _ in 0..50 {
        let rows = 1 + rng.below(32);
        let cols = 1 + rng.below(24);
        let m = rng.gaussian_matrix(rows, cols, 0.0, 1.0)?;
        let c = truncation_curve(&m)?;
        let total = m.frobenius_sq();
        ok &= c.errors.windows(2).all(|w| w[1] <= w[0]);
        ok &= *c.errors.last().expect("nonempty") < 1e-10 * total;
        for k in 1..c.errors.len() {
            let s = c.singular_values[k - 1];
            let drop = c.errors[k - 1] - c.errors[k];
            worst_drop = worst_drop.max((drop - s * s).abs() / (s * s).max(f64::MIN_POSITIVE));
        }
    }
    ok &= worst_drop < 1e-9;
    Ok((ok, format!("max relative drop-vs-sigma^2 error = {worst_drop:.3e}")))
}

fn gradients(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed);
    let (d_in, d_out, r, n) = (6, 5, 3, 3);
    let x = rng.gaussian_matrix(4, d_in, 0.0, 1.0)?;
    let base = rng.gaussian_matrix(d_out, d_in, 0.0, 1.0)?;
    let lora = LoraLayer::new(
        base.clone(),
        rng.gaussian_matrix(r, d_in, 0.0, 0.5)?,
        rng.gaussian_matrix(d_out, r, 0.0, 0.5)?,
        4.0,
    )?;
    let experts = (0..n)
        .map(|_| {
            Ok(LoraExpert {
                a: rng.gaussian_matrix(r, d_in, 0.0, 0.5)?,
                b: rng.gaussian_matrix(d_out, r, 0.0, 0.5)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let moe = MoeLoraLayer::new(base, experts, rng.gaussian_matrix(n, d_in, 0.0, 1.0)?, 4.0)?;

    let mut reports = vec![
        ("lora", grad_check(&lora, &x, FD_STEP, GRAD_TOLERANCE)?),
        ("moelora", grad_check(&moe, &x, FD_STEP, GRAD_TOLERANCE)?),
    ];
    for (label, kind) in [
        ("mor", RouterKind::Learnable),
        ("mor-balanced", RouterKind::Balanced { aux_coefficient: 2.0 }),
        ("mor-mean-pool", RouterKind::MeanPool),
    ] {
        let layer = random_mor(&mut rng, d_in, d_out, r, n, kind)?;
        reports.push((label, grad_check(&layer, &x, FD_STEP, GRAD_TOLERANCE)?));
    }
    let pass = reports.iter().all(|(_, r)| r.pass);
    let detail = reports
        .iter()
        .map(|(l, r)| format!("{l} {:.1e}", r.max_error()))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("max relative error: {detail}")))
}

fn router_simplex(seed: u64) -> Result<(bool, String)> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..50 {
        let n = 1 + rng.below(12);
        let layer = random_mor(&mut rng, 8, 6, 3, n, RouterKind::Learnable)?;
        let x = rng.gaussian_matrix(8, 8, 0.0, 3.0)?;
        let g = layer.forward_batch(&x)?.gates.expect("MoR has gates");
        for i in 0..g.rows() {
            let row = g.row(i);
            ok &= row.iter().all(|v| *v >= 0.0);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            if n == 1 {
                ok &= row[0] == 1.0;
            }
        }
        let mut mp = layer.clone();
        mp.set_router_kind(RouterKind::MeanPool)?;
        let g = mp.forward_batch(&x)?.gates.expect("MoR has gates");
        ok &= g.data().iter().all(|v| *v == 1.0 / n as f64);
    }
    let n = 4;
    let uniform = Matrix::filled(8, n, 1.0 / n as f64);
    let collapsed = Matrix::from_fn(8, n, |_, j| if j == 0 { 1.0 } else { 0.0 });
    let l_uniform = balance_loss(&uniform)?;
    let l_collapsed = balance_loss(&collapsed)?;
    ok &= (l_uniform - 1.0).abs() < 1e-12 && (l_collapsed - n as f64).abs() < 1e-12;
    ok &= worst < SIMPLEX_TOLERANCE;
    Ok((
        ok,
        format!("max |sum g - 1| = {worst:.1e}, balance loss {l_uniform:.3} / {l_collapsed:.3}"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_suites(Exec::default(), 42) {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        assert_eq!(run_suites(Exec::Sequential, 7), run_suites(Exec::default(), 7));
    }
}
