//! Double-double reference objective for gradient checks.
//!
//! Everything here is independent of the library's forward code: adapters
//! are re-evaluated from their flat parameter vectors in ~106-bit
//! arithmetic, so finite differences can use a tiny step without drowning
//! in rounding noise.

use std::ops::{Add, Div, Mul, Neg, Sub};

use mor::matcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    /// `a + b` held exactly.
    pub fn sum_of(a: f64, b: f64) -> Dd {
        let (hi, lo) = two_sum(a, b);
        Dd { hi, lo }
    }

    fn scale_pow2(self, k: i32) -> Dd {
        let f = 2f64.powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from(q2);
        let q3 = r.hi / o.hi;
        Dd::from(q1) + Dd::from(q2) + Dd::from(q3)
    }
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// `exp` by range reduction to `|r| ≤ ln2/2048` and a Taylor series.
pub fn exp(x: Dd) -> Dd {
    let k = (x.hi / LN2.hi).round();
    let r = (x - LN2 * Dd::from(k)).scale_pow2(-10);
    let mut term = Dd::ONE;
    let mut sum = Dd::ONE;
    for n in 1..=12 {
        term = term * r / Dd::from(n as f64);
        sum = sum + term;
    }
    for _ in 0..10 {
        sum = sum * sum;
    }
    sum.scale_pow2(k as i32)
}

#[derive(Debug, Clone, Copy)]
pub enum Gate {
    Learnable,
    MeanPool,
    Balanced(f64),
}

/// Adapter structure needed to read a flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub enum Spec {
    Lora { r: usize, alpha: f64 },
    MoeLora { r: usize, n: usize, alpha: f64 },
    Mor { r: usize, n: usize, alpha: f64, gate: Gate },
}

type Expert<'a> = (Vec<&'a [Dd]>, Vec<&'a [Dd]>);

struct Cursor<'a> {
    p: &'a [Dd],
    at: usize,
}

impl<'a> Cursor<'a> {
    /// Next `rows × cols` row-major block.
    fn take(&mut self, rows: usize, cols: usize) -> Vec<&'a [Dd]> {
        let block = &self.p[self.at..self.at + rows * cols];
        self.at += rows * cols;
        block.chunks(cols.max(1)).collect()
    }
}

fn dot(w: &[Dd], x: &[Dd]) -> Dd {
    w.iter().zip(x).fold(Dd::ZERO, |acc, (a, b)| acc + *a * *b)
}

fn matvec(m: &[&[Dd]], x: &[Dd]) -> Vec<Dd> {
    m.iter().map(|row| dot(row, x)).collect()
}

fn softmax(logits: &[Dd]) -> Vec<Dd> {
    let max = logits.iter().fold(logits[0], |m, v| if v.hi > m.hi { *v } else { m });
    let e: Vec<Dd> = logits.iter().map(|l| exp(*l - max)).collect();
    let z = e.iter().fold(Dd::ZERO, |a, b| a + *b);
    e.iter().map(|v| *v / z).collect()
}

/// `½‖Y‖² + aux` evaluated from flat parameters `p`.
pub fn objective(spec: Spec, base: &Matrix, x: &Matrix, p: &[Dd]) -> Dd {
    let (d_out, d_in) = base.shape();
    let w: Vec<Vec<Dd>> = (0..d_out).map(|i| base.row(i).iter().map(|v| Dd::from(*v)).collect()).collect();
    let w: Vec<&[Dd]> = w.iter().map(|r| r.as_slice()).collect();
    let mut cur = Cursor { p, at: 0 };
    let mut half_sq = Dd::ZERO;
    let mut gates: Vec<Vec<Dd>> = Vec::new();

    // parameters are read once, then reused across rows
    enum Parsed<'a> {
        Lora(Vec<&'a [Dd]>, Vec<&'a [Dd]>, f64),
        Moe(Vec<Expert<'a>>, Vec<&'a [Dd]>, f64),
        Mor([Vec<&'a [Dd]>; 5], f64, usize, Gate),
    }
    let parsed = match spec {
        Spec::Lora { r, alpha } => {
            let a = cur.take(r, d_in);
            let b = cur.take(d_out, r);
            Parsed::Lora(a, b, alpha / r as f64)
        }
        Spec::MoeLora { r, n, alpha } => {
            let experts = (0..n).map(|_| (cur.take(r, d_in), cur.take(d_out, r))).collect();
            let router = cur.take(n, d_in);
            Parsed::Moe(experts, router, alpha / r as f64)
        }
        Spec::Mor { r, n, alpha, gate } => {
            let blocks = [
                cur.take(r, d_in),
                cur.take(d_out, r),
                cur.take(n, r),
                cur.take(n, d_out),
                cur.take(n, d_in),
            ];
            Parsed::Mor(blocks, alpha / r as f64, n, gate)
        }
    };
    assert_eq!(cur.at, p.len(), "parameter vector length does not match the adapter layout");

    for row in 0..x.rows() {
        let xr: Vec<Dd> = x.row(row).iter().map(|v| Dd::from(*v)).collect();
        let mut y = matvec(&w, &xr);
        match &parsed {
            Parsed::Lora(a, b, s) => {
                let u = matvec(a, &xr);
                for (yo, v) in y.iter_mut().zip(matvec(b, &u)) {
                    *yo = *yo + Dd::from(*s) * v;
                }
            }
            Parsed::Moe(experts, router, s) => {
                let g = softmax(&matvec(router, &xr));
                for ((a, b), gi) in experts.iter().zip(&g) {
                    let v = matvec(b, &matvec(a, &xr));
                    for (yo, vo) in y.iter_mut().zip(v) {
                        *yo = *yo + *gi * Dd::from(*s) * vo;
                    }
                }
                gates.push(g);
            }
            Parsed::Mor([a, b, oa, ob, router], s, n, gate) => {
                let g = match gate {
                    Gate::MeanPool => vec![Dd::ONE / Dd::from(*n as f64); *n],
                    _ => softmax(&matvec(router, &xr)),
                };
                let u = matvec(a, &xr);
                for i in 0..*n {
                    let v: Vec<Dd> = u.iter().zip(oa[i]).map(|(u, o)| *u * *o).collect();
                    let q = matvec(b, &v);
                    for ((yo, qo), o) in y.iter_mut().zip(q).zip(ob[i]) {
                        *yo = *yo + g[i] * Dd::from(*s) * *o * qo;
                    }
                }
                gates.push(g);
            }
        }
        half_sq = half_sq + y.iter().fold(Dd::ZERO, |acc, v| acc + *v * *v) * Dd::from(0.5);
    }

    if let Spec::Mor {
        n,
        gate: Gate::Balanced(coef),
        ..
    } = spec
    {
        // N · sum_i f_i P_i with argmax dispatch, ties to the lowest index
        let batch = Dd::from(gates.len() as f64);
        let mut counts = vec![0.0; n];
        for g in &gates {
            let best = (0..n).fold(0, |b, i| if g[i].hi > g[b].hi { i } else { b });
            counts[best] += 1.0;
        }
        let mut aux = Dd::ZERO;
        for (i, c) in counts.iter().enumerate() {
            let p = gates.iter().fold(Dd::ZERO, |acc, g| acc + g[i]) / batch;
            aux = aux + Dd::from(*c) / batch * p;
        }
        half_sq = half_sq + Dd::from(coef) * Dd::from(n as f64) * aux;
    }
    half_sq
}

/// Fourth-order central differences of [`objective`] at step `h`.
pub fn central4(spec: Spec, base: &Matrix, x: &Matrix, params: &[f64], h: f64) -> Vec<f64> {
    let p0: Vec<Dd> = params.iter().map(|v| Dd::from(*v)).collect();
    (0..params.len())
        .map(|i| {
            let at = |d: f64| {
                let mut p = p0.clone();
                p[i] = Dd::sum_of(params[i], d);
                objective(spec, base, x, &p)
            };
            let near = at(h) - at(-h);
            let far = at(2.0 * h) - at(-2.0 * h);
            ((Dd::from(8.0) * near - far) / Dd::from(12.0 * h)).to_f64()
        })
        .collect()
}
