//! Trainable-parameter accounting over a model geometry.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{MorError, Result};

/// Total parameter count of the LLaMA2-7B base model.
pub const LLAMA2_7B_TOTAL_PARAMS: u64 = 6_738_415_616;

/// Adapted projections, repeated for every layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub layers: u64,
    /// `(d_in, d_out)` of each adapted projection within one layer.
    pub projections: Vec<(u64, u64)>,
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.projections.is_empty() {
            return Err(MorError::InvalidArgument("geometry needs at least one layer and projection".into()));
        }
        if self.projections.iter().any(|(i, o)| *i == 0 || *o == 0) {
            return Err(MorError::InvalidArgument("projection dims must be positive".into()));
        }
        Ok(())
    }

    pub fn total_projections(&self) -> u64 {
        self.layers * self.projections.len() as u64
    }
}

/// 32 layers with `up_proj` and `gate_proj` (4096 → 11008) and `down_proj`
/// (11008 → 4096) adapted in each.
pub fn llama7b_geometry() -> Geometry {
    Geometry {
        layers: 32,
        projections: vec![(4096, 11008), (4096, 11008), (11008, 4096)],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lora,
    Dora,
    MoeLora,
    Mor,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lora => "LoRA",
            Method::Dora => "DoRA",
            Method::MoeLora => "MoELoRA",
            Method::Mor => "MoR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub rank: u64,
    /// Always 1 for LoRA and DoRA.
    pub experts: u64,
}

impl MethodSpec {
    pub fn lora(rank: u64) -> Self {
        MethodSpec { method: Method::Lora, rank, experts: 1 }
    }

    pub fn dora(rank: u64) -> Self {
        MethodSpec { method: Method::Dora, rank, experts: 1 }
    }

    pub fn moelora(experts: u64, rank: u64) -> Self {
        MethodSpec { method: Method::MoeLora, rank, experts }
    }

    pub fn mor(experts: u64, rank: u64) -> Self {
        MethodSpec { method: Method::Mor, rank, experts }
    }

    pub fn includes_router(&self) -> bool {
        matches!(self.method, Method::MoeLora | Method::Mor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(MorError::InvalidArgument("rank must be >= 1".into()));
        }
        if self.experts == 0 {
            return Err(MorError::InvalidArgument("experts must be >= 1".into()));
        }
        if matches!(self.method, Method::Lora | Method::Dora) && self.experts != 1 {
            return Err(MorError::InvalidArgument(format!("{} has exactly one expert", self.method)));
        }
        Ok(())
    }

    /// Label in the `E{N}R{r}` style, e.g. `MoR (E8R8)`.
    pub fn label(&self) -> String {
        match self.method {
            Method::Lora | Method::Dora => format!("{} (R{})", self.method, self.rank),
            Method::MoeLora | Method::Mor => format!("{} (E{}R{})", self.method, self.experts, self.rank),
        }
    }
}

/// Trainable parameters of one adapted `(d_in, d_out)` projection.
///
/// * LoRA: `r (d_in + d_out)`
/// * DoRA: LoRA plus a `d_out` magnitude vector
/// * MoE-LoRA: `N r (d_in + d_out)` plus an `N × d_in` router
/// * MoR: `r (d_in + d_out)` shared, `N (r + d_out)` scaling rows, `N × d_in` router
///
/// The formula itself is defined for `N = 0`, where MoR degenerates to the
/// bare shared LoRA count.
pub fn projection_params(spec: &MethodSpec, d_in: u64, d_out: u64) -> u64 {
    let (r, n) = (spec.rank, spec.experts);
    let lora = r * (d_in + d_out);
    match spec.method {
        Method::Lora => lora,
        Method::Dora => lora + d_out,
        Method::MoeLora => n * lora + n * d_in,
        Method::Mor => lora + n * (r + d_out) + n * d_in,
    }
}

pub fn count_params(spec: &MethodSpec, geo: &Geometry) -> u64 {
    let per_layer: u64 = geo
        .projections
        .iter()
        .map(|(d_in, d_out)| projection_params(spec, *d_in, *d_out))
        .sum();
    per_layer * geo.layers
}

/// `12345678` → `"12,345,678"`.
pub fn format_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// One row of the accounting table.
#[derive(Debug, Clone, Serialize)]
pub struct CountRow {
    pub label: String,
    pub count: u64,
    pub megaparams: f64,
}

pub fn count_table(specs: &[MethodSpec], geo: &Geometry) -> Result<Vec<CountRow>> {
    geo.validate()?;
    specs
        .iter()
        .map(|s| {
            s.validate()?;
            let count = count_params(s, geo);
            Ok(CountRow {
                label: s.label(),
                count,
                megaparams: count as f64 / 1e6,
            })
        })
        .collect()
}

pub fn render_table(rows: &[CountRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<width$}  {:>14}  {:>8}\n", "method", "count", "params");
    for r in rows {
        s.push_str(&format!(
            "{:<width$}  {:>14}  {:>7.1}M\n",
            r.label,
            format_thousands(r.count),
            r.megaparams
        ));
    }
    s
}
