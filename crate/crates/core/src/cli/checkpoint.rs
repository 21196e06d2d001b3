//! `MOR1` binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MOR1" | version u16 | method u8 | d_in u32 | d_out u32 | r u32 | N u32 | alpha f64
//! tensor*                      trainable tensors in flat-parameter order
//! tensor                       frozen base weight W
//! router kind u8 | aux f64
//! ```
//!
//! Each tensor is `rows u32 | cols u32 | rows*cols f64` in row-major order.
//! The base weight and router trailer make a checkpoint self-contained.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::adapters::{LoraExpert, LoraLayer, MoeLoraLayer, MorLayer, RouterKind};
use crate::bench::Student;
use crate::error::Result;
use crate::matcore::Matrix;

pub const MAGIC: &[u8; 4] = b"MOR1";
pub const FORMAT_VERSION: u16 = 1;

const TAG_LORA: u8 = 0;
const TAG_MOELORA: u8 = 1;
const TAG_MOR: u8 = 2;

const ROUTER_LEARNABLE: u8 = 0;
const ROUTER_MEAN_POOL: u8 = 1;
const ROUTER_BALANCED: u8 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic: expected \"MOR1\"")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("unknown method tag {0}")]
    UnknownMethod(u8),
    #[error("unknown router tag {0}")]
    UnknownRouter(u8),
    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("dimension overflow: {0}")]
    DimOverflow(String),
    #[error("tensor `{name}` is {found_rows}x{found_cols}, header implies {rows}x{cols}")]
    TensorShape {
        name: &'static str,
        rows: usize,
        cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error("{0} trailing bytes after checkpoint body")]
    TrailingBytes(usize),
}

fn dim_u32(name: &str, v: usize) -> std::result::Result<u32, CheckpointError> {
    u32::try_from(v).map_err(|_| CheckpointError::DimOverflow(format!("{name} = {v} does not fit in u32")))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, name: &str, v: usize) -> std::result::Result<(), CheckpointError> {
        self.0.extend_from_slice(&dim_u32(name, v)?.to_le_bytes());
        Ok(())
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn tensor(&mut self, m: &Matrix) -> std::result::Result<(), CheckpointError> {
        self.u32("rows", m.rows())?;
        self.u32("cols", m.cols())?;
        for v in m.data() {
            self.f64(*v);
        }
        Ok(())
    }
}

/// Serializes a student layer.
pub fn to_bytes(student: &Student) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let (tag, rank, n, alpha, kind) = match student {
        Student::Lora(l) => (TAG_LORA, l.rank(), 1, l.alpha(), RouterKind::Learnable),
        Student::MoeLora(l) => (TAG_MOELORA, l.rank(), l.n_experts(), l.alpha(), RouterKind::Learnable),
        Student::Mor(l) => (TAG_MOR, l.rank(), l.n_experts(), l.alpha(), l.router_kind()),
    };
    w.0.push(tag);
    let base = student.base();
    w.u32("d_in", base.cols())?;
    w.u32("d_out", base.rows())?;
    w.u32("r", rank)?;
    w.u32("N", n)?;
    w.f64(alpha);
    match student {
        Student::Lora(l) => {
            w.tensor(&l.a)?;
            w.tensor(&l.b)?;
        }
        Student::MoeLora(l) => {
            for e in &l.experts {
                w.tensor(&e.a)?;
                w.tensor(&e.b)?;
            }
            w.tensor(&l.router)?;
        }
        Student::Mor(l) => {
            for t in [&l.a, &l.b, &l.omega_a, &l.omega_b, &l.router] {
                w.tensor(t)?;
            }
        }
    }
    w.tensor(base)?;
    let (router_tag, aux) = match kind {
        RouterKind::Learnable => (ROUTER_LEARNABLE, 0.0),
        RouterKind::MeanPool => (ROUTER_MEAN_POOL, 0.0),
        RouterKind::Balanced { aux_coefficient } => (ROUTER_BALANCED, aux_coefficient),
    };
    w.0.push(router_tag);
    w.f64(aux);
    Ok(w.0)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], CheckpointError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, name: &'static str, rows: usize, cols: usize) -> std::result::Result<Matrix, CheckpointError> {
        let (found_rows, found_cols) = (self.u32()?, self.u32()?);
        if (found_rows, found_cols) != (rows, cols) {
            return Err(CheckpointError::TensorShape {
                name,
                rows,
                cols,
                found_rows,
                found_cols,
            });
        }
        let bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| CheckpointError::DimOverflow(format!("tensor `{name}` {rows}x{cols}")))?;
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Matrix::new(rows, cols, data).expect("length checked"))
    }
}

/// Parses a checkpoint. Shape errors inside the body are reported against
/// the dims declared in the header.
pub fn from_bytes(buf: &[u8]) -> Result<Student> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(buf) {
            CheckpointError::Truncated {
                offset: buf.len(),
                needed: MAGIC.len() - buf.len(),
            }
        } else {
            CheckpointError::BadMagic
        }
        .into());
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        }
        .into());
    }
    let tag = r.u8()?;
    if tag > TAG_MOR {
        return Err(CheckpointError::UnknownMethod(tag).into());
    }
    let (d_in, d_out, rank, n) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let alpha = r.f64()?;
    let student = match tag {
        TAG_LORA => {
            let a = r.tensor("A", rank, d_in)?;
            let b = r.tensor("B", d_out, rank)?;
            let base = r.tensor("W", d_out, d_in)?;
            read_router(&mut r)?;
            Student::Lora(LoraLayer::new(base, a, b, alpha)?)
        }
        TAG_MOELORA => {
            let mut experts = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let a = r.tensor("A_i", rank, d_in)?;
                let b = r.tensor("B_i", d_out, rank)?;
                experts.push(LoraExpert { a, b });
            }
            let router = r.tensor("W_r", n, d_in)?;
            let base = r.tensor("W", d_out, d_in)?;
            read_router(&mut r)?;
            Student::MoeLora(MoeLoraLayer::new(base, experts, router, alpha)?)
        }
        _ => {
            let a = r.tensor("A", rank, d_in)?;
            let b = r.tensor("B", d_out, rank)?;
            let omega_a = r.tensor("Omega_A", n, rank)?;
            let omega_b = r.tensor("Omega_B", n, d_out)?;
            let router = r.tensor("W_r", n, d_in)?;
            let base = r.tensor("W", d_out, d_in)?;
            let kind = read_router(&mut r)?;
            Student::Mor(MorLayer::new(base, a, b, omega_a, omega_b, router, alpha, kind)?)
        }
    };
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes(buf.len() - r.pos).into());
    }
    Ok(student)
}

fn read_router(r: &mut Reader<'_>) -> std::result::Result<RouterKind, CheckpointError> {
    let tag = r.u8()?;
    let aux = r.f64()?;
    match tag {
        ROUTER_LEARNABLE => Ok(RouterKind::Learnable),
        ROUTER_MEAN_POOL => Ok(RouterKind::MeanPool),
        ROUTER_BALANCED => Ok(RouterKind::Balanced { aux_coefficient: aux }),
        t => Err(CheckpointError::UnknownRouter(t)),
    }
}

pub fn write_checkpoint(student: &Student, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(student)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Student> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Adapter;
    use crate::error::MorError;
    use crate::matcore::Rng;

    fn random_mor(seed: u64) -> Student {
        let mut rng = Rng::new(seed);
        let base = rng.gaussian_matrix(5, 7, 0.0, 1.0).unwrap();
        let mut l = MorLayer::init(base, 3, 4, 16.0, RouterKind::Balanced { aux_coefficient: 0.5 }, &mut rng).unwrap();
        let p = rng.gaussian_vec(l.num_trainable(), 0.0, 1.0);
        l.set_trainable_params(&p).unwrap();
        Student::Mor(l)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = Rng::new(1);
        let base = rng.gaussian_matrix(5, 7, 0.0, 1.0).unwrap();
        let students = [
            random_mor(2),
            Student::Lora(LoraLayer::init(base.clone(), 2, 8.0, &mut rng).unwrap()),
            Student::MoeLora(MoeLoraLayer::init(base, 2, 3, 8.0, &mut rng).unwrap()),
        ];
        for s in students {
            let bytes = to_bytes(&s).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, s);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&random_mor(3)).unwrap();
        assert_eq!(&bytes[..4], b"MOR1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(bytes[6], TAG_MOR);
        assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 7);
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 5);
        assert_eq!(u32::from_le_bytes(bytes[15..19].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[19..23].try_into().unwrap()), 4);
        assert_eq!(f64::from_le_bytes(bytes[23..31].try_into().unwrap()), 16.0);
    }

    fn err_of(buf: &[u8]) -> CheckpointError {
        match from_bytes(buf) {
            Err(MorError::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn corruptions_are_distinguished() {
        let good = to_bytes(&random_mor(4)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(err_of(&bad), CheckpointError::BadMagic);
        assert!(err_of(&bad).to_string().contains("bad magic"));

        let mut newer = good.clone();
        newer[4] = 2;
        assert_eq!(err_of(&newer), CheckpointError::UnsupportedVersion { found: 2, supported: 1 });

        let mut method = good.clone();
        method[6] = 9;
        assert_eq!(err_of(&method), CheckpointError::UnknownMethod(9));

        assert!(matches!(err_of(&good[..good.len() - 3]), CheckpointError::Truncated { .. }));
        assert!(matches!(err_of(&good[..2]), CheckpointError::Truncated { .. }));

        let mut long = good.clone();
        long.push(0);
        assert_eq!(err_of(&long), CheckpointError::TrailingBytes(1));

        let mut huge = good.clone();
        huge[7..11].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            err_of(&huge),
            CheckpointError::TensorShape { .. } | CheckpointError::DimOverflow(_)
        ));
    }

    #[test]
    fn oversized_declared_tensor_is_truncated_not_allocated() {
        let good = to_bytes(&random_mor(5)).unwrap();
        let mut bad = good.clone();
        // header and first tensor header agree on an enormous d_in
        bad[7..11].copy_from_slice(&u32::MAX.to_le_bytes());
        bad[35..39].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            err_of(&bad),
            CheckpointError::Truncated { .. } | CheckpointError::DimOverflow(_)
        ));
    }
}
