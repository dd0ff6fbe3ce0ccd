//! ```text
//! "DCKPT1" u32 count
//!   count × { u16 len, name, u8 rank, rank × u32 dim, Π dim × f32 }
//! "META1"  u64 config_hash, u64 step
//! ["OPTS1" u64 step, u32 count, count × { u16 len, name, u32 n, n × f64 m, n × f64 v }]
//! ```

use std::path::Path;

use spectra_core::checkpoint::{Checkpoint, CheckpointMeta, OptimizerState, Record};

use super::{put_name, FormatError, Reader};
use crate::error::{self, Error, Result};

const MAGIC: &str = "DCKPT1";
const META: &str = "META1";
const OPTS: &str = "OPTS1";

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(16 + 4 * ckpt.num_scalars());
    out.extend_from_slice(MAGIC.as_bytes());
    out.extend_from_slice(&u32::try_from(ckpt.records.len()).map_err(|_| FormatError::Invalid("too many records".into()))?.to_le_bytes());
    for r in &ckpt.records {
        put_name(&mut out, &r.name)?;
        let rank = u8::try_from(r.shape.len()).map_err(|_| FormatError::Invalid(format!("rank of {} exceeds 255", r.name)))?;
        if r.shape.iter().product::<usize>() != r.data.len() {
            return Err(FormatError::Invalid(format!("{}: shape {:?} does not match {} values", r.name, r.shape, r.data.len())));
        }
        out.push(rank);
        for &d in &r.shape {
            let d = u32::try_from(d).map_err(|_| FormatError::Invalid(format!("{}: dimension too large", r.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &r.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out.extend_from_slice(META.as_bytes());
    out.extend_from_slice(&ckpt.meta.config_hash.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.step.to_le_bytes());
    if let Some(opt) = &ckpt.optimizer {
        out.extend_from_slice(OPTS.as_bytes());
        out.extend_from_slice(&opt.step.to_le_bytes());
        out.extend_from_slice(&(opt.names.len() as u32).to_le_bytes());
        for ((name, m), v) in opt.names.iter().zip(&opt.m).zip(&opt.v) {
            put_name(&mut out, name)?;
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid(format!("{name}: shape overflows")))?;
        let data = r.f32s(n, "tensor payload")?.into_iter().map(f64::from).collect();
        records.push(Record { name, shape, data });
    }
    let mut meta = CheckpointMeta::default();
    if r.peek(META.len()) == Some(META.as_bytes()) {
        r.magic(META)?;
        meta.config_hash = r.u64("config hash")?;
        meta.step = r.u64("step")?;
    }
    let mut optimizer = None;
    if r.peek(OPTS.len()) == Some(OPTS.as_bytes()) {
        r.magic(OPTS)?;
        let step = r.u64("optimizer step")?;
        let n = r.u32("optimizer entry count")? as usize;
        let mut st = OptimizerState { step, names: Vec::new(), m: Vec::new(), v: Vec::new() };
        for _ in 0..n {
            st.names.push(r.name()?);
            let len = r.u32("moment length")? as usize;
            st.m.push(r.f64s(len, "first moment")?);
            st.v.push(r.f64s(len, "second moment")?);
        }
        optimizer = Some(st);
    }
    match r.remaining() {
        0 => Ok(Checkpoint { records, meta, optimizer }),
        n if r.peek(1).is_some_and(|b| b[0].is_ascii_uppercase()) && n >= 5 => {
            Err(FormatError::UnknownSection { offset: r.pos() })
        }
        count => Err(FormatError::TrailingBytes { count }),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt).map_err(|e| Error::format(path, e))?;
    error::write(path, bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&error::read(path)?).map_err(|e| Error::format(path, e))
}
