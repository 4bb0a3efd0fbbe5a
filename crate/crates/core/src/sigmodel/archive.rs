//! Frame archive: little-endian binary file holding fixed-length frames.
//!
//! Layout: magic "DRFX", version u32, N u32, count u32, then per frame
//! label u32, seed u64, N x f32 I samples, N x f32 Q samples.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FrameMeta, IqFrame, SigError};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DRFX";
pub const ARCHIVE_VERSION: u32 = 1;

pub fn write_frame_archive(path: &Path, frames: &[IqFrame]) -> Result<(), SigError> {
    let n = frames.first().map_or(0, IqFrame::len);
    if frames.iter().any(|f| f.len() != n) {
        return Err(SigError::Archive("frames have unequal lengths".into()));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
    w.write_u32::<LittleEndian>(n as u32)?;
    w.write_u32::<LittleEndian>(frames.len() as u32)?;
    for f in frames {
        w.write_u32::<LittleEndian>(f.label)?;
        w.write_u64::<LittleEndian>(f.meta.seed)?;
        for &v in &f.i {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        for &v in &f.q {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_frame_archive(path: &Path) -> Result<Vec<IqFrame>, SigError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(SigError::Archive(format!(
            "bad magic {magic:?}, expected {ARCHIVE_MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != ARCHIVE_VERSION {
        return Err(SigError::Archive(format!(
            "unsupported version {version}"
        )));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.read_u32::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let mut i = Vec::with_capacity(n);
        for _ in 0..n {
            i.push(r.read_f32::<LittleEndian>()? as f64);
        }
        let mut q = Vec::with_capacity(n);
        for _ in 0..n {
            q.push(r.read_f32::<LittleEndian>()? as f64);
        }
        frames.push(IqFrame {
            i,
            q,
            label,
            meta: FrameMeta {
                seed,
                ..FrameMeta::default()
            },
        });
    }
    Ok(frames)
}
