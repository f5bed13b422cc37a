//! Binary weights container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content                          |
//! |-------|----------------------------------|
//! | 8     | magic `STEPMLP\0`                |
//! | 4     | format version (u32)             |
//! | 8     | input dim `d` (u64)              |
//! | 8     | hidden dim `m` (u64)             |
//! | 8·m·d | `W1`, row-major                  |
//! | 8·m   | `b1`                             |
//! | 8·m   | `W2`                             |
//! | 8     | `b2`                             |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ScorerError, ScorerWeights};

const MAGIC: &[u8; 8] = b"STEPMLP\0";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

pub fn write_weights<W: Write>(w: &ScorerWeights, mut out: W) -> Result<(), ScorerError> {
    w.validate()?;
    out.write_all(MAGIC)?;
    out.write_all(&WEIGHTS_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(w.input_dim as u64).to_le_bytes())?;
    out.write_all(&(w.hidden_dim as u64).to_le_bytes())?;
    for v in w.params() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ScorerError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_weights<R: Read>(mut input: R) -> Result<ScorerWeights, ScorerError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ScorerError::Format("bad magic".into()));
    }
    let mut version = [0u8; 4];
    input.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != WEIGHTS_FORMAT_VERSION {
        return Err(ScorerError::Format(format!("unsupported version {version}")));
    }
    let d = usize::try_from(read_u64(&mut input)?).map_err(|_| ScorerError::Format("d too large".into()))?;
    let m = usize::try_from(read_u64(&mut input)?).map_err(|_| ScorerError::Format("m too large".into()))?;
    if m == 0 || m.checked_mul(d).is_none_or(|n| n > (1 << 32)) {
        return Err(ScorerError::Format(format!("implausible shape {m}x{d}")));
    }
    let mut w = ScorerWeights::zeros(d, m);
    for block in w.param_blocks_mut() {
        for v in block.iter_mut() {
            *v = f64::from_bits(read_u64(&mut input)?);
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(ScorerError::Format("trailing bytes".into()));
    }
    w.validate()?;
    Ok(w)
}

pub fn save_weights(w: &ScorerWeights, path: impl AsRef<Path>) -> Result<(), ScorerError> {
    write_weights(w, BufWriter::new(File::create(path)?))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ScorerWeights, ScorerError> {
    read_weights(BufReader::new(File::open(path)?))
}
