//! CIFAR-10 binary batch loader: 3073-byte records, one label byte then
//! 3072 channel-major pixel bytes (R, G, B planes of 1024 each).

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use eoslab_core::data::Dataset;

/// Bytes per record: label plus 32*32*3 pixels.
pub const RECORD_BYTES: usize = 3073;
/// Pixels per record.
pub const PIXELS: usize = 3072;

/// Reads the first `count` records of a CIFAR-10 binary batch file, scaling
/// pixels to [0, 1]. The fixed prefix keeps subset selection reproducible.
pub fn load_cifar_batch(path: &Path, count: usize) -> Result<Dataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_records(&bytes, count).with_context(|| format!("parsing {}", path.display()))
}

fn parse_records(bytes: &[u8], count: usize) -> Result<Dataset> {
    if count == 0 {
        bail!("count must be positive");
    }
    let available = bytes.len() / RECORD_BYTES;
    if bytes.len() % RECORD_BYTES != 0 {
        bail!(
            "truncated file: {} bytes is not a multiple of the {}-byte record size",
            bytes.len(),
            RECORD_BYTES
        );
    }
    if count > available {
        bail!("requested {count} records but file holds {available}");
    }
    let mut inputs = Vec::with_capacity(count * PIXELS);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let rec = &bytes[r * RECORD_BYTES..(r + 1) * RECORD_BYTES];
        let label = rec[0] as usize;
        if label >= 10 {
            bail!("malformed label byte {} in record {r}", rec[0]);
        }
        labels.push(label);
        inputs.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset::new(inputs, labels, PIXELS, 3, 10)?)
}
