//! Binary dataset file.
//!
//! All integers little-endian.
//!
//! ```text
//! header  "BEACONDS" | version u16 | schemes u16 | snrs u16 | frames/cell u32 | frame_len u16
//!         | snr grid: snrs × i16 dB
//! body    per frame, canonical order: 256 × f32 (row-major 2×128) | label u8 | snr_db i16 | split u8
//! trailer CRC32 (IEEE) of the body, u32
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, IqGenError, IqMatrix, LabeledFrame, ModulationScheme, Split};
use crate::binio::{crc32, BinError, LeReader, LeWriter};
use crate::{FRAME_LEN, NUM_CLASSES};

const MAGIC: &str = "BEACONDS";
const VERSION: u16 = 1;
const FRAME_BYTES: usize = 2 * FRAME_LEN * 4 + 1 + 2 + 1;

pub fn dataset_to_bytes(d: &Dataset) -> Vec<u8> {
    let mut w = LeWriter::new();
    w.bytes(MAGIC.as_bytes());
    w.u16(VERSION);
    w.u16(NUM_CLASSES as u16);
    w.u16(d.snr_grid.len() as u16);
    w.u32(d.frames_per_cell);
    w.u16(FRAME_LEN as u16);
    for &s in &d.snr_grid {
        w.i16(s);
    }
    let body_start = w.len();
    for (f, split) in d.frames.iter().zip(&d.splits) {
        for &v in f.iq.as_slice() {
            w.f32(v);
        }
        w.u8(f.label.index() as u8);
        w.i16(f.snr_db);
        w.u8(split.tag());
    }
    let crc = crc32(&w.as_slice()[body_start..]);
    w.u32(crc);
    w.into_inner()
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Dataset, IqGenError> {
    let mut r = LeReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(BinError::Format(format!("unsupported version {version}")).into());
    }
    let schemes = r.u16()? as usize;
    let n_snr = r.u16()? as usize;
    let per_cell = r.u32()?;
    let frame_len = r.u16()? as usize;
    if schemes != NUM_CLASSES || frame_len != FRAME_LEN {
        return Err(BinError::Format(format!(
            "unsupported shape: {schemes} schemes, frame length {frame_len}"
        ))
        .into());
    }
    let snr_grid = (0..n_snr).map(|_| r.i16()).collect::<Result<Vec<_>, _>>()?;

    let n_frames = schemes * n_snr * per_cell as usize;
    let body_start = r.position();
    let need = n_frames * FRAME_BYTES + 4;
    if r.remaining() < need {
        return Err(BinError::Truncated {
            offset: bytes.len(),
            needed: need - r.remaining(),
        }
        .into());
    }
    if r.remaining() > need {
        return Err(BinError::Format(format!(
            "{} trailing bytes after checksum",
            r.remaining() - need
        ))
        .into());
    }
    let body = &bytes[body_start..body_start + n_frames * FRAME_BYTES];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(BinError::Checksum { stored, computed }.into());
    }

    let mut frames = Vec::with_capacity(n_frames);
    let mut splits = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let mut iq = IqMatrix::zeros();
        for v in iq.0.iter_mut() {
            *v = r.f32()?;
        }
        let label = ModulationScheme::from_index(r.u8()? as usize)
            .map_err(|e| BinError::Format(e.to_string()))?;
        let snr_db = r.i16()?;
        let tag = r.u8()?;
        let split =
            Split::from_tag(tag).ok_or_else(|| BinError::Format(format!("bad split tag {tag}")))?;
        frames.push(LabeledFrame { iq, label, snr_db });
        splits.push(split);
    }
    Ok(Dataset {
        snr_grid,
        frames_per_cell: per_cell,
        frames,
        splits,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), IqGenError> {
    fs::write(path, dataset_to_bytes(d))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, IqGenError> {
    dataset_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iqgen::{generate_dataset, GenConfig};

    fn tiny() -> Dataset {
        generate_dataset(&GenConfig {
            frames_per_scheme_per_snr: 2,
            snr_grid: vec![-20, 0, 20],
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let d = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(
            fs::metadata(&path).unwrap().len() as usize,
            8 + 2 + 2 + 2 + 4 + 2 + 3 * 2 + 60 * FRAME_BYTES + 4
        );
    }

    #[test]
    fn distinct_errors() {
        let bytes = dataset_to_bytes(&tiny());

        let truncated = &bytes[..bytes.len() - 100];
        assert!(matches!(
            dataset_from_bytes(truncated),
            Err(IqGenError::Format(BinError::Truncated { .. }))
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(
            dataset_from_bytes(&magic),
            Err(IqGenError::Format(BinError::BadMagic { .. }))
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            dataset_from_bytes(&flipped),
            Err(IqGenError::Format(BinError::Checksum { .. }))
        ));

        assert!(matches!(
            dataset_from_bytes(&bytes[..5]),
            Err(IqGenError::Format(BinError::BadMagic { .. }))
        ));
    }
}
