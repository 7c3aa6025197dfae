//! `AFR1`: a little-endian container for one recording.
//!
//! Header: magic `AFR1`, then `u32` version, frame count, image height,
//! width, channels and audio samples per frame. Body: per frame the image
//! (`f32`, row-major HWC) followed by its audio (`f32`); then one
//! `(arousal, valence)` `f32` pair per frame. The recording id is the file stem.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{AffectLabel, AudioFrame, DataError, FrameGeometry, ImageFrame, Recording, Result};

pub const AFR_MAGIC: [u8; 4] = *b"AFR1";
pub const AFR_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 6 * 4;

pub fn write_recording(path: &Path, rec: &Recording) -> Result<()> {
    let g = rec.geometry();
    let mut buf = Vec::with_capacity(HEADER_LEN + rec.len() * (g.image_len() + g.audio_len + 2) * 4);
    buf.extend_from_slice(&AFR_MAGIC);
    for v in [
        AFR_VERSION,
        rec.len() as u32,
        g.image_size as u32,
        g.image_size as u32,
        g.image_channels as u32,
        g.audio_len as u32,
    ] {
        buf.write_u32::<LittleEndian>(v)?;
    }
    for (img, aud) in rec.images().iter().zip(rec.audio()) {
        for v in img.data().iter().chain(aud.samples()) {
            buf.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    for l in rec.labels() {
        buf.write_f32::<LittleEndian>(l.arousal as f32)?;
        buf.write_f32::<LittleEndian>(l.valence as f32)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(DataError::Truncated {
                offset: self.pos,
                needed: n,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect())
    }
}

/// Reads a recording, optionally checking its frame geometry.
pub fn read_recording(path: &Path, expected: Option<FrameGeometry>) -> Result<Recording> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
    if magic != AFR_MAGIC {
        return Err(DataError::BadMagic {
            expected: AFR_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != AFR_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let (h, w, c, a) = (
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    if h != w {
        return Err(DataError::DimensionMismatch(format!("non-square image {h}x{w}")));
    }
    let geometry = FrameGeometry {
        image_size: h,
        image_channels: c,
        audio_len: a,
    };
    if let Some(e) = expected {
        if e != geometry {
            return Err(DataError::DimensionMismatch(format!(
                "{}: file has {geometry:?}, expected {e:?}",
                path.display()
            )));
        }
    }
    let mut images = Vec::with_capacity(n);
    let mut audio = Vec::with_capacity(n);
    for _ in 0..n {
        images.push(ImageFrame::new(h, c, r.f32s(geometry.image_len())?)?);
        audio.push(AudioFrame(r.f32s(a)?));
    }
    let labels = r
        .f32s(2 * n)?
        .chunks_exact(2)
        .map(|p| AffectLabel::new(p[0], p[1]))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(DataError::DimensionMismatch(format!(
            "{} trailing bytes after offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Recording::new(id, geometry, images, audio, labels)
}
