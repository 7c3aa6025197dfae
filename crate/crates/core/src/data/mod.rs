//! Frame types, preprocessing, windowing, the `AFR1` recording container,
//! manifests, and the deterministic synthetic recording generator.

mod afr;
mod generator;
mod manifest;

pub use afr::{read_recording, write_recording, AFR_MAGIC, AFR_VERSION};
pub use generator::{generate_recording, generate_split, GeneratorConfig, NoiseConfig};
pub use manifest::{load_manifest, read_manifest, write_manifest};

use std::io;

use thiserror::Error;

use crate::stats;

/// Video frame rate implied by 0.04 s frames.
pub const FRAME_RATE_HZ: f64 = 25.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncation: needed {needed} bytes at byte offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("value {value} at index {index} outside [{lo}, {hi}]")]
    OutOfRange { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("{what}: needs at least {min}, got {got}")]
    TooShort { what: &'static str, min: usize, got: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Sizes every frame of a recording shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub image_size: usize,
    pub image_channels: usize,
    /// Samples per 0.04 s audio frame.
    pub audio_len: usize,
}

impl FrameGeometry {
    /// 96x96 RGB faces, 640 samples at 16 kHz.
    pub const FULL: FrameGeometry = FrameGeometry {
        image_size: 96,
        image_channels: 3,
        audio_len: 640,
    };

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.image_channels
    }

    pub fn sample_rate(&self) -> f64 {
        self.audio_len as f64 * FRAME_RATE_HZ
    }

    pub fn of_arch(arch: &crate::model::ArchConfig) -> Self {
        Self {
            image_size: arch.image_size,
            image_channels: arch.image_channels,
            audio_len: arch.audio_len,
        }
    }
}

/// Face crop, `size x size x channels` row-major, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    size: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_range(values: &[f64], lo: f64, hi: f64) -> Result<()> {
    match values.iter().position(|v| !(*v >= lo && *v <= hi)) {
        Some(index) => Err(DataError::OutOfRange {
            index,
            value: values[index],
            lo,
            hi,
        }),
        None => Ok(()),
    }
}

impl ImageFrame {
    pub fn new(size: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size * channels {
            return Err(DataError::DimensionMismatch(format!(
                "image of {} values is not {size}x{size}x{channels}",
                data.len()
            )));
        }
        check_range(&data, -1.0, 1.0)?;
        Ok(Self { size, channels, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// One 0.04 s slice of the normalised waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFrame(pub Vec<f64>);

impl AudioFrame {
    pub fn samples(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffectLabel {
    pub arousal: f64,
    pub valence: f64,
}

impl AffectLabel {
    pub fn new(arousal: f64, valence: f64) -> Result<Self> {
        check_range(&[arousal, valence], -1.0, 1.0)?;
        Ok(Self { arousal, valence })
    }
}

/// Aligned face, audio and label streams of one session.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    geometry: FrameGeometry,
    images: Vec<ImageFrame>,
    audio: Vec<AudioFrame>,
    labels: Vec<AffectLabel>,
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        geometry: FrameGeometry,
        images: Vec<ImageFrame>,
        audio: Vec<AudioFrame>,
        labels: Vec<AffectLabel>,
    ) -> Result<Self> {
        if images.len() != audio.len() || images.len() != labels.len() {
            return Err(DataError::DimensionMismatch(format!(
                "{} images, {} audio frames, {} labels",
                images.len(),
                audio.len(),
                labels.len()
            )));
        }
        if let Some(i) = images
            .iter()
            .position(|f| f.size != geometry.image_size || f.channels != geometry.image_channels)
        {
            return Err(DataError::DimensionMismatch(format!(
                "image {i} does not match {geometry:?}"
            )));
        }
        if let Some(i) = audio.iter().position(|f| f.0.len() != geometry.audio_len) {
            return Err(DataError::DimensionMismatch(format!(
                "audio frame {i} has {} samples, expected {}",
                audio[i].0.len(),
                geometry.audio_len
            )));
        }
        Ok(Self {
            id: id.into(),
            geometry,
            images,
            audio,
            labels,
        })
    }

    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &[ImageFrame] {
        &self.images
    }

    pub fn audio(&self) -> &[AudioFrame] {
        &self.audio
    }

    pub fn labels(&self) -> &[AffectLabel] {
        &self.labels
    }
}

/// Frames `t - k ..= t` of a recording and the label at `t`.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    rec: &'a Recording,
    pub t: usize,
    pub k: usize,
}

impl<'a> Window<'a> {
    pub fn start(&self) -> usize {
        self.t - self.k
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start()..=self.t
    }

    pub fn images(&self) -> &'a [ImageFrame] {
        &self.rec.images[self.indices()]
    }

    pub fn audio(&self) -> &'a [AudioFrame] {
        &self.rec.audio[self.indices()]
    }

    pub fn label(&self) -> AffectLabel {
        self.rec.labels[self.t]
    }
}

/// Every stride-1 window of `k + 1` frames: `t = k ..= N - 1`.
pub fn window_stream(rec: &Recording, k: usize) -> Result<impl Iterator<Item = Window<'_>>> {
    if rec.len() < k + 1 {
        return Err(DataError::TooShort {
            what: "recording frames",
            min: k + 1,
            got: rec.len(),
        });
    }
    Ok((k..rec.len()).map(move |t| Window { rec, t, k }))
}

/// Input range of raw pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelScale {
    /// `[0, 255]`
    Byte,
    /// `[0, 1]`
    Unit,
}

impl PixelScale {
    fn max(self) -> f64 {
        match self {
            PixelScale::Byte => 255.0,
            PixelScale::Unit => 1.0,
        }
    }
}

/// Affine map of raw intensities onto `[-1, 1]`: `v -> 2 v / max - 1`.
pub fn normalize_image(raw: &[f64], size: usize, channels: usize, scale: PixelScale) -> Result<ImageFrame> {
    check_range(raw, 0.0, scale.max())?;
    let data = raw.iter().map(|v| 2.0 * (v / scale.max()) - 1.0).collect();
    ImageFrame::new(size, channels, data)
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(frame: &ImageFrame, scale: PixelScale) -> Vec<f64> {
    frame.data.iter().map(|v| (v + 1.0) / 2.0 * scale.max()).collect()
}

/// Zero mean, unit (population) variance over the whole waveform.
pub fn normalize_audio(waveform: &[f64]) -> Result<Vec<f64>> {
    if waveform.len() < 2 {
        return Err(DataError::TooShort {
            what: "waveform samples",
            min: 2,
            got: waveform.len(),
        });
    }
    let mu = stats::mean(waveform);
    let sd = stats::variance(waveform).sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err(DataError::Degenerate("constant waveform".into()));
    }
    Ok(waveform.iter().map(|x| (x - mu) / sd).collect())
}

/// Non-overlapping frames of `frame_len` samples; a trailing remainder is dropped.
pub fn frame_audio(waveform: &[f64], frame_len: usize) -> Result<Vec<AudioFrame>> {
    if frame_len == 0 || waveform.len() < frame_len {
        return Err(DataError::TooShort {
            what: "waveform samples",
            min: frame_len.max(1),
            got: waveform.len(),
        });
    }
    Ok(waveform
        .chunks_exact(frame_len)
        .map(|c| AudioFrame(c.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_normalisation_endpoints() {
        let f = normalize_image(&[0.0, 255.0, 127.5], 1, 3, PixelScale::Byte).unwrap();
        assert_eq!(f.data(), &[-1.0, 1.0, 0.0]);
        let u = normalize_image(&[0.0, 1.0, 0.5], 1, 3, PixelScale::Unit).unwrap();
        assert_eq!(u.data(), &[-1.0, 1.0, 0.0]);
        assert!(matches!(
            normalize_image(&[0.0, 256.0, 1.0], 1, 3, PixelScale::Byte),
            Err(DataError::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn image_normalisation_inverts() {
        let raw: Vec<f64> = (0..12).map(|i| (i as f64 * 21.7) % 255.0).collect();
        let f = normalize_image(&raw, 2, 3, PixelScale::Byte).unwrap();
        for (a, b) in denormalize_image(&f, PixelScale::Byte).iter().zip(&raw) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn audio_normalisation() {
        assert_eq!(normalize_audio(&[0.0, 2.0]).unwrap(), vec![-1.0, 1.0]);
        let x = [1.0, -1.0, 1.0, -1.0];
        let y = normalize_audio(&x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(normalize_audio(&[3.0; 5]), Err(DataError::Degenerate(_))));
        assert!(normalize_audio(&[1.0]).is_err());
    }

    #[test]
    fn audio_framing() {
        let w: Vec<f64> = (0..16000).map(f64::from).collect();
        assert_eq!(frame_audio(&w, 640).unwrap().len(), 25);
        let one = frame_audio(&w[..640], 640).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].samples(), &w[..640]);
        assert_eq!(frame_audio(&w[..3200], 640).unwrap().len(), 5);
        assert_eq!(frame_audio(&w[..700], 640).unwrap().len(), 1);
        assert!(frame_audio(&w[..639], 640).is_err());
    }

    #[test]
    fn label_bounds() {
        assert!(AffectLabel::new(1.0, -1.0).is_ok());
        assert!(AffectLabel::new(1.01, 0.0).is_err());
        assert!(AffectLabel::new(0.0, f64::NAN).is_err());
    }

    fn blank(n: usize) -> Recording {
        let g = FrameGeometry {
            image_size: 2,
            image_channels: 1,
            audio_len: 3,
        };
        Recording::new(
            "r",
            g,
            vec![ImageFrame::new(2, 1, vec![0.0; 4]).unwrap(); n],
            vec![AudioFrame(vec![0.0; 3]); n],
            (0..n)
                .map(|i| AffectLabel::new(i as f64 / n as f64, 0.0).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn windowing_counts_and_overlap() {
        let r = blank(5);
        let w: Vec<_> = window_stream(&r, 4).unwrap().collect();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].indices(), 0..=4);
        let r = blank(9);
        let w: Vec<_> = window_stream(&r, 4).unwrap().collect();
        assert_eq!(w.len(), 5);
        assert_eq!(w[1].start(), 1);
        assert_eq!(w[1].label(), r.labels()[5]);
        assert!(window_stream(&blank(4), 4).is_err());
    }

    #[test]
    fn recording_rejects_misaligned_streams() {
        let r = blank(3);
        let err = Recording::new(
            "x",
            r.geometry(),
            r.images().to_vec(),
            r.audio()[..2].to_vec(),
            r.labels().to_vec(),
        );
        assert!(matches!(err, Err(DataError::DimensionMismatch(_))));
    }
}
