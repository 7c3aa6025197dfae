use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{frame_audio, normalize_audio, AffectLabel, FrameGeometry, ImageFrame, Recording, Result};

/// Additive white noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of per-pixel noise in normalised units.
    pub pixel: f64,
    /// Standard deviation of waveform noise relative to peak tone amplitude.
    pub audio: f64,
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig { pixel: 0.0, audio: 0.0 };
    /// Leaves the face and voice branches with comparable single-modality error.
    pub const MODERATE: NoiseConfig = NoiseConfig { pixel: 0.5, audio: 0.6 };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub geometry: FrameGeometry,
    pub noise: NoiseConfig,
    /// Pull of the latent walks towards zero per frame.
    pub reversion: f64,
    /// Innovation standard deviation of the latent walks per frame.
    pub step_sigma: f64,
    /// Centred moving-average width applied to the walks.
    pub smoothing: usize,
    /// Per-recording background, blob height and gain variation.
    pub nuisance: bool,
    /// Base tone frequency in Hz at zero valence.
    pub base_hz: f64,
}

impl GeneratorConfig {
    pub fn new(geometry: FrameGeometry) -> Self {
        Self {
            geometry,
            noise: NoiseConfig::MODERATE,
            reversion: 0.05,
            step_sigma: 0.05,
            smoothing: 5,
            nuisance: true,
            base_hz: 220.0,
        }
    }
}

fn latent_walk(rng: &mut ChaCha8Rng, n: usize, cfg: &GeneratorConfig) -> Vec<f64> {
    let step = Normal::new(0.0, cfg.step_sigma).unwrap_or_else(|_| Normal::new(0.0, 0.0).unwrap());
    let mut x: f64 = rng.gen_range(-0.3..0.3);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            x = (x - cfg.reversion * x + step.sample(rng)).clamp(-1.0, 1.0);
            x
        })
        .collect();
    let half = cfg.smoothing / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            crate::stats::mean(&raw[lo..hi])
        })
        .collect()
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Synthetic recording whose labels are recoverable from both modalities.
///
/// Faces are a Gaussian blob whose horizontal position follows valence and
/// whose brightness follows arousal. Audio is a tone whose loudness follows
/// arousal and whose pitch is `base_hz * 2^valence`. Stored values are
/// rounded through `f32`.
pub fn generate_recording(id: &str, seed: u64, frames: usize, cfg: &GeneratorConfig) -> Result<Recording> {
    let g = cfg.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arousal = latent_walk(&mut rng, frames, cfg);
    let valence = latent_walk(&mut rng, frames, cfg);

    let (background, row_centre, gain) = if cfg.nuisance {
        (
            rng.gen_range(-0.8..-0.4),
            rng.gen_range(0.4..0.6),
            rng.gen_range(0.5..2.0),
        )
    } else {
        (-0.6, 0.5, 1.0)
    };
    let s = g.image_size as f64;
    let width = s / 8.0;
    let tint: Vec<f64> = (0..g.image_channels).map(|c| 1.0 - 0.2 * c as f64).collect();
    let pixel_noise =
        Normal::new(0.0, cfg.noise.pixel.max(0.0)).map_err(|e| super::DataError::Degenerate(e.to_string()))?;
    let mut images = Vec::with_capacity(frames);
    for t in 0..frames {
        let cx = s / 2.0 + valence[t] * s / 2.0;
        let cy = row_centre * s;
        let amp = 0.75 * (arousal[t] + 1.0);
        let mut data = Vec::with_capacity(g.image_len());
        for y in 0..g.image_size {
            for x in 0..g.image_size {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let blob = (-(dx * dx + dy * dy) / (2.0 * width * width)).exp();
                for w in &tint {
                    let v = background + amp * blob * w + pixel_noise.sample(&mut rng);
                    data.push(round_f32(v.clamp(-1.0, 1.0)));
                }
            }
        }
        images.push(ImageFrame::new(g.image_size, g.image_channels, data)?);
    }

    let rate = g.sample_rate();
    let audio_noise =
        Normal::new(0.0, cfg.noise.audio.max(0.0)).map_err(|e| super::DataError::Degenerate(e.to_string()))?;
    let mut phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let mut wave = Vec::with_capacity(frames * g.audio_len);
    for t in 0..frames {
        let amp = (arousal[t] + 1.0) / 2.0;
        let freq = cfg.base_hz * 2f64.powf(valence[t]);
        for _ in 0..g.audio_len {
            wave.push(gain * (amp * phase.sin() + audio_noise.sample(&mut rng)));
            phase = (phase + 2.0 * PI * freq / rate) % (2.0 * PI);
        }
    }
    let audio = frame_audio(&normalize_audio(&wave)?, g.audio_len)?
        .into_iter()
        .map(|mut f| {
            f.0.iter_mut().for_each(|v| *v = round_f32(*v));
            f
        })
        .collect();
    let labels = arousal
        .iter()
        .zip(&valence)
        .map(|(a, v)| AffectLabel::new(round_f32(*a), round_f32(*v)))
        .collect::<Result<Vec<_>>>()?;
    Recording::new(id, g, images, audio, labels)
}

/// Train and validation recordings with disjoint derived seeds.
pub fn generate_split(
    seed: u64,
    train: usize,
    val: usize,
    frames: usize,
    cfg: &GeneratorConfig,
) -> Result<(Vec<Recording>, Vec<Recording>)> {
    let make = |prefix: &str, offset: u64, count: usize| {
        (0..count)
            .map(|i| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(offset + i as u64);
                generate_recording(&format!("{prefix}{i:03}"), s, frames, cfg)
            })
            .collect::<Result<Vec<_>>>()
    };
    Ok((make("train", 0, train)?, make("val", 500_000, val)?))
}
