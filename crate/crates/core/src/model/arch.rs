use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// One conv layer: `[kernel, stride, out channels]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvRow {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

pub const fn row(kernel: usize, stride: usize, out_channels: usize) -> ConvRow {
    ConvRow {
        kernel,
        stride,
        out_channels,
    }
}

impl ConvRow {
    fn valid(&self) -> bool {
        self.kernel > 0 && self.stride > 0 && self.out_channels > 0
    }
}

/// Named architecture sizes. `Full` is the full-size network; `Desk` keeps
/// the layer structure with narrower latents, 16x16 faces and 160-sample
/// audio frames so it trains on one CPU core; `Tiny` exists for exhaustive
/// finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    Full,
    Desk,
    Tiny,
}

impl fmt::Display for ArchPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchPreset::Full => "full",
            ArchPreset::Desk => "desk",
            ArchPreset::Tiny => "tiny",
        })
    }
}

impl FromStr for ArchPreset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(ArchPreset::Full),
            "desk" => Ok(ArchPreset::Desk),
            "tiny" => Ok(ArchPreset::Tiny),
            other => Err(ModelError::Config(format!("unknown architecture preset `{other}`"))),
        }
    }
}

/// Model variants used by the ablation runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both branches, both decoders.
    Full,
    /// Face branch only (fused vector = face latent).
    VisualOnly,
    /// Audio branch only.
    AudioOnly,
    /// Both encoders, no decoders and no reconstruction losses.
    NoAutoencoder,
    /// Full model with a different LSTM width.
    Hidden(usize),
}

pub const HIDDEN_SWEEP: [usize; 5] = [32, 64, 128, 256, 512];

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::VisualOnly => f.write_str("visual-only"),
            Variant::AudioOnly => f.write_str("audio-only"),
            Variant::NoAutoencoder => f.write_str("no-autoencoder"),
            Variant::Hidden(h) => write!(f, "hidden-{h}"),
        }
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let v = match s {
            "full" => Variant::Full,
            "visual-only" => Variant::VisualOnly,
            "audio-only" => Variant::AudioOnly,
            "no-autoencoder" => Variant::NoAutoencoder,
            other => match other.strip_prefix("hidden-").map(str::parse::<usize>) {
                Some(Ok(h)) if HIDDEN_SWEEP.contains(&h) => Variant::Hidden(h),
                _ => return Err(ModelError::Config(format!("unknown ablation `{s}`"))),
            },
        };
        Ok(v)
    }
}

/// Every size the network is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub image_size: usize,
    pub image_channels: usize,
    /// Residual blocks of the face encoder, three conv rows each.
    pub encoder2d: Vec<[ConvRow; 3]>,
    /// Residual blocks of the face decoder, three deconv rows each.
    pub decoder2d: Vec<[ConvRow; 3]>,
    pub latent2d: usize,
    pub audio_len: usize,
    pub audio_conv: [ConvRow; 2],
    /// Max-pool window (= stride) after each audio conv.
    pub audio_pool: [usize; 2],
    pub audio_bottleneck: usize,
    /// Channels of the reshaped audio decoder input.
    pub audio_decoder_channels: usize,
    pub audio_deconv: [ConvRow; 2],
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Frames per prediction window (`k + 1`).
    pub window: usize,
    pub visual: bool,
    pub audio: bool,
    pub autoencoder: bool,
    /// Append the previous step's prediction to each LSTM input.
    pub feedback_predictions: bool,
    pub leaky_slope: f64,
}

impl ArchConfig {
    pub fn full() -> Self {
        Self {
            image_size: 96,
            image_channels: 3,
            encoder2d: vec![
                [row(1, 1, 8), row(3, 2, 8), row(1, 1, 16)],
                [row(1, 1, 16), row(3, 2, 16), row(1, 1, 32)],
            ],
            decoder2d: vec![
                [row(1, 1, 16), row(3, 2, 16), row(1, 1, 16)],
                [row(1, 1, 8), row(3, 2, 8), row(1, 1, 3)],
            ],
            latent2d: 2048,
            audio_len: 640,
            audio_conv: [row(20, 1, 40), row(40, 1, 40)],
            audio_pool: [2, 10],
            audio_bottleneck: 640,
            audio_decoder_channels: 4,
            audio_deconv: [row(20, 1, 40), row(40, 1, 1)],
            lstm_hidden: 512,
            lstm_layers: 2,
            window: 5,
            visual: true,
            audio: true,
            autoencoder: true,
            feedback_predictions: false,
            leaky_slope: crate::nn::LEAKY_SLOPE,
        }
    }

    pub fn desk() -> Self {
        Self {
            image_size: 16,
            latent2d: 64,
            audio_len: 160,
            audio_conv: [row(20, 1, 10), row(10, 1, 10)],
            audio_bottleneck: 40,
            audio_decoder_channels: 1,
            audio_deconv: [row(20, 1, 10), row(10, 1, 1)],
            lstm_hidden: 32,
            ..Self::full()
        }
    }

    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            image_channels: 2,
            encoder2d: vec![
                [row(1, 1, 2), row(3, 2, 2), row(1, 1, 3)],
                [row(1, 1, 3), row(3, 2, 3), row(1, 1, 4)],
            ],
            decoder2d: vec![
                [row(1, 1, 3), row(3, 2, 3), row(1, 1, 3)],
                [row(1, 1, 2), row(3, 2, 2), row(1, 1, 2)],
            ],
            latent2d: 3,
            audio_len: 16,
            audio_conv: [row(3, 1, 4), row(3, 1, 4)],
            audio_pool: [2, 4],
            audio_bottleneck: 4,
            audio_decoder_channels: 1,
            audio_deconv: [row(3, 1, 3), row(3, 1, 1)],
            lstm_hidden: 3,
            lstm_layers: 2,
            ..Self::full()
        }
    }

    pub fn preset(p: ArchPreset) -> Self {
        match p {
            ArchPreset::Full => Self::full(),
            ArchPreset::Desk => Self::desk(),
            ArchPreset::Tiny => Self::tiny(),
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        match variant {
            Variant::Full => {}
            Variant::VisualOnly => self.audio = false,
            Variant::AudioOnly => self.visual = false,
            Variant::NoAutoencoder => self.autoencoder = false,
            Variant::Hidden(h) => self.lstm_hidden = h,
        }
        self
    }

    pub fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.image_channels
    }

    fn encoder2d_stride(&self) -> usize {
        self.encoder2d.iter().flat_map(|b| b.iter()).map(|r| r.stride).product()
    }

    /// Spatial side of the last encoder feature map.
    pub fn encoder2d_grid(&self) -> usize {
        self.image_size / self.encoder2d_stride()
    }

    pub fn encoder2d_channels(&self) -> usize {
        self.encoder2d.last().map_or(self.image_channels, |b| b[2].out_channels)
    }

    /// Length of the flattened face feature map feeding the latent FC.
    pub fn encoder2d_flat(&self) -> usize {
        self.encoder2d_grid().pow(2) * self.encoder2d_channels()
    }

    /// Length of the flattened pooled audio map: the audio latent that is fused.
    pub fn audio_tap(&self) -> usize {
        self.audio_len / (self.audio_pool[0] * self.audio_pool[1]) * self.audio_conv[1].out_channels
    }

    pub fn fused_len(&self) -> usize {
        let v = if self.visual { self.latent2d } else { 0 };
        let a = if self.audio { self.audio_tap() } else { 0 };
        v + a
    }

    pub fn lstm_input(&self) -> usize {
        self.fused_len() + if self.feedback_predictions { 2 } else { 0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if !self.visual && !self.audio {
            return err("at least one modality must be enabled".into());
        }
        if self.window == 0 || self.lstm_layers == 0 || self.lstm_hidden == 0 {
            return err("window, lstm layers and lstm hidden size must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return err(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        if self.visual {
            if self.image_size == 0 || self.image_channels == 0 || self.latent2d == 0 {
                return err("image size, channels and latent size must be positive".into());
            }
            let rows = || self.encoder2d.iter().chain(&self.decoder2d).flat_map(|b| b.iter());
            if self.encoder2d.is_empty() || rows().any(|r| !r.valid()) {
                return err("face encoder needs at least one block of positive rows".into());
            }
            let s = self.encoder2d_stride();
            if !self.image_size.is_multiple_of(s) {
                return err(format!(
                    "image size {} not divisible by encoder stride {s}",
                    self.image_size
                ));
            }
            if self.autoencoder {
                let ds: usize = self.decoder2d.iter().flat_map(|b| b.iter()).map(|r| r.stride).product();
                if ds != s {
                    return err(format!("decoder stride {ds} does not undo encoder stride {s}"));
                }
                if self.decoder2d.last().map(|b| b[2].out_channels) != Some(self.image_channels) {
                    return err("face decoder must end with the image channel count".into());
                }
            }
        }
        if self.audio {
            let rows = self.audio_conv.iter().chain(&self.audio_deconv);
            if rows.clone().any(|r| !r.valid() || r.stride != 1) {
                return err("audio conv rows need positive sizes and stride 1".into());
            }
            let [p1, p2] = self.audio_pool;
            if p1 == 0 || p2 == 0 || !self.audio_len.is_multiple_of(p1 * p2) {
                return err(format!(
                    "audio length {} not divisible by pooling {p1}x{p2}",
                    self.audio_len
                ));
            }
            if self.autoencoder {
                if self.audio_bottleneck == 0 || self.audio_decoder_channels == 0 {
                    return err("audio bottleneck and decoder channels must be positive".into());
                }
                if self.audio_tap() != self.audio_len / p1 * self.audio_decoder_channels {
                    return err(format!(
                        "audio latent {} cannot be reshaped to {} x {}",
                        self.audio_tap(),
                        self.audio_len / p1,
                        self.audio_decoder_channels
                    ));
                }
                if self.audio_deconv[1].out_channels != 1 {
                    return err("audio decoder must end with one channel".into());
                }
            }
        }
        Ok(())
    }
}
