use super::arch::ArchConfig;
use super::params::{BlockIdx, ConvIdx, DenseIdx, ModelParams};
use super::ModelError;
use crate::nn;
use crate::tensor::{Tape, Tensor, Var};

/// A minibatch of unique frames plus the windows that index into them.
///
/// `images` is `[F, S, S, C]`, `audio` is `[F, L, 1]`; each window lists
/// `arch.window` frame indices in temporal order, the last being the frame
/// whose label is predicted.
#[derive(Debug, Clone)]
pub struct FrameBatch {
    pub images: Option<Tensor>,
    pub audio: Option<Tensor>,
    pub windows: Vec<Vec<usize>>,
}

/// Output shape of one layer, batch axis stripped.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: String,
    pub shape: Vec<usize>,
}

/// Tape handles of everything a forward pass produces.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub latent2d: Option<Var>,
    pub latent1d: Option<Var>,
    pub fused: Var,
    pub recon_image: Option<Var>,
    pub recon_audio: Option<Var>,
    /// `[B, 2]`: arousal, valence.
    pub prediction: Var,
}

/// Concrete values of a forward pass over one window, reported for its
/// final frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutputs {
    pub latent2d: Option<Vec<f64>>,
    pub latent1d: Option<Vec<f64>>,
    pub fused: Vec<f64>,
    pub recon_image: Option<Tensor>,
    pub recon_audio: Option<Tensor>,
    pub arousal: f64,
    pub valence: f64,
}

/// A model bound onto a tape.
pub struct Net<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
    trace: Option<Vec<LayerTrace>>,
}

impl<'p> Net<'p> {
    pub fn bind(params: &'p ModelParams, tape: &mut Tape, trainable: bool) -> Self {
        Self {
            params,
            vars: params.bind(tape, trainable),
            trace: None,
        }
    }

    /// Uses tape handles already holding the parameters (layout order).
    pub fn from_vars(params: &'p ModelParams, vars: Vec<Var>) -> Result<Self, ModelError> {
        if vars.len() != params.specs().len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} parameter handles, got {}",
                params.specs().len(),
                vars.len()
            )));
        }
        Ok(Self {
            params,
            vars,
            trace: None,
        })
    }

    /// Records every layer's output shape during the following calls.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn take_trace(&mut self) -> Vec<LayerTrace> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Tape handle of parameter `i` (layout order).
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    fn record(&mut self, tape: &Tape, layer: &str, v: Var) {
        if let Some(t) = &mut self.trace {
            t.push(LayerTrace {
                layer: layer.to_string(),
                shape: tape.value(v).shape()[1..].to_vec(),
            });
        }
    }

    fn slope(&self) -> f64 {
        self.params.arch().leaky_slope
    }

    fn dense(&mut self, tape: &mut Tape, x: Var, d: DenseIdx, name: &str, act: bool) -> Result<Var, ModelError> {
        let y = nn::fully_connected(tape, x, self.vars[d.w], self.vars[d.b])?;
        let y = if act { nn::leaky_relu(tape, y, self.slope()) } else { y };
        self.record(tape, name, y);
        Ok(y)
    }

    fn conv(&mut self, tape: &mut Tape, x: Var, c: &ConvIdx, transposed: bool, one_d: bool) -> Result<Var, ModelError> {
        let (w, b) = (self.vars[c.w], Some(self.vars[c.b]));
        Ok(match (transposed, one_d) {
            (false, false) => nn::conv2d(tape, x, w, b, &c.spec)?,
            (true, false) => nn::deconv2d(tape, x, w, b, &c.spec)?,
            (false, true) => nn::conv1d(tape, x, w, b, &c.spec)?,
            (true, true) => nn::deconv1d(tape, x, w, b, &c.spec)?,
        })
    }

    /// Three conv rows plus a 1x1 projection shortcut, summed before the
    /// final activation. Decoder shortcuts upsample before projecting.
    fn res_block(
        &mut self,
        tape: &mut Tape,
        x: Var,
        blk: &BlockIdx,
        transposed: bool,
        name: &str,
    ) -> Result<Var, ModelError> {
        let slope = self.slope();
        let mut h = x;
        let last = blk.rows.len() - 1;
        for (r, row) in blk.rows.iter().enumerate() {
            h = self.conv(tape, h, row, transposed, false)?;
            if r < last {
                h = nn::leaky_relu(tape, h, slope);
                self.record(tape, &format!("{name}.row{r}"), h);
            }
        }
        let sc_in = if transposed && blk.stride > 1 {
            tape.upsample2d(x, blk.stride)?
        } else {
            x
        };
        let sc = self.conv(tape, sc_in, &blk.shortcut, false, false)?;
        let sum = tape.add(h, sc)?;
        let out = nn::leaky_relu(tape, sum, slope);
        self.record(tape, &format!("{name}.row{last}"), out);
        Ok(out)
    }

    /// Face encoder: `[F, S, S, C]` -> `[F, latent2d]`.
    pub fn encode2d(&mut self, tape: &mut Tape, images: Var) -> Result<Var, ModelError> {
        let arch = self.params.arch();
        let idx = self
            .params
            .layout
            .enc2d
            .clone()
            .ok_or(ModelError::Disabled("face encoder"))?;
        let want = [arch.image_size, arch.image_size, arch.image_channels];
        let got = tape.value(images).shape().to_vec();
        if got.len() != 4 || got[1..] != want {
            return Err(ModelError::InputShape {
                what: "image batch",
                expected: want.to_vec(),
                got,
            });
        }
        let frames = got[0];
        let flat_len = arch.encoder2d_flat();
        let mut h = images;
        for (i, blk) in idx.blocks.iter().enumerate() {
            h = self.res_block(tape, h, blk, false, &format!("enc2d.block{i}"))?;
        }
        let flat = tape.reshape(h, vec![frames, flat_len])?;
        self.dense(tape, flat, idx.fc, "enc2d.fc", true)
    }

    /// Face decoder: `[F, latent2d]` -> `[F, S, S, C]`.
    pub fn decode2d(&mut self, tape: &mut Tape, latent: Var) -> Result<Var, ModelError> {
        let arch = self.params.arch();
        let idx = self
            .params
            .layout
            .dec2d
            .clone()
            .ok_or(ModelError::Disabled("face decoder"))?;
        let frames = tape.value(latent).shape()[0];
        let (grid, ch) = (arch.encoder2d_grid(), arch.encoder2d_channels());
        let h = self.dense(tape, latent, idx.fc, "dec2d.fc", true)?;
        let mut h = tape.reshape(h, vec![frames, grid, grid, ch])?;
        self.record(tape, "dec2d.reshape", h);
        for (i, blk) in idx.blocks.iter().enumerate() {
            h = self.res_block(tape, h, blk, true, &format!("dec2d.block{i}"))?;
        }
        Ok(h)
    }

    /// Audio encoder: `[F, L, 1]` -> `[F, tap]` (flattened pooled map).
    pub fn encode1d(&mut self, tape: &mut Tape, audio: Var) -> Result<Var, ModelError> {
        let arch = self.params.arch().clone();
        let idx = self
            .params
            .layout
            .enc1d
            .clone()
            .ok_or(ModelError::Disabled("audio encoder"))?;
        let got = tape.value(audio).shape().to_vec();
        if got.len() != 3 || got[1..] != [arch.audio_len, 1] {
            return Err(ModelError::InputShape {
                what: "audio batch",
                expected: vec![arch.audio_len, 1],
                got,
            });
        }
        let frames = got[0];
        let mut h = audio;
        for (i, (conv, pool)) in idx.iter().zip(arch.audio_pool).enumerate() {
            h = self.conv(tape, h, conv, false, true)?;
            h = nn::leaky_relu(tape, h, arch.leaky_slope);
            self.record(tape, &format!("enc1d.conv{i}"), h);
            h = nn::maxpool1d(tape, h, pool, pool)?;
            self.record(tape, &format!("enc1d.pool{i}"), h);
        }
        let flat = tape.reshape(h, vec![frames, arch.audio_tap()])?;
        self.record(tape, "enc1d.flatten", flat);
        Ok(flat)
    }

    /// Audio reconstruction path: bottleneck FCs, deconv, upsample, deconv.
    pub fn decode1d(&mut self, tape: &mut Tape, latent1d: Var) -> Result<Var, ModelError> {
        let arch = self.params.arch().clone();
        let idx = self
            .params
            .layout
            .ae1d
            .clone()
            .ok_or(ModelError::Disabled("audio decoder"))?;
        let frames = tape.value(latent1d).shape()[0];
        let h = self.dense(tape, latent1d, idx.fc_down, "enc1d.fc", true)?;
        let h = self.dense(tape, h, idx.fc_up, "dec1d.fc", true)?;
        let h = tape.reshape(
            h,
            vec![frames, arch.audio_len / arch.audio_pool[0], arch.audio_decoder_channels],
        )?;
        self.record(tape, "dec1d.reshape", h);
        let h = self.conv(tape, h, &idx.deconv[0], true, true)?;
        let h = nn::leaky_relu(tape, h, arch.leaky_slope);
        self.record(tape, "dec1d.deconv0", h);
        let h = nn::upsample1d(tape, h, arch.audio_pool[0])?;
        self.record(tape, "dec1d.upsample", h);
        let h = self.conv(tape, h, &idx.deconv[1], true, true)?;
        self.record(tape, "dec1d.deconv1", h);
        Ok(h)
    }

    /// Stacked LSTM over each window of fused frame vectors, zero initial
    /// state, linear head on the last top-layer hidden state. `[B, 2]`.
    pub fn predict(&mut self, tape: &mut Tape, fused: Var, windows: &[Vec<usize>]) -> Result<Var, ModelError> {
        let arch = self.params.arch().clone();
        if windows.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(w) = windows.iter().find(|w| w.len() != arch.window) {
            return Err(ModelError::WindowLength {
                expected: arch.window,
                got: w.len(),
            });
        }
        let batch = windows.len();
        let hidden = arch.lstm_hidden;
        let layers: Vec<nn::LstmLayerVars> = self
            .params
            .layout
            .lstm
            .iter()
            .map(|l| nn::LstmLayerVars {
                input_size: l.input,
                hidden_size: l.hidden,
                weights: l.w.map(|i| self.vars[i]),
                biases: l.b.map(|i| self.vars[i]),
            })
            .collect();
        let head = self.params.layout.head;
        let zeros = tape.constant(Tensor::zeros(vec![batch, hidden]));
        let mut h = vec![zeros; layers.len()];
        let mut c = vec![zeros; layers.len()];
        let mut prev_pred = tape.constant(Tensor::zeros(vec![batch, 2]));
        for step in 0..arch.window {
            let rows: Vec<usize> = windows.iter().map(|w| w[step]).collect();
            let mut x = tape.gather_rows(fused, &rows)?;
            if arch.feedback_predictions {
                x = tape.concat_cols(x, prev_pred)?;
            }
            for (l, layer) in layers.iter().enumerate() {
                let (hn, cn) = nn::lstm_cell(tape, x, h[l], c[l], layer)?;
                h[l] = hn;
                c[l] = cn;
                x = hn;
            }
            if arch.feedback_predictions && step + 1 < arch.window {
                prev_pred = tape.linear(x, self.vars[head.w], Some(self.vars[head.b]))?;
            }
        }
        self.record(tape, "lstm", h[layers.len() - 1]);
        self.dense(tape, h[layers.len() - 1], head, "head", false)
    }

    /// Full forward pass over a batch.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        batch: &FrameBatch,
        reconstruct: bool,
    ) -> Result<ForwardVars, ModelError> {
        let arch = self.params.arch().clone();
        let reconstruct = reconstruct && arch.autoencoder;
        let (mut latent2d, mut latent1d, mut recon_image, mut recon_audio) = (None, None, None, None);
        if arch.visual {
            let img = batch.images.clone().ok_or(ModelError::MissingModality("images"))?;
            let x = tape.constant(img);
            let z = self.encode2d(tape, x)?;
            if reconstruct {
                recon_image = Some(self.decode2d(tape, z)?);
            }
            latent2d = Some(z);
        }
        if arch.audio {
            let mut aud = batch.audio.clone().ok_or(ModelError::MissingModality("audio"))?;
            if aud.shape().len() == 2 {
                let s = aud.shape().to_vec();
                aud = aud.reshape(vec![s[0], s[1], 1])?;
            }
            let x = tape.constant(aud);
            let z = self.encode1d(tape, x)?;
            if reconstruct {
                recon_audio = Some(self.decode1d(tape, z)?);
            }
            latent1d = Some(z);
        }
        let fused = fuse(tape, latent2d, latent1d)?;
        self.record(tape, "fusion", fused);
        let prediction = self.predict(tape, fused, &batch.windows)?;
        Ok(ForwardVars {
            latent2d,
            latent1d,
            fused,
            recon_image,
            recon_audio,
            prediction,
        })
    }
}

/// Per-layer output shapes of a full forward and reconstruction pass over
/// `batch`, with all weights zero.
pub fn trace_shapes(arch: &ArchConfig, batch: &FrameBatch) -> Result<Vec<LayerTrace>, ModelError> {
    let skeleton = ModelParams::skeleton(arch.clone())?;
    let mut tape = Tape::new();
    let vars = skeleton
        .specs()
        .iter()
        .map(|s| tape.constant(Tensor::zeros(s.shape.clone())))
        .collect();
    let mut net = Net {
        params: &skeleton,
        vars,
        trace: Some(Vec::new()),
    };
    net.forward(&mut tape, batch, true)?;
    Ok(net.take_trace())
}

/// Concatenates face then audio latents; a missing side passes the other
/// through unchanged.
pub fn fuse(tape: &mut Tape, latent2d: Option<Var>, latent1d: Option<Var>) -> Result<Var, ModelError> {
    match (latent2d, latent1d) {
        (Some(a), Some(b)) => Ok(tape.concat_cols(a, b)?),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(ModelError::MissingModality("both")),
    }
}

impl ModelParams {
    /// Runs one window of consecutive frames (oldest first) without
    /// recording gradients.
    pub fn forward_window(&self, images: &[Tensor], audio: &[Tensor]) -> Result<ForwardOutputs, ModelError> {
        let arch = self.arch();
        let n = images.len().max(audio.len());
        let stack = |frames: &[Tensor], shape: Vec<usize>| -> Result<Tensor, ModelError> {
            let mut data = Vec::with_capacity(shape.iter().product());
            for f in frames {
                data.extend_from_slice(f.data());
            }
            Ok(Tensor::new(shape, data)?)
        };
        let batch = FrameBatch {
            images: if arch.visual {
                Some(stack(
                    images,
                    vec![n, arch.image_size, arch.image_size, arch.image_channels],
                )?)
            } else {
                None
            },
            audio: if arch.audio {
                Some(stack(audio, vec![n, arch.audio_len, 1])?)
            } else {
                None
            },
            windows: vec![(0..n).collect()],
        };
        let mut tape = Tape::new();
        let mut net = Net::bind(self, &mut tape, false);
        let out = net.forward(&mut tape, &batch, true)?;
        let last_row = |v: Var| {
            let t = tape.value(v);
            let w = t.numel() / n;
            t.data()[(n - 1) * w..].to_vec()
        };
        let last_frame = |v: Var| {
            let t = tape.value(v);
            let mut shape = t.shape().to_vec();
            shape[0] = 1;
            let w = t.numel() / n;
            Tensor::new(shape, t.data()[(n - 1) * w..].to_vec()).expect("frame slice")
        };
        let pred = tape.value(out.prediction).data().to_vec();
        Ok(ForwardOutputs {
            latent2d: out.latent2d.map(last_row),
            latent1d: out.latent1d.map(last_row),
            fused: last_row(out.fused),
            recon_image: out.recon_image.map(last_frame),
            recon_audio: out.recon_audio.map(last_frame),
            arousal: pred[0],
            valence: pred[1],
        })
    }
}
