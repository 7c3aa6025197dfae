use std::fmt;

use super::arch::{ArchConfig, ConvRow};
use super::ModelError;
use crate::nn::{init_tensor, ConvSpec, ParamInit, ParamRng};
use crate::tensor::{Tape, Tensor, Var};

/// Sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder2d,
    Decoder2d,
    Encoder1d,
    Decoder1d,
    Lstm,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Encoder2d,
        ParamGroup::Decoder2d,
        ParamGroup::Encoder1d,
        ParamGroup::Decoder1d,
        ParamGroup::Lstm,
        ParamGroup::Head,
    ];

    pub fn is_decoder(self) -> bool {
        matches!(self, ParamGroup::Decoder2d | ParamGroup::Decoder1d)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamGroup::Encoder2d => "enc2d",
            ParamGroup::Decoder2d => "dec2d",
            ParamGroup::Encoder1d => "enc1d",
            ParamGroup::Decoder1d => "dec1d",
            ParamGroup::Lstm => "lstm",
            ParamGroup::Head => "head",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub spec: ConvSpec,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockIdx {
    pub rows: Vec<ConvIdx>,
    pub shortcut: ConvIdx,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LstmIdx {
    pub w: [usize; 4],
    pub b: [usize; 4],
    pub input: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Enc2dIdx {
    pub blocks: Vec<BlockIdx>,
    pub fc: DenseIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Dec2dIdx {
    pub fc: DenseIdx,
    pub blocks: Vec<BlockIdx>,
}

#[derive(Debug, Clone)]
pub(crate) struct Ae1dIdx {
    pub fc_down: DenseIdx,
    pub fc_up: DenseIdx,
    pub deconv: [ConvIdx; 2],
}

/// Where every parameter of an architecture lives in the flat list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub enc2d: Option<Enc2dIdx>,
    pub dec2d: Option<Dec2dIdx>,
    pub enc1d: Option<[ConvIdx; 2]>,
    pub ae1d: Option<Ae1dIdx>,
    pub lstm: Vec<LstmIdx>,
    pub head: DenseIdx,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, init: ParamInit) -> usize {
        self.specs.push(ParamSpec {
            name,
            group,
            shape,
            init,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, group: ParamGroup, spec: ConvSpec, shape: Vec<usize>) -> ConvIdx {
        let w = self.add(
            format!("{name}.weight"),
            group,
            shape,
            ParamInit::FanInUniform { fan_in: spec.fan_in() },
        );
        let b = self.add(format!("{name}.bias"), group, vec![spec.out_channels], ParamInit::Zeros);
        ConvIdx { w, b, spec }
    }

    fn dense(&mut self, name: &str, group: ParamGroup, n_in: usize, n_out: usize) -> DenseIdx {
        let w = self.add(
            format!("{name}.weight"),
            group,
            vec![n_out, n_in],
            ParamInit::FanInUniform { fan_in: n_in },
        );
        let b = self.add(format!("{name}.bias"), group, vec![n_out], ParamInit::Zeros);
        DenseIdx { w, b }
    }

    fn block(
        &mut self,
        name: &str,
        group: ParamGroup,
        rows: &[ConvRow; 3],
        mut c: usize,
        transposed: bool,
    ) -> BlockIdx {
        let c_in = c;
        let mut idx = Vec::with_capacity(3);
        for (r, row) in rows.iter().enumerate() {
            let kind = if transposed { "deconv" } else { "conv" };
            let spec = ConvSpec::square(row.kernel, row.stride, c, row.out_channels);
            let shape = if transposed {
                spec.deconv2d_weight_shape()
            } else {
                spec.conv2d_weight_shape()
            };
            idx.push(self.conv(&format!("{name}.{kind}{r}"), group, spec, shape));
            c = row.out_channels;
        }
        let stride: usize = rows.iter().map(|r| r.stride).product();
        // Decoder shortcuts upsample first, so their 1x1 conv has stride 1.
        let sc_stride = if transposed { 1 } else { stride };
        let spec = ConvSpec::square(1, sc_stride, c_in, c);
        let shortcut = self.conv(&format!("{name}.shortcut"), group, spec, spec.conv2d_weight_shape());
        BlockIdx {
            rows: idx,
            shortcut,
            stride,
        }
    }

    fn lstm(&mut self, layer: usize, input: usize, hidden: usize) -> LstmIdx {
        let mut w = [0; 4];
        let mut b = [0; 4];
        for (g, gate) in crate::nn::GATES.iter().enumerate() {
            w[g] = self.add(
                format!("lstm{layer}.{gate}.weight"),
                ParamGroup::Lstm,
                vec![hidden, input + hidden],
                ParamInit::FanInUniform { fan_in: input + hidden },
            );
            b[g] = self.add(
                format!("lstm{layer}.{gate}.bias"),
                ParamGroup::Lstm,
                vec![hidden],
                ParamInit::Zeros,
            );
        }
        LstmIdx { w, b, input, hidden }
    }
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut bld = Builder { specs: Vec::new() };
        let (mut enc2d, mut dec2d, mut enc1d, mut ae1d) = (None, None, None, None);
        if arch.visual {
            let g = ParamGroup::Encoder2d;
            let mut c = arch.image_channels;
            let mut blocks = Vec::new();
            for (i, rows) in arch.encoder2d.iter().enumerate() {
                blocks.push(bld.block(&format!("enc2d.block{i}"), g, rows, c, false));
                c = rows[2].out_channels;
            }
            let fc = bld.dense("enc2d.fc", g, arch.encoder2d_flat(), arch.latent2d);
            enc2d = Some(Enc2dIdx { blocks, fc });
            if arch.autoencoder {
                let g = ParamGroup::Decoder2d;
                let fc = bld.dense("dec2d.fc", g, arch.latent2d, arch.encoder2d_flat());
                let mut c = arch.encoder2d_channels();
                let mut blocks = Vec::new();
                for (i, rows) in arch.decoder2d.iter().enumerate() {
                    blocks.push(bld.block(&format!("dec2d.block{i}"), g, rows, c, true));
                    c = rows[2].out_channels;
                }
                dec2d = Some(Dec2dIdx { fc, blocks });
            }
        }
        if arch.audio {
            let g = ParamGroup::Encoder1d;
            let [r1, r2] = arch.audio_conv;
            let s1 = ConvSpec::line(r1.kernel, r1.stride, 1, r1.out_channels);
            let s2 = ConvSpec::line(r2.kernel, r2.stride, r1.out_channels, r2.out_channels);
            let c1 = bld.conv("enc1d.conv0", g, s1, s1.conv1d_weight_shape());
            let c2 = bld.conv("enc1d.conv1", g, s2, s2.conv1d_weight_shape());
            enc1d = Some([c1, c2]);
            if arch.autoencoder {
                let tap = arch.audio_tap();
                let fc_down = bld.dense("enc1d.fc", g, tap, arch.audio_bottleneck);
                let g = ParamGroup::Decoder1d;
                let fc_up = bld.dense("dec1d.fc", g, arch.audio_bottleneck, tap);
                let [d1, d2] = arch.audio_deconv;
                let s1 = ConvSpec::line(d1.kernel, d1.stride, arch.audio_decoder_channels, d1.out_channels);
                let s2 = ConvSpec::line(d2.kernel, d2.stride, d1.out_channels, d2.out_channels);
                let dc1 = bld.conv("dec1d.deconv0", g, s1, s1.deconv1d_weight_shape());
                let dc2 = bld.conv("dec1d.deconv1", g, s2, s2.deconv1d_weight_shape());
                ae1d = Some(Ae1dIdx {
                    fc_down,
                    fc_up,
                    deconv: [dc1, dc2],
                });
            }
        }
        let mut lstm = Vec::new();
        let mut input = arch.lstm_input();
        for layer in 0..arch.lstm_layers {
            lstm.push(bld.lstm(layer, input, arch.lstm_hidden));
            input = arch.lstm_hidden;
        }
        let head = bld.dense("head", ParamGroup::Head, arch.lstm_hidden, 2);
        Self {
            specs: bld.specs,
            enc2d,
            dec2d,
            enc1d,
            ae1d,
            lstm,
            head,
        }
    }
}

/// All learnable tensors of one architecture, in a fixed layout order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    arch: ArchConfig,
    pub(crate) layout: Layout,
    values: Vec<Tensor>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.values == other.values
    }
}

impl ModelParams {
    /// Fan-in uniform weights, zero biases, deterministic per seed.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = ParamRng::new(seed);
        let values = layout
            .specs
            .iter()
            .map(|s| init_tensor(&mut rng, &s.shape, s.init))
            .collect();
        Ok(Self { arch, layout, values })
    }

    pub fn zeros(arch: ArchConfig) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let values = layout.specs.iter().map(|s| Tensor::zeros(s.shape.clone())).collect();
        Ok(Self { arch, layout, values })
    }

    /// Layout without parameter storage.
    pub(crate) fn skeleton(arch: ArchConfig) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        Ok(Self {
            arch,
            layout,
            values: Vec::new(),
        })
    }

    /// Rebuilds from stored tensors, checking them against the layout.
    pub fn from_values(arch: ArchConfig, values: Vec<Tensor>) -> Result<Self, ModelError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if values.len() != layout.specs.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} parameter tensors, got {}",
                layout.specs.len(),
                values.len()
            )));
        }
        for (s, v) in layout.specs.iter().zip(&values) {
            if s.shape != v.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "{}: expected shape {:?}, got {:?}",
                    s.name,
                    s.shape,
                    v.shape()
                )));
            }
        }
        Ok(Self { arch, layout, values })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.layout
            .specs
            .iter()
            .zip(&self.values)
            .filter(|(s, _)| s.group == group)
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::arch::Variant;

    #[test]
    fn same_seed_same_params() {
        let a = ModelParams::init(ArchConfig::desk(), 4).unwrap();
        let b = ModelParams::init(ArchConfig::desk(), 4).unwrap();
        assert_eq!(a, b);
        let c = ModelParams::init(ArchConfig::desk(), 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = ModelParams::init(ArchConfig::tiny(), 1).unwrap();
        for (s, v) in p.specs().iter().zip(p.values()) {
            if s.name.ends_with(".bias") {
                assert!(v.data().iter().all(|x| *x == 0.0), "{}", s.name);
            }
        }
    }

    #[test]
    fn lstm_gate_shapes() {
        let p = ModelParams::zeros(ArchConfig::desk()).unwrap();
        let a = p.arch();
        for s in p
            .specs()
            .iter()
            .filter(|s| s.name.starts_with("lstm0") && s.name.ends_with("weight"))
        {
            assert_eq!(s.shape, vec![a.lstm_hidden, a.lstm_input() + a.lstm_hidden]);
        }
    }

    #[test]
    fn no_autoencoder_has_no_decoder_params() {
        let p = ModelParams::zeros(ArchConfig::desk().with_variant(Variant::NoAutoencoder)).unwrap();
        assert_eq!(p.count_in(ParamGroup::Decoder2d), 0);
        assert_eq!(p.count_in(ParamGroup::Decoder1d), 0);
        let full = ModelParams::zeros(ArchConfig::desk()).unwrap();
        assert!(full.count_in(ParamGroup::Decoder2d) > 0);
    }

    #[test]
    fn from_values_checks_shapes() {
        let p = ModelParams::zeros(ArchConfig::tiny()).unwrap();
        let mut vals = p.values().to_vec();
        vals[0] = Tensor::zeros(vec![1]);
        assert!(ModelParams::from_values(ArchConfig::tiny(), vals).is_err());
    }
}
