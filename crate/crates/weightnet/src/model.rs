//! A small plain CNN with swappable convolution operators, standing in for
//! the full backbones: stages of conv/BN/ReLU blocks, then a GAP + FC
//! classifier head.
//!
//! Per-stage the conv kind is selectable (static, gated, mixture, general
//! weight-generating), mirroring the per-stage ablation shape. Stride-1
//! blocks use 3×3 kernels with pad 1; the stride-2 block that opens a
//! downsampling stage uses a 4×4 kernel with pad 1 so the output geometry
//! stays exact on even extents (the conv contract rejects fractional
//! tilings).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynconv::{
    CondConvConfig, CondConvOp, GeneratedKernel, SeConfig, SeOp, SePlacement, WeightNetConfig,
    WeightNetOp,
};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, FullyConnected};
use crate::ratio::Ratio;
use crate::tensor::{NDTensor, Scalar, Tape};

/// Which conv operator a stage uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConvKindSpec {
    Static,
    Se {
        #[serde(default = "default_reduction")]
        r: usize,
        #[serde(default = "default_placement")]
        placement: SePlacementSpec,
    },
    Condconv {
        m: usize,
    },
    Weightnet {
        m: Ratio,
        g: Ratio,
        #[serde(default = "default_reduction")]
        r: usize,
        #[serde(default)]
        relu_between_fcs: bool,
        #[serde(default)]
        generator_bias: bool,
    },
}

fn default_reduction() -> usize {
    16
}

fn default_placement() -> SePlacementSpec {
    SePlacementSpec::Kernel
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SePlacementSpec {
    FeaturePre,
    FeaturePost,
    Kernel,
}

impl From<SePlacementSpec> for SePlacement {
    fn from(s: SePlacementSpec) -> Self {
        match s {
            SePlacementSpec::FeaturePre => SePlacement::FeaturePre,
            SePlacementSpec::FeaturePost => SePlacement::FeaturePost,
            SePlacementSpec::Kernel => SePlacement::Kernel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    pub conv: ConvKindSpec,
}

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_channels: usize,
    /// Classifier width: number of output classes of the head FC.
    pub classes: usize,
    pub stages: Vec<StageSpec>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.classes == 0 {
            return Err(Error::Config(
                "input_channels and classes must be >= 1".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("at least one stage is required".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.blocks == 0 || st.channels == 0 || st.stride == 0 {
                return Err(Error::Config(format!(
                    "stage{i}: blocks, channels and stride must be >= 1"
                )));
            }
            if st.stride > 2 {
                return Err(Error::Config(format!(
                    "stage{i}: stride {} unsupported (1 or 2)",
                    st.stride
                )));
            }
        }
        Ok(())
    }
}

/// One conv operator instance.
pub enum ConvOp<T: Scalar> {
    Static { weight: NDTensor<T> },
    Se(SeOp<T>),
    CondConv(CondConvOp<T>),
    WeightNet(WeightNetOp<T>),
}

impl<T: Scalar> ConvOp<T> {
    fn build(spec: &ConvKindSpec, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Ok(match spec {
            ConvKindSpec::Static => ConvOp::Static {
                weight: NDTensor::zeros(vec![c_out, c_in, k, k])?,
            },
            ConvKindSpec::Se { r, placement } => ConvOp::Se(SeOp::new(SeConfig {
                c_in,
                c_out,
                kh: k,
                kw: k,
                reduction: *r,
                placement: (*placement).into(),
            })?),
            ConvKindSpec::Condconv { m } => ConvOp::CondConv(CondConvOp::new(CondConvConfig {
                c_in,
                c_out,
                kh: k,
                kw: k,
                experts: *m,
            })?),
            ConvKindSpec::Weightnet {
                m,
                g,
                r,
                relu_between_fcs,
                generator_bias,
            } => {
                let mut cfg = WeightNetConfig::new(c_in, c_out, k, k, *m, *g);
                cfg.reduction = *r;
                cfg.relu_between_fcs = *relu_between_fcs;
                cfg.generator_bias = *generator_bias;
                ConvOp::WeightNet(WeightNetOp::new(cfg)?)
            }
        })
    }

    fn init_params(&mut self, seed: u64) {
        match self {
            ConvOp::Static { weight } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = weight.shape();
                let fan_in = s[1] * s[2] * s[3];
                crate::nn::init_uniform(weight, fan_in, &mut rng);
            }
            ConvOp::Se(op) => op.init_params(seed),
            ConvOp::CondConv(op) => op.init_params(seed),
            ConvOp::WeightNet(op) => op.init_params(seed),
        }
    }

    /// Forward plus the per-sample kernel, when this operator generates one.
    fn forward(
        &self,
        tape: &Tape<T>,
        x: &NDTensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<(NDTensor<T>, Option<GeneratedKernel<T>>)> {
        match self {
            ConvOp::Static { weight } => {
                let y = x.conv2d(&weight.watch(tape), 1, stride, pad)?;
                Ok((y, None))
            }
            ConvOp::Se(op) => {
                if op.cfg.placement == SePlacement::Kernel {
                    let alpha = op.alpha(tape, x)?;
                    let kernels =
                        crate::dynconv::se_kernel_form(&op.weight.watch(tape), &alpha)?;
                    let y = crate::dynconv::dynamic_conv_apply(&kernels, x, stride, pad)?;
                    Ok((y, Some(kernels)))
                } else {
                    Ok((op.forward(tape, x, stride, pad)?, None))
                }
            }
            ConvOp::CondConv(op) => {
                let alpha = op.alpha(tape, x)?;
                let kernels = op.fc_kernel(tape, &alpha)?;
                let y = crate::dynconv::dynamic_conv_apply(&kernels, x, stride, pad)?;
                Ok((y, Some(kernels)))
            }
            ConvOp::WeightNet(op) => {
                let alpha = op.alpha(tape, x)?;
                let kernels = op.generate(tape, &alpha)?;
                let y = crate::dynconv::dynamic_conv_apply(&kernels, x, stride, pad)?;
                Ok((y, Some(kernels)))
            }
        }
    }

    pub fn is_kernel_generating(&self) -> bool {
        match self {
            ConvOp::Static { .. } => false,
            ConvOp::Se(op) => op.cfg.placement == SePlacement::Kernel,
            ConvOp::CondConv(_) => true,
            ConvOp::WeightNet(_) => true,
        }
    }

    fn parameters(&self) -> Vec<(String, &NDTensor<T>)> {
        match self {
            ConvOp::Static { weight } => vec![("weight".into(), weight)],
            ConvOp::Se(op) => op.parameters(),
            ConvOp::CondConv(op) => op.parameters(),
            ConvOp::WeightNet(op) => op.parameters(),
        }
    }
}

pub struct Block<T: Scalar> {
    pub name: String,
    pub conv: ConvOp<T>,
    pub bn: BatchNorm<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl<T: Scalar> Block<T> {
    fn forward(
        &self,
        tape: &Tape<T>,
        x: &NDTensor<T>,
        training: bool,
    ) -> Result<(NDTensor<T>, Option<GeneratedKernel<T>>)> {
        let (y, kernels) = self.conv.forward(tape, x, self.stride, self.pad)?;
        let y = self.bn.forward(tape, &y, training)?;
        Ok((y.relu()?, kernels))
    }
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub blocks: Vec<Block<T>>,
    pub head: FullyConnected<T>,
}

/// Result of a forward pass that optionally captured one layer's kernels.
pub struct ForwardCapture<T: Scalar> {
    pub logits: NDTensor<T>,
    pub kernels: Option<GeneratedKernel<T>>,
}

impl<T: Scalar> Model<T> {
    /// Construct the model with zeroed parameters; call
    /// [`Model::init_params`] afterwards.
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::new();
        let mut c_prev = spec.input_channels;
        for (si, st) in spec.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let stride = if bi == 0 { st.stride } else { 1 };
                // 4x4 kernels keep stride-2 geometry exact on even extents.
                let kernel = if stride == 2 { 4 } else { 3 };
                let c_in = c_prev;
                let c_out = st.channels;
                let conv = ConvOp::build(&st.conv, c_in, c_out, kernel).map_err(|e| match e {
                    Error::Config(msg) => Error::Config(format!("stage{si}.block{bi}: {msg}")),
                    other => other,
                })?;
                blocks.push(Block {
                    name: format!("stage{si}.block{bi}"),
                    conv,
                    bn: BatchNorm::new(c_out)?,
                    c_in,
                    c_out,
                    stride,
                    kernel,
                    pad: 1,
                });
                c_prev = c_out;
            }
        }
        let head = FullyConnected::new(c_prev, spec.classes, true)?;
        Ok(Model {
            spec: spec.clone(),
            blocks,
            head,
        })
    }

    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for b in &mut self.blocks {
            b.conv.init_params(rng.next_u64());
        }
        self.head.init_params(rng.next_u64());
    }

    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>, training: bool) -> Result<NDTensor<T>> {
        Ok(self.forward_capture(tape, x, training, None)?.logits)
    }

    /// Forward pass, capturing the generated kernels of `capture_layer` if
    /// given. Asking for a non-generating layer is a usage error.
    pub fn forward_capture(
        &self,
        tape: &Tape<T>,
        x: &NDTensor<T>,
        training: bool,
        capture_layer: Option<&str>,
    ) -> Result<ForwardCapture<T>> {
        if let Some(layer) = capture_layer {
            let block = self
                .blocks
                .iter()
                .find(|b| b.name == layer)
                .ok_or_else(|| Error::Usage(format!("no layer named '{layer}'")))?;
            if !block.conv.is_kernel_generating() {
                return Err(Error::Usage(format!(
                    "layer '{layer}' is static; kernel extraction needs a weight-generating layer"
                )));
            }
        }
        let mut captured = None;
        let mut h = x.clone();
        for b in &self.blocks {
            let (y, kernels) = b.forward(tape, &h, training)?;
            if capture_layer == Some(b.name.as_str()) {
                captured = kernels;
            }
            h = y;
        }
        let pooled = h.global_avg_pool()?;
        let logits = self.head.forward(tape, &pooled)?;
        Ok(ForwardCapture {
            logits,
            kernels: captured,
        })
    }

    /// Trainable parameters in a stable order.
    pub fn named_parameters(&self) -> Vec<(String, &NDTensor<T>)> {
        let mut v = Vec::new();
        for b in &self.blocks {
            for (n, p) in b.conv.parameters() {
                v.push((format!("{}.conv.{n}", b.name), p));
            }
            for (n, p) in b.bn.parameters() {
                v.push((format!("{}.bn.{n}", b.name), p));
            }
        }
        for (n, p) in self.head.parameters() {
            v.push((format!("head.{n}"), p));
        }
        v
    }

    /// Non-trained state that must survive a checkpoint round trip.
    pub fn named_state(&self) -> Vec<(String, &NDTensor<T>)> {
        let mut v = Vec::new();
        for b in &self.blocks {
            for (n, p) in b.bn.state() {
                v.push((format!("{}.bn.{n}", b.name), p));
            }
        }
        v
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(conv: ConvKindSpec) -> ModelSpec {
        ModelSpec {
            input_channels: 1,
            classes: 2,
            stages: vec![
                StageSpec {
                    blocks: 1,
                    channels: 8,
                    stride: 2,
                    conv: conv.clone(),
                },
                StageSpec {
                    blocks: 1,
                    channels: 8,
                    stride: 1,
                    conv,
                },
            ],
        }
    }

    #[test]
    fn static_model_runs_forward() {
        let mut m = Model::<f32>::build(&spec(ConvKindSpec::Static)).unwrap();
        m.init_params(1);
        let x = NDTensor::zeros(vec![2, 1, 16, 16]).unwrap();
        let tape = Tape::new();
        let y = m.forward(&tape, &x, true).unwrap();
        assert_eq!(y.shape(), [2, 2]);
    }

    #[test]
    fn all_conv_kinds_build_and_run() {
        for kind in [
            ConvKindSpec::Static,
            ConvKindSpec::Se {
                r: 4,
                placement: SePlacementSpec::Kernel,
            },
            ConvKindSpec::Condconv { m: 2 },
            ConvKindSpec::Weightnet {
                m: Ratio::int(2),
                g: Ratio::int(2),
                r: 16,
                relu_between_fcs: false,
                generator_bias: false,
            },
        ] {
            let mut m = Model::<f32>::build(&spec(kind.clone())).unwrap();
            m.init_params(7);
            let x = NDTensor::full(vec![3, 1, 16, 16], 0.5).unwrap();
            let tape = Tape::new();
            let y = m.forward(&tape, &x, false).unwrap();
            assert_eq!(y.shape(), [3, 2], "{kind:?}");
        }
    }

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let s = spec(ConvKindSpec::Weightnet {
            m: Ratio::int(1),
            g: Ratio::int(1),
            r: 16,
            relu_between_fcs: false,
            generator_bias: false,
        });
        let mut a = Model::<f32>::build(&s).unwrap();
        let mut b = Model::<f32>::build(&s).unwrap();
        a.init_params(99);
        b.init_params(99);
        for ((na, pa), (nb, pb)) in a.named_parameters().iter().zip(b.named_parameters()) {
            assert_eq!(na, &nb);
            assert_eq!(pa.to_vec(), pb.to_vec(), "{na}");
        }
    }

    #[test]
    fn build_rejects_bad_stage_config_naming_stage() {
        // weightnet with G*C_in non-integer on channels 3
        let s = ModelSpec {
            input_channels: 3,
            classes: 2,
            stages: vec![StageSpec {
                blocks: 1,
                channels: 3,
                stride: 1,
                conv: ConvKindSpec::Weightnet {
                    m: Ratio::int(1),
                    g: Ratio::new(1, 2).unwrap(),
                    r: 16,
                    relu_between_fcs: false,
                    generator_bias: false,
                },
            }],
        };
        match Model::<f32>::build(&s) {
            Err(Error::Config(msg)) => assert!(msg.contains("stage0"), "{msg}"),
            other => panic!("expected config error, got {:?}", other.is_ok()),
        }
    }

    #[test]
    fn capture_rejects_static_layer() {
        let mut m = Model::<f32>::build(&spec(ConvKindSpec::Static)).unwrap();
        m.init_params(1);
        let x = NDTensor::zeros(vec![1, 1, 16, 16]).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            m.forward_capture(&tape, &x, false, Some("stage0.block0")),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            m.forward_capture(&tape, &x, false, Some("nope")),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn capture_returns_kernels_for_dynamic_layer() {
        let mut m = Model::<f32>::build(&spec(ConvKindSpec::Condconv { m: 2 })).unwrap();
        m.init_params(3);
        let x = NDTensor::full(vec![2, 1, 16, 16], 0.1).unwrap();
        let tape = Tape::new();
        let out = m
            .forward_capture(&tape, &x, false, Some("stage1.block0"))
            .unwrap();
        let k = out.kernels.expect("kernels captured");
        assert_eq!(k.tensor.shape(), [2, 8, 8, 3, 3]);
    }
}
