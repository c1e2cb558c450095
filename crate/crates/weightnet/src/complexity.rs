//! Exact parameter and multiply-accumulate accounting for static and
//! dynamic convs.
//!
//! Every layer splits into a convolution branch (the kernel application on
//! the feature map) and a weight branch (α generation plus the kernel
//! emitter). Conv-branch MACs are h'·w'·C_out·C_in·kh·kw per sample; the
//! weight branch touches each of its scalars once per sample, so its MACs
//! equal its parameter count. GAP, sigmoid and BN go to an `other` bucket
//! excluded from the branch totals.

use std::fmt::Write as _;
use std::path::Path;

use crate::dynconv::{CondConvConfig, SeConfig, SePlacement, WeightNetConfig};
use crate::error::{Error, Result};
use crate::model::{ConvOp, Model};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conv,
    Weight,
    Other,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Conv => "conv",
            Branch::Weight => "weight",
            Branch::Other => "other",
        }
    }
}

/// MACs-vs-FLOPs reporting convention: `TwoMacs` doubles every count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlopsConvention {
    #[default]
    Macs,
    TwoMacs,
}

impl FlopsConvention {
    pub fn apply(&self, macs: u64) -> u64 {
        match self {
            FlopsConvention::Macs => macs,
            FlopsConvention::TwoMacs => 2 * macs,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(FlopsConvention::Macs),
            "2macs" => Ok(FlopsConvention::TwoMacs),
            other => Err(Error::Config(format!(
                "unknown flops convention '{other}' (use 'macs' or '2macs')"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub layer: String,
    pub branch: Branch,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub conv_params: u64,
    pub conv_macs: u64,
    pub weight_params: u64,
    pub weight_macs: u64,
    pub other_params: u64,
    pub other_macs: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ComplexityReport {
    pub records: Vec<Record>,
}

impl ComplexityReport {
    pub fn totals(&self) -> Totals {
        let mut t = Totals::default();
        for r in &self.records {
            match r.branch {
                Branch::Conv => {
                    t.conv_params += r.params;
                    t.conv_macs += r.macs;
                }
                Branch::Weight => {
                    t.weight_params += r.params;
                    t.weight_macs += r.macs;
                }
                Branch::Other => {
                    t.other_params += r.params;
                    t.other_macs += r.macs;
                }
            }
        }
        t
    }

    pub fn to_csv(&self, convention: FlopsConvention) -> String {
        let mut s = String::from("layer,branch,params,macs\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.layer,
                r.branch.as_str(),
                r.params,
                convention.apply(r.macs)
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path, convention: FlopsConvention) -> Result<()> {
        std::fs::write(path, self.to_csv(convention))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Output extent of one conv axis, `None` when the stride does not tile.
pub fn out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = in_extent + 2 * pad;
    if k == 0 || k > span || (span - k) % stride != 0 {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Conv-branch MACs for one sample: h'·w'·C_out·C_in·kh·kw, constants
/// included.
pub fn count_conv_branch(
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
) -> u64 {
    (h_out * w_out * c_out * c_in * kh * kw) as u64
}

/// Weight-branch costs, kernel emitter and α generator kept separate so the
/// λ claim (emitter params = λ × static kernel params) stays checkable.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WeightBranchCost {
    pub generator_params: u64,
    pub alpha_params: u64,
}

impl WeightBranchCost {
    pub fn params(&self) -> u64 {
        self.generator_params + self.alpha_params
    }

    /// Each stored scalar is used once per sample.
    pub fn macs(&self) -> u64 {
        self.params()
    }

    pub fn generator_macs(&self) -> u64 {
        self.generator_params
    }
}

/// Costs of the general operator's weight branch: grouped-FC params are
/// (M/G)·C_out·C_in·kh·kw, the α generator adds C·⌊C/r⌋ + ⌊C/r⌋·M·C plus
/// biases.
pub fn count_weight_branch(cfg: &WeightNetConfig) -> Result<WeightBranchCost> {
    cfg.validate()?;
    let lambda = cfg.lambda()? as u64;
    let mut generator_params =
        lambda * (cfg.c_out * cfg.c_in * cfg.kh * cfg.kw) as u64;
    if cfg.generator_bias {
        generator_params += cfg.generator_outputs() as u64;
    }
    let hidden = cfg.hidden_width() as u64;
    let alpha_width = cfg.alpha_width()? as u64;
    // fc1: C→hidden with bias; fc2: hidden→M·C with bias.
    let alpha_params = cfg.c_in as u64 * hidden + hidden + hidden * alpha_width + alpha_width;
    Ok(WeightBranchCost {
        generator_params,
        alpha_params,
    })
}

/// Mixture-of-experts weight branch: the expert bank is m static kernels,
/// the gate is a single FC with bias.
pub fn count_condconv_weight_branch(cfg: &CondConvConfig) -> Result<WeightBranchCost> {
    cfg.validate()?;
    let generator_params = (cfg.experts * cfg.kernel_numel()) as u64;
    let alpha_params = (cfg.c_in * cfg.experts + cfg.experts) as u64;
    Ok(WeightBranchCost {
        generator_params,
        alpha_params,
    })
}

/// Gating weight branch: zero kernel params beyond the α generator.
pub fn count_se_weight_branch(cfg: &SeConfig) -> Result<WeightBranchCost> {
    cfg.validate()?;
    let hidden = cfg.hidden_width() as u64;
    let gate = cfg.gate_width() as u64;
    let alpha_params = cfg.c_in as u64 * hidden + hidden + hidden * gate + gate;
    Ok(WeightBranchCost {
        generator_params: 0,
        alpha_params,
    })
}

/// Walk a model and produce its per-layer report for one input geometry.
/// Weight-branch rows are split into `<layer>.alpha` and `<layer>.generator`
/// so kernel-parameter comparisons stay visible in the CSV.
pub fn report<T: Scalar>(model: &Model<T>, input_h: usize, input_w: usize) -> Result<ComplexityReport> {
    let mut records = Vec::new();
    let (mut h, mut w) = (input_h, input_w);
    for block in &model.blocks {
        let h_out = out_extent(h, block.kernel, block.stride, block.pad).ok_or_else(|| {
            Error::Config(format!(
                "{}: input {h}x{w} does not tile with kernel {} stride {}",
                block.name, block.kernel, block.stride
            ))
        })?;
        let w_out = out_extent(w, block.kernel, block.stride, block.pad).unwrap_or(h_out);
        let conv_macs = count_conv_branch(block.c_in, block.c_out, block.kernel, block.kernel, h_out, w_out);
        let kernel_numel = (block.c_out * block.c_in * block.kernel * block.kernel) as u64;
        match &block.conv {
            ConvOp::Static { .. } => {
                records.push(Record {
                    layer: block.name.clone(),
                    branch: Branch::Conv,
                    params: kernel_numel,
                    macs: conv_macs,
                });
            }
            ConvOp::Se(op) => {
                // The static kernel is a real stored parameter.
                records.push(Record {
                    layer: block.name.clone(),
                    branch: Branch::Conv,
                    params: kernel_numel,
                    macs: conv_macs,
                });
                let cost = count_se_weight_branch(&op.cfg)?;
                records.push(Record {
                    layer: format!("{}.alpha", block.name),
                    branch: Branch::Weight,
                    params: cost.alpha_params,
                    macs: cost.alpha_params,
                });
                if op.cfg.placement == SePlacement::Kernel {
                    // Gate application multiplies, bucketed with the misc
                    // costs.
                    records.push(Record {
                        layer: format!("{}.gate_apply", block.name),
                        branch: Branch::Other,
                        params: 0,
                        macs: kernel_numel,
                    });
                }
            }
            ConvOp::CondConv(op) => {
                records.push(Record {
                    layer: block.name.clone(),
                    branch: Branch::Conv,
                    params: 0,
                    macs: conv_macs,
                });
                let cost = count_condconv_weight_branch(&op.cfg)?;
                records.push(Record {
                    layer: format!("{}.alpha", block.name),
                    branch: Branch::Weight,
                    params: cost.alpha_params,
                    macs: cost.alpha_params,
                });
                records.push(Record {
                    layer: format!("{}.generator", block.name),
                    branch: Branch::Weight,
                    params: cost.generator_params,
                    macs: cost.generator_params,
                });
            }
            ConvOp::WeightNet(op) => {
                records.push(Record {
                    layer: block.name.clone(),
                    branch: Branch::Conv,
                    params: 0,
                    macs: conv_macs,
                });
                let cost = count_weight_branch(&op.cfg)?;
                records.push(Record {
                    layer: format!("{}.alpha", block.name),
                    branch: Branch::Weight,
                    params: cost.alpha_params,
                    macs: cost.alpha_params,
                });
                records.push(Record {
                    layer: format!("{}.generator", block.name),
                    branch: Branch::Weight,
                    params: cost.generator_params,
                    macs: cost.generator_params,
                });
            }
        }
        // BN scale/shift and the GAP+sigmoid plumbing.
        records.push(Record {
            layer: format!("{}.bn", block.name),
            branch: Branch::Other,
            params: 2 * block.c_out as u64,
            macs: (block.c_out * h_out * w_out) as u64,
        });
        h = h_out;
        w = w_out;
    }
    let head_in = model.head.in_features() as u64;
    let head_out = model.head.out_features() as u64;
    records.push(Record {
        layer: "head".into(),
        branch: Branch::Other,
        params: head_in * head_out + head_out,
        macs: head_in * head_out,
    });
    Ok(ComplexityReport { records })
}
