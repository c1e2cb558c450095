//! Weight-generating convolution operators.
//!
//! Three operators share one interface: an attention vector α is produced
//! from globally pooled features, a (grouped) fully-connected layer maps α
//! straight to a per-sample convolution kernel, and the kernel is applied
//! through one grouped convolution with group count equal to the batch size.
//!
//! The grouped layer's configuration is what distinguishes the operators
//! ([`table1_config_of`]): a mixture of experts is the group-count-1 extreme
//! (one dense FC from α to the flat kernel), per-filter gating is the
//! group-count-C extreme (each α entry scales one output filter), and the
//! general operator sits between them with an input multiplier M and a group
//! multiplier G. λ = M/G is the kernel-parameter multiplier.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{FullyConnected, GroupedFullyConnected};
use crate::ratio::Ratio;
use crate::tensor::{NDTensor, Scalar, Tape};

// ── configs ─────────────────────────────────────────────────────────

/// Hyperparameters of one general weight-generating conv.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightNetConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    /// Input multiplier M: α has M·C_in entries.
    pub input_mult: Ratio,
    /// Group multiplier G: the generator has G·C_in groups.
    pub group_mult: Ratio,
    /// Reduction ratio r of the α generator; hidden width is max(1, ⌊C_in/r⌋).
    pub reduction: usize,
    /// Ablation switch: insert a ReLU between the two α-generator FCs. The
    /// default α generator has none (only the gating form does).
    pub relu_between_fcs: bool,
    /// Bias on the weight-emitting grouped FC. Off by default so generated
    /// kernels stay centered; flip via config if wanted.
    pub generator_bias: bool,
}

impl WeightNetConfig {
    pub fn new(c_in: usize, c_out: usize, kh: usize, kw: usize, input_mult: Ratio, group_mult: Ratio) -> Self {
        WeightNetConfig {
            c_in,
            c_out,
            kh,
            kw,
            input_mult,
            group_mult,
            reduction: 16,
            relu_between_fcs: false,
            generator_bias: false,
        }
    }

    /// α width M·C_in.
    pub fn alpha_width(&self) -> Result<usize> {
        self.input_mult.times_exact(self.c_in).ok_or_else(|| {
            Error::Config(format!(
                "M*C_in must be an integer: M={}, C_in={}",
                self.input_mult, self.c_in
            ))
        })
    }

    /// Generator group count G·C_in.
    pub fn group_count(&self) -> Result<usize> {
        self.group_mult.times_exact(self.c_in).ok_or_else(|| {
            Error::Config(format!(
                "G*C_in must be an integer: G={}, C_in={}",
                self.group_mult, self.c_in
            ))
        })
    }

    /// Parameter multiplier λ = M/G; per-group input width of the generator.
    pub fn lambda(&self) -> Result<usize> {
        self.input_mult.div_exact(&self.group_mult).ok_or_else(|| {
            Error::Config(format!(
                "G*C_in must divide M*C_in, i.e. M/G must be a positive integer: M={}, G={}",
                self.input_mult, self.group_mult
            ))
        })
    }

    /// α-generator hidden width, clamped so tiny channel counts stay valid.
    pub fn hidden_width(&self) -> usize {
        (self.c_in / self.reduction).max(1)
    }

    /// Flat generated-kernel size C_out·C_in·kh·kw.
    pub fn generator_outputs(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Config(format!(
                "channel and kernel extents must be >= 1: C_in={}, C_out={}, kh={}, kw={}",
                self.c_in, self.c_out, self.kh, self.kw
            )));
        }
        if self.reduction == 0 {
            return Err(Error::Config("reduction ratio must be >= 1".into()));
        }
        self.alpha_width()?;
        let groups = self.group_count()?;
        // G·C_in | M·C_in is exactly the λ integrality condition.
        self.lambda()?;
        let outputs = self.generator_outputs();
        if outputs % groups != 0 {
            return Err(Error::Config(format!(
                "G*C_in ({groups}) must divide the generator output size C_out*C_in*kh*kw ({outputs})"
            )));
        }
        Ok(())
    }
}

/// Hyperparameters of a mixture-of-experts conv.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CondConvConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    /// Number of expert kernels.
    pub experts: usize,
}

impl CondConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::Config("expert count must be >= 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Config("channel and kernel extents must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kernel_numel(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }
}

/// Where the squeeze-excitation gate acts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SePlacement {
    /// Scale the input feature map before the conv.
    FeaturePre,
    /// Scale the conv output channelwise.
    FeaturePost,
    /// Scale each output filter of the kernel itself.
    Kernel,
}

/// Hyperparameters of a squeeze-excitation conv.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub reduction: usize,
    pub placement: SePlacement,
}

impl SeConfig {
    pub fn hidden_width(&self) -> usize {
        (self.c_in / self.reduction).max(1)
    }

    /// Width of the gate vector: input channels for pre-conv gating,
    /// output channels otherwise.
    pub fn gate_width(&self) -> usize {
        match self.placement {
            SePlacement::FeaturePre => self.c_in,
            SePlacement::FeaturePost | SePlacement::Kernel => self.c_out,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("reduction ratio must be >= 1".into()));
        }
        if self.c_in == 0 || self.c_out == 0 || self.kh == 0 || self.kw == 0 {
            return Err(Error::Config("channel and kernel extents must be >= 1".into()));
        }
        Ok(())
    }
}

// ── generated kernels ───────────────────────────────────────────────

/// Where a generated kernel came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelProvenance {
    pub operator: String,
    pub batch_id: u64,
}

/// A per-sample convolution weight of shape (B, C_out, C_in, kh, kw).
pub struct GeneratedKernel<T: Scalar> {
    pub tensor: NDTensor<T>,
    pub provenance: KernelProvenance,
}

impl<T: Scalar> GeneratedKernel<T> {
    pub fn new(tensor: NDTensor<T>, provenance: KernelProvenance) -> Result<Self> {
        if tensor.shape().len() != 5 {
            return Err(Error::BadGeometry {
                op: "generated_kernel",
                msg: "expected shape (B, C_out, C_in, kh, kw)".into(),
                shape: tensor.shape().to_vec(),
            });
        }
        if !tensor.is_all_finite() {
            return Err(Error::NonFinite {
                tensor: format!("{}/generated_kernel", provenance.operator),
                step: 0,
            });
        }
        Ok(GeneratedKernel { tensor, provenance })
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    /// The b-th sample's kernel, shape (C_out, C_in, kh, kw).
    pub fn sample(&self, b: usize) -> Result<NDTensor<T>> {
        let s = self.tensor.shape().to_vec();
        self.tensor
            .narrow(0, b, 1)?
            .reshape(vec![s[1], s[2], s[3], s[4]])
    }

    /// Dump in WNK1 format: magic "WNK1", five little-endian u32 extents
    /// (B, C_out, C_in, kh, kw), then the f32 payload row-major.
    pub fn write_wnk(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(4 + 20 + self.tensor.numel() * 4);
        buf.extend_from_slice(b"WNK1");
        for &e in self.tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in self.tensor.data().iter() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Read a WNK1 dump back: (extents, payload).
pub fn read_wnk(path: &Path) -> Result<([usize; 5], Vec<f32>)> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if bytes.len() < 24 || &bytes[..4] != b"WNK1" {
        return Err(Error::format(p, "missing WNK1 magic"));
    }
    let mut dims = [0usize; 5];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 4 + i * 4;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    }
    let n: usize = dims.iter().product();
    if bytes.len() != 24 + n * 4 {
        return Err(Error::format(p, format!("expected {} payload floats", n)));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

/// Apply per-sample kernels through one grouped convolution: fold the batch
/// into channels (1, B·C_in, h, w), fold the kernels to (B·C_out, C_in, kh,
/// kw), convolve with group count B, and unfold.
pub fn dynamic_conv_apply<T: Scalar>(
    kernels: &GeneratedKernel<T>,
    x: &NDTensor<T>,
    stride: usize,
    pad: usize,
) -> Result<NDTensor<T>> {
    let ks = kernels.tensor.shape().to_vec();
    let xs = x.shape().to_vec();
    if xs.len() != 4 || ks[0] != xs[0] || ks[2] != xs[1] {
        return Err(Error::ShapeMismatch {
            op: "dynamic_conv_apply",
            lhs: ks,
            rhs: xs,
        });
    }
    let (b, c_out, c_in) = (ks[0], ks[1], ks[2]);
    let (h, w) = (xs[2], xs[3]);
    let folded_x = x.reshape(vec![1, b * c_in, h, w])?;
    let folded_k = kernels.tensor.reshape(vec![b * c_out, c_in, ks[3], ks[4]])?;
    let y = folded_x.conv2d(&folded_k, b, stride, pad)?;
    let (h_out, w_out) = (y.shape()[2], y.shape()[3]);
    y.reshape(vec![b, c_out, h_out, w_out])
}

// ── the general operator ────────────────────────────────────────────

/// The general weight-generating conv: two-FC α generator plus a grouped
/// fully-connected kernel emitter.
pub struct WeightNetOp<T: Scalar> {
    pub cfg: WeightNetConfig,
    pub fc1: FullyConnected<T>,
    pub fc2: FullyConnected<T>,
    pub generator: GroupedFullyConnected<T>,
}

impl<T: Scalar> WeightNetOp<T> {
    pub fn new(cfg: WeightNetConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_width();
        let fc1 = FullyConnected::new(cfg.c_in, hidden, true)?;
        let fc2 = FullyConnected::new(hidden, cfg.alpha_width()?, true)?;
        let generator = GroupedFullyConnected::new(
            cfg.alpha_width()?,
            cfg.generator_outputs(),
            cfg.group_count()?,
            cfg.generator_bias,
        )?;
        Ok(WeightNetOp {
            cfg,
            fc1,
            fc2,
            generator,
        })
    }

    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.fc1.init_params(rng.next_u64());
        self.fc2.init_params(rng.next_u64());
        self.generator.init_params(rng.next_u64());
    }

    /// α = σ(fc2(fc1(GAP(x)))), entries strictly in (0, 1). No ReLU between
    /// the FCs unless the ablation flag is set.
    pub fn alpha(&self, tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let pooled = x.global_avg_pool()?;
        let mut hidden = self.fc1.forward(tape, &pooled)?;
        if self.cfg.relu_between_fcs {
            hidden = hidden.relu()?;
        }
        self.fc2.forward(tape, &hidden)?.sigmoid()
    }

    /// Map α through the grouped FC and reshape to per-sample kernels.
    pub fn generate(&self, tape: &Tape<T>, alpha: &NDTensor<T>) -> Result<GeneratedKernel<T>> {
        if alpha.shape().len() != 2 || alpha.shape()[1] != self.cfg.alpha_width()? {
            return Err(Error::ShapeMismatch {
                op: "weightnet_generate",
                lhs: alpha.shape().to_vec(),
                rhs: vec![self.cfg.alpha_width()?],
            });
        }
        let batch = alpha.shape()[0];
        let flat = self.generator.forward(tape, alpha)?;
        let tensor = flat.reshape(vec![batch, self.cfg.c_out, self.cfg.c_in, self.cfg.kh, self.cfg.kw])?;
        GeneratedKernel::new(
            tensor,
            KernelProvenance {
                operator: "weightnet".into(),
                batch_id: alpha.id(),
            },
        )
    }

    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>, stride: usize, pad: usize) -> Result<NDTensor<T>> {
        let alpha = self.alpha(tape, x)?;
        let kernels = self.generate(tape, &alpha)?;
        dynamic_conv_apply(&kernels, x, stride, pad)
    }

    pub fn parameters(&self) -> Vec<(String, &NDTensor<T>)> {
        let mut v = Vec::new();
        for (n, p) in self.fc1.parameters() {
            v.push((format!("fc1.{n}"), p));
        }
        for (n, p) in self.fc2.parameters() {
            v.push((format!("fc2.{n}"), p));
        }
        for (n, p) in self.generator.parameters() {
            v.push((format!("generator.{n}"), p));
        }
        v
    }
}

// ── the two extremes ────────────────────────────────────────────────

/// Mixture-of-experts conv: m expert kernels gated per sample.
pub struct CondConvOp<T: Scalar> {
    pub cfg: CondConvConfig,
    pub gate_fc: FullyConnected<T>,
    /// Expert bank, shape (m, C_out, C_in, kh, kw).
    pub experts: NDTensor<T>,
}

impl<T: Scalar> CondConvOp<T> {
    pub fn new(cfg: CondConvConfig) -> Result<Self> {
        cfg.validate()?;
        let gate_fc = FullyConnected::new(cfg.c_in, cfg.experts, true)?;
        let experts = NDTensor::zeros(vec![cfg.experts, cfg.c_out, cfg.c_in, cfg.kh, cfg.kw])?;
        Ok(CondConvOp {
            cfg,
            gate_fc,
            experts,
        })
    }

    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.gate_fc.init_params(rng.next_u64());
        let fan_in = self.cfg.c_in * self.cfg.kh * self.cfg.kw;
        crate::nn::init_uniform(&self.experts, fan_in, &mut rng);
    }

    /// α = σ(fc(GAP(x))): one sigmoid gate per expert, no normalization.
    pub fn alpha(&self, tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let pooled = x.global_avg_pool()?;
        self.gate_fc.forward(tape, &pooled)?.sigmoid()
    }

    /// Expert bank flattened to (m, C_out·C_in·kh·kw).
    fn bank2d(&self, tape: &Tape<T>) -> Result<NDTensor<T>> {
        self.experts
            .watch(tape)
            .reshape(vec![self.cfg.experts, self.cfg.kernel_numel()])
    }

    /// Mixture form: W′ = α₁W₁ + … + α_mW_m, accumulated expert by expert.
    pub fn mixture_kernel(&self, tape: &Tape<T>, alpha: &NDTensor<T>) -> Result<GeneratedKernel<T>> {
        self.check_alpha(alpha)?;
        let batch = alpha.shape()[0];
        let bank = self.bank2d(tape)?;
        let mut acc: Option<NDTensor<T>> = None;
        for i in 0..self.cfg.experts {
            let gate = alpha.narrow(1, i, 1)?; // [B,1]
            let expert = bank.narrow(0, i, 1)?; // [1,n]
            let contrib = gate.matmul(&expert)?; // outer product [B,n]
            acc = Some(match acc {
                None => contrib,
                Some(a) => a.add(&contrib)?,
            });
        }
        let flat = acc.expect("experts >= 1");
        let tensor = flat.reshape(self.kernel_shape(batch))?;
        GeneratedKernel::new(
            tensor,
            KernelProvenance {
                operator: "condconv/mixture".into(),
                batch_id: alpha.id(),
            },
        )
    }

    /// FC form: W′ = Wᵀ × α with W the (m × C_out·C_in·kh·kw) concatenation —
    /// one dense layer from α to the flat kernel.
    pub fn fc_kernel(&self, tape: &Tape<T>, alpha: &NDTensor<T>) -> Result<GeneratedKernel<T>> {
        self.check_alpha(alpha)?;
        let batch = alpha.shape()[0];
        let bank = self.bank2d(tape)?;
        let flat = alpha.matmul(&bank)?;
        let tensor = flat.reshape(self.kernel_shape(batch))?;
        GeneratedKernel::new(
            tensor,
            KernelProvenance {
                operator: "condconv/fc".into(),
                batch_id: alpha.id(),
            },
        )
    }

    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>, stride: usize, pad: usize) -> Result<NDTensor<T>> {
        let alpha = self.alpha(tape, x)?;
        let kernels = self.fc_kernel(tape, &alpha)?;
        dynamic_conv_apply(&kernels, x, stride, pad)
    }

    fn check_alpha(&self, alpha: &NDTensor<T>) -> Result<()> {
        if alpha.shape().len() != 2 || alpha.shape()[1] != self.cfg.experts {
            return Err(Error::ShapeMismatch {
                op: "condconv",
                lhs: alpha.shape().to_vec(),
                rhs: vec![self.cfg.experts],
            });
        }
        Ok(())
    }

    fn kernel_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.cfg.c_out, self.cfg.c_in, self.cfg.kh, self.cfg.kw]
    }

    pub fn parameters(&self) -> Vec<(String, &NDTensor<T>)> {
        let mut v = Vec::new();
        for (n, p) in self.gate_fc.parameters() {
            v.push((format!("gate.{n}"), p));
        }
        v.push(("experts".into(), &self.experts));
        v
    }
}

/// Squeeze-excitation conv: a static kernel plus per-channel gating, with
/// the gate applied on the input features, the output features, or the
/// kernel's output filters.
pub struct SeOp<T: Scalar> {
    pub cfg: SeConfig,
    pub fc1: FullyConnected<T>,
    pub fc2: FullyConnected<T>,
    /// Static kernel, shape (C_out, C_in, kh, kw).
    pub weight: NDTensor<T>,
}

impl<T: Scalar> SeOp<T> {
    pub fn new(cfg: SeConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden_width();
        let fc1 = FullyConnected::new(cfg.c_in, hidden, true)?;
        let fc2 = FullyConnected::new(hidden, cfg.gate_width(), true)?;
        let weight = NDTensor::zeros(vec![cfg.c_out, cfg.c_in, cfg.kh, cfg.kw])?;
        Ok(SeOp {
            cfg,
            fc1,
            fc2,
            weight,
        })
    }

    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.fc1.init_params(rng.next_u64());
        self.fc2.init_params(rng.next_u64());
        let fan_in = self.cfg.c_in * self.cfg.kh * self.cfg.kw;
        crate::nn::init_uniform(&self.weight, fan_in, &mut rng);
    }

    /// α = σ(fc2(δ(fc1(GAP(x))))) — this form keeps the ReLU.
    pub fn alpha(&self, tape: &Tape<T>, x: &NDTensor<T>) -> Result<NDTensor<T>> {
        let pooled = x.global_avg_pool()?;
        let hidden = self.fc1.forward(tape, &pooled)?.relu()?;
        self.fc2.forward(tape, &hidden)?.sigmoid()
    }

    pub fn forward(&self, tape: &Tape<T>, x: &NDTensor<T>, stride: usize, pad: usize) -> Result<NDTensor<T>> {
        let alpha = self.alpha(tape, x)?;
        let w = self.weight.watch(tape);
        match self.cfg.placement {
            SePlacement::FeaturePre => {
                let gated = x.mul_channels(&alpha)?;
                gated.conv2d(&w, 1, stride, pad)
            }
            SePlacement::FeaturePost => {
                let y = x.conv2d(&w, 1, stride, pad)?;
                y.mul_channels(&alpha)
            }
            SePlacement::Kernel => {
                let kernels = se_kernel_form(&w, &alpha)?;
                dynamic_conv_apply(&kernels, x, stride, pad)
            }
        }
    }

    pub fn parameters(&self) -> Vec<(String, &NDTensor<T>)> {
        let mut v = Vec::new();
        for (n, p) in self.fc1.parameters() {
            v.push((format!("fc1.{n}"), p));
        }
        for (n, p) in self.fc2.parameters() {
            v.push((format!("fc2.{n}"), p));
        }
        v.push(("weight".into(), &self.weight));
        v
    }
}

/// Kernel-space gating: per-sample kernel with output filter c scaled by
/// α_c. Equivalently, the grouped FC with C groups where block c holds the
/// static filter c.
pub fn se_kernel_form<T: Scalar>(
    w_static: &NDTensor<T>,
    alpha: &NDTensor<T>,
) -> Result<GeneratedKernel<T>> {
    if w_static.shape().len() != 4 {
        return Err(Error::BadGeometry {
            op: "se_kernel_form",
            msg: "expected a (C_out, C_in, kh, kw) static kernel".into(),
            shape: w_static.shape().to_vec(),
        });
    }
    let (c_out, c_in, kh, kw) = {
        let s = w_static.shape();
        (s[0], s[1], s[2], s[3])
    };
    if alpha.shape().len() != 2 || alpha.shape()[1] != c_out {
        return Err(Error::ShapeMismatch {
            op: "se_kernel_form",
            lhs: alpha.shape().to_vec(),
            rhs: vec![c_out],
        });
    }
    let batch = alpha.shape()[0];
    // Broadcast the static kernel per sample, then scale filter planes:
    // (B, C_out, C_in·kh·kw) gated per (sample, filter).
    let per_sample = w_static
        .broadcast_batch(batch)?
        .reshape(vec![batch, c_out, c_in * kh, kw])?;
    let gated = per_sample.mul_channels(alpha)?;
    let tensor = gated.reshape(vec![batch, c_out, c_in, kh, kw])?;
    GeneratedKernel::new(
        tensor,
        KernelProvenance {
            operator: "se/kernel".into(),
            batch_id: alpha.id(),
        },
    )
}

// ── the unifying table ──────────────────────────────────────────────

/// One row of the grouped-FC summary: how each operator configures the
/// weight-emitting layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedFcSpec {
    pub input_size: usize,
    pub group_count: usize,
    pub lambda: Ratio,
    pub output_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    CondConv { experts: usize },
    SeNet,
    WeightNet { input_mult: Ratio, group_mult: Ratio },
}

/// The grouped-FC configuration each operator induces for channel count `c`
/// and kernel extents kh×kw. Gating is the maximum-group extreme, the
/// mixture is the minimum-group extreme.
pub fn table1_config_of(kind: OperatorKind, c: usize, kh: usize, kw: usize) -> Result<GroupedFcSpec> {
    let output_size = c * c * kh * kw;
    match kind {
        OperatorKind::CondConv { experts } => {
            if experts == 0 {
                return Err(Error::Config("expert count must be >= 1".into()));
            }
            Ok(GroupedFcSpec {
                input_size: experts,
                group_count: 1,
                lambda: Ratio::int(experts as u64),
                output_size,
            })
        }
        OperatorKind::SeNet => Ok(GroupedFcSpec {
            input_size: c,
            group_count: c,
            lambda: Ratio::int(1),
            output_size,
        }),
        OperatorKind::WeightNet {
            input_mult,
            group_mult,
        } => {
            let cfg = WeightNetConfig::new(c, c, kh, kw, input_mult, group_mult);
            cfg.validate()?;
            Ok(GroupedFcSpec {
                input_size: cfg.alpha_width()?,
                group_count: cfg.group_count()?,
                lambda: Ratio::new(input_mult.num() * group_mult.den(), input_mult.den() * group_mult.num())?,
                output_size,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> NDTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        NDTensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn weightnet_alpha_is_half_for_zero_input() {
        // Zero input and zero biases push exactly 0 through both FCs.
        let cfg = WeightNetConfig::new(4, 4, 3, 3, Ratio::int(2), Ratio::int(2));
        let op = WeightNetOp::<f64>::new(cfg).unwrap();
        let x = NDTensor::zeros(vec![2, 4, 5, 5]).unwrap();
        let tape = Tape::new();
        let a = op.alpha(&tape, &x).unwrap();
        assert_eq!(a.shape(), [2, 8]);
        assert!(a.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weightnet_alpha_stays_in_open_unit_interval() {
        let cfg = WeightNetConfig::new(4, 4, 3, 3, Ratio::int(1), Ratio::int(1));
        let mut op = WeightNetOp::<f64>::new(cfg).unwrap();
        op.init_params(3);
        let x = rand_tensor(vec![3, 4, 6, 6], 4);
        let tape = Tape::new();
        let a = op.alpha(&tape, &x).unwrap();
        assert!(a.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn weightnet_alpha_matches_manual_op_composition() {
        let cfg = WeightNetConfig::new(6, 6, 3, 3, Ratio::int(2), Ratio::int(1));
        let mut op = WeightNetOp::<f64>::new(cfg).unwrap();
        op.init_params(5);
        let x = rand_tensor(vec![2, 6, 4, 4], 6);
        let tape = Tape::new();
        let got = op.alpha(&tape, &x).unwrap();
        // Manual composition of the tensor-core ops (no ReLU in between).
        let pooled = x.global_avg_pool().unwrap();
        let h = pooled
            .matmul(&op.fc1.weight.transpose2d().unwrap())
            .unwrap()
            .add_bias2d(op.fc1.bias.as_ref().unwrap())
            .unwrap();
        let z = h
            .matmul(&op.fc2.weight.transpose2d().unwrap())
            .unwrap()
            .add_bias2d(op.fc2.bias.as_ref().unwrap())
            .unwrap();
        let want = z.sigmoid().unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weightnet_identity_construction_reproduces_static_kernel() {
        // M = G = 1: the generator has C_in groups, block b spans output
        // filter... block c maps alpha_c to the flat slice of filters it
        // owns. Setting block c to the matching slice of a fixed static
        // kernel and bypassing the sigmoid with alpha = 1 must reproduce
        // that kernel for every sample.
        let (c, k) = (4, 3);
        let cfg = WeightNetConfig::new(c, c, k, k, Ratio::int(1), Ratio::int(1));
        let op = WeightNetOp::<f64>::new(cfg).unwrap();
        let w_static = rand_tensor(vec![c, c, k, k], 7);
        let flat = w_static.to_vec();
        let out_per_group = c * k * k; // C_out·C_in·kh·kw / (G·C_in)
        for (gi, blk) in op.generator.blocks.iter().enumerate() {
            blk.update_data(|d| {
                d.copy_from_slice(&flat[gi * out_per_group..(gi + 1) * out_per_group]);
            });
        }
        let batch = 3;
        let alpha = NDTensor::full(vec![batch, c], 1.0).unwrap();
        let tape = Tape::new();
        let kernels = op.generate(&tape, &alpha).unwrap();
        for b in 0..batch {
            let kb = kernels.sample(b).unwrap();
            assert_eq!(kb.to_vec(), flat);
        }
    }

    #[test]
    fn weightnet_generate_matches_dense_block_diagonal_oracle() {
        let cfg = WeightNetConfig::new(8, 8, 3, 3, Ratio::int(2), Ratio::int(2));
        let mut op = WeightNetOp::<f64>::new(cfg.clone()).unwrap();
        op.init_params(42);
        let alpha = rand_tensor(vec![3, cfg.alpha_width().unwrap()], 43);
        let tape = Tape::new();
        let kernels = op.generate(&tape, &alpha).unwrap();
        // Dense materialization exists only on the oracle side.
        let dense = op.generator.materialize_dense().unwrap();
        let oracle = alpha.matmul(&dense.transpose2d().unwrap()).unwrap();
        let got = kernels
            .tensor
            .reshape(vec![3, cfg.generator_outputs()])
            .unwrap();
        for (a, b) in got.to_vec().iter().zip(oracle.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn condconv_alpha_matches_manual_op_composition() {
        let cfg = CondConvConfig {
            c_in: 5,
            c_out: 5,
            kh: 3,
            kw: 3,
            experts: 4,
        };
        let mut op = CondConvOp::<f64>::new(cfg).unwrap();
        op.init_params(44);
        let x = rand_tensor(vec![2, 5, 4, 4], 45);
        let tape = Tape::new();
        let got = op.alpha(&tape, &x).unwrap();
        let want = x
            .global_avg_pool()
            .unwrap()
            .matmul(&op.gate_fc.weight.transpose2d().unwrap())
            .unwrap()
            .add_bias2d(op.gate_fc.bias.as_ref().unwrap())
            .unwrap()
            .sigmoid()
            .unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(got.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn condconv_single_expert_unit_alpha_returns_the_expert() {
        let cfg = CondConvConfig {
            c_in: 3,
            c_out: 4,
            kh: 3,
            kw: 3,
            experts: 1,
        };
        let mut op = CondConvOp::<f64>::new(cfg).unwrap();
        op.init_params(46);
        let alpha = NDTensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let tape = Tape::new();
        let k = op.fc_kernel(&tape, &alpha).unwrap().sample(0).unwrap();
        assert_eq!(k.to_vec(), op.experts.to_vec());
    }

    #[test]
    fn se_alpha_stays_in_open_unit_interval() {
        let cfg = SeConfig {
            c_in: 6,
            c_out: 6,
            kh: 3,
            kw: 3,
            reduction: 2,
            placement: SePlacement::Kernel,
        };
        let mut op = SeOp::<f64>::new(cfg).unwrap();
        op.init_params(47);
        let x = rand_tensor(vec![3, 6, 5, 5], 48);
        let tape = Tape::new();
        let a = op.alpha(&tape, &x).unwrap();
        assert!(a.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn weightnet_generator_param_count_is_lambda_times_conv() {
        // Table-1 λ claim, verified by enumerating stored scalars.
        for (m, g) in [(1u64, 1u64), (2, 2), (4, 2), (8, 2), (2, 1)] {
            let cfg = WeightNetConfig::new(
                8,
                8,
                3,
                3,
                Ratio::int(m),
                Ratio::int(g),
            );
            let op = WeightNetOp::<f64>::new(cfg.clone()).unwrap();
            let lambda = cfg.lambda().unwrap();
            assert_eq!(
                op.generator.param_count(),
                lambda * 8 * 8 * 3 * 3,
                "M={m} G={g}"
            );
        }
    }

    #[test]
    fn weightnet_rejects_invalid_divisibility() {
        // G·C_in = 3 does not divide M·C_in = 4.
        let cfg = WeightNetConfig::new(
            12,
            12,
            3,
            3,
            Ratio::new(1, 3).unwrap(),
            Ratio::new(1, 4).unwrap(),
        );
        match WeightNetOp::<f64>::new(cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("must divide"), "{msg}"),
            Err(other) => panic!("expected config error, got {other}"),
            Ok(_) => panic!("expected config error"),
        }
        // M·C_in not an integer.
        let cfg = WeightNetConfig::new(5, 5, 3, 3, Ratio::new(1, 2).unwrap(), Ratio::int(1));
        assert!(matches!(WeightNetOp::<f64>::new(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn condconv_alpha_is_half_for_zero_input() {
        let cfg = CondConvConfig {
            c_in: 4,
            c_out: 4,
            kh: 3,
            kw: 3,
            experts: 4,
        };
        let op = CondConvOp::<f64>::new(cfg).unwrap();
        let x = NDTensor::zeros(vec![2, 4, 5, 5]).unwrap();
        let tape = Tape::new();
        let a = op.alpha(&tape, &x).unwrap();
        assert!(a.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn condconv_single_expert_gate_is_scalar_per_sample() {
        let cfg = CondConvConfig {
            c_in: 3,
            c_out: 3,
            kh: 1,
            kw: 1,
            experts: 1,
        };
        let mut op = CondConvOp::<f64>::new(cfg).unwrap();
        op.init_params(8);
        let x = rand_tensor(vec![4, 3, 2, 2], 9);
        let tape = Tape::new();
        let a = op.alpha(&tape, &x).unwrap();
        assert_eq!(a.shape(), [4, 1]);
    }

    #[test]
    fn condconv_one_hot_alpha_selects_expert() {
        let cfg = CondConvConfig {
            c_in: 3,
            c_out: 4,
            kh: 3,
            kw: 3,
            experts: 5,
        };
        let mut op = CondConvOp::<f64>::new(cfg).unwrap();
        op.init_params(10);
        let chosen = 2;
        let mut a = vec![0.0; 5];
        a[chosen] = 1.0;
        let alpha = NDTensor::from_vec(vec![1, 5], a).unwrap();
        let tape = Tape::new();
        for kernel in [
            op.mixture_kernel(&tape, &alpha).unwrap(),
            op.fc_kernel(&tape, &alpha).unwrap(),
        ] {
            let got = kernel.sample(0).unwrap().to_vec();
            let want = op.experts.narrow(0, chosen, 1).unwrap().to_vec();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn condconv_zero_alpha_gives_zero_kernel() {
        let cfg = CondConvConfig {
            c_in: 2,
            c_out: 2,
            kh: 3,
            kw: 3,
            experts: 3,
        };
        let mut op = CondConvOp::<f64>::new(cfg).unwrap();
        op.init_params(11);
        let alpha = NDTensor::zeros(vec![2, 3]).unwrap();
        let tape = Tape::new();
        let kernel = op.mixture_kernel(&tape, &alpha).unwrap();
        assert!(kernel.tensor.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn condconv_mixture_matches_loop_accumulation_oracle() {
        let cfg = CondConvConfig {
            c_in: 3,
            c_out: 4,
            kh: 3,
            kw: 3,
            experts: 4,
        };
        let mut op = CondConvOp::<f64>::new(cfg.clone()).unwrap();
        op.init_params(12);
        let alpha = rand_tensor(vec![2, 4], 13);
        let tape = Tape::new();
        let kernel = op.mixture_kernel(&tape, &alpha).unwrap();
        // Scalar-loop oracle.
        let av = alpha.to_vec();
        let ev = op.experts.to_vec();
        let n = cfg.kernel_numel();
        for b in 0..2 {
            let got = kernel.sample(b).unwrap().to_vec();
            for j in 0..n {
                let mut want = 0.0;
                for i in 0..4 {
                    want += av[b * 4 + i] * ev[i * n + j];
                }
                assert!((got[j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn se_alpha_is_half_for_zero_input() {
        let cfg = SeConfig {
            c_in: 6,
            c_out: 6,
            kh: 3,
            kw: 3,
            reduction: 2,
            placement: SePlacement::Kernel,
        };
        let op = SeOp::<f64>::new(cfg).unwrap();
        let x = NDTensor::zeros(vec![2, 6, 4, 4]).unwrap();
        let tape = Tape::new();
        let a = op.alpha(&tape, &x).unwrap();
        assert!(a.to_vec().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn se_alpha_matches_manual_composition_with_relu() {
        let cfg = SeConfig {
            c_in: 8,
            c_out: 8,
            kh: 3,
            kw: 3,
            reduction: 4,
            placement: SePlacement::Kernel,
        };
        let mut op = SeOp::<f64>::new(cfg).unwrap();
        op.init_params(14);
        let x = rand_tensor(vec![2, 8, 5, 5], 15);
        let tape = Tape::new();
        let got = op.alpha(&tape, &x).unwrap();
        let pooled = x.global_avg_pool().unwrap();
        let h = pooled
            .matmul(&op.fc1.weight.transpose2d().unwrap())
            .unwrap()
            .add_bias2d(op.fc1.bias.as_ref().unwrap())
            .unwrap()
            .relu()
            .unwrap();
        let want = h
            .matmul(&op.fc2.weight.transpose2d().unwrap())
            .unwrap()
            .add_bias2d(op.fc2.bias.as_ref().unwrap())
            .unwrap()
            .sigmoid()
            .unwrap();
        for (a, b) in got.to_vec().iter().zip(want.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn se_kernel_form_identity_gate_keeps_static_kernel() {
        let w = rand_tensor(vec![4, 3, 3, 3], 16);
        let alpha = NDTensor::full(vec![2, 4], 1.0).unwrap();
        let k = se_kernel_form(&w, &alpha).unwrap();
        for b in 0..2 {
            assert_eq!(k.sample(b).unwrap().to_vec(), w.to_vec());
        }
    }

    #[test]
    fn se_kernel_form_one_hot_gate_keeps_single_filter() {
        let w = rand_tensor(vec![4, 3, 3, 3], 17);
        let c = 1;
        let mut a = vec![0.0; 4];
        a[c] = 1.0;
        let alpha = NDTensor::from_vec(vec![1, 4], a).unwrap();
        let k = se_kernel_form(&w, &alpha).unwrap().sample(0).unwrap();
        let kv = k.to_vec();
        let wv = w.to_vec();
        let filt = 3 * 3 * 3;
        for o in 0..4 {
            for j in 0..filt {
                let want = if o == c { wv[o * filt + j] } else { 0.0 };
                assert_eq!(kv[o * filt + j], want);
            }
        }
    }

    #[test]
    fn dynamic_conv_batch_one_equals_plain_conv() {
        let x = rand_tensor(vec![1, 3, 5, 5], 18);
        let w = rand_tensor(vec![4, 3, 3, 3], 19);
        let kernels = GeneratedKernel::new(
            w.reshape(vec![1, 4, 3, 3, 3]).unwrap(),
            KernelProvenance {
                operator: "test".into(),
                batch_id: 0,
            },
        )
        .unwrap();
        let y = dynamic_conv_apply(&kernels, &x, 1, 1).unwrap();
        let plain = x.conv2d(&w, 1, 1, 1).unwrap();
        assert_eq!(y.to_vec(), plain.to_vec());
    }

    #[test]
    fn dynamic_conv_shared_kernel_equals_broadcast_static_conv() {
        let batch = 3;
        let x = rand_tensor(vec![batch, 3, 5, 5], 20);
        let w = rand_tensor(vec![4, 3, 3, 3], 21);
        let kernels = se_kernel_form(&w, &NDTensor::full(vec![batch, 4], 1.0).unwrap()).unwrap();
        let y = dynamic_conv_apply(&kernels, &x, 1, 1).unwrap();
        let plain = x.conv2d(&w, 1, 1, 1).unwrap();
        for (a, b) in y.to_vec().iter().zip(plain.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dynamic_conv_rejects_batch_mismatch() {
        let x = rand_tensor(vec![2, 3, 5, 5], 22);
        let w = rand_tensor(vec![3, 4, 3, 3, 3], 23);
        let kernels = GeneratedKernel::new(
            w,
            KernelProvenance {
                operator: "test".into(),
                batch_id: 0,
            },
        )
        .unwrap();
        assert!(matches!(
            dynamic_conv_apply(&kernels, &x, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn generated_kernel_rejects_non_finite_entries() {
        let mut data = vec![0.0f64; 1 * 2 * 2 * 1 * 1];
        data[1] = f64::NAN;
        let t = NDTensor::from_vec(vec![1, 2, 2, 1, 1], data).unwrap();
        let r = GeneratedKernel::new(
            t,
            KernelProvenance {
                operator: "test".into(),
                batch_id: 0,
            },
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn wnk_roundtrip_preserves_bytes() {
        let dir = std::env::temp_dir().join(format!("wnk_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("k.wnk");
        let t = rand_tensor(vec![2, 3, 2, 3, 3], 24);
        let k = GeneratedKernel::new(
            t.clone(),
            KernelProvenance {
                operator: "test".into(),
                batch_id: 0,
            },
        )
        .unwrap();
        k.write_wnk(&path).unwrap();
        let (dims, data) = read_wnk(&path).unwrap();
        assert_eq!(dims, [2, 3, 2, 3, 3]);
        for (a, b) in data.iter().zip(t.to_vec()) {
            assert_eq!(*a, b as f32);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn table1_rows_match_reference_values() {
        // Mixture row: input m, one group, λ = m.
        let row = table1_config_of(OperatorKind::CondConv { experts: 4 }, 16, 3, 3).unwrap();
        assert_eq!(
            (row.input_size, row.group_count, row.lambda, row.output_size),
            (4, 1, Ratio::int(4), 16 * 16 * 9)
        );
        // Gating row: input C, C groups, λ = 1.
        let row = table1_config_of(OperatorKind::SeNet, 16, 3, 3).unwrap();
        assert_eq!(
            (row.input_size, row.group_count, row.lambda),
            (16, 16, Ratio::int(1))
        );
        // General row: input M·C, G·C groups, λ = M/G.
        let row = table1_config_of(
            OperatorKind::WeightNet {
                input_mult: Ratio::int(2),
                group_mult: Ratio::int(2),
            },
            16,
            3,
            3,
        )
        .unwrap();
        assert_eq!(
            (row.input_size, row.group_count, row.lambda),
            (32, 32, Ratio::int(1))
        );
    }

    #[test]
    fn table1_embeds_both_extremes_as_weightnet_configs() {
        // The mixture row is the M = m/C, G = 1/C configuration; the gating
        // row is M = 1, G = 1.
        let c = 16;
        let m_experts = 4;
        let cc = table1_config_of(OperatorKind::CondConv { experts: m_experts }, c, 3, 3).unwrap();
        let wn = table1_config_of(
            OperatorKind::WeightNet {
                input_mult: Ratio::new(m_experts as u64, c as u64).unwrap(),
                group_mult: Ratio::new(1, c as u64).unwrap(),
            },
            c,
            3,
            3,
        )
        .unwrap();
        assert_eq!(cc, wn);
        let se = table1_config_of(OperatorKind::SeNet, c, 3, 3).unwrap();
        let wn = table1_config_of(
            OperatorKind::WeightNet {
                input_mult: Ratio::int(1),
                group_mult: Ratio::int(1),
            },
            c,
            3,
            3,
        )
        .unwrap();
        assert_eq!(se, wn);
    }
}
