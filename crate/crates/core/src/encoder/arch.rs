//! Backbone and head architectures as pure functions over a [`ParamStore`].
//!
//! Residual backbone names follow the torchvision `resnet18` state dict
//! (`conv1.weight`, `bn1.running_mean`, `layer2.0.downsample.0.weight`, ...);
//! the classifier (`fc.*`) is not part of the backbone. Inside an encoder the
//! backbone lives under the `backbone.` prefix, the heads under `projector.`
//! and `predictor.` with `Sequential`-style indices (`0` linear, `1` batch
//! norm, `3` linear).

use candle_core::{DType, Tensor, D};

use super::params::{constant, kaiming_uniform, uniform, ParamKind, ParamStore};
use crate::error::Result;
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneArch {
    Resnet18,
    TinyCnn,
}

/// How batch-norm layers in the heads normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Use stored running statistics (evaluation).
    Running,
    /// Use the batch's statistics; optionally fold them into the running buffers.
    Batch { update: bool },
}

/// Declared shape of one tensor in an architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub role: Role,
}

/// What a tensor does, which fixes its fresh initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

fn push(out: &mut Vec<TensorSpec>, name: String, shape: Vec<usize>, role: Role) {
    let kind = match role {
        Role::RunningMean | Role::RunningVar => ParamKind::Buffer,
        _ => ParamKind::Weight,
    };
    out.push(TensorSpec {
        name,
        shape,
        kind,
        role,
    });
}

fn conv_spec(out: &mut Vec<TensorSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    let role = Role::Weight {
        fan_in: cin * k * k,
    };
    push(out, format!("{name}.weight"), vec![cout, cin, k, k], role);
}

fn bn_spec(out: &mut Vec<TensorSpec>, name: &str, c: usize) {
    push(out, format!("{name}.weight"), vec![c], Role::NormScale);
    push(out, format!("{name}.bias"), vec![c], Role::NormShift);
    push(out, format!("{name}.running_mean"), vec![c], Role::RunningMean);
    push(out, format!("{name}.running_var"), vec![c], Role::RunningVar);
}

fn linear_spec(out: &mut Vec<TensorSpec>, name: &str, din: usize, dout: usize) {
    let (w, b) = (Role::Weight { fan_in: din }, Role::Bias { fan_in: din });
    push(out, format!("{name}.weight"), vec![dout, din], w);
    push(out, format!("{name}.bias"), vec![dout], b);
}

const RESNET18_WIDTHS: [usize; 4] = [64, 128, 256, 512];

/// Unprefixed tensor layout of a backbone.
pub fn backbone_specs(arch: BackboneArch, tiny_channels: &[usize]) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    match arch {
        BackboneArch::Resnet18 => {
            conv_spec(&mut out, "conv1", 64, 3, 7);
            bn_spec(&mut out, "bn1", 64);
            let mut cin = 64;
            for (li, &w) in RESNET18_WIDTHS.iter().enumerate() {
                for b in 0..2 {
                    let p = format!("layer{}.{b}", li + 1);
                    let block_in = if b == 0 { cin } else { w };
                    conv_spec(&mut out, &format!("{p}.conv1"), w, block_in, 3);
                    bn_spec(&mut out, &format!("{p}.bn1"), w);
                    conv_spec(&mut out, &format!("{p}.conv2"), w, w, 3);
                    bn_spec(&mut out, &format!("{p}.bn2"), w);
                    if b == 0 && li > 0 {
                        conv_spec(&mut out, &format!("{p}.downsample.0"), w, block_in, 1);
                        bn_spec(&mut out, &format!("{p}.downsample.1"), w);
                    }
                }
                cin = w;
            }
        }
        BackboneArch::TinyCnn => {
            let mut cin = 3;
            for (i, &c) in tiny_channels.iter().enumerate() {
                conv_spec(&mut out, &format!("conv{}", i + 1), c, cin, 3);
                bn_spec(&mut out, &format!("bn{}", i + 1), c);
                cin = c;
            }
        }
    }
    out
}

/// Pooled output width of a backbone.
pub fn backbone_width(arch: BackboneArch, tiny_channels: &[usize]) -> usize {
    match arch {
        BackboneArch::Resnet18 => 512,
        BackboneArch::TinyCnn => tiny_channels.last().copied().unwrap_or(3),
    }
}

/// Tensor layout of a two-layer MLP head: linear, batch norm, ReLU, linear.
pub fn head_specs(prefix: &str, din: usize, hidden: usize, dout: usize) -> Vec<TensorSpec> {
    let mut out = Vec::new();
    linear_spec(&mut out, &format!("{prefix}.0"), din, hidden);
    bn_spec(&mut out, &format!("{prefix}.1"), hidden);
    linear_spec(&mut out, &format!("{prefix}.3"), hidden, dout);
    out
}

/// Fresh values for a tensor: Kaiming-uniform weights, PyTorch-style uniform
/// linear biases, identity batch norm.
pub fn init_tensor(spec: &TensorSpec, rng: &mut Rng) -> Result<Tensor> {
    let shape = spec.shape.as_slice();
    match spec.role {
        Role::Weight { fan_in } => kaiming_uniform(shape, fan_in, rng),
        Role::Bias { fan_in } => uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng),
        Role::NormScale | Role::RunningVar => constant(shape, 1.0),
        Role::NormShift | Role::RunningMean => constant(shape, 0.0),
    }
}

pub struct Forward<'a> {
    pub store: &'a ParamStore,
    pub track: bool,
}

impl Forward<'_> {
    fn p(&self, name: &str) -> Result<Tensor> {
        self.store.tensor(name, self.track)
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize, pad: usize) -> Result<Tensor> {
        let w = self.p(&format!("{name}.weight"))?;
        Ok(super::conv::conv2d(x, &w, stride, pad)?)
    }

    /// Batch norm with frozen running statistics over dim 1.
    fn bn_frozen(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mut shape = vec![1usize; x.rank()];
        shape[1] = c;
        let mean = self.p(&format!("{name}.running_mean"))?.reshape(shape.as_slice())?;
        let var = self.p(&format!("{name}.running_var"))?.reshape(shape.as_slice())?;
        let w = self.p(&format!("{name}.weight"))?.reshape(shape.as_slice())?;
        let b = self.p(&format!("{name}.bias"))?.reshape(shape.as_slice())?;
        let scale = (var + BN_EPS)?.sqrt()?.recip()?.mul(&w)?;
        let shift = b.sub(&mean.mul(&scale)?)?;
        Ok(x.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }

    /// Batch norm over an `N×C` input using batch statistics.
    fn bn_batch(&self, x: &Tensor, name: &str, update: bool) -> Result<Tensor> {
        let n = x.dim(0)?;
        let mean = x.mean_keepdim(0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(0)?;
        if update {
            let rm_name = format!("{name}.running_mean");
            let rv_name = format!("{name}.running_var");
            let rm = self.store.tensor(&rm_name, false)?;
            let rv = self.store.tensor(&rv_name, false)?;
            let unbiased = if n > 1 {
                (var.detach().squeeze(0)? * (n as f64 / (n as f64 - 1.0)))?
            } else {
                var.detach().squeeze(0)?
            };
            let new_rm =
                ((rm * (1.0 - BN_MOMENTUM))? + (mean.detach().squeeze(0)? * BN_MOMENTUM)?)?;
            let new_rv = ((rv * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
            self.store.set(&rm_name, &new_rm)?;
            self.store.set(&rv_name, &new_rv)?;
        }
        let y = centered.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let w = self.p(&format!("{name}.weight"))?.unsqueeze(0)?;
        let b = self.p(&format!("{name}.bias"))?.unsqueeze(0)?;
        Ok(y.broadcast_mul(&w)?.broadcast_add(&b)?)
    }

    fn linear(&self, x: &Tensor, name: &str) -> Result<Tensor> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    /// `N×3×H×W` normalized input to `N×width` pooled features.
    pub fn backbone(&self, arch: BackboneArch, depth: usize, x: &Tensor) -> Result<Tensor> {
        let x = match arch {
            BackboneArch::Resnet18 => self.resnet18(x)?,
            BackboneArch::TinyCnn => self.tiny_cnn(depth, x)?,
        };
        Ok(x.flatten_from(2)?.mean(D::Minus1)?)
    }

    fn tiny_cnn(&self, depth: usize, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for i in 1..=depth {
            let stride = if i == 1 { 1 } else { 2 };
            x = self.conv(&x, &format!("backbone.conv{i}"), stride, 1)?;
            x = self.bn_frozen(&x, &format!("backbone.bn{i}"))?;
            x = x.relu()?;
        }
        Ok(x)
    }

    fn resnet18(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.conv(x, "backbone.conv1", 2, 3)?;
        let x = self.bn_frozen(&x, "backbone.bn1")?.relu()?;
        // post-ReLU values are >= 0, so zero padding matches -inf padding
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        for layer in 1..=4 {
            for block in 0..2 {
                let p = format!("backbone.layer{layer}.{block}");
                let stride = if block == 0 && layer > 1 { 2 } else { 1 };
                let h = self.conv(&x, &format!("{p}.conv1"), stride, 1)?;
                let h = self.bn_frozen(&h, &format!("{p}.bn1"))?.relu()?;
                let h = self.conv(&h, &format!("{p}.conv2"), 1, 1)?;
                let h = self.bn_frozen(&h, &format!("{p}.bn2"))?;
                let shortcut = if block == 0 && layer > 1 {
                    let s = self.conv(&x, &format!("{p}.downsample.0"), stride, 0)?;
                    self.bn_frozen(&s, &format!("{p}.downsample.1"))?
                } else {
                    x.clone()
                };
                x = (h + shortcut)?.relu()?;
            }
        }
        Ok(x)
    }

    pub fn head(&self, prefix: &str, x: &Tensor, mode: NormMode) -> Result<Tensor> {
        let h = self.linear(x, &format!("{prefix}.0"))?;
        let bn = format!("{prefix}.1");
        let h = match mode {
            NormMode::Running => self.bn_frozen(&h, &bn)?,
            NormMode::Batch { update } => self.bn_batch(&h, &bn, update)?,
        };
        self.linear(&h.relu()?, &format!("{prefix}.3"))
    }
}

/// Converts images to a normalized `N×3×S×S` f32 tensor.
pub fn images_to_tensor(
    images: &[&crate::image::Image],
    size: usize,
    mean: [f32; 3],
    std: [f32; 3],
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        let img = if img.height() != size || img.width() != size {
            std::borrow::Cow::Owned(img.resize(size, size))
        } else {
            std::borrow::Cow::Borrowed(*img)
        };
        for c in 0..3 {
            let src = if img.channels() == 1 { 0 } else { c };
            let plane = &img.data()[src * size * size..(src + 1) * size * size];
            data.extend(plane.iter().map(|v| (v - mean[c]) / std[c]));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), &candle_core::Device::Cpu)?
        .to_dtype(DType::F32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet18_layout_matches_torchvision_counts() {
        let specs = backbone_specs(BackboneArch::Resnet18, &[]);
        let weights: usize = specs
            .iter()
            .filter(|s| s.kind == ParamKind::Weight)
            .map(|s| s.shape.iter().product::<usize>())
            .sum();
        // torchvision resnet18 has 11,689,512 parameters, 513,000 of them in fc
        assert_eq!(weights, 11_689_512 - 513_000);
        assert!(specs.iter().any(|s| s.name == "layer4.0.downsample.1.running_var"));
    }
}
