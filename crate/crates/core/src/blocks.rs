//! Composite modules: the Conv-Shift-Conv block (and its SC² variant with a
//! leading shift), the parameter-free downsampling residual, and the two-conv
//! ResNet basic block used as the baseline.
//!
//! Blocks are pre-activation: batch norm and ReLU precede each convolution,
//! and the residual branch taps the block input before any normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BnReluLayer, Conv2dLayer, Layer, ParamMut, ParamRef, PointwiseLayer};
use crate::ops::{self, Mode, PointwiseKernel};
use crate::shift::{self, ShiftSpec};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CscVariant {
    Csc,
    Sc2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CscConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expansion: f64,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
    pub variant: CscVariant,
    pub permutation_id: u64,
}

/// `floor(v + 0.5)`, at least 1.
pub fn round_channels(v: f64) -> usize {
    ((v + 0.5).floor() as usize).max(1)
}

impl CscConfig {
    pub fn new(in_channels: usize, out_channels: usize, expansion: f64, stride: usize) -> Self {
        CscConfig {
            in_channels,
            out_channels,
            expansion,
            kernel_size: 3,
            dilation: 1,
            stride,
            variant: CscVariant::Csc,
            permutation_id: 0,
        }
    }

    /// Intermediate width: `expansion` times the block's output channels.
    pub fn mid_channels(&self) -> usize {
        round_channels(self.expansion * self.out_channels as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("CSC channels must be positive"));
        }
        if !(self.expansion > 0.0) || !self.expansion.is_finite() {
            return Err(Error::config(format!("expansion must be > 0, got {}", self.expansion)));
        }
        if self.kernel_size % 2 == 0 || self.dilation == 0 {
            return Err(Error::config("shift kernel must be odd and dilation >= 1"));
        }
        match self.stride {
            1 if self.out_channels != self.in_channels => Err(Error::config(format!(
                "stride-1 CSC needs in = out, got {} -> {}",
                self.in_channels, self.out_channels
            ))),
            2 if self.out_channels != 2 * self.in_channels => Err(Error::config(format!(
                "stride-2 CSC must double channels, got {} -> {}",
                self.in_channels, self.out_channels
            ))),
            1 | 2 => Ok(()),
            s => Err(Error::config(format!("CSC stride must be 1 or 2, got {s}"))),
        }
    }

    pub fn shift_spec(&self) -> Result<ShiftSpec> {
        ShiftSpec::new(
            self.mid_channels(),
            self.kernel_size,
            self.dilation,
            self.permutation_id,
        )
    }

    /// The leading shift of an SC² block, over the input channels.
    pub fn leading_shift_spec(&self) -> Result<Option<ShiftSpec>> {
        match self.variant {
            CscVariant::Csc => Ok(None),
            CscVariant::Sc2 => Ok(Some(ShiftSpec::new(
                self.in_channels,
                self.kernel_size,
                self.dilation,
                self.permutation_id,
            )?)),
        }
    }
}

/// Residual for a downsampling block: 2x2 average pool, then channel `c` of
/// the output copies pooled channel `c mod C`. With `out = 2C` this is the
/// concatenation of two identical average pools.
pub fn downsample_tile<T: Real>(x: &Tensor<T>, out_channels: usize) -> Result<Tensor<T>> {
    let pooled = ops::avg_pool2(x)?;
    let s = pooled.shape();
    if out_channels < s.c {
        return Err(Error::invalid(format!(
            "downsample cannot shrink channels {} -> {out_channels}",
            s.c
        )));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, out_channels, s.h, s.w));
    for n in 0..s.n {
        for c in 0..out_channels {
            out.plane_mut(n, c).copy_from_slice(pooled.plane(n, c % s.c));
        }
    }
    Ok(out)
}

pub fn downsample_combine<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    downsample_tile(x, 2 * x.shape().c)
}

pub fn downsample_tile_backward<T: Real>(input: Shape, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let s = dy.shape();
    let pooled_shape = Shape::new(input.n, input.c, input.h / 2, input.w / 2);
    if s.n != input.n || s.h != pooled_shape.h || s.w != pooled_shape.w || s.c < input.c {
        return Err(Error::ShapeMismatch {
            op: "downsample_tile_backward",
            expected: pooled_shape,
            actual: s,
        });
    }
    let mut dp = Tensor::zeros(pooled_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = dy.plane(n, c).to_vec();
            for (d, v) in dp.plane_mut(n, c % input.c).iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    ops::avg_pool2_backward(input, &dp)
}

/// Weights of one CSC block, for building blocks with known parameters.
#[derive(Clone, Debug)]
pub struct BlockParams<T: Real> {
    pub p1: PointwiseKernel<T>,
    pub p2: PointwiseKernel<T>,
    pub bn1: ops::BatchNormState<T>,
    pub bn2: ops::BatchNormState<T>,
}

pub struct CscBlock<T: Real> {
    pub name: String,
    pub cfg: CscConfig,
    pub leading_shift: Option<ShiftSpec>,
    pub bn1: BnReluLayer<T>,
    pub p1: PointwiseLayer<T>,
    pub bn2: BnReluLayer<T>,
    pub shift: ShiftSpec,
    pub p2: PointwiseLayer<T>,
    /// When set, forward passes keep the post-shift activation in `recorded`.
    pub record: bool,
    pub recorded: Option<Tensor<T>>,
    input_shape: Option<Shape>,
}

impl<T: Real> CscBlock<T> {
    pub fn new(name: impl Into<String>, cfg: CscConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let mid = cfg.mid_channels();
        let p1 = PointwiseLayer::new(format!("{name}.p1"), cfg.in_channels, mid, 1, seed)?;
        let p2 = PointwiseLayer::new(
            format!("{name}.p2"),
            mid,
            cfg.out_channels,
            cfg.stride,
            seed,
        )?;
        Ok(CscBlock {
            bn1: BnReluLayer::new(format!("{name}.bn1"), cfg.in_channels),
            bn2: BnReluLayer::new(format!("{name}.bn2"), mid),
            shift: cfg.shift_spec()?,
            leading_shift: cfg.leading_shift_spec()?,
            p1,
            p2,
            name,
            cfg,
            record: false,
            recorded: None,
            input_shape: None,
        })
    }

    pub fn with_params(name: impl Into<String>, cfg: CscConfig, params: BlockParams<T>) -> Result<Self> {
        let mut block = Self::new(name, cfg, 0)?;
        let mid = block.cfg.mid_channels();
        let expect = |k: &PointwiseKernel<T>, m: usize, n: usize, which: &str| {
            if k.in_channels() != m || k.out_channels() != n {
                Err(Error::config(format!(
                    "{which} is {}x{}, block needs {m}x{n}",
                    k.in_channels(),
                    k.out_channels()
                )))
            } else {
                Ok(())
            }
        };
        expect(&params.p1, block.cfg.in_channels, mid, "p1")?;
        expect(&params.p2, mid, block.cfg.out_channels, "p2")?;
        if params.bn1.channels() != block.cfg.in_channels || params.bn2.channels() != mid {
            return Err(Error::config("batch-norm widths do not match the block"));
        }
        block.p1.kernel = params.p1;
        block.p2.kernel = params.p2;
        block.bn1.state = params.bn1;
        block.bn2.state = params.bn2;
        Ok(block)
    }

    pub fn params_snapshot(&self) -> BlockParams<T> {
        BlockParams {
            p1: self.p1.kernel.clone(),
            p2: self.p2.kernel.clone(),
            bn1: self.bn1.state.clone(),
            bn2: self.bn2.state.clone(),
        }
    }

    fn residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.cfg.stride == 1 {
            Ok(x.clone())
        } else {
            downsample_tile(x, self.cfg.out_channels)
        }
    }
}

impl<T: Real> Layer<T> for CscBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                op: "csc_forward",
                expected: self.cfg.in_channels,
                actual: x.shape().c,
            });
        }
        let lead = match &self.leading_shift {
            Some(spec) => Some(shift::shift_forward(x, spec)?),
            None => None,
        };
        let a = self.bn1.forward(lead.as_ref().unwrap_or(x), mode)?;
        let a = self.p1.forward(&a, mode)?;
        let a = self.bn2.forward(&a, mode)?;
        let main = if mode == Mode::Eval && !self.record {
            shift::fused_shift_pointwise(&a, &self.shift, &self.p2.kernel, self.cfg.stride)?
        } else {
            let shifted = shift::shift_forward(&a, &self.shift)?;
            let out = self.p2.forward(&shifted, mode)?;
            if self.record {
                self.recorded = Some(shifted);
            }
            out
        };
        self.input_shape = Some(x.shape());
        let mut out = self.residual(x)?;
        out.add_assign(&main)?;
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input_shape.ok_or(Error::MissingForward("csc"))?;
        let g = self.p2.backward(grad)?;
        let g = shift::shift_backward(&g, &self.shift)?;
        let g = self.bn2.backward(&g)?;
        let g = self.p1.backward(&g)?;
        let mut g = self.bn1.backward(&g)?;
        if let Some(spec) = &self.leading_shift {
            g = shift::shift_backward(&g, spec)?;
        }
        let res = if self.cfg.stride == 1 {
            grad.clone()
        } else {
            downsample_tile_backward(input, grad)?
        };
        g.add_assign(&res)?;
        Ok(g)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = self.bn1.params();
        v.extend(self.p1.params());
        v.extend(self.bn2.params());
        v.extend(self.p2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = self.bn1.params_mut();
        v.extend(self.p1.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.p2.params_mut());
        v
    }

    fn buffers(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
}

impl BasicConfig {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        BasicConfig {
            in_channels,
            mid_channels: out_channels,
            out_channels,
            kernel_size: 3,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.mid_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("basic block channels must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("basic block kernel must be odd"));
        }
        match self.stride {
            1 if self.in_channels != self.out_channels => Err(Error::config(format!(
                "stride-1 basic block needs in = out, got {} -> {}",
                self.in_channels, self.out_channels
            ))),
            2 if self.out_channels < self.in_channels => {
                Err(Error::config("downsampling basic block cannot shrink channels"))
            }
            1 | 2 => Ok(()),
            s => Err(Error::config(format!("basic block stride must be 1 or 2, got {s}"))),
        }
    }
}

/// Two 3x3 convolutions with a residual connection.
pub struct BasicBlock<T: Real> {
    pub name: String,
    pub cfg: BasicConfig,
    pub bn1: BnReluLayer<T>,
    pub conv1: Conv2dLayer<T>,
    pub bn2: BnReluLayer<T>,
    pub conv2: Conv2dLayer<T>,
    input_shape: Option<Shape>,
}

impl<T: Real> BasicBlock<T> {
    pub fn new(name: impl Into<String>, cfg: BasicConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let k = cfg.kernel_size;
        Ok(BasicBlock {
            bn1: BnReluLayer::new(format!("{name}.bn1"), cfg.in_channels),
            conv1: Conv2dLayer::new(
                format!("{name}.conv1"),
                cfg.in_channels,
                cfg.mid_channels,
                k,
                cfg.stride,
                seed,
            )?,
            bn2: BnReluLayer::new(format!("{name}.bn2"), cfg.mid_channels),
            conv2: Conv2dLayer::new(
                format!("{name}.conv2"),
                cfg.mid_channels,
                cfg.out_channels,
                k,
                1,
                seed,
            )?,
            name,
            cfg,
            input_shape: None,
        })
    }
}

impl<T: Real> Layer<T> for BasicBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = self.bn1.forward(x, mode)?;
        let a = self.conv1.forward(&a, mode)?;
        let a = self.bn2.forward(&a, mode)?;
        let main = self.conv2.forward(&a, mode)?;
        self.input_shape = Some(x.shape());
        let mut out = if self.cfg.stride == 1 {
            x.clone()
        } else {
            downsample_tile(x, self.cfg.out_channels)?
        };
        out.add_assign(&main)?;
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self.input_shape.ok_or(Error::MissingForward("basic"))?;
        let g = self.conv2.backward(grad)?;
        let g = self.bn2.backward(&g)?;
        let g = self.conv1.backward(&g)?;
        let mut g = self.bn1.backward(&g)?;
        let res = if self.cfg.stride == 1 {
            grad.clone()
        } else {
            downsample_tile_backward(input, grad)?
        };
        g.add_assign(&res)?;
        Ok(g)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = self.bn1.params();
        v.extend(self.conv1.params());
        v.extend(self.bn2.params());
        v.extend(self.conv2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = self.bn1.params_mut();
        v.extend(self.conv1.params_mut());
        v.extend(self.bn2.params_mut());
        v.extend(self.conv2.params_mut());
        v
    }

    fn buffers(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = self.bn1.buffers();
        v.extend(self.bn2.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = self.bn1.buffers_mut();
        v.extend(self.bn2.buffers_mut());
        v
    }
}
