//! Stateful layer wrappers: each owns its parameters, their gradients and
//! whatever its forward pass must save for the backward pass.

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormCache, BatchNormState, Mode, PointwiseKernel, SpatialKernel};
use crate::shift::{self, ShiftSpec};
use crate::tensor::{Init, InitPolicy, Real, Shape, Tensor};

pub struct ParamMut<'a, T> {
    pub name: String,
    pub value: &'a mut Tensor<T>,
    pub grad: &'a mut Tensor<T>,
}

pub struct ParamRef<'a, T> {
    pub name: String,
    pub value: &'a Tensor<T>,
}

pub trait Layer<T: Real> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Overwrites parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>>;

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        Vec::new()
    }

    /// Non-learned state saved in checkpoints (batch-norm running statistics).
    fn buffers(&self) -> Vec<ParamRef<'_, T>> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}

/// Stable per-parameter seed derived from a network seed and a parameter name.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn join(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

pub struct Conv2dLayer<T: Real> {
    pub name: String,
    pub kernel: SpatialKernel<T>,
    grad: Tensor<T>,
    saved: Option<Tensor<T>>,
}

impl<T: Real> Conv2dLayer<T> {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let name = name.into();
        let shape = Shape::new(out_ch, in_ch, k, k);
        let policy = InitPolicy::new(
            Init::HeNormal {
                fan_in: in_ch * k * k,
            },
            derive_seed(seed, &join(&name, "weight")),
        );
        let kernel = SpatialKernel::same(Tensor::create(shape, policy)?, stride)?;
        Ok(Conv2dLayer {
            name,
            grad: Tensor::zeros(shape),
            kernel,
            saved: None,
        })
    }
}

impl<T: Real> Layer<T> for Conv2dLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d_spatial(x, &self.kernel)?;
        self.saved = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.saved.as_ref().ok_or(Error::MissingForward("conv2d"))?;
        let (dx, dw) = ops::conv2d_spatial_backward(x, &self.kernel, grad)?;
        self.grad = dw;
        Ok(dx)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![ParamRef {
            name: join(&self.name, "weight"),
            value: &self.kernel.weights,
        }]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![ParamMut {
            name: join(&self.name, "weight"),
            value: &mut self.kernel.weights,
            grad: &mut self.grad,
        }]
    }
}

pub struct PointwiseLayer<T: Real> {
    pub name: String,
    pub kernel: PointwiseKernel<T>,
    pub stride: usize,
    grad: Tensor<T>,
    saved: Option<Tensor<T>>,
}

impl<T: Real> PointwiseLayer<T> {
    pub fn new(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        seed: u64,
    ) -> Result<Self> {
        let name = name.into();
        let shape = Shape::new(1, 1, in_ch, out_ch);
        let policy = InitPolicy::new(
            Init::HeNormal { fan_in: in_ch },
            derive_seed(seed, &join(&name, "weight")),
        );
        Ok(Self::from_kernel(
            name,
            PointwiseKernel::new(Tensor::create(shape, policy)?)?,
            stride,
        ))
    }

    pub fn from_kernel(name: impl Into<String>, kernel: PointwiseKernel<T>, stride: usize) -> Self {
        PointwiseLayer {
            name: name.into(),
            grad: Tensor::zeros(kernel.weights.shape()),
            kernel,
            stride,
            saved: None,
        }
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }
}

impl<T: Real> Layer<T> for PointwiseLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = ops::conv2d_pointwise(x, &self.kernel, self.stride)?;
        self.saved = (mode == Mode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.saved.as_ref().ok_or(Error::MissingForward("pointwise"))?;
        let (dx, dw) = ops::conv2d_pointwise_backward(x, &self.kernel, self.stride, grad)?;
        self.grad = dw;
        Ok(dx)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![ParamRef {
            name: join(&self.name, "weight"),
            value: &self.kernel.weights,
        }]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![ParamMut {
            name: join(&self.name, "weight"),
            value: &mut self.kernel.weights,
            grad: &mut self.grad,
        }]
    }
}

/// Batch norm followed by ReLU.
pub struct BnReluLayer<T: Real> {
    pub name: String,
    pub state: BatchNormState<T>,
    dgamma: Tensor<T>,
    dbeta: Tensor<T>,
    cache: Option<(BatchNormCache<T>, Tensor<T>)>,
}

impl<T: Real> BnReluLayer<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        BnReluLayer {
            name: name.into(),
            state: BatchNormState::new(channels),
            dgamma: Tensor::zeros(shape),
            dbeta: Tensor::zeros(shape),
            cache: None,
        }
    }
}

impl<T: Real> Layer<T> for BnReluLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, cache) = ops::batch_norm_forward(x, &mut self.state, mode)?;
        let out = ops::relu(&y);
        self.cache = (mode == Mode::Train).then_some((cache, y));
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (cache, pre) = self.cache.as_ref().ok_or(Error::MissingForward("batch_norm"))?;
        let g = ops::relu_backward(pre, grad)?;
        let (dx, dg, db) = ops::batch_norm_backward(cache, &self.state.gamma, &g)?;
        self.dgamma = dg;
        self.dbeta = db;
        Ok(dx)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: join(&self.name, "gamma"),
                value: &self.state.gamma,
            },
            ParamRef {
                name: join(&self.name, "beta"),
                value: &self.state.beta,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![
            ParamMut {
                name: join(&self.name, "gamma"),
                value: &mut self.state.gamma,
                grad: &mut self.dgamma,
            },
            ParamMut {
                name: join(&self.name, "beta"),
                value: &mut self.state.beta,
                grad: &mut self.dbeta,
            },
        ]
    }

    fn buffers(&self) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: join(&self.name, "running_mean"),
                value: &self.state.running_mean,
            },
            ParamRef {
                name: join(&self.name, "running_var"),
                value: &self.state.running_var,
            },
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (join(&self.name, "running_mean"), &mut self.state.running_mean),
            (join(&self.name, "running_var"), &mut self.state.running_var),
        ]
    }
}

pub struct ShiftLayer {
    pub spec: ShiftSpec,
}

impl<T: Real> Layer<T> for ShiftLayer {
    fn forward(&mut self, x: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        shift::shift_forward(x, &self.spec)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        shift::shift_backward(grad, &self.spec)
    }
}

/// Global average pool followed by the fully-connected classifier.
pub struct HeadLayer<T: Real> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    dweight: Tensor<T>,
    dbias: Tensor<T>,
    saved: Option<(Shape, Tensor<T>)>,
}

impl<T: Real> HeadLayer<T> {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize, seed: u64) -> Result<Self> {
        let name = name.into();
        let bound = 1.0 / (fin as f64).sqrt();
        let wshape = Shape::new(1, 1, fin, fout);
        let bshape = Shape::new(1, fout, 1, 1);
        let weight = Tensor::create(
            wshape,
            InitPolicy::new(
                Init::Uniform {
                    lo: -bound,
                    hi: bound,
                },
                derive_seed(seed, &join(&name, "weight")),
            ),
        )?;
        Ok(HeadLayer {
            name,
            weight,
            bias: Tensor::zeros(bshape),
            dweight: Tensor::zeros(wshape),
            dbias: Tensor::zeros(bshape),
            saved: None,
        })
    }
}

impl<T: Real> Layer<T> for HeadLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let pooled = ops::global_avg_pool(x);
        let y = ops::linear(&pooled, &self.weight, &self.bias)?;
        self.saved = (mode == Mode::Train).then(|| (x.shape(), pooled));
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, pooled) = self.saved.as_ref().ok_or(Error::MissingForward("head"))?;
        let (dp, dw, db) = ops::linear_backward(pooled, &self.weight, grad)?;
        self.dweight = dw;
        self.dbias = db;
        ops::global_avg_pool_backward(*shape, &dp)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        vec![
            ParamRef {
                name: join(&self.name, "weight"),
                value: &self.weight,
            },
            ParamRef {
                name: join(&self.name, "bias"),
                value: &self.bias,
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        vec![
            ParamMut {
                name: join(&self.name, "weight"),
                value: &mut self.weight,
                grad: &mut self.dweight,
            },
            ParamMut {
                name: join(&self.name, "bias"),
                value: &mut self.bias,
                grad: &mut self.dbias,
            },
        ]
    }
}
