//! Dense rank-4 tensors in batch-channel-row-column layout.
//!
//! Element `(n, c, i, j)` lives at `((n * C + c) * H + i) * W + j`, so one
//! channel plane of one batch item is a contiguous `H * W` slice. Shifts and
//! pointwise convolutions both work plane by plane on that slice.

use std::fmt;
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type. Training runs in `f32`; gradient checks use `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self;

    /// `c = alpha * a * b + beta * c` for row-major / arbitrarily strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the asserts above bound every strided access inside the slices,
                // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    /// Element count. Only call on shapes that already back a tensor.
    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn encode(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && i < self.h && j < self.w);
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    pub fn decode(&self, mut idx: usize) -> (usize, usize, usize, usize) {
        let j = idx % self.w;
        idx /= self.w;
        let i = idx % self.h;
        idx /= self.h;
        let c = idx % self.c;
        (idx / self.c, c, i, j)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    HeNormal { fan_in: usize },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitPolicy {
    pub init: Init,
    pub seed: u64,
}

impl InitPolicy {
    pub fn new(init: Init, seed: u64) -> Self {
        InitPolicy { init, seed }
    }

    pub fn zeros() -> Self {
        InitPolicy::new(Init::Zeros, 0)
    }

    pub fn constant(c: f64) -> Self {
        InitPolicy::new(Init::Constant(c), 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &head)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn create(shape: Shape, policy: InitPolicy) -> Result<Self> {
        let len = shape.checked_len().ok_or(Error::SizeOverflow(shape))?;
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        let data = match policy.init {
            Init::Zeros => vec![T::zero(); len],
            Init::Constant(c) => vec![T::of(c); len],
            Init::HeNormal { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::invalid("he_normal fan_in must be positive"));
                }
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::invalid(e.to_string()))?;
                (0..len).map(|_| T::of(normal.sample(&mut rng))).collect()
            }
            Init::Uniform { lo, hi } => {
                if !(lo < hi) {
                    return Err(Error::invalid(format!("uniform bounds {lo} >= {hi}")));
                }
                let dist = Uniform::new(lo, hi);
                (0..len).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.shape)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        match shape.checked_len() {
            Some(len) if len == data.len() => Ok(Tensor { shape, data }),
            Some(_) => Err(Error::LengthMismatch {
                shape,
                len: data.len(),
            }),
            None => Err(Error::SizeOverflow(shape)),
        }
    }

    /// Standard-normal entries, for tests and benchmarks.
    pub fn randn(shape: Shape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.len())
            .map(|_| T::of(rng.sample::<f64, _>(rand_distr::StandardNormal)))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.shape.encode(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: T) {
        let idx = self.shape.encode(n, c, i, j);
        self.data[idx] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// One batch item as a contiguous `C * H * W` slice.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape.c * self.shape.plane();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    pub fn map2(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "map2",
                expected: self.shape,
                actual: other.shape,
            });
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.map2(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.map2(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.map2(other, BinaryOp::Mul)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                expected: self.shape,
                actual: other.shape,
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "dot",
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64().unwrap() * b.to_f64().unwrap())
            .sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap().abs())
            .fold(0.0, f64::max)
    }

    /// `max |a - b| / max(max |b|, tiny)`.
    pub fn rel_error(&self, reference: &Self) -> Result<f64> {
        if self.shape != reference.shape {
            return Err(Error::ShapeMismatch {
                op: "rel_error",
                expected: reference.shape,
                actual: self.shape,
            });
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max);
        Ok(diff / reference.max_abs().max(f64::MIN_POSITIVE))
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

impl Tensor<f32> {
    /// Shape header (four little-endian `u64`) followed by little-endian `f32` data.
    pub fn write_blob<W: Write>(&self, w: &mut W) -> Result<()> {
        for d in self.shape.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn blob_len(&self) -> usize {
        32 + 4 * self.data.len()
    }

    pub fn read_blob<R: Read>(r: &mut R) -> Result<Self> {
        let mut dims = [0usize; 4];
        let mut word = [0u8; 8];
        for d in dims.iter_mut() {
            r.read_exact(&mut word)?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::Checkpoint("shape dimension exceeds usize".into()))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let len = shape.checked_len().ok_or(Error::SizeOverflow(shape))?;
        let bytes = len
            .checked_mul(4)
            .ok_or(Error::SizeOverflow(shape))?;
        let mut buf = vec![0u8; bytes];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data })
    }
}
