//! The shift operation: every channel is translated by one fixed displacement
//! inside a `k x k` window. Shifts move memory and do no arithmetic.
//!
//! Channels are split into `k * k` shift groups of `floor(M / k^2)` channels.
//! Non-center directions take groups in raster order over the window; the
//! center group comes last and also absorbs the remainder channels. Any other
//! channel-to-group assignment is equivalent once the shift sits between two
//! pointwise convolutions, so `permutation_id` only picks which fixed
//! assignment is used.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{strided_size, PointwiseKernel};
use crate::tensor::{Real, Shape, Tensor};

/// Checkpointed as `(channels, kernel_size, dilation, permutation_id)`; the
/// displacement table is always recomputed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    channels: usize,
    kernel_size: usize,
    dilation: usize,
    permutation_id: u64,
    #[serde(skip)]
    displacements: Vec<(isize, isize)>,
    #[serde(skip)]
    groups: Vec<usize>,
}

/// Displacements of the non-center directions in raster order, then the center.
fn directions(kernel_size: usize) -> Vec<(isize, isize)> {
    let r = (kernel_size / 2) as isize;
    let mut dirs = Vec::with_capacity(kernel_size * kernel_size);
    for i in -r..=r {
        for j in -r..=r {
            if (i, j) != (0, 0) {
                dirs.push((i, j));
            }
        }
    }
    dirs.push((0, 0));
    dirs
}

/// Channel order for an assignment id. Id 0 is the identity.
pub fn channel_permutation(channels: usize, permutation_id: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..channels).collect();
    if permutation_id != 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(permutation_id);
        perm.shuffle(&mut rng);
    }
    perm
}

impl ShiftSpec {
    pub fn new(
        channels: usize,
        kernel_size: usize,
        dilation: usize,
        permutation_id: u64,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("shift needs at least one channel"));
        }
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "shift kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        if dilation == 0 {
            return Err(Error::invalid("dilation must be >= 1"));
        }
        let dirs = directions(kernel_size);
        let center = dirs.len() - 1;
        let per_group = channels / (kernel_size * kernel_size);
        // Canonical assignment: slot s belongs to group s / per_group, overflow to center.
        let slot_group = |slot: usize| {
            if per_group == 0 {
                center
            } else {
                (slot / per_group).min(center)
            }
        };
        let perm = channel_permutation(channels, permutation_id);
        let d = dilation as isize;
        let groups: Vec<usize> = perm.iter().map(|&slot| slot_group(slot)).collect();
        let displacements = groups
            .iter()
            .map(|&g| (dirs[g].0 * d, dirs[g].1 * d))
            .collect();
        Ok(ShiftSpec {
            channels,
            kernel_size,
            dilation,
            permutation_id,
            displacements,
            groups,
        })
    }

    /// Rebuilds the displacement table after deserialization.
    pub fn rebuilt(&self) -> Result<Self> {
        Self::new(
            self.channels,
            self.kernel_size,
            self.dilation,
            self.permutation_id,
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn permutation_id(&self) -> u64 {
        self.permutation_id
    }

    pub fn displacements(&self) -> &[(isize, isize)] {
        &self.displacements
    }

    pub fn displacement(&self, channel: usize) -> (isize, isize) {
        self.displacements[channel]
    }

    pub fn num_groups(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    /// Group index of a channel; `num_groups() - 1` is the center group.
    pub fn group_of(&self, channel: usize) -> usize {
        self.groups[channel]
    }

    /// Displacement `(dy, dx)` shared by the channels of a group.
    pub fn group_direction(&self, group: usize) -> (isize, isize) {
        let (dy, dx) = directions(self.kernel_size)[group];
        let d = self.dilation as isize;
        (dy * d, dx * d)
    }

    /// Channels of each group in ascending channel order. Groups can be empty
    /// when `channels < kernel_size^2`.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_groups()];
        for (c, &g) in self.groups.iter().enumerate() {
            out[g].push(c);
        }
        out
    }

    pub fn empty_groups(&self) -> usize {
        self.groups().iter().filter(|g| g.is_empty()).count()
    }

    /// Same table with every displacement negated (the adjoint shift).
    pub fn negated(&self) -> Self {
        let mut s = self.clone();
        for d in s.displacements.iter_mut() {
            *d = (-d.0, -d.1);
        }
        s
    }

    pub fn max_reach(&self) -> usize {
        (self.kernel_size / 2) * self.dilation
    }
}

pub fn make_shift_spec(
    channels: usize,
    kernel_size: usize,
    dilation: usize,
    permutation_id: u64,
) -> Result<ShiftSpec> {
    ShiftSpec::new(channels, kernel_size, dilation, permutation_id)
}

fn check_spec(op: &'static str, spec: &ShiftSpec, channels: usize) -> Result<()> {
    if spec.channels != channels {
        return Err(Error::ChannelMismatch {
            op,
            expected: spec.channels,
            actual: channels,
        });
    }
    Ok(())
}

/// Copies `src` translated by `(dy, dx)` into `dst`; vacated cells become zero.
fn shift_plane<T: Real>(src: &[T], dst: &mut [T], h: usize, w: usize, dy: isize, dx: isize) {
    let (lo, hi) = valid_range(w, w, 1, dx);
    for k in 0..h {
        let row = &mut dst[k * w..(k + 1) * w];
        let r = k as isize + dy;
        if r < 0 || r as usize >= h || lo >= hi {
            row.fill(T::zero());
            continue;
        }
        let src_row = &src[r as usize * w..(r as usize + 1) * w];
        row[..lo].fill(T::zero());
        row[hi..].fill(T::zero());
        let a = (lo as isize + dx) as usize;
        row[lo..hi].copy_from_slice(&src_row[a..a + (hi - lo)]);
    }
}

/// Output columns `l` in `[lo, hi)` with `l * stride + d` inside `[0, w)`.
fn valid_range(w: usize, out: usize, stride: usize, d: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if d >= 0 { 0 } else { ((-d) + s - 1) / s };
    let hi = if w as isize - d <= 0 {
        0
    } else {
        ((w as isize - d - 1) / s + 1).min(out as isize)
    };
    let lo = lo.min(out as isize) as usize;
    (lo, (hi.max(lo as isize)) as usize)
}

pub fn shift_forward<T: Real>(x: &Tensor<T>, spec: &ShiftSpec) -> Result<Tensor<T>> {
    let s = x.shape();
    check_spec("shift_forward", spec, s.c)?;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let (dy, dx) = spec.displacement(c);
            let src = x.plane(n, c);
            shift_plane(src, out.plane_mut(n, c), s.h, s.w, dy, dx);
        }
    }
    Ok(out)
}

/// Adjoint of [`shift_forward`]: the same move with negated displacements.
pub fn shift_backward<T: Real>(dy: &Tensor<T>, spec: &ShiftSpec) -> Result<Tensor<T>> {
    check_spec("shift_backward", spec, dy.shape().c)?;
    shift_forward(dy, &spec.negated())
}

/// `conv2d_pointwise(shift_forward(x, spec), kernel, stride)` without
/// materializing the shifted tensor. Output rows are produced in tiles: each
/// tile gathers its displaced (and strided) inputs into a cache-sized buffer
/// that feeds one matrix product.
pub fn fused_shift_pointwise<T: Real>(
    x: &Tensor<T>,
    spec: &ShiftSpec,
    kernel: &PointwiseKernel<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    let s = x.shape();
    check_spec("fused_shift_pointwise", spec, s.c)?;
    if kernel.in_channels() != s.c {
        return Err(Error::ChannelMismatch {
            op: "fused_shift_pointwise",
            expected: kernel.in_channels(),
            actual: s.c,
        });
    }
    let (m, nout) = (s.c, kernel.out_channels());
    let (ho, wo) = (strided_size(s.h, stride), strided_size(s.w, stride));
    let mut out = Tensor::zeros(Shape::new(s.n, nout, ho, wo));
    if ho == 0 || wo == 0 || m == 0 {
        return Ok(out);
    }
    // Gather buffer of at most ~16K elements (64 KiB in f32), one output row minimum.
    let tile = (16384 / (m * wo)).clamp(1, ho);
    let mut buf = vec![T::zero(); m * tile * wo];
    let col_ranges: Vec<(usize, usize)> = spec
        .displacements()
        .iter()
        .map(|&(_, dx)| valid_range(s.w, wo, stride, dx))
        .collect();
    let plane_out = ho * wo;
    for n in 0..s.n {
        let item = x.item(n);
        let mut row0 = 0;
        while row0 < ho {
            let rows = tile.min(ho - row0);
            let cols = rows * wo;
            for c in 0..m {
                let (dy, dx) = spec.displacement(c);
                let (lo, hi) = col_ranges[c];
                let plane = &item[c * s.plane()..(c + 1) * s.plane()];
                let dst_c = &mut buf[c * cols..(c + 1) * cols];
                for r in 0..rows {
                    let dst = &mut dst_c[r * wo..(r + 1) * wo];
                    let iy = ((row0 + r) * stride) as isize + dy;
                    if iy < 0 || iy as usize >= s.h || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * s.w..(iy as usize + 1) * s.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if stride == 1 {
                        let a = (lo as isize + dx) as usize;
                        dst[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                    } else {
                        for (l, d) in dst.iter_mut().enumerate().take(hi).skip(lo) {
                            *d = src[((l * stride) as isize + dx) as usize];
                        }
                    }
                }
            }
            // out tile (N x cols) = P^T (N x M) * buf (M x cols)
            T::gemm(
                nout,
                m,
                cols,
                T::one(),
                kernel.weights.data(),
                1,
                nout as isize,
                &buf[..m * cols],
                cols as isize,
                1,
                T::zero(),
                &mut out.item_mut(n)[row0 * wo..],
                plane_out as isize,
                1,
            );
            row0 += rows;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_sizes_144() {
        let spec = make_shift_spec(144, 3, 1, 0).unwrap();
        let groups = spec.groups();
        assert_eq!(groups.len(), 9);
        assert!(groups.iter().all(|g| g.len() == 16));
    }

    #[test]
    fn group_sizes_16_with_remainder() {
        let spec = make_shift_spec(16, 3, 1, 0).unwrap();
        let groups = spec.groups();
        for g in &groups[..8] {
            assert_eq!(g.len(), 1);
        }
        assert_eq!(groups[8].len(), 8);
        // Channel-index order: group g owns channel g.
        for c in 0..8 {
            assert_eq!(spec.group_of(c), c);
        }
        assert_eq!(spec.displacement(0), (-1, -1));
        assert_eq!(spec.displacement(7), (1, 1));
    }

    #[test]
    fn kernel_one_is_all_center() {
        let spec = make_shift_spec(7, 1, 1, 0).unwrap();
        assert!(spec.displacements().iter().all(|&d| d == (0, 0)));
    }

    #[test]
    fn even_or_zero_kernel_rejected() {
        assert!(make_shift_spec(16, 2, 1, 0).is_err());
        assert!(make_shift_spec(16, 0, 1, 0).is_err());
    }

    #[test]
    fn too_few_channels_leaves_groups_empty() {
        let spec = make_shift_spec(4, 3, 1, 0).unwrap();
        assert_eq!(spec.empty_groups(), 8);
    }

    #[test]
    fn dilation_scales_displacements() {
        let spec = make_shift_spec(9, 3, 2, 0).unwrap();
        assert_eq!(spec.displacement(0), (-2, -2));
        assert_eq!(spec.max_reach(), 2);
    }

    #[test]
    fn permutation_keeps_group_sizes() {
        let a = make_shift_spec(50, 3, 1, 0).unwrap();
        let b = make_shift_spec(50, 3, 1, 17).unwrap();
        let sizes = |s: &ShiftSpec| s.groups().iter().map(Vec::len).collect::<Vec<_>>();
        assert_eq!(sizes(&a), sizes(&b));
        assert_ne!(a.displacements(), b.displacements());
        assert_eq!(b, make_shift_spec(50, 3, 1, 17).unwrap());
    }

    #[test]
    fn shift_right_neighbour() {
        let x = Tensor::<f32>::from_vec(
            Shape::new(1, 1, 3, 3),
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap();
        let mut spec = make_shift_spec(1, 3, 1, 0).unwrap();
        spec.displacements[0] = (0, 1);
        let y = shift_forward(&x, &spec).unwrap();
        assert_eq!(y.data(), &[2., 3., 0., 5., 6., 0., 8., 9., 0.]);
        let back = shift_backward(&x, &spec).unwrap();
        assert_eq!(back.data(), &[0., 1., 2., 0., 4., 5., 0., 7., 8.]);
    }

    #[test]
    fn center_spec_is_identity() {
        let x = Tensor::<f32>::randn(Shape::new(2, 5, 4, 4), 3);
        let spec = make_shift_spec(5, 1, 1, 0).unwrap();
        assert_eq!(shift_forward(&x, &spec).unwrap(), x);
        assert_eq!(shift_backward(&x, &spec).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 4, 4));
        let spec = make_shift_spec(4, 3, 1, 0).unwrap();
        assert!(shift_forward(&x, &spec).is_err());
        assert!(shift_backward(&x, &spec).is_err());
        let p = PointwiseKernel::identity(3);
        assert!(fused_shift_pointwise(&x, &spec, &p, 1).is_err());
    }

    #[test]
    fn large_displacement_vacates_plane() {
        let x = Tensor::<f32>::randn(Shape::new(1, 9, 2, 2), 1);
        let spec = make_shift_spec(9, 3, 3, 0).unwrap();
        let y = shift_forward(&x, &spec).unwrap();
        for c in 0..8 {
            assert!(y.plane(0, c).iter().all(|&v| v == 0.0));
        }
        assert_eq!(y.plane(0, 8), x.plane(0, 8));
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for w in 1..9usize {
            for stride in 1..4 {
                let out = strided_size(w, stride);
                for d in -5isize..=5 {
                    let (lo, hi) = valid_range(w, out, stride, d);
                    let brute: Vec<usize> = (0..out)
                        .filter(|&l| {
                            let i = (l * stride) as isize + d;
                            i >= 0 && (i as usize) < w
                        })
                        .collect();
                    let got: Vec<usize> = (lo..hi).collect();
                    assert_eq!(got, brute, "w={w} stride={stride} d={d}");
                }
            }
        }
    }
}
