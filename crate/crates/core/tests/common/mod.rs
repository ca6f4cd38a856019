#![allow(dead_code)]

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shiftnet::blocks::BlockParams;
use shiftnet::ops::PointwiseKernel;
use shiftnet::{Layer, Mode, Shape, ShiftSpec, Tensor};

/// Central-difference step.
pub const H: f64 = 1e-4;
/// Maximum relative error between analytic and numerical gradients.
pub const TOL: f64 = 1e-4;
/// Magnitude below which both gradients count as zero.
pub const ABS_FLOOR: f64 = 1e-7;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Up to `max` distinct indices below `len`, deterministic in `seed`.
pub fn sample_indices(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, len, max).into_vec();
    v.sort_unstable();
    v
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel {
            self.max_rel = e;
            self.worst = format!("{} analytic {analytic:e} numeric {numeric:e}", what());
        }
    }

    pub fn assert_ok(&self, label: &str) {
        assert!(self.checked > 0, "{label}: nothing checked");
        assert!(self.max_rel < TOL, "{label}: max relative error {:e} at {}", self.max_rel, self.worst);
    }
}

/// Gradient check of a function of several tensors against its claimed
/// gradients. The scalar objective is `<f(inputs), r>` for a fixed random `r`.
pub fn check_fn(
    label: &str,
    mut inputs: Vec<Tensor<f64>>,
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    grads: impl Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>,
    max_per_input: usize,
) -> GradReport {
    let y = f(&inputs);
    let r = Tensor::<f64>::randn(y.shape(), 0x5eed);
    let analytic = grads(&inputs, &r);
    assert_eq!(analytic.len(), inputs.len(), "{label}: one gradient per input");
    let mut rep = GradReport::default();
    for (t, g) in analytic.iter().enumerate() {
        assert_eq!(g.shape(), inputs[t].shape(), "{label}: gradient {t} shape");
        for i in sample_indices(inputs[t].len(), max_per_input, t as u64) {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + H;
            let up = f(&inputs).dot(&r).unwrap();
            inputs[t].data_mut()[i] = orig - H;
            let down = f(&inputs).dot(&r).unwrap();
            inputs[t].data_mut()[i] = orig;
            rep.record(|| format!("{label} input {t}[{i}]"), g.data()[i], (up - down) / (2.0 * H));
        }
    }
    rep
}

fn objective<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    layer.forward(x, Mode::Train).unwrap().dot(r).unwrap()
}

/// Gradient check of a layer in training mode over its input and every parameter tensor.
pub fn check_layer<L: Layer<f64>>(label: &str, layer: &mut L, x: &Tensor<f64>, max_per_tensor: usize) -> GradReport {
    check_layer_with_step(label, layer, x, max_per_tensor, H)
}

pub fn check_layer_with_step<L: Layer<f64>>(
    label: &str,
    layer: &mut L,
    x: &Tensor<f64>,
    max_per_tensor: usize,
    h: f64,
) -> GradReport {
    let y = layer.forward(x, Mode::Train).unwrap();
    let r = Tensor::<f64>::randn(y.shape(), 0xfeed);
    let dx = layer.backward(&r).unwrap();
    let pgrads: Vec<(String, Tensor<f64>)> = layer
        .params_mut()
        .into_iter()
        .map(|p| (p.name, p.grad.clone()))
        .collect();
    let mut rep = GradReport::default();
    let mut xp = x.clone();
    for i in sample_indices(x.len(), max_per_tensor, 1) {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let up = objective(layer, &xp, &r);
        xp.data_mut()[i] = orig - h;
        let down = objective(layer, &xp, &r);
        xp.data_mut()[i] = orig;
        rep.record(|| format!("{label} input[{i}]"), dx.data()[i], (up - down) / (2.0 * h));
    }
    for (pi, (name, g)) in pgrads.iter().enumerate() {
        for i in sample_indices(g.len(), max_per_tensor, 2 + pi as u64) {
            let orig = layer.params_mut()[pi].value.data()[i];
            layer.params_mut()[pi].value.data_mut()[i] = orig + h;
            let up = objective(layer, x, &r);
            layer.params_mut()[pi].value.data_mut()[i] = orig - h;
            let down = objective(layer, x, &r);
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            rep.record(|| format!("{label} {name}[{i}]"), g.data()[i], (up - down) / (2.0 * h));
        }
    }
    rep
}

pub fn randn(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::randn(Shape::new(n, c, h, w), seed)
}

/// Depthwise kernel over the dilated window with a single 1 at each channel's displacement.
pub fn one_hot_kernel(spec: &ShiftSpec, channels: usize) -> Tensor<f64> {
    let kd = 2 * spec.max_reach() + 1;
    let r = spec.max_reach() as isize;
    let mut wt = Tensor::<f64>::zeros(Shape::new(channels, 1, kd, kd));
    for ch in 0..channels {
        let (dy, dx) = spec.displacement(ch);
        wt.set(ch, 0, (dy + r) as usize, (dx + r) as usize, 1.0);
    }
    wt
}

/// Block parameters with intermediate channel `c` taken from channel `perm[c]`:
/// P1 columns, P2 rows and every BN2 tensor move together.
pub fn permuted(params: &BlockParams<f32>, perm: &[usize]) -> BlockParams<f32> {
    let mut out = params.clone();
    let (m, mid) = (params.p1.in_channels(), params.p1.out_channels());
    let n = params.p2.out_channels();
    let mut p1 = vec![0.0f32; m * mid];
    let mut p2 = vec![0.0f32; mid * n];
    for c in 0..mid {
        let src = perm[c];
        for i in 0..m {
            p1[i * mid + c] = params.p1.get(i, src);
        }
        for o in 0..n {
            p2[c * n + o] = params.p2.get(src, o);
        }
        for (dst, from) in [
            (&mut out.bn2.gamma, &params.bn2.gamma),
            (&mut out.bn2.beta, &params.bn2.beta),
            (&mut out.bn2.running_mean, &params.bn2.running_mean),
            (&mut out.bn2.running_var, &params.bn2.running_var),
        ] {
            dst.data_mut()[c] = from.data()[src];
        }
    }
    out.p1 = PointwiseKernel::from_rows(m, mid, p1).unwrap();
    out.p2 = PointwiseKernel::from_rows(mid, n, p2).unwrap();
    out
}

/// Moves batch-norm affine parameters away from the (1, 0) initialization.
pub fn randomize_bn<L: Layer<f64>>(layer: &mut L, seed: u64) {
    for (i, p) in layer.params_mut().into_iter().enumerate() {
        if p.name.ends_with("gamma") {
            let noise = Tensor::<f64>::randn(p.value.shape(), seed + i as u64).scale(0.3);
            p.value.add_assign(&noise).unwrap();
        } else if p.name.ends_with("beta") {
            *p.value = Tensor::randn(p.value.shape(), seed + i as u64).scale(0.3);
        }
    }
}
