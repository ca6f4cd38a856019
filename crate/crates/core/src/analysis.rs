//! Channel diagnostics for CSC modules: Pearson correlation between the
//! channels of one shift group, and the normalized contribution of each
//! intermediate channel to the block output.

use std::fmt::Write as _;

use crate::blocks::CscBlock;
use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::nets::Network;
use crate::ops::{Mode, PointwiseKernel};
use crate::pipeline::Dataset;
use crate::shift::ShiftSpec;
use crate::tensor::{Real, Tensor};

/// Post-shift activations of one module, one observation per (image,
/// position) and one column per intermediate channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub module_id: String,
    pub channels: usize,
    /// Row-major `observations x channels`.
    pub samples: Vec<f64>,
    /// Shift group of each channel.
    pub group_index: Vec<usize>,
    pub num_groups: usize,
}

impl ActivationTrace {
    pub fn new(module_id: impl Into<String>, spec: &ShiftSpec) -> Self {
        ActivationTrace {
            module_id: module_id.into(),
            channels: spec.channels(),
            samples: Vec::new(),
            group_index: (0..spec.channels()).map(|c| spec.group_of(c)).collect(),
            num_groups: spec.num_groups(),
        }
    }

    pub fn observations(&self) -> usize {
        self.samples.len() / self.channels.max(1)
    }

    pub fn append<T: Real>(&mut self, activation: &Tensor<T>) -> Result<()> {
        let s = activation.shape();
        if s.c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "activation_trace",
                expected: self.channels,
                actual: s.c,
            });
        }
        self.samples.reserve(s.n * s.plane() * s.c);
        for n in 0..s.n {
            for p in 0..s.plane() {
                for c in 0..s.c {
                    self.samples.push(activation.plane(n, c)[p].to_f64().unwrap_or(f64::NAN));
                }
            }
        }
        Ok(())
    }

    pub fn group_channels(&self, group: usize) -> Vec<usize> {
        (0..self.channels).filter(|&c| self.group_index[c] == group).collect()
    }
}

/// Square matrix over the listed channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub channels: Vec<usize>,
    pub values: Vec<f64>,
}

impl Matrix {
    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    /// `row,col,value` with channel ids as coordinates.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,value\n");
        for (i, &r) in self.channels.iter().enumerate() {
            for (j, &c) in self.channels.iter().enumerate() {
                let _ = writeln!(s, "{r},{c},{}", self.get(i, j));
            }
        }
        s
    }
}

/// Pearson correlation among the channels of `group`, accumulated in one
/// pass with Welford co-moment updates.
pub fn correlation_matrix(trace: &ActivationTrace, group: usize) -> Result<Matrix> {
    let channels = trace.group_channels(group);
    let c = channels.len();
    if c == 0 {
        return Err(Error::invalid(format!("shift group {group} has no channels")));
    }
    let obs = trace.observations();
    if obs < 2 {
        return Err(Error::invalid(format!("correlation needs >= 2 observations, got {obs}")));
    }
    let mut mean = vec![0.0f64; c];
    let mut comoment = vec![0.0f64; c * c];
    let mut delta = vec![0.0f64; c];
    for (k, row) in trace.samples.chunks_exact(trace.channels).enumerate() {
        let inv = 1.0 / (k + 1) as f64;
        for (i, &ch) in channels.iter().enumerate() {
            delta[i] = row[ch] - mean[i];
            mean[i] += delta[i] * inv;
        }
        for (i, &ci) in channels.iter().enumerate() {
            let after = row[ci] - mean[i];
            for j in 0..c {
                comoment[i * c + j] += after * delta[j];
            }
        }
    }
    for (i, &ch) in channels.iter().enumerate() {
        if !(comoment[i * c + i] > 0.0) {
            return Err(Error::ZeroVariance(ch));
        }
    }
    let mut values = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            values[i * c + j] = if i == j {
                1.0
            } else {
                let sym = 0.5 * (comoment[i * c + j] + comoment[j * c + i]);
                (sym / (comoment[i * c + i] * comoment[j * c + j]).sqrt()).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(Matrix { channels, values })
}

/// Row norms of the second pointwise kernel divided by the largest one.
pub fn contribution_norms<T: Real>(kernel: &PointwiseKernel<T>) -> Result<Vec<f64>> {
    let norms: Vec<f64> = (0..kernel.in_channels())
        .map(|m| {
            kernel
                .row(m)
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::invalid("contribution norms of an all-zero kernel are undefined"));
    }
    Ok(norms.into_iter().map(|n| n / max).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupContribution {
    pub group: usize,
    pub direction: (isize, isize),
    pub channels: usize,
    pub value: f64,
}

/// Per-group sums of channel contributions, renormalized to a maximum of 1.
pub fn group_contributions(norms: &[f64], spec: &ShiftSpec) -> Result<Vec<GroupContribution>> {
    if norms.len() != spec.channels() {
        return Err(Error::ChannelMismatch {
            op: "group_contributions",
            expected: spec.channels(),
            actual: norms.len(),
        });
    }
    let groups = spec.groups();
    let sums: Vec<f64> = groups.iter().map(|g| g.iter().map(|&c| norms[c]).sum()).collect();
    let max = sums.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::invalid("all group contributions are zero"));
    }
    Ok(groups
        .iter()
        .zip(sums)
        .enumerate()
        .map(|(g, (members, s))| GroupContribution {
            group: g,
            direction: spec.group_direction(g),
            channels: members.len(),
            value: s / max,
        })
        .collect())
}

pub fn contributions_csv(norms: &[f64], spec: &ShiftSpec) -> String {
    let mut s = String::from("channel,group,dy,dx,contribution\n");
    for (c, v) in norms.iter().enumerate() {
        let (dy, dx) = spec.displacement(c);
        let _ = writeln!(s, "{c},{},{dy},{dx},{v}", spec.group_of(c));
    }
    s
}

/// Runs the network in eval mode over `data` and collects the post-shift
/// activations of the named CSC module.
pub fn record_trace<T: Real>(
    net: &mut Network<T>,
    module: &str,
    data: &Dataset,
    batch_size: usize,
    max_examples: usize,
) -> Result<ActivationTrace> {
    let spec = net
        .csc_block(module)
        .map(|b| b.shift.clone())
        .ok_or_else(|| Error::invalid(format!("no CSC module named {module:?}")))?;
    let mut trace = ActivationTrace::new(module, &spec);
    set_recording(net, module, true);
    let n = data.len().min(max_examples);
    let idx: Vec<usize> = (0..n).collect();
    let result = (|| {
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, _) = data.batch::<T>(chunk)?;
            net.forward(&x, Mode::Eval)?;
            let block = net
                .csc_block(module)
                .ok_or_else(|| Error::invalid("module vanished"))?;
            let act = block
                .recorded
                .as_ref()
                .ok_or(Error::MissingForward("recording"))?;
            trace.append(act)?;
        }
        Ok(())
    })();
    set_recording(net, module, false);
    result.map(|_| trace)
}

fn set_recording<T: Real>(net: &mut Network<T>, module: &str, on: bool) {
    for b in net.csc_blocks_mut().filter(|b| b.name == module) {
        b.record = on;
        if !on {
            b.recorded = None;
        }
    }
}

/// Correlation matrices for every non-empty shift group of a module.
pub fn group_correlations(trace: &ActivationTrace) -> Result<Vec<(usize, Matrix)>> {
    (0..trace.num_groups)
        .filter(|&g| !trace.group_channels(g).is_empty())
        .map(|g| correlation_matrix(trace, g).map(|m| (g, m)))
        .collect()
}

pub fn block_contributions<T: Real>(block: &CscBlock<T>) -> Result<(Vec<f64>, Vec<GroupContribution>)> {
    let norms = contribution_norms(&block.p2.kernel)?;
    let groups = group_contributions(&norms, &block.shift)?;
    Ok((norms, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shift::make_shift_spec;
    use crate::tensor::Shape;

    fn trace_from(values: &[[f64; 2]]) -> ActivationTrace {
        let spec = make_shift_spec(2, 1, 1, 0).unwrap();
        let mut t = ActivationTrace::new("m", &spec);
        for v in values {
            t.samples.extend_from_slice(v);
        }
        t
    }

    #[test]
    fn duplicated_channel_is_perfectly_correlated() {
        let t = trace_from(&[[1.0, 1.0], [2.0, 2.0], [4.0, 4.0]]);
        let m = correlation_matrix(&t, 0).unwrap();
        assert_eq!(m.dim(), 2);
        assert_eq!(m.get(0, 0), 1.0);
        assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_correlation_and_errors() {
        let t = trace_from(&[[1.0, -1.0], [2.0, -2.0], [0.0, 0.0]]);
        assert!((correlation_matrix(&t, 0).unwrap().get(1, 0) + 1.0).abs() < 1e-12);
        let flat = trace_from(&[[1.0, 3.0], [2.0, 3.0]]);
        assert!(matches!(correlation_matrix(&flat, 0), Err(Error::ZeroVariance(1))));
        let single = trace_from(&[[1.0, 3.0]]);
        assert!(correlation_matrix(&single, 0).is_err());
        assert!(correlation_matrix(&t, 3).is_err());
    }

    #[test]
    fn trace_layout_and_groups() {
        let spec = make_shift_spec(18, 3, 1, 0).unwrap();
        let mut t = ActivationTrace::new("m", &spec);
        let act = Tensor::<f32>::randn(Shape::new(2, 18, 3, 3), 0);
        t.append(&act).unwrap();
        assert_eq!(t.observations(), 18);
        assert_eq!(t.samples[1], act.plane(0, 1)[0] as f64);
        assert_eq!(t.samples[18], act.plane(0, 0)[1] as f64);
        let total: usize = (0..t.num_groups).map(|g| t.group_channels(g).len()).sum();
        assert_eq!(total, 18);
        assert!(t.append(&Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2))).is_err());
    }

    #[test]
    fn contribution_normalization() {
        let k = PointwiseKernel::from_rows(3, 2, vec![3.0f64, 4.0, 0.0, 1.0, 0.5, 0.0]).unwrap();
        let v = contribution_norms(&k).unwrap();
        assert_eq!(v, vec![1.0, 0.2, 0.1]);
        let eye = PointwiseKernel::<f64>::identity(4);
        assert_eq!(contribution_norms(&eye).unwrap(), vec![1.0; 4]);
        let zero = PointwiseKernel::from_rows(2, 2, vec![0.0f64; 4]).unwrap();
        assert!(contribution_norms(&zero).is_err());
    }

    #[test]
    fn group_sums_partition_channels() {
        let spec = make_shift_spec(20, 3, 1, 0).unwrap();
        let norms: Vec<f64> = (0..20).map(|c| (c + 1) as f64 / 20.0).collect();
        let g = group_contributions(&norms, &spec).unwrap();
        assert_eq!(g.iter().map(|x| x.channels).sum::<usize>(), 20);
        let max = g.iter().map(|x| x.value).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(contributions_csv(&norms, &spec).starts_with("channel,group,dy,dx,contribution\n"));
    }
}
