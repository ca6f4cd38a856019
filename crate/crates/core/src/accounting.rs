//! Parameter and FLOP accounting computed from architecture descriptions
//! alone; weights never influence a report.
//!
//! Costs per layer, with `P` output positions:
//! spatial `M·N·K²` params and `M·N·K²·P` MACs, depthwise `M·K²` and
//! `M·K²·P`, pointwise `M·N` and `M·N·P`, batch norm `2·C` params, linear
//! `in·out + out` params and `in·out` MACs. Shift layers cost nothing.
//! Batch norm, ReLU, pooling and residual additions are not counted as MACs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{ArchConfig, ModuleSpec, Network};
use crate::ops::conv_out_size;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Spatial,
    Depthwise,
    Pointwise,
    Shift,
    BatchNorm,
    Linear,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Spatial => "spatial",
            LayerKind::Depthwise => "depthwise",
            LayerKind::Pointwise => "pointwise",
            LayerKind::Shift => "shift",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(LayerKind::Spatial),
            "depthwise" => Ok(LayerKind::Depthwise),
            "pointwise" => Ok(LayerKind::Pointwise),
            "shift" => Ok(LayerKind::Shift),
            "batchnorm" => Ok(LayerKind::BatchNorm),
            "linear" => Ok(LayerKind::Linear),
            _ => Err(Error::invalid(format!("unknown layer kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Shift layers only: directions that received no channel.
    pub empty_groups: usize,
}

impl LayerDesc {
    pub fn positions(&self) -> u64 {
        (self.out_h * self.out_w) as u64
    }

    pub fn params(&self) -> u64 {
        let (m, n, k2) = (self.in_channels as u64, self.out_channels as u64, (self.kernel * self.kernel) as u64);
        match self.kind {
            LayerKind::Spatial => m * n * k2,
            LayerKind::Depthwise => m * k2,
            LayerKind::Pointwise => m * n,
            LayerKind::Shift => 0,
            LayerKind::BatchNorm => 2 * m,
            LayerKind::Linear => m * n + n,
        }
    }

    pub fn macs(&self) -> u64 {
        let (m, n, k2) = (self.in_channels as u64, self.out_channels as u64, (self.kernel * self.kernel) as u64);
        let p = self.positions();
        match self.kind {
            LayerKind::Spatial => m * n * k2 * p,
            LayerKind::Depthwise => m * k2 * p,
            LayerKind::Pointwise => m * n * p,
            LayerKind::Linear => m * n,
            LayerKind::Shift | LayerKind::BatchNorm => 0,
        }
    }

    pub fn intensity(&self) -> Intensity {
        intensity_positions(self.kind, self.in_channels, self.out_channels, self.positions(), self.kernel)
            .unwrap_or(Intensity {
                compute: 0,
                accesses: 0,
                ratio: 0.0,
            })
    }
}

/// Compute over memory traffic for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub compute: u64,
    pub accesses: u64,
    pub ratio: f64,
}

impl Intensity {
    fn new(compute: u64, accesses: u64) -> Self {
        let ratio = if accesses == 0 { 0.0 } else { compute as f64 / accesses as f64 };
        Intensity {
            compute,
            accesses,
            ratio,
        }
    }
}

fn intensity_positions(kind: LayerKind, m: usize, n: usize, positions: u64, k: usize) -> Option<Intensity> {
    let (m, n, k2, p) = (m as u64, n as u64, (k * k) as u64, positions);
    Some(match kind {
        LayerKind::Spatial => Intensity::new(m * n * k2 * p, p * (m + n) + k2 * m * n),
        LayerKind::Depthwise => Intensity::new(m * k2 * p, 2 * m * p + k2 * m),
        LayerKind::Pointwise => Intensity::new(m * n * p, p * (m + n) + m * n),
        LayerKind::Shift => Intensity::new(0, 2 * m * p),
        LayerKind::BatchNorm | LayerKind::Linear => return None,
    })
}

/// Compute-to-memory ratio of one layer on a `D_F x D_F` map with `M` input
/// and `N` output channels.
///
/// Spatial: `M·N·K²·F² / (F²(M + N) + K²·M·N)`.
/// Depthwise: `M·K²·F² / (2·M·F² + K²·M)`.
/// Pointwise: `M·N·F² / (F²(M + N) + M·N)`.
/// Shift: zero compute over `2·M·F²` accesses.
pub fn arithmetic_intensity(kind: LayerKind, m: usize, n: usize, d_f: usize, d_k: usize) -> Result<Intensity> {
    if m == 0 || n == 0 || d_f == 0 || d_k == 0 {
        return Err(Error::invalid("arithmetic intensity needs positive dimensions"));
    }
    intensity_positions(kind, m, n, (d_f * d_f) as u64, d_k)
        .ok_or_else(|| Error::invalid(format!("no intensity model for {} layers", kind.as_str())))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    /// One multiply-accumulate counts once.
    Macs,
    /// One multiply-accumulate counts as two floating-point operations.
    Flops2x,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub macs: u64,
    pub ai_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub params: u64,
    pub macs: u64,
    pub flops_2x: u64,
    pub convention: FlopConvention,
    pub per_layer: Vec<LayerCost>,
    pub warnings: Vec<String>,
}

impl CostReport {
    pub fn from_layers(model: impl Into<String>, layers: &[LayerDesc]) -> Self {
        let per_layer: Vec<LayerCost> = layers
            .iter()
            .map(|l| LayerCost {
                name: l.name.clone(),
                kind: l.kind,
                params: l.params(),
                macs: l.macs(),
                ai_ratio: l.intensity().ratio,
            })
            .collect();
        let warnings = layers
            .iter()
            .filter(|l| l.kind == LayerKind::Shift && l.empty_groups > 0)
            .map(|l| {
                format!(
                    "{}: {} channels cannot fill {} shift directions, {} empty",
                    l.name,
                    l.in_channels,
                    l.kernel * l.kernel,
                    l.empty_groups
                )
            })
            .collect();
        let params = per_layer.iter().map(|l| l.params).sum();
        let macs: u64 = per_layer.iter().map(|l| l.macs).sum();
        CostReport {
            model: model.into(),
            params,
            macs,
            flops_2x: 2 * macs,
            convention: FlopConvention::Flops2x,
            per_layer,
            warnings,
        }
    }

    pub fn flops(&self, convention: FlopConvention) -> u64 {
        match convention {
            FlopConvention::Macs => self.macs,
            FlopConvention::Flops2x => self.flops_2x,
        }
    }

    /// Per-layer CSV with header `layer,kind,params,macs,ai_ratio`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,macs,ai_ratio\n");
        for l in &self.per_layer {
            let _ = writeln!(s, "{},{},{},{},{:.4}", l.name, l.kind.as_str(), l.params, l.macs, l.ai_ratio);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:<9}  {:>12}  {:>14}  {:>9}\n",
            "layer", "kind", "params", "macs", "ai"
        );
        for l in &self.per_layer {
            let _ = writeln!(
                s,
                "{:<width$}  {:<9}  {:>12}  {:>14}  {:>9.2}",
                l.name,
                l.kind.as_str(),
                l.params,
                l.macs,
                l.ai_ratio
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:<9}  {:>12}  {:>14}",
            "total", "", self.params, self.macs
        );
        let _ = writeln!(s, "flops_2x = {}", self.flops_2x);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

fn push(out: &mut Vec<LayerDesc>, name: String, kind: LayerKind, cin: usize, cout: usize, k: usize, hw: (usize, usize)) {
    out.push(LayerDesc {
        name,
        kind,
        in_channels: cin,
        out_channels: cout,
        kernel: k,
        out_h: hw.0,
        out_w: hw.1,
        empty_groups: 0,
    });
}

fn push_shift(out: &mut Vec<LayerDesc>, name: String, spec: &crate::shift::ShiftSpec, hw: (usize, usize)) {
    out.push(LayerDesc {
        name,
        kind: LayerKind::Shift,
        in_channels: spec.channels(),
        out_channels: spec.channels(),
        kernel: spec.kernel_size(),
        out_h: hw.0,
        out_w: hw.1,
        empty_groups: spec.empty_groups(),
    });
}

/// Flattens an architecture into costed layers for an input of
/// `(channels, height, width)`.
pub fn describe(cfg: &ArchConfig, input: (usize, usize, usize)) -> Result<Vec<LayerDesc>> {
    let (c, h, w) = input;
    if c != cfg.network.input_channels {
        return Err(Error::ChannelMismatch {
            op: "describe",
            expected: cfg.network.input_channels,
            actual: c,
        });
    }
    let mut out = Vec::new();
    let st = &cfg.stem;
    let pad = st.kernel / 2;
    let mut hw = (
        conv_out_size(h, st.kernel, pad, st.stride)?,
        conv_out_size(w, st.kernel, pad, st.stride)?,
    );
    push(&mut out, "stem".into(), LayerKind::Spatial, c, st.out_channels, st.kernel, hw);
    for m in cfg.modules()? {
        let stride = m.stride();
        let (in_hw, out_hw) = if stride == 2 {
            if hw.0 % 2 != 0 || hw.1 % 2 != 0 {
                return Err(Error::config(format!(
                    "{}: downsampling needs even spatial size, got {}x{}",
                    m.name(),
                    hw.0,
                    hw.1
                )));
            }
            (hw, (hw.0 / 2, hw.1 / 2))
        } else {
            (hw, hw)
        };
        match &m {
            ModuleSpec::Csc { name, cfg: b } => {
                let mid = b.mid_channels();
                if let Some(spec) = b.leading_shift_spec()? {
                    push_shift(&mut out, format!("{name}.shift0"), &spec, in_hw);
                }
                push(&mut out, format!("{name}.bn1"), LayerKind::BatchNorm, b.in_channels, b.in_channels, 1, in_hw);
                push(&mut out, format!("{name}.p1"), LayerKind::Pointwise, b.in_channels, mid, 1, in_hw);
                push(&mut out, format!("{name}.bn2"), LayerKind::BatchNorm, mid, mid, 1, in_hw);
                push_shift(&mut out, format!("{name}.shift"), &b.shift_spec()?, in_hw);
                push(&mut out, format!("{name}.p2"), LayerKind::Pointwise, mid, b.out_channels, 1, out_hw);
            }
            ModuleSpec::Basic { name, cfg: b } => {
                push(&mut out, format!("{name}.bn1"), LayerKind::BatchNorm, b.in_channels, b.in_channels, 1, in_hw);
                push(&mut out, format!("{name}.conv1"), LayerKind::Spatial, b.in_channels, b.mid_channels, b.kernel_size, out_hw);
                push(&mut out, format!("{name}.bn2"), LayerKind::BatchNorm, b.mid_channels, b.mid_channels, 1, out_hw);
                push(&mut out, format!("{name}.conv2"), LayerKind::Spatial, b.mid_channels, b.out_channels, b.kernel_size, out_hw);
            }
        }
        hw = out_hw;
    }
    let feat = cfg.feature_channels();
    push(&mut out, "final_bn".into(), LayerKind::BatchNorm, feat, feat, 1, hw);
    push(&mut out, "head".into(), LayerKind::Linear, feat, cfg.network.num_classes, 1, (1, 1));
    Ok(out)
}

/// Smallest square input that every stride divides evenly.
fn nominal_side(cfg: &ArchConfig) -> Result<usize> {
    let downsamples = cfg.modules()?.iter().filter(|m| m.stride() == 2).count() as u32;
    Ok(cfg.stem.stride * 2usize.pow(downsamples))
}

pub fn count_params_config(cfg: &ArchConfig) -> Result<u64> {
    let side = nominal_side(cfg)?;
    let layers = describe(cfg, (cfg.network.input_channels, side, side))?;
    Ok(layers.iter().map(LayerDesc::params).sum())
}

pub fn count_params<T: Real>(net: &Network<T>) -> u64 {
    count_params_config(&net.config).expect("a built network has a valid architecture")
}

pub fn cost_report(cfg: &ArchConfig, input: (usize, usize, usize)) -> Result<CostReport> {
    Ok(CostReport::from_layers(cfg.name(), &describe(cfg, input)?))
}

pub fn count_flops(cfg: &ArchConfig, input: (usize, usize, usize), convention: FlopConvention) -> Result<u64> {
    Ok(cost_report(cfg, input)?.flops(convention))
}

/// Cost of a lone shift layer over `channels` channels on a square map.
pub fn shift_layer_report(channels: usize, kernel: usize, side: usize) -> Result<CostReport> {
    let spec = crate::shift::make_shift_spec(channels, kernel, 1, 0)?;
    let mut layers = Vec::new();
    push_shift(&mut layers, "shift".into(), &spec, (side, side));
    Ok(CostReport::from_layers("shift_layer", &layers))
}

/// `(base.params / other.params, base.macs / other.macs)`.
pub fn reduction_report(base: &CostReport, other: &CostReport) -> Result<(f64, f64)> {
    if other.params == 0 {
        return Err(Error::DivisionByZero("reduction_report: other has 0 parameters"));
    }
    if other.macs == 0 {
        return Err(Error::DivisionByZero("reduction_report: other has 0 MACs"));
    }
    Ok((
        base.params as f64 / other.params as f64,
        base.macs as f64 / other.macs as f64,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub model: String,
    pub expansion: f64,
    pub params: u64,
    pub flops_2x: u64,
    pub param_rate: f64,
    pub flop_rate: f64,
}

impl ReductionRow {
    pub fn new(base: &CostReport, other: &CostReport, expansion: f64) -> Result<Self> {
        let (param_rate, flop_rate) = reduction_report(base, other)?;
        Ok(ReductionRow {
            model: other.model.clone(),
            expansion,
            params: other.params,
            flops_2x: other.flops_2x,
            param_rate,
            flop_rate,
        })
    }
}

pub fn reduction_table_csv(rows: &[ReductionRow]) -> String {
    let mut s = String::from("model,expansion,params,flops_2x,param_rate,flop_rate\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{:.4}",
            r.model, r.expansion, r.params, r.flops_2x, r.param_rate, r.flop_rate
        );
    }
    s
}

pub fn reduction_table_text(rows: &[ReductionRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    let mut s = format!(
        "{:<width$}  {:>4}  {:>10}  {:>10}  {:>11}\n",
        "model", "eps", "params(M)", "flops(M)", "rate p / f"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>4}  {:>10.3}  {:>10.1}  {:>5.2} / {:<5.2}",
            r.model,
            r.expansion,
            r.params as f64 / 1e6,
            r.flops_2x as f64 / 1e6,
            r.param_rate,
            r.flop_rate
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{resnet_config, shiftresnet_config};

    fn desc(kind: LayerKind, m: usize, n: usize, k: usize, side: usize) -> LayerDesc {
        LayerDesc {
            name: "l".into(),
            kind,
            in_channels: m,
            out_channels: n,
            kernel: k,
            out_h: side,
            out_w: side,
            empty_groups: 0,
        }
    }

    #[test]
    fn spatial_conv_macs() {
        assert_eq!(desc(LayerKind::Spatial, 16, 16, 3, 32).macs(), 2_359_296);
        assert_eq!(desc(LayerKind::Spatial, 16, 16, 3, 32).params(), 2304);
    }

    #[test]
    fn shift_is_free() {
        let r = shift_layer_report(64, 3, 32).unwrap();
        assert_eq!((r.params, r.macs, r.flops_2x), (0, 0, 0));
        assert!(r.warnings.is_empty());
        let small = shift_layer_report(4, 3, 8).unwrap();
        assert_eq!(small.warnings.len(), 1);
    }

    #[test]
    fn intensity_examples() {
        let s = arithmetic_intensity(LayerKind::Spatial, 64, 64, 32, 3).unwrap();
        assert_eq!((s.compute, s.accesses), (37_748_736, 167_936));
        let d = arithmetic_intensity(LayerKind::Depthwise, 64, 64, 32, 3).unwrap();
        assert_eq!((d.compute, d.accesses), (589_824, 131_648));
        assert!(arithmetic_intensity(LayerKind::Linear, 1, 1, 1, 1).is_err());
        assert!(arithmetic_intensity(LayerKind::Spatial, 0, 1, 1, 1).is_err());
    }

    #[test]
    fn totals_are_sums() {
        let r = cost_report(&shiftresnet_config(20, 3.0, 10).unwrap(), (3, 32, 32)).unwrap();
        assert_eq!(r.params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.macs, r.per_layer.iter().map(|l| l.macs).sum::<u64>());
        assert_eq!(r.flops_2x, 2 * r.macs);
        assert!(r
            .per_layer
            .iter()
            .filter(|l| l.kind == LayerKind::Shift)
            .all(|l| l.params == 0 && l.macs == 0));
    }

    #[test]
    fn params_independent_of_input() {
        let cfg = resnet_config(20, 10).unwrap();
        let a = cost_report(&cfg, (3, 32, 32)).unwrap().params;
        let b = cost_report(&cfg, (3, 64, 48)).unwrap().params;
        assert_eq!(a, b);
        assert_eq!(a, count_params_config(&cfg).unwrap());
    }

    #[test]
    fn describe_rejects_bad_input() {
        let cfg = resnet_config(20, 10).unwrap();
        assert!(describe(&cfg, (1, 32, 32)).is_err());
        assert!(describe(&cfg, (3, 30, 30)).is_err());
    }

    #[test]
    fn reduction_of_identical_reports() {
        let r = cost_report(&resnet_config(20, 10).unwrap(), (3, 32, 32)).unwrap();
        assert_eq!(reduction_report(&r, &r).unwrap(), (1.0, 1.0));
        let zero = shift_layer_report(16, 3, 4).unwrap();
        assert!(reduction_report(&r, &zero).is_err());
    }

    #[test]
    fn tables_have_stable_columns() {
        let base = cost_report(&resnet_config(20, 10).unwrap(), (3, 32, 32)).unwrap();
        let other = cost_report(&shiftresnet_config(20, 1.0, 10).unwrap(), (3, 32, 32)).unwrap();
        let row = ReductionRow::new(&base, &other, 1.0).unwrap();
        let csv = reduction_table_csv(&[row.clone()]);
        assert!(csv.starts_with("model,expansion,params,flops_2x,param_rate,flop_rate\n"));
        assert_eq!(csv.lines().count(), 2);
        assert!(reduction_table_text(&[row]).contains("shiftresnet20-1"));
        assert!(base.to_csv().lines().count() > 10);
    }
}
