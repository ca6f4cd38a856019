//! Declarative architectures and the networks built from them.
//!
//! An [`ArchConfig`] is a stem convolution, an ordered list of stage rows
//! (each row is `repeat` identical modules at the row's stride) and a
//! classifier head. It round-trips through a TOML text form whose `[[stage]]`
//! tables mirror the columns type / stride / kernel / expansion / output
//! channel / repeat.

use serde::{Deserialize, Serialize};

use crate::blocks::{round_channels, BasicBlock, BasicConfig, CscBlock, CscConfig, CscVariant};
use crate::error::{Error, Result};
use crate::layers::{BnReluLayer, Conv2dLayer, HeadLayer, Layer, ParamMut, ParamRef};
use crate::ops::{conv_out_size, Mode};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Csc,
    Sc2,
    Basic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

fn one() -> usize {
    1
}

fn one_f() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub group: usize,
    #[serde(rename = "type")]
    pub kind: BlockKind,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "three")]
    pub kernel: usize,
    #[serde(default = "one_f")]
    pub expansion: f64,
    pub out_channels: usize,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default)]
    pub permutation: u64,
    /// Basic blocks only: width of the first convolution (defaults to output).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid_channels: Option<usize>,
}

impl StageConfig {
    fn csc(group: usize, stride: usize, kernel: usize, expansion: f64, out: usize, repeat: usize) -> Self {
        StageConfig {
            group,
            kind: BlockKind::Csc,
            stride,
            kernel,
            expansion,
            out_channels: out,
            repeat,
            dilation: 1,
            permutation: 0,
            mid_channels: None,
        }
    }

    fn basic(group: usize, stride: usize, out: usize, mid: Option<usize>, repeat: usize) -> Self {
        StageConfig {
            group,
            kind: BlockKind::Basic,
            stride,
            kernel: 3,
            expansion: 1.0,
            out_channels: out,
            repeat,
            dilation: 1,
            permutation: 0,
            mid_channels: mid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSection {
    pub name: String,
    #[serde(default = "three")]
    pub input_channels: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub network: NetworkSection,
    pub stem: StemConfig,
    #[serde(rename = "stage")]
    pub stages: Vec<StageConfig>,
}

/// One module of an expanded architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum ModuleSpec {
    Csc { name: String, cfg: CscConfig },
    Basic { name: String, cfg: BasicConfig },
}

impl ModuleSpec {
    pub fn name(&self) -> &str {
        match self {
            ModuleSpec::Csc { name, .. } | ModuleSpec::Basic { name, .. } => name,
        }
    }

    pub fn stride(&self) -> usize {
        match self {
            ModuleSpec::Csc { cfg, .. } => cfg.stride,
            ModuleSpec::Basic { cfg, .. } => cfg.stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ModuleSpec::Csc { cfg, .. } => cfg.out_channels,
            ModuleSpec::Basic { cfg, .. } => cfg.out_channels,
        }
    }
}

impl ArchConfig {
    pub fn name(&self) -> &str {
        &self.network.name
    }

    pub fn num_classes(&self) -> usize {
        self.network.num_classes
    }

    pub fn feature_channels(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem.out_channels, |s| s.out_channels)
    }

    /// Expands stage rows into modules named `g{group}.b{index}`, index
    /// counting from 0 within each group. Validates every module and the
    /// channel chain.
    pub fn modules(&self) -> Result<Vec<ModuleSpec>> {
        if self.network.num_classes == 0 || self.network.input_channels == 0 {
            return Err(Error::config("num_classes and input_channels must be positive"));
        }
        if self.stem.out_channels == 0 || self.stem.kernel % 2 == 0 || self.stem.stride == 0 {
            return Err(Error::config("stem needs positive width, odd kernel and stride >= 1"));
        }
        let mut out = Vec::new();
        let mut c = self.stem.out_channels;
        let mut index = std::collections::BTreeMap::<usize, usize>::new();
        for (row, st) in self.stages.iter().enumerate() {
            if st.repeat == 0 {
                return Err(Error::config(format!("stage {row} has repeat = 0")));
            }
            if st.kind != BlockKind::Basic && st.mid_channels.is_some() {
                return Err(Error::config(format!("stage {row}: mid_channels applies to basic blocks only")));
            }
            for _ in 0..st.repeat {
                let slot = index.entry(st.group).or_insert(0);
                let name = format!("g{}.b{}", st.group, *slot);
                *slot += 1;
                let m = match st.kind {
                    BlockKind::Csc | BlockKind::Sc2 => {
                        let cfg = CscConfig {
                            in_channels: c,
                            out_channels: st.out_channels,
                            expansion: st.expansion,
                            kernel_size: st.kernel,
                            dilation: st.dilation,
                            stride: st.stride,
                            variant: if st.kind == BlockKind::Csc {
                                CscVariant::Csc
                            } else {
                                CscVariant::Sc2
                            },
                            permutation_id: st.permutation,
                        };
                        cfg.validate()
                            .map_err(|e| Error::config(format!("{name}: {e}")))?;
                        ModuleSpec::Csc { name, cfg }
                    }
                    BlockKind::Basic => {
                        let cfg = BasicConfig {
                            in_channels: c,
                            mid_channels: st.mid_channels.unwrap_or(st.out_channels),
                            out_channels: st.out_channels,
                            kernel_size: st.kernel,
                            stride: st.stride,
                        };
                        cfg.validate()
                            .map_err(|e| Error::config(format!("{name}: {e}")))?;
                        ModuleSpec::Basic { name, cfg }
                    }
                };
                c = st.out_channels;
                out.push(m);
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.modules().map(|_| ())
    }

    /// Output `(channels, height, width)` after the stem and after each
    /// module, for an input of `(height, width)`.
    pub fn stage_shapes(&self, height: usize, width: usize) -> Result<Vec<(String, usize, usize, usize)>> {
        let pad = self.stem.kernel / 2;
        let mut h = conv_out_size(height, self.stem.kernel, pad, self.stem.stride)?;
        let mut w = conv_out_size(width, self.stem.kernel, pad, self.stem.stride)?;
        let mut shapes = vec![("stem".to_string(), self.stem.out_channels, h, w)];
        for m in self.modules()? {
            if m.stride() == 2 {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::config(format!(
                        "{}: downsampling needs even spatial size, got {h}x{w}",
                        m.name()
                    )));
                }
                h /= 2;
                w /= 2;
            }
            shapes.push((m.name().to_string(), m.out_channels(), h, w));
        }
        Ok(shapes)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize architecture: {e}")))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: ArchConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("cannot parse architecture: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const RESNET_DEPTHS: [usize; 3] = [20, 56, 110];

/// Modules per group for the CIFAR ResNet family: `(depth - 2) / 6`.
pub fn blocks_per_group(depth: usize) -> Result<usize> {
    if RESNET_DEPTHS.contains(&depth) {
        Ok((depth - 2) / 6)
    } else {
        Err(Error::config(format!(
            "unsupported depth {depth}, expected one of {RESNET_DEPTHS:?}"
        )))
    }
}

const CIFAR_WIDTHS: [usize; 3] = [16, 32, 64];

fn cifar_stem(width: usize) -> StemConfig {
    StemConfig {
        out_channels: width,
        kernel: 3,
        stride: 1,
    }
}

pub fn shiftresnet_config(depth: usize, expansion: f64, num_classes: usize) -> Result<ArchConfig> {
    let n = blocks_per_group(depth)?;
    let mut stages = Vec::new();
    for (g, &w) in CIFAR_WIDTHS.iter().enumerate() {
        if g == 0 {
            stages.push(StageConfig::csc(1, 1, 3, expansion, w, n));
        } else {
            stages.push(StageConfig::csc(g + 1, 2, 3, expansion, w, 1));
            if n > 1 {
                stages.push(StageConfig::csc(g + 1, 1, 3, expansion, w, n - 1));
            }
        }
    }
    let cfg = ArchConfig {
        network: NetworkSection {
            name: format!("shiftresnet{depth}-{expansion}"),
            input_channels: 3,
            num_classes,
        },
        stem: cifar_stem(16),
        stages,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// CIFAR ResNet whose group widths are `widths` and whose first-conv widths
/// are `mids` (`None` keeps them equal to the group width).
fn resnet_with(depth: usize, widths: [usize; 3], mids: [Option<usize>; 3], num_classes: usize, name: String) -> Result<ArchConfig> {
    let n = blocks_per_group(depth)?;
    let mut stages = Vec::new();
    for g in 0..3 {
        if g == 0 {
            stages.push(StageConfig::basic(1, 1, widths[0], mids[0], n));
        } else {
            stages.push(StageConfig::basic(g + 1, 2, widths[g], mids[g], 1));
            if n > 1 {
                stages.push(StageConfig::basic(g + 1, 1, widths[g], mids[g], n - 1));
            }
        }
    }
    let cfg = ArchConfig {
        network: NetworkSection {
            name,
            input_channels: 3,
            num_classes,
        },
        stem: cifar_stem(widths[0]),
        stages,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn resnet_config(depth: usize, num_classes: usize) -> Result<ArchConfig> {
    resnet_with(depth, CIFAR_WIDTHS, [None; 3], num_classes, format!("resnet{depth}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceMode {
    /// Shrink the first convolution of every module.
    ModuleWise,
    /// Shrink every module's input and output channels.
    NetWise,
}

impl std::str::FromStr for ReduceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "module" | "module_wise" | "module-wise" => Ok(ReduceMode::ModuleWise),
            "net" | "net_wise" | "net-wise" => Ok(ReduceMode::NetWise),
            _ => Err(Error::invalid(format!("unknown reduction mode {s:?}, expected module or net"))),
        }
    }
}

/// ResNet with filter counts scaled by `scale` under `mode`.
pub fn scaled_resnet_config(depth: usize, scale: f64, mode: ReduceMode, num_classes: usize) -> Result<ArchConfig> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(format!("scale must be in (0, 1], got {scale}")));
    }
    let scaled = |w: usize| round_channels(w as f64 * scale);
    let name = format!("resnet{depth}");
    match mode {
        ReduceMode::ModuleWise => {
            let mids = CIFAR_WIDTHS.map(|w| Some(scaled(w)).filter(|&m| m != w));
            resnet_with(depth, CIFAR_WIDTHS, mids, num_classes, format!("{name}-module"))
        }
        ReduceMode::NetWise => {
            let widths = CIFAR_WIDTHS.map(scaled);
            resnet_with(depth, widths, [None; 3], num_classes, format!("{name}-net"))
        }
    }
    .map(|mut cfg| {
        if scale == 1.0 {
            cfg.network.name = name;
        }
        cfg
    })
}

/// Largest scaled ResNet whose parameter count is at most `1.02 * target`.
/// Fails when that network falls below `0.9 * target`.
pub fn reduce_resnet_config(depth: usize, target: usize, mode: ReduceMode, num_classes: usize) -> Result<(ArchConfig, f64)> {
    let params = |s: f64| -> Result<u64> {
        crate::accounting::count_params_config(&scaled_resnet_config(depth, s, mode, num_classes)?)
    };
    let full = params(1.0)?;
    if target as u64 >= full {
        return Err(Error::UnreachableTarget(format!(
            "target {target} is not below the full model's {full} parameters"
        )));
    }
    let limit = target as f64 * 1.02;
    let (mut lo, mut hi) = (1e-3, 1.0);
    if params(lo)? as f64 > limit {
        return Err(Error::UnreachableTarget(format!(
            "even the smallest {mode:?} ResNet{depth} exceeds {target} parameters"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if params(mid)? as f64 <= limit {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = params(lo)?;
    if (best as f64) < 0.9 * target as f64 {
        return Err(Error::UnreachableTarget(format!(
            "closest {mode:?} ResNet{depth} has {best} parameters, target {target}"
        )));
    }
    Ok((scaled_resnet_config(depth, lo, mode, num_classes)?, lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftNetVariant {
    A,
    B,
    C,
}

impl std::str::FromStr for ShiftNetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ShiftNetVariant::A),
            "b" => Ok(ShiftNetVariant::B),
            "c" => Ok(ShiftNetVariant::C),
            _ => Err(Error::invalid(format!("unknown ShiftNet variant {s:?}"))),
        }
    }
}

pub fn shiftnet_config(variant: ShiftNetVariant, num_classes: usize) -> Result<ArchConfig> {
    let (stem, stages) = match variant {
        ShiftNetVariant::A | ShiftNetVariant::B => {
            let div = if variant == ShiftNetVariant::A { 1 } else { 2 };
            // (kernel, s2 expansion, s1 expansion, width, modules in group)
            let rows = [(5, 4.0, 4.0, 64, 4), (5, 4.0, 3.0, 128, 5), (3, 3.0, 2.0, 256, 6), (3, 2.0, 1.0, 512, 2)];
            let mut stages = Vec::new();
            for (g, &(k, e2, e1, w, total)) in rows.iter().enumerate() {
                stages.push(StageConfig::csc(g + 1, 2, k, e2, w / div, 1));
                stages.push(StageConfig::csc(g + 1, 1, k, e1, w / div, total - 1));
            }
            (32 / div, stages)
        }
        ShiftNetVariant::C => {
            let mut stages = Vec::new();
            for (g, &(w, total)) in [(32, 1), (64, 4), (128, 4), (256, 3)].iter().enumerate() {
                stages.push(StageConfig::csc(g + 1, 2, 3, 1.0, w, 1));
                if total > 1 {
                    stages.push(StageConfig::csc(g + 1, 1, 3, 1.0, w, total - 1));
                }
            }
            (16, stages)
        }
    };
    let cfg = ArchConfig {
        network: NetworkSection {
            name: format!("shiftnet{}", format!("{variant:?}").to_ascii_lowercase()),
            input_channels: 3,
            num_classes,
        },
        stem: StemConfig {
            out_channels: stem,
            kernel: 7,
            stride: 2,
        },
        stages,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub enum Module<T: Real> {
    Csc(CscBlock<T>),
    Basic(BasicBlock<T>),
}

impl<T: Real> Module<T> {
    pub fn name(&self) -> &str {
        match self {
            Module::Csc(b) => &b.name,
            Module::Basic(b) => &b.name,
        }
    }

    fn layer(&mut self) -> &mut dyn Layer<T> {
        match self {
            Module::Csc(b) => b,
            Module::Basic(b) => b,
        }
    }

    fn layer_ref(&self) -> &dyn Layer<T> {
        match self {
            Module::Csc(b) => b,
            Module::Basic(b) => b,
        }
    }
}

/// Stem convolution, modules, final BN-ReLU and the pooled classifier.
pub struct Network<T: Real = f32> {
    pub config: ArchConfig,
    pub seed: u64,
    pub stem: Conv2dLayer<T>,
    pub modules: Vec<Module<T>>,
    pub final_bn: BnReluLayer<T>,
    pub head: HeadLayer<T>,
}

impl<T: Real> Network<T> {
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        let specs = config.modules()?;
        let stem = Conv2dLayer::new(
            "stem",
            config.network.input_channels,
            config.stem.out_channels,
            config.stem.kernel,
            config.stem.stride,
            seed,
        )?;
        let mut modules = Vec::with_capacity(specs.len());
        for spec in specs {
            modules.push(match spec {
                ModuleSpec::Csc { name, cfg } => Module::Csc(CscBlock::new(name, cfg, seed)?),
                ModuleSpec::Basic { name, cfg } => Module::Basic(BasicBlock::new(name, cfg, seed)?),
            });
        }
        let feat = config.feature_channels();
        Ok(Network {
            final_bn: BnReluLayer::new("final_bn", feat),
            head: HeadLayer::new("head", feat, config.network.num_classes, seed)?,
            stem,
            modules,
            config,
            seed,
        })
    }

    pub fn name(&self) -> &str {
        self.config.name()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn csc_blocks(&self) -> impl Iterator<Item = &CscBlock<T>> {
        self.modules.iter().filter_map(|m| match m {
            Module::Csc(b) => Some(b),
            Module::Basic(_) => None,
        })
    }

    pub fn csc_blocks_mut(&mut self) -> impl Iterator<Item = &mut CscBlock<T>> {
        self.modules.iter_mut().filter_map(|m| match m {
            Module::Csc(b) => Some(b),
            Module::Basic(_) => None,
        })
    }

    pub fn csc_block(&self, name: &str) -> Option<&CscBlock<T>> {
        self.csc_blocks().find(|b| b.name == name)
    }

    /// Number of learned scalars.
    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Forward pass returning the output of the stem and of every module.
    pub fn forward_trace(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<(String, Shape)>> {
        let mut a = self.stem.forward(x, mode)?;
        let mut shapes = vec![("stem".to_string(), a.shape())];
        for m in &mut self.modules {
            a = m.layer().forward(&a, mode)?;
            shapes.push((m.name().to_string(), a.shape()));
        }
        Ok(shapes)
    }

    /// Finds a parameter or buffer tensor by name.
    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.params()
            .into_iter()
            .chain(self.buffers())
            .find(|p| p.name == name)
            .map(|p| p.value)
    }
}

impl<T: Real> Layer<T> for Network<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape().c != self.config.network.input_channels {
            return Err(Error::ChannelMismatch {
                op: "network_forward",
                expected: self.config.network.input_channels,
                actual: x.shape().c,
            });
        }
        let mut a = self.stem.forward(x, mode)?;
        for m in &mut self.modules {
            a = m.layer().forward(&a, mode)?;
        }
        let a = self.final_bn.forward(&a, mode)?;
        self.head.forward(&a, mode)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(grad)?;
        g = self.final_bn.backward(&g)?;
        for m in self.modules.iter_mut().rev() {
            g = m.layer().backward(&g)?;
        }
        self.stem.backward(&g)
    }

    fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = self.stem.params();
        for m in &self.modules {
            v.extend(m.layer_ref().params());
        }
        v.extend(self.final_bn.params());
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut v = self.stem.params_mut();
        for m in &mut self.modules {
            v.extend(m.layer().params_mut());
        }
        v.extend(self.final_bn.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn buffers(&self) -> Vec<ParamRef<'_, T>> {
        let mut v = Vec::new();
        for m in &self.modules {
            v.extend(m.layer_ref().buffers());
        }
        v.extend(self.final_bn.buffers());
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for m in &mut self.modules {
            v.extend(m.layer().buffers_mut());
        }
        v.extend(self.final_bn.buffers_mut());
        v
    }
}

pub fn build_shiftresnet<T: Real>(depth: usize, expansion: f64, num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(shiftresnet_config(depth, expansion, num_classes)?, seed)
}

pub fn build_resnet<T: Real>(depth: usize, num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(resnet_config(depth, num_classes)?, seed)
}

pub fn reduce_resnet<T: Real>(depth: usize, target: usize, mode: ReduceMode, num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(reduce_resnet_config(depth, target, mode, num_classes)?.0, seed)
}

pub fn build_shiftnet<T: Real>(variant: ShiftNetVariant, num_classes: usize, seed: u64) -> Result<Network<T>> {
    Network::new(shiftnet_config(variant, num_classes)?, seed)
}

/// Resolves CLI-style names: `resnet{20,56,110}`, `shiftresnet{20,56,110}`
/// (with `expansion`) and `shiftnet{a,b,c}`.
pub fn arch_by_name(name: &str, expansion: f64, num_classes: usize) -> Result<ArchConfig> {
    let lower = name.to_ascii_lowercase();
    if let Some(d) = lower.strip_prefix("shiftresnet") {
        let depth = d.parse().map_err(|_| Error::invalid(format!("bad depth in {name:?}")))?;
        shiftresnet_config(depth, expansion, num_classes)
    } else if let Some(d) = lower.strip_prefix("resnet") {
        let depth = d.parse().map_err(|_| Error::invalid(format!("bad depth in {name:?}")))?;
        resnet_config(depth, num_classes)
    } else if let Some(v) = lower.strip_prefix("shiftnet") {
        shiftnet_config(v.parse()?, num_classes)
    } else {
        Err(Error::invalid(format!("unknown architecture {name:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shiftresnet20_has_nine_blocks() {
        let cfg = shiftresnet_config(20, 1.0, 10).unwrap();
        let mods = cfg.modules().unwrap();
        assert_eq!(mods.len(), 9);
        let strides: Vec<_> = mods.iter().map(ModuleSpec::stride).collect();
        assert_eq!(strides, [1, 1, 1, 2, 1, 1, 2, 1, 1]);
        assert_eq!(mods[0].name(), "g1.b0");
        assert_eq!(mods[3].name(), "g2.b0");
    }

    #[test]
    fn resnet20_has_nine_basic_blocks() {
        let mods = resnet_config(20, 10).unwrap().modules().unwrap();
        assert_eq!(mods.len(), 9);
        assert!(mods.iter().all(|m| matches!(m, ModuleSpec::Basic { .. })));
    }

    #[test]
    fn invalid_depth_rejected() {
        assert!(shiftresnet_config(32, 1.0, 10).is_err());
        assert!(resnet_config(18, 10).is_err());
    }

    #[test]
    fn skeletons_match() {
        for depth in RESNET_DEPTHS {
            let a = shiftresnet_config(depth, 3.0, 10).unwrap().stage_shapes(32, 32).unwrap();
            let b = resnet_config(depth, 10).unwrap().stage_shapes(32, 32).unwrap();
            assert_eq!(a, b);
            let last = a.last().unwrap();
            assert_eq!((last.1, last.2, last.3), (64, 8, 8));
        }
    }

    #[test]
    fn shiftnet_reaches_seven_by_seven() {
        for v in [ShiftNetVariant::A, ShiftNetVariant::B, ShiftNetVariant::C] {
            let cfg = shiftnet_config(v, 1000).unwrap();
            let last = cfg.stage_shapes(224, 224).unwrap().pop().unwrap();
            assert_eq!((last.2, last.3), (7, 7));
        }
        let a = shiftnet_config(ShiftNetVariant::A, 1000).unwrap();
        assert_eq!(a.modules().unwrap().len(), 17);
        let c = shiftnet_config(ShiftNetVariant::C, 1000).unwrap();
        assert_eq!(c.modules().unwrap().len(), 12);
    }

    #[test]
    fn config_text_round_trip() {
        for cfg in [
            shiftresnet_config(56, 3.0, 10).unwrap(),
            shiftnet_config(ShiftNetVariant::B, 1000).unwrap(),
            scaled_resnet_config(20, 0.5, ReduceMode::ModuleWise, 10).unwrap(),
        ] {
            let text = cfg.to_text().unwrap();
            assert_eq!(ArchConfig::from_text(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn config_text_rejects_bad_chain() {
        let mut cfg = shiftresnet_config(20, 1.0, 10).unwrap();
        cfg.stages[1].out_channels = 48;
        let text = cfg.to_text().unwrap();
        assert!(ArchConfig::from_text(&text).is_err());
        assert!(ArchConfig::from_text("not toml [").is_err());
    }

    #[test]
    fn unit_scale_is_plain_resnet() {
        for mode in [ReduceMode::ModuleWise, ReduceMode::NetWise] {
            assert_eq!(
                scaled_resnet_config(56, 1.0, mode, 10).unwrap(),
                resnet_config(56, 10).unwrap()
            );
        }
    }

    #[test]
    fn network_forward_shapes() {
        let mut net = build_shiftresnet::<f32>(20, 1.0, 10, 1).unwrap();
        let x = Tensor::randn(Shape::new(2, 3, 16, 16), 1);
        let y = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 10, 1, 1));
        let wrong = Tensor::randn(Shape::new(2, 1, 16, 16), 1);
        assert!(net.forward(&wrong, Mode::Eval).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_resnet::<f32>(20, 10, 5).unwrap();
        let b = build_resnet::<f32>(20, 10, 5).unwrap();
        let c = build_resnet::<f32>(20, 10, 6).unwrap();
        let pa = a.params();
        for (x, y) in pa.iter().zip(b.params()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
        assert_ne!(pa[0].value, c.params()[0].value);
    }

    #[test]
    fn parameter_names_are_unique() {
        let net = build_shiftnet::<f32>(ShiftNetVariant::C, 10, 0).unwrap();
        let mut names: Vec<_> = net.params().into_iter().map(|p| p.name).collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn arch_names_resolve() {
        assert_eq!(arch_by_name("ShiftResNet56", 3.0, 10).unwrap(), shiftresnet_config(56, 3.0, 10).unwrap());
        assert!(arch_by_name("shiftnetd", 1.0, 10).is_err());
        assert!(arch_by_name("vgg16", 1.0, 10).is_err());
    }
}
