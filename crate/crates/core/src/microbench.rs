//! Microbenchmarks for the building blocks of a CSC module: fused
//! shift + 1x1 against the two-step shift then 1x1, depthwise + 1x1 and a
//! dense spatial convolution of the same width, each paired with a memory
//! traffic model.
//!
//! Every case passes a correctness gate (fused against two-step) before
//! any timing. Timings are single-threaded.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, DepthwiseKernel, PointwiseKernel, SpatialKernel};
use crate::shift::{self, make_shift_spec, ShiftSpec};
use crate::tensor::{Real, Shape, Tensor};

/// Maximum relative error between fused and two-step outputs.
pub const GATE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fused,
    Unfused,
    DepthwisePointwise,
    Spatial,
    ShiftOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Fused,
        Variant::Unfused,
        Variant::DepthwisePointwise,
        Variant::Spatial,
        Variant::ShiftOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Fused => "fused",
            Variant::Unfused => "unfused",
            Variant::DepthwisePointwise => "depthwise_pointwise",
            Variant::Spatial => "spatial",
            Variant::ShiftOnly => "shift_only",
        }
    }

    pub fn kind(self) -> &'static str {
        match self {
            Variant::Fused | Variant::Unfused => "shift+pointwise",
            Variant::DepthwisePointwise => "depthwise+pointwise",
            Variant::Spatial => "spatial",
            Variant::ShiftOnly => "shift",
        }
    }
}

fn default_batch() -> usize {
    1
}

fn default_stride() -> usize {
    1
}

fn default_reps() -> usize {
    15
}

fn default_warmup() -> usize {
    2
}

fn all_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    /// Input channels.
    pub m: usize,
    /// Output channels.
    pub n: usize,
    /// Square feature-map side.
    pub d_f: usize,
    /// Kernel side.
    pub d_k: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default = "all_variants")]
    pub variants: Vec<Variant>,
}

impl BenchCase {
    pub fn new(m: usize, n: usize, d_f: usize, d_k: usize) -> Self {
        BenchCase {
            m,
            n,
            d_f,
            d_k,
            batch: 1,
            stride: 1,
            repetitions: default_reps(),
            warmup: default_warmup(),
            variants: all_variants(),
        }
    }

    pub fn dims(&self) -> String {
        format!(
            "M={} N={} F={} K={} B={} S={}",
            self.m, self.n, self.d_f, self.d_k, self.batch, self.stride
        )
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.d_f == 0 || self.batch == 0 || self.repetitions == 0 {
            return Err(Error::config(format!("bench case {} has a zero dimension", self.dims())));
        }
        if self.d_k % 2 == 0 || !(1..=2).contains(&self.stride) {
            return Err(Error::config(format!("bench case {}: odd kernel and stride 1 or 2 required", self.dims())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    #[serde(default)]
    pub seed: u64,
    /// Shortest timed sample; repetitions are batched until a sample lasts this long.
    #[serde(default = "default_min_sample_ns")]
    pub min_sample_ns: u64,
    #[serde(rename = "case")]
    pub cases: Vec<BenchCase>,
}

fn default_min_sample_ns() -> u64 {
    200_000
}

impl SuiteConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: SuiteConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("cannot parse bench suite: {e}")))?;
        if cfg.cases.is_empty() {
            return Err(Error::config("bench suite lists no cases"));
        }
        for c in &cfg.cases {
            c.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize bench suite: {e}")))
    }

    /// A small suite spanning the CIFAR ResNet widths.
    pub fn default_suite() -> Self {
        SuiteConfig {
            seed: 0,
            min_sample_ns: default_min_sample_ns(),
            cases: vec![
                BenchCase::new(16, 16, 32, 3),
                BenchCase::new(64, 64, 32, 3),
                BenchCase::new(144, 16, 32, 3),
                BenchCase {
                    stride: 2,
                    ..BenchCase::new(32, 64, 16, 3)
                },
                BenchCase::new(64, 64, 16, 5),
            ],
        }
    }
}

/// Modeled memory traffic (in words) and FLOPs of one variant at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub words: u64,
    pub flops: u64,
}

impl CostModel {
    pub fn bytes(&self) -> u64 {
        4 * self.words
    }
}

/// Word counts follow read-input + write-output + read-weights per layer:
/// spatial `F²(M+N) + K²MN`, depthwise `2MF² + K²M`, pointwise
/// `F²(M+N) + MN`, shift `2MF²`. The fused kernel costs what its pointwise
/// half costs. FLOPs count a multiply-accumulate as two.
pub fn cost_model(variant: Variant, m: usize, n: usize, d_f: usize, d_k: usize) -> CostModel {
    let (m, n, p, k2) = (m as u64, n as u64, (d_f * d_f) as u64, (d_k * d_k) as u64);
    let pointwise = p * (m + n) + m * n;
    let depthwise = 2 * m * p + k2 * m;
    let shift = 2 * m * p;
    match variant {
        Variant::Fused => CostModel {
            words: pointwise,
            flops: 2 * m * n * p,
        },
        Variant::Unfused => CostModel {
            words: shift + pointwise,
            flops: 2 * m * n * p,
        },
        Variant::DepthwisePointwise => CostModel {
            words: depthwise + pointwise,
            flops: 2 * (m * k2 * p + m * n * p),
        },
        Variant::Spatial => CostModel {
            words: p * (m + n) + k2 * m * n,
            flops: 2 * m * n * k2 * p,
        },
        Variant::ShiftOnly => CostModel { words: shift, flops: 0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kind: String,
    pub dims: String,
    pub variant: Variant,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
    pub runs_per_sample: usize,
    pub model_bytes: u64,
    pub model_flops: u64,
    pub gate_error: f64,
    /// Sum of the output tensor; identical across reruns with one seed.
    pub checksum: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "kind,dims,variant,median_ns,model_bytes,model_flops,p10_ns,p90_ns,runs_per_sample,gate_error,checksum,threads\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.0},{},{},{:.0},{:.0},{},{:e},{},1",
                r.kind,
                r.dims,
                r.variant.as_str(),
                r.median_ns,
                r.model_bytes,
                r.model_flops,
                r.p10_ns,
                r.p90_ns,
                r.runs_per_sample,
                r.gate_error,
                r.checksum
            );
        }
        s
    }
}

/// Inputs and weights of one case, all derived from the suite seed.
pub struct CaseData<T: Real> {
    pub input: Tensor<T>,
    pub spec: ShiftSpec,
    pub pointwise: PointwiseKernel<T>,
    pub depthwise: DepthwiseKernel<T>,
    pub spatial: SpatialKernel<T>,
    pub stride: usize,
}

impl<T: Real> CaseData<T> {
    pub fn new(case: &BenchCase, seed: u64) -> Result<Self> {
        case.validate()?;
        let (m, n, k) = (case.m, case.n, case.d_k);
        Ok(CaseData {
            input: Tensor::randn(Shape::new(case.batch, m, case.d_f, case.d_f), seed),
            spec: make_shift_spec(m, k, 1, 0)?,
            pointwise: PointwiseKernel::new(Tensor::randn(Shape::new(1, 1, m, n), seed ^ 1))?,
            depthwise: DepthwiseKernel::same(Tensor::randn(Shape::new(m, 1, k, k), seed ^ 2), 1)?,
            spatial: SpatialKernel::same(Tensor::randn(Shape::new(n, m, k, k), seed ^ 3), case.stride)?,
            stride: case.stride,
        })
    }

    pub fn run(&self, variant: Variant) -> Result<Tensor<T>> {
        match variant {
            Variant::Fused => shift::fused_shift_pointwise(&self.input, &self.spec, &self.pointwise, self.stride),
            Variant::Unfused => {
                let shifted = shift::shift_forward(&self.input, &self.spec)?;
                ops::conv2d_pointwise(&shifted, &self.pointwise, self.stride)
            }
            Variant::DepthwisePointwise => {
                let d = ops::conv2d_depthwise(&self.input, &self.depthwise)?;
                ops::conv2d_pointwise(&d, &self.pointwise, self.stride)
            }
            Variant::Spatial => ops::conv2d_spatial(&self.input, &self.spatial),
            Variant::ShiftOnly => shift::shift_forward(&self.input, &self.spec),
        }
    }

    /// Relative error of the fused kernel against the two-step composition.
    pub fn gate_error(&self) -> Result<f64> {
        let fused = self.run(Variant::Fused)?;
        let reference = self.run(Variant::Unfused)?;
        fused.rel_error(&reference)
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Runs every case of the suite.
pub fn run_bench(cfg: &SuiteConfig) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for (i, case) in cfg.cases.iter().enumerate() {
        let data = CaseData::<f32>::new(case, cfg.seed.wrapping_add(i as u64))?;
        let gate = data.gate_error()?;
        if !(gate <= GATE_TOLERANCE) {
            return Err(Error::CorrectnessGate {
                case: case.dims(),
                error: gate,
            });
        }
        for &variant in &case.variants {
            let out = data.run(variant)?;
            let checksum: f64 = out.data().iter().map(|&v| v as f64).sum();
            for _ in 0..case.warmup {
                std::hint::black_box(data.run(variant)?);
            }
            let t = Instant::now();
            std::hint::black_box(data.run(variant)?);
            let once = t.elapsed().as_nanos().max(1) as u64;
            let runs = (cfg.min_sample_ns / once).clamp(1, 10_000) as usize;
            let mut samples = Vec::with_capacity(case.repetitions);
            for _ in 0..case.repetitions {
                let t = Instant::now();
                for _ in 0..runs {
                    std::hint::black_box(data.run(variant)?);
                }
                samples.push(t.elapsed().as_nanos() as f64 / runs as f64);
            }
            samples.sort_by(f64::total_cmp);
            let model = cost_model(variant, case.m, case.n, case.d_f, case.d_k);
            report.rows.push(BenchRow {
                kind: variant.kind().to_string(),
                dims: case.dims(),
                variant,
                median_ns: percentile(&samples, 0.5),
                p10_ns: percentile(&samples, 0.1),
                p90_ns: percentile(&samples, 0.9),
                runs_per_sample: runs,
                model_bytes: model.bytes(),
                model_flops: model.flops,
                gate_error: gate,
                checksum,
            });
        }
    }
    Ok(report)
}
