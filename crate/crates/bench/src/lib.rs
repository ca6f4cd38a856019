//! Shared fixtures for the criterion benchmarks.

use shiftnet::microbench::{BenchCase, CaseData};
use shiftnet::{Network, Result, Shape, Tensor};

/// Kernel shapes `(M, N, D_F, D_K)` swept by the kernel benchmarks.
pub const KERNEL_SHAPES: [(usize, usize, usize, usize); 3] = [(16, 16, 32, 3), (64, 64, 32, 3), (144, 16, 32, 3)];

pub fn kernel_case(m: usize, n: usize, d_f: usize, d_k: usize) -> Result<CaseData<f32>> {
    CaseData::new(&BenchCase::new(m, n, d_f, d_k), 0)
}

/// Random CIFAR-shaped batch.
pub fn cifar_batch(batch: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn(Shape::new(batch, 3, 32, 32), seed)
}

pub fn label(net: &Network<f32>) -> String {
    format!("{} ({} params)", net.name(), net.num_parameters())
}

#[cfg(test)]
mod tests {
    use super::*;
    use shiftnet::microbench::Variant;

    #[test]
    fn fixtures_run() {
        let (m, n, f, k) = KERNEL_SHAPES[0];
        let c = kernel_case(m, n, f, k).unwrap();
        for v in Variant::ALL {
            assert!(c.run(v).is_ok());
        }
        assert_eq!(cifar_batch(2, 0).shape(), Shape::new(2, 3, 32, 32));
    }
}
