//! Wall-clock comparison of token-merge implementations on identical inputs.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compress::{generate_merge_matrix_counts, grouped_merge, MergeMatrix};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeVariant {
    GroupedMerge,
    DenseMatmul,
    GatherScatter,
    SortSelect,
}

impl MergeVariant {
    pub const ALL: [MergeVariant; 4] =
        [MergeVariant::GroupedMerge, MergeVariant::DenseMatmul, MergeVariant::GatherScatter, MergeVariant::SortSelect];

    pub fn name(self) -> &'static str {
        match self {
            MergeVariant::GroupedMerge => "grouped_merge",
            MergeVariant::DenseMatmul => "dense_matmul",
            MergeVariant::GatherScatter => "gather_scatter",
            MergeVariant::SortSelect => "sort_select",
        }
    }
}

impl fmt::Display for MergeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MergeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown merge variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStats {
    pub variant: MergeVariant,
    pub tokens: usize,
    pub dim: usize,
    pub kept: usize,
    pub repetitions: usize,
    pub median_ns: f64,
    pub q1_ns: f64,
    pub q3_ns: f64,
    pub iqr_ns: f64,
}

pub const BENCH_CSV_HEADER: &str = "variant,tokens,dim,kept,repetitions,median_ns,q1_ns,q3_ns,iqr_ns";

impl BenchStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.0},{:.0},{:.0},{:.0}",
            self.variant, self.tokens, self.dim, self.kept, self.repetitions, self.median_ns, self.q1_ns, self.q3_ns, self.iqr_ns
        )
    }
}

/// Inputs shared across variants: a merge matrix with 70% kept and 10%
/// pruned tokens, and a random `[N, D]` sequence.
pub struct BenchInput {
    pub merge: MergeMatrix,
    pub z: Tensor,
}

impl BenchInput {
    pub fn new(tokens: usize, dim: usize, seed: u64) -> Result<Self> {
        contract!(tokens >= 2 && dim >= 1, "bench sizes must be N >= 2, D >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..tokens).map(|_| rng.gen::<f64>()).collect();
        let m = ((0.7 * tokens as f64).round() as usize).max(2);
        let prune = ((0.1 * tokens as f64).round() as usize).min(tokens - m);
        let (_, merge) = generate_merge_matrix_counts(&scores, prune, m, true)?;
        let z = Tensor::new(&[tokens, dim], (0..tokens * dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        Ok(Self { merge, z })
    }

    pub fn run(&self, variant: MergeVariant) -> Tensor {
        match variant {
            MergeVariant::GroupedMerge => grouped_merge(&self.z, &self.merge).expect("bench shapes").0,
            MergeVariant::DenseMatmul => dense_merge(&self.merge.matrix, &self.z),
            MergeVariant::GatherScatter => gather_scatter(&self.merge, &self.z),
            MergeVariant::SortSelect => sort_select(&self.merge, &self.z),
        }
    }
}

/// Plain dense `M·z`, every entry of `M` visited.
fn dense_merge(m: &Tensor, z: &Tensor) -> Tensor {
    let (rows, n, d) = (m.rows(), m.cols(), z.cols());
    let mut out = vec![0.0; rows * d];
    for i in 0..rows {
        let dst = &mut out[i * d..(i + 1) * d];
        for j in 0..n {
            let w = m.data()[i * n + j];
            for (o, &x) in dst.iter_mut().zip(&z.data()[j * d..(j + 1) * d]) {
                *o += w * x;
            }
        }
    }
    Tensor::new(&[rows, d], out).expect("dense shape")
}

/// Builds an explicit (row, token, weight) index list, then scatter-adds.
fn gather_scatter(merge: &MergeMatrix, z: &Tensor) -> Tensor {
    let (rows, n, d) = (merge.rows(), merge.tokens(), z.cols());
    let mut index = Vec::new();
    for i in 0..rows {
        for j in 0..n {
            let w = merge.matrix.data()[i * n + j];
            if w != 0.0 {
                index.push((i, j, w));
            }
        }
    }
    let mut out = vec![0.0; rows * d];
    for (i, j, w) in index {
        for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(&z.data()[j * d..(j + 1) * d]) {
            *o += w * x;
        }
    }
    Tensor::new(&[rows, d], out).expect("scatter shape")
}

/// Sorts tokens by destination row, then reduces each contiguous segment.
fn sort_select(merge: &MergeMatrix, z: &Tensor) -> Tensor {
    let (rows, n, d) = (merge.rows(), merge.tokens(), z.cols());
    let owner: Vec<(usize, usize, f64)> = (0..n)
        .filter_map(|j| (0..rows).find(|&i| merge.matrix.data()[i * n + j] != 0.0).map(|i| (i, j, merge.matrix.data()[i * n + j])))
        .collect();
    let mut order = owner;
    order.sort_by_key(|&(i, j, _)| (i, j));
    let mut out = vec![0.0; rows * d];
    for (i, j, w) in order {
        for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(&z.data()[j * d..(j + 1) * d]) {
            *o += w * x;
        }
    }
    Tensor::new(&[rows, d], out).expect("sort shape")
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times every variant in `variants` on the same input after checking their
/// outputs agree within 1e-10.
pub fn micro_benchmark(variants: &[MergeVariant], tokens: usize, dim: usize, repetitions: usize, seed: u64) -> Result<Vec<BenchStats>> {
    contract!(repetitions >= 10, "repetitions must be >= 10, got {}", repetitions);
    let input = BenchInput::new(tokens, dim, seed)?;
    let reference = input.run(MergeVariant::DenseMatmul);
    for &v in variants {
        let diff = input.run(v).max_abs_diff(&reference);
        if diff > 1e-10 {
            return Err(Error::Numeric(format!("{v} disagrees with dense merge by {diff:e}")));
        }
    }
    let warmup = (repetitions / 5).max(3);
    let mut stats = Vec::with_capacity(variants.len());
    for &v in variants {
        for _ in 0..warmup {
            black_box(input.run(v));
        }
        let mut times: Vec<f64> = (0..repetitions)
            .map(|_| {
                let start = Instant::now();
                black_box(input.run(black_box(v)));
                start.elapsed().as_nanos() as f64
            })
            .collect();
        times.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&times, 0.25), quantile(&times, 0.75));
        stats.push(BenchStats {
            variant: v,
            tokens,
            dim,
            kept: input.merge.rows(),
            repetitions,
            median_ns: quantile(&times, 0.5),
            q1_ns: q1,
            q3_ns: q3,
            iqr_ns: q3 - q1,
        });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_agree() {
        let input = BenchInput::new(40, 7, 1).unwrap();
        let reference = input.run(MergeVariant::DenseMatmul);
        for v in MergeVariant::ALL {
            assert!(input.run(v).max_abs_diff(&reference) < 1e-10, "{v}");
        }
    }

    #[test]
    fn report_schema() {
        let stats = micro_benchmark(&MergeVariant::ALL, 16, 8, 10, 0).unwrap();
        assert_eq!(stats.len(), 4);
        for s in &stats {
            assert_eq!(s.csv_row().split(',').count(), BENCH_CSV_HEADER.split(',').count());
            assert!(s.q1_ns <= s.median_ns && s.median_ns <= s.q3_ns);
        }
        assert!(micro_benchmark(&MergeVariant::ALL, 16, 8, 9, 0).is_err());
        assert_eq!("sort_select".parse::<MergeVariant>().unwrap(), MergeVariant::SortSelect);
        assert!("nope".parse::<MergeVariant>().is_err());
    }
}
