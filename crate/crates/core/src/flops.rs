//! Multiply-add accounting for the encoder, with the prune-and-merge
//! overhead booked per compressed layer.

use serde::Serialize;

use crate::compress::CompressionPlan;
use crate::error::{contract, Result};
use crate::vit::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct BlockFlops {
    pub qkv: u64,
    pub qk: u64,
    pub av: u64,
    pub out: u64,
    pub fc1: u64,
    pub fc2: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.qk + self.av + self.out + self.fc1 + self.fc2
    }
}

/// Per-operation multiply-adds of one block over `n` tokens of width `d`.
pub fn block_flops(n: u64, d: u64) -> BlockFlops {
    BlockFlops { qkv: 3 * n * d * d, qk: n * n * d, av: n * n * d, out: n * d * d, fc1: 4 * n * d * d, fc2: 4 * n * d * d }
}

/// Operations excluded from totals, reported for reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
pub struct Informational {
    pub softmax: u64,
    pub layer_norm: u64,
    pub gelu: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub layer: usize,
    /// Tokens entering the block (`N`).
    pub tokens: u64,
    /// Tokens the block actually processes (`M_l`, or `N` when uncompressed).
    pub processed: u64,
    pub compressed: bool,
    pub block: BlockFlops,
    pub merge: u64,
    pub reconstruct: u64,
    pub mask: u64,
    pub info: Informational,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.block.total() + self.merge + self.reconstruct + self.mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub patch_embed: u64,
    pub head: u64,
    pub encoder_total: u64,
    pub baseline_encoder_total: u64,
    pub total: u64,
    /// Encoder reduction vs. the uncompressed model, in percent (negative
    /// when overhead outweighs savings).
    pub reduction_pct: f64,
}

impl FlopsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,tokens,processed,qkv,qk,av,out,fc1,fc2,merge,reconstruct,mask,total\n");
        for l in &self.layers {
            let b = &l.block;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                l.layer, l.tokens, l.processed, b.qkv, b.qk, b.av, b.out, b.fc1, b.fc2, l.merge, l.reconstruct, l.mask, l.total()
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>5} {:>6} {:>6} {:>16} {:>12}\n", "layer", "N", "M", "block", "overhead");
        for l in &self.layers {
            out.push_str(&format!(
                "{:>5} {:>6} {:>6} {:>16} {:>12}\n",
                l.layer,
                l.tokens,
                l.processed,
                l.block.total(),
                l.merge + l.reconstruct + l.mask
            ));
        }
        out.push_str(&format!("patch embed      {:>16}\n", self.patch_embed));
        out.push_str(&format!("head             {:>16}\n", self.head));
        out.push_str(&format!("encoder total    {:>16} ({})\n", self.encoder_total, giga(self.encoder_total)));
        out.push_str(&format!("baseline encoder {:>16} ({})\n", self.baseline_encoder_total, giga(self.baseline_encoder_total)));
        out.push_str(&format!("total            {:>16} ({})\n", self.total, giga(self.total)));
        out.push_str(&format!("reduction        {:>15.2}%\n", self.reduction_pct));
        out
    }
}

fn giga(v: u64) -> String {
    format!("{:.3} G", v as f64 / 1e9)
}

fn informational(n: u64, d: u64, heads: u64, hidden: u64) -> Informational {
    Informational { softmax: heads * n * n, layer_norm: 2 * n * d, gelu: n * hidden }
}

/// Encoder FLOPs from per-layer processed-token counts (`None` = uncompressed).
pub fn encoder_flops(n: u64, d: u64, kept: &[Option<u64>]) -> u64 {
    kept.iter()
        .map(|k| match k {
            None => block_flops(n, d).total(),
            Some(m) => block_flops(*m, d).total() + 6 * n * d,
        })
        .sum()
}

pub fn model_flops(config: &ModelConfig, plan: Option<&CompressionPlan>) -> Result<FlopsReport> {
    config.validate()?;
    let kept: Vec<Option<usize>> = match plan {
        Some(p) => {
            contract!(
                p.layers.len() == config.depth,
                "plan has {} layers, config depth is {}",
                p.layers.len(),
                config.depth
            );
            p.kept_counts()
        }
        None => vec![None; config.depth],
    };
    let n = config.tokens() as u64;
    let d = config.embed_dim as u64;
    let ratio = config.mlp_ratio as u64;
    let layers: Vec<LayerFlops> = kept
        .iter()
        .enumerate()
        .map(|(layer, k)| {
            let processed = k.map_or(n, |m| m as u64);
            let mut block = block_flops(processed, d);
            // Counts assume nothing about the MLP ratio; both FC layers scale with it.
            block.fc1 = block.fc1 / 4 * ratio;
            block.fc2 = block.fc2 / 4 * ratio;
            let overhead = if k.is_some() { 2 * n * d } else { 0 };
            LayerFlops {
                layer,
                tokens: n,
                processed,
                compressed: k.is_some(),
                block,
                merge: overhead,
                reconstruct: overhead,
                mask: overhead,
                info: informational(processed, d, config.heads as u64, ratio * d),
            }
        })
        .collect();
    let encoder_total: u64 = layers.iter().map(LayerFlops::total).sum();
    let mut base = block_flops(n, d);
    base.fc1 = base.fc1 / 4 * ratio;
    base.fc2 = base.fc2 / 4 * ratio;
    let baseline_encoder_total = base.total() * config.depth as u64;
    let patch_embed = config.num_patches() as u64 * config.patch_dim() as u64 * d;
    let head = d * config.num_classes as u64;
    let reduction_pct = 100.0 * (1.0 - encoder_total as f64 / baseline_encoder_total as f64);
    Ok(FlopsReport {
        layers,
        patch_embed,
        head,
        encoder_total,
        baseline_encoder_total,
        total: encoder_total + patch_embed + head,
        reduction_pct,
    })
}
