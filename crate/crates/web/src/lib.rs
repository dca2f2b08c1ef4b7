//! Browser demo: merge maps of synthetic shapes, a FLOPs explorer, and a
//! merge-matrix builder.
//!
//! The demo has no trained model, so patch importance is the patch's mean
//! brightness (shapes are bright on a dark background). The command line
//! tool scores tokens with gradient-weighted attention instead.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pmvit::compress::{generate_merge_matrix_counts, global_plan, PlanEntry};
use pmvit::data::{synthetic, SHAPE_NAMES};
use pmvit::flops::{block_flops, encoder_flops};
use pmvit::scoring::ImportanceScores;
use pmvit::tensor::Tensor;
use pmvit::visualize::{merge_map, Ppm};
use pmvit::vit::{extract_patches, ModelConfig};

const GAP: usize = 4;

fn js(e: pmvit::Error) -> JsValue {
    JsValue::from_str(&format!("{}: {e}", e.kind()))
}

fn sample_image(class: usize, seed: u64) -> pmvit::Result<Tensor> {
    let cfg = ModelConfig::tiny();
    let data = synthetic(64, SHAPE_NAMES.len(), cfg.image_size, seed)?;
    let i = data
        .labels()
        .iter()
        .position(|&l| l as usize == class % SHAPE_NAMES.len())
        .unwrap_or(0);
    Ok(data.image(i))
}

/// Class token first (always reserved), then one score per patch.
fn brightness_scores(image: &Tensor, cfg: &ModelConfig) -> pmvit::Result<Vec<f64>> {
    let s = image.shape();
    let patches = extract_patches(&image.clone().reshape(&[1, s[0], s[1], s[2]])?, cfg)?;
    let pd = cfg.patch_dim();
    let mut scores = vec![1.0];
    scores.extend(patches.data().chunks(pd).map(|p| p.iter().sum::<f64>() / pd as f64 + 1e-3));
    Ok(scores)
}

fn demo_plan(class: usize, seed: u64, rate: f64, tau: f64) -> pmvit::Result<(Tensor, PlanEntry)> {
    let cfg = ModelConfig::tiny();
    let image = sample_image(class, seed)?;
    let scores = ImportanceScores::single(vec![brightness_scores(&image, &cfg)?]);
    let plan = global_plan(&scores, rate, tau, &[], true)?;
    let entry = plan.entry(0).cloned().expect("single compressed layer");
    Ok((image, entry))
}

pub fn render_panels(class: usize, seed: u64, rate: f64, tau: f64, scale: usize) -> pmvit::Result<Vec<u8>> {
    let mut cfg = ModelConfig::tiny();
    cfg.depth = 1;
    let (image, entry) = demo_plan(class, seed, rate, tau)?;
    let plan = pmvit::compress::CompressionPlan { layers: vec![pmvit::compress::LayerPlan::Compressed(entry)] };
    let (map, recon) = merge_map(&image, &cfg, &plan, 0)?;
    let panels = [Ppm::from_image(&image, scale)?, Ppm::from_image(&map, scale)?, Ppm::from_image(&recon, scale)?];
    let (w, h) = (panels[0].width, panels[0].height);
    let total_w = 3 * w + 2 * GAP;
    let mut rgba = vec![255u8; total_w * h * 4];
    for (k, p) in panels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                let dst = (y * total_w + k * (w + GAP) + x) * 4;
                rgba[dst..dst + 3].copy_from_slice(&p.rgb[src..src + 3]);
            }
        }
    }
    Ok(rgba)
}

#[wasm_bindgen]
pub fn shape_names() -> String {
    SHAPE_NAMES.join(",")
}

/// Width in pixels of the three-panel strip (input, merge map, reconstruction).
#[wasm_bindgen]
pub fn strip_width(scale: usize) -> usize {
    3 * ModelConfig::tiny().image_size * scale.max(1) + 2 * GAP
}

#[wasm_bindgen]
pub fn strip_height(scale: usize) -> usize {
    ModelConfig::tiny().image_size * scale.max(1)
}

/// RGBA pixels of the three-panel strip.
#[wasm_bindgen]
pub fn render_merge_map(class: usize, seed: u64, rate: f64, tau: f64, scale: usize) -> Result<Vec<u8>, JsValue> {
    render_panels(class, seed, rate, tau, scale).map_err(js)
}

#[derive(Serialize)]
struct PlanCounts {
    tokens: usize,
    kept: usize,
    pruned: usize,
    merged: usize,
}

#[wasm_bindgen]
pub fn plan_counts(class: usize, seed: u64, rate: f64, tau: f64) -> Result<String, JsValue> {
    let (_, e) = demo_plan(class, seed, rate, tau).map_err(js)?;
    let c = PlanCounts { tokens: e.tokens(), kept: e.kept(), pruned: e.pruned(), merged: e.tokens() - e.kept() - e.pruned() };
    Ok(serde_json::to_string(&c).expect("counts serialize"))
}

#[derive(Serialize)]
struct CurvePoint {
    rate: f64,
    kept: u64,
    gflops: f64,
    reduction_pct: f64,
}

/// Encoder FLOPs for uniform keep rates 0.30..=1.00 (every layer compressed):
/// `[{rate, kept, gflops, reduction_pct}]` as JSON.
pub fn flops_curve_points(tokens: u64, dim: u64, depth: usize) -> Vec<(f64, u64, u64, f64)> {
    let base = block_flops(tokens, dim).total() * depth as u64;
    (30..=100)
        .step_by(5)
        .map(|p| {
            let r = p as f64 / 100.0;
            let kept = ((r * tokens as f64).round() as u64).max(1);
            let total = encoder_flops(tokens, dim, &vec![Some(kept); depth]);
            (r, kept, total, 100.0 * (1.0 - total as f64 / base as f64))
        })
        .collect()
}

#[wasm_bindgen]
pub fn flops_curve(tokens: u32, dim: u32, depth: u32) -> Result<String, JsValue> {
    if tokens == 0 || dim == 0 || depth == 0 {
        return Err(JsValue::from_str("contract: tokens, dim and depth must be positive"));
    }
    let pts: Vec<CurvePoint> = flops_curve_points(tokens as u64, dim as u64, depth as usize)
        .into_iter()
        .map(|(rate, kept, total, reduction_pct)| CurvePoint { rate, kept, gflops: total as f64 / 1e9, reduction_pct })
        .collect();
    Ok(serde_json::to_string(&pts).expect("curve serializes"))
}

#[derive(Serialize)]
struct MatrixView {
    mask: Vec<bool>,
    groups: Vec<(usize, usize)>,
    merge: Vec<Vec<f64>>,
    reconstruct: Vec<Vec<f64>>,
}

pub fn merge_matrix_view(scores: &str, prune: usize, keep: usize) -> pmvit::Result<String> {
    let scores: Vec<f64> = scores
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| pmvit::Error::Format(format!("`{s}` is not a number"))))
        .collect::<pmvit::Result<_>>()?;
    let (mask, merge) = generate_merge_matrix_counts(&scores, prune, keep, false)?;
    let entry = PlanEntry::new(mask, merge)?;
    let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
    let view = MatrixView {
        mask: entry.mask.0.clone(),
        groups: entry.merge.groups.iter().map(|g| (g.start, g.end)).collect(),
        merge: rows(&entry.merge.matrix),
        reconstruct: rows(&entry.reconstruct.matrix),
    };
    Ok(serde_json::to_string(&view).expect("view serializes"))
}

/// Merge and reconstruct matrices for a comma-separated score vector
/// (no class token), as JSON.
#[wasm_bindgen]
pub fn merge_matrix(scores: &str, prune: usize, keep: usize) -> Result<String, JsValue> {
    merge_matrix_view(scores, prune, keep).map_err(js)
}
