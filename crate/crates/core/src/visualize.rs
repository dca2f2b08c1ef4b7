//! Merge-map rendering to binary PPM (P6).

use crate::compress::{CompressionPlan, LayerPlan};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;
use crate::vit::{assemble_patches, extract_patches, ModelConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Ppm {
    /// Renders a `[C, H, W]` image with values in [0, 1]; one channel is
    /// drawn as gray. Each pixel is repeated `scale` times per axis.
    pub fn from_image(image: &Tensor, scale: usize) -> Result<Self> {
        let s = image.shape();
        contract!(s.len() == 3 && (s[0] == 1 || s[0] == 3), "expected a [1|3, H, W] image, got {:?}", s);
        let scale = scale.max(1);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut rgb = Vec::with_capacity(h * w * scale * scale * 3);
        for y in 0..h * scale {
            for x in 0..w * scale {
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    let v = image.data()[(src * h + y / scale) * w + x / scale];
                    rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        Ok(Self { width: w * scale, height: h * scale, rgb })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&self.to_bytes())
    }
}

/// Merge map and reconstruction of `image` (`[C, H, W]`) for one layer, both
/// in pixel space.
///
/// In the merge map pruned patches are white, patches that form a group of
/// one are copied, and every member of a larger group shows the group's
/// weighted-average patch. The reconstruction is `M⁺·(M·x)` over patch
/// vectors, so pruned patches come out black.
pub fn merge_map(image: &Tensor, config: &ModelConfig, plan: &CompressionPlan, layer: usize) -> Result<(Tensor, Tensor)> {
    contract!(layer < plan.layers.len(), "layer {} out of range for a {}-layer plan", layer, plan.layers.len());
    let s = image.shape();
    if s != [config.channels, config.image_size, config.image_size] {
        return Err(Error::shape("merge_map image", s, &[config.channels, config.image_size, config.image_size]));
    }
    let batched = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let patches = extract_patches(&batched, config)?;
    let (p, pd) = (config.num_patches(), config.patch_dim());
    let entry = match &plan.layers[layer] {
        LayerPlan::Exempt => return Ok((image.clone(), image.clone())),
        LayerPlan::Compressed(e) => e,
    };
    contract!(entry.tokens() == p + 1, "plan covers {} tokens, image has {}", entry.tokens(), p + 1);

    // Token 0 is the class token; tokens 1.. are patches.
    let mut tokens = vec![0.0; pd];
    tokens.extend_from_slice(patches.data());
    let tokens = Tensor::new(&[p + 1, pd], tokens)?;
    let merged = entry.merge.matrix.matmul(&tokens)?;

    let mut map = vec![1.0; p * pd];
    for (r, g) in entry.merge.groups.iter().enumerate() {
        let live: Vec<usize> = g.clone().filter(|&j| j > 0 && !entry.mask.is_pruned(j)).collect();
        for &j in &live {
            let dst = &mut map[(j - 1) * pd..j * pd];
            if live.len() == 1 {
                dst.copy_from_slice(tokens.row(j));
            } else {
                dst.copy_from_slice(merged.row(r));
            }
        }
    }
    let restored = entry.reconstruct.matrix.matmul(&merged)?;
    let recon = restored.data()[pd..].to_vec();

    let to_image = |data: Vec<f64>| -> Result<Tensor> {
        assemble_patches(&Tensor::new(&[p, pd], data)?, config)
    };
    Ok((to_image(map)?, to_image(recon)?))
}

/// Renders [`merge_map`] as two PPM images.
pub fn visualize_merge_map(
    image: &Tensor,
    config: &ModelConfig,
    plan: &CompressionPlan,
    layer: usize,
    scale: usize,
) -> Result<(Ppm, Ppm)> {
    let (map, recon) = merge_map(image, config, plan, layer)?;
    Ok((Ppm::from_image(&map, scale)?, Ppm::from_image(&recon, scale)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{global_plan, generate_merge_matrix_counts, PlanEntry};
    use crate::data::synthetic;
    use crate::scoring::ImportanceScores;

    fn setup() -> (ModelConfig, Tensor) {
        let cfg = ModelConfig::tiny();
        let data = synthetic(3, 10, cfg.image_size, 7).unwrap();
        (cfg, data.image(2))
    }

    #[test]
    fn identity_plan_reproduces_image() {
        let (cfg, img) = setup();
        let plan = CompressionPlan::identity(cfg.depth, cfg.tokens());
        let (map, recon) = merge_map(&img, &cfg, &plan, 1).unwrap();
        assert_eq!(map, img);
        assert_eq!(recon, img);
        let (a, _) = visualize_merge_map(&img, &cfg, &plan, 0, 1).unwrap();
        assert_eq!(a, Ppm::from_image(&img, 1).unwrap());
        assert!(a.to_bytes().starts_with(b"P6\n28 28\n255\n"));
    }

    #[test]
    fn class_only_plan_is_all_white() {
        let (cfg, img) = setup();
        let n = cfg.tokens();
        let scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let (mask, merge) = generate_merge_matrix_counts(&scores, n - 1, 1, true).unwrap();
        let mut plan = CompressionPlan::exempt(cfg.depth);
        plan.layers[0] = LayerPlan::Compressed(PlanEntry::new(mask, merge).unwrap());
        let (map, _) = visualize_merge_map(&img, &cfg, &plan, 0, 2).unwrap();
        assert!(map.rgb.iter().all(|&v| v == 255));
        assert_eq!(map.width, 56);
        assert!(merge_map(&img, &cfg, &plan, 2).is_err());
    }

    #[test]
    fn golden_checksum() {
        let (cfg, img) = setup();
        let n = cfg.tokens();
        let layers = (0..cfg.depth).map(|l| (0..n).map(|i| ((i * 7 + l * 3) % 11) as f64 + 0.5).collect()).collect();
        let plan = global_plan(&ImportanceScores::single(layers), 0.6, 0.1, &[], true).unwrap();
        let (map, recon) = visualize_merge_map(&img, &cfg, &plan, 1, 4).unwrap();
        assert_eq!((map.checksum(), recon.checksum()), (1403629357, 986675822));
    }
}
