//! A small pre-norm vision transformer whose attention maps (and their
//! gradients) can be captured per layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// The tiny configuration used throughout the tests and the demo pipeline.
    pub fn tiny() -> Self {
        Self {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }

    /// DeiT-Tiny dimensions (224px, patch 16, D=192, 12 blocks, 3 heads).
    pub fn deit_tiny() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 192,
            depth: 12,
            heads: 3,
            mlp_ratio: 4,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.patch_size > 0 && self.image_size > 0, "image and patch sizes must be positive");
        contract!(
            self.image_size % self.patch_size == 0,
            "image_size {} not divisible by patch_size {}",
            self.image_size,
            self.patch_size
        );
        contract!(self.heads > 0 && self.embed_dim % self.heads == 0, "embed_dim {} not divisible by heads {}", self.embed_dim, self.heads);
        contract!(self.channels > 0 && self.num_classes > 0 && self.mlp_ratio > 0, "channels, classes and mlp_ratio must be positive");
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

macro_rules! weight_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)* }
            }

            pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }

            pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }
        }
    };
}

weight_struct!(
    /// Patch projection, class token and learned positional embedding.
    EmbedWeights { proj_w, proj_b, cls, pos }
);
weight_struct!(
    /// One transformer block: attention projections, MLP, two norms.
    BlockWeights {
        ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b,
    }
);
weight_struct!(
    /// Final norm and linear classifier on the class token.
    HeadWeights { norm_g, norm_b, w, b }
);

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights<T> {
    pub embed: EmbedWeights<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub head: HeadWeights<T>,
}

impl<T> VitWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> VitWeights<U> {
        VitWeights {
            embed: self.embed.map("embed.", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}."), f))
                .collect(),
            head: self.head.map("head.", f),
        }
    }

    pub fn for_each(&self, f: &mut impl FnMut(&str, &T)) {
        self.embed.for_each("embed.", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("blocks.{i}."), f);
        }
        self.head.for_each("head.", f);
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.embed.for_each_mut("embed.", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}."), f);
        }
        self.head.for_each_mut("head.", f);
    }
}

pub type PatchEmbedParams = EmbedWeights<Tensor>;
pub type BlockParams = BlockWeights<Tensor>;
pub type VitParams = VitWeights<Tensor>;
pub type BoundVit = VitWeights<Var>;
pub type BoundBlock = BlockWeights<Var>;

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    /// Normal(0, 0.02) truncated to two standard deviations.
    fn trunc_normal(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = self.normal.sample(&mut self.rng);
                if v.abs() <= 0.04 {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }
}

impl VitParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 0.02).expect("valid std"),
        };
        let d = config.embed_dim;
        let hid = config.hidden_dim();
        let embed = EmbedWeights {
            proj_w: init.trunc_normal(&[config.patch_dim(), d]),
            proj_b: Tensor::zeros(&[d]),
            cls: init.trunc_normal(&[d]),
            pos: init.trunc_normal(&[config.tokens(), d]),
        };
        let blocks = (0..config.depth)
            .map(|_| BlockWeights {
                ln1_g: Tensor::filled(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: init.trunc_normal(&[d, d]),
                bq: Tensor::zeros(&[d]),
                wk: init.trunc_normal(&[d, d]),
                bk: Tensor::zeros(&[d]),
                wv: init.trunc_normal(&[d, d]),
                bv: Tensor::zeros(&[d]),
                wo: init.trunc_normal(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::filled(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: init.trunc_normal(&[d, hid]),
                fc1_b: Tensor::zeros(&[hid]),
                fc2_w: init.trunc_normal(&[hid, d]),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        let head = HeadWeights {
            norm_g: Tensor::filled(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            w: init.trunc_normal(&[d, config.num_classes]),
            b: Tensor::zeros(&[config.num_classes]),
        };
        Ok(VitWeights { embed, blocks, head })
    }

    /// Records every parameter on `tape`; `track` controls gradient tracking.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> BoundVit {
        self.map(&mut |_, t| if track { tape.param(t) } else { tape.constant(t.clone()) })
    }

    /// Adds the tape gradients of `bound` into each parameter's grad buffer.
    pub fn accumulate_grads(&mut self, bound: &BoundVit, tape: &Tape) -> Result<()> {
        let mut vars = Vec::new();
        bound.for_each(&mut |_, v| vars.push(*v));
        let mut i = 0;
        let mut out = Ok(());
        self.for_each_mut(&mut |_, t| {
            if let Some(g) = tape.grad(vars[i]) {
                if out.is_ok() {
                    out = t.accumulate_grad(g);
                }
            }
            i += 1;
        });
        out
    }

    pub fn zero_grad(&mut self) {
        self.for_each_mut(&mut |_, t| t.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.numel());
        n
    }
}

/// Batched patch extraction: `[B, C, H, W] → [B, P, C·p·p]`, patches in
/// row-major grid order, each flattened channel-major then row then column.
pub fn extract_patches(images: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let s = images.shape();
    let (c, hw, p) = (config.channels, config.image_size, config.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != hw || s[3] != hw {
        return Err(Error::shape("extract_patches", s, &[0, c, hw, hw]));
    }
    let b = s[0];
    let grid = config.grid();
    let pd = config.patch_dim();
    let src = images.data();
    let mut out = Vec::with_capacity(b * grid * grid * pd);
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ch) * hw + gy * p + y) * hw + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b, grid * grid, pd], out)
}

/// Inverse of [`extract_patches`] for a single image.
pub fn assemble_patches(patches: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let grid = config.grid();
    let (c, hw, p) = (config.channels, config.image_size, config.patch_size);
    if patches.shape() != [grid * grid, config.patch_dim()] {
        return Err(Error::shape("assemble_patches", patches.shape(), &[grid * grid, config.patch_dim()]));
    }
    let mut out = vec![0.0; c * hw * hw];
    let pd = config.patch_dim();
    for gy in 0..grid {
        for gx in 0..grid {
            let patch = &patches.data()[(gy * grid + gx) * pd..(gy * grid + gx + 1) * pd];
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * hw + gy * p + y) * hw + gx * p;
                    out[row..row + p].copy_from_slice(&patch[(ch * p + y) * p..(ch * p + y + 1) * p]);
                }
            }
        }
    }
    Tensor::new(&[c, hw, hw], out)
}

/// Tokens for a batch of images: projection, class token at index 0, positions.
pub fn embed(tape: &mut Tape, config: &ModelConfig, weights: &EmbedWeights<Var>, images: &Tensor) -> Result<Var> {
    let patches = tape.constant(extract_patches(images, config)?);
    let proj = tape.matmul(patches, weights.proj_w)?;
    let proj = tape.add_broadcast(proj, weights.proj_b)?;
    let tokens = tape.prepend_token(proj, weights.cls)?;
    tape.add_broadcast(tokens, weights.pos)
}

/// Single-image form of [`embed`] on raw tensors: `[C, H, W] → [N, D]`.
pub fn patchify(image: &Tensor, config: &ModelConfig, params: &PatchEmbedParams) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", s, &[config.channels, config.image_size, config.image_size]));
    }
    let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
    let mut tape = Tape::new();
    let w = params.map("", &mut |_, t| tape.constant(t.clone()));
    let z = embed(&mut tape, config, &w, &batch)?;
    let (n, d) = (config.tokens(), config.embed_dim);
    tape.value(z).clone().reshape(&[n, d])
}

/// Variables recorded for one block during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerCapture {
    pub layer: usize,
    /// Block input `[B, N, D]`.
    pub input: Var,
    /// Attention probabilities `[B·H, N, N]`, rows are queries.
    pub attn: Var,
    pub heads: usize,
}

/// Per-layer attention map and loss gradient, query-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layer: usize,
    /// `[B, H, N, N]`
    pub attn: Tensor,
    /// `d loss / d attn`, same shape; `None` until a backward pass ran.
    pub grad: Option<Tensor>,
}

impl AttentionTrace {
    pub fn batch(&self) -> usize {
        self.attn.shape()[0]
    }
    pub fn heads(&self) -> usize {
        self.attn.shape()[1]
    }
    pub fn tokens(&self) -> usize {
        self.attn.shape()[2]
    }
}

/// Collects attention variables while a model runs; optionally adds a
/// constant offset to a layer's attention map (used for gradient probes).
#[derive(Debug, Default)]
pub struct TraceSink {
    pub captures: Vec<LayerCapture>,
    offsets: Vec<(usize, Tensor)>,
}

impl TraceSink {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `offset` (shaped `[B·H, N, N]`) to the attention map of `layer`.
    pub fn with_offset(mut self, layer: usize, offset: Tensor) -> Self {
        self.offsets.push((layer, offset));
        self
    }

    fn offset(&self, layer: usize) -> Option<&Tensor> {
        self.offsets.iter().find(|(l, _)| *l == layer).map(|(_, t)| t)
    }

    pub fn capture(&self, layer: usize) -> Option<&LayerCapture> {
        self.captures.iter().find(|c| c.layer == layer)
    }

    /// Materializes the captured maps, with gradients when the tape has them.
    pub fn traces(&self, tape: &Tape) -> Result<Vec<AttentionTrace>> {
        self.captures
            .iter()
            .map(|c| {
                let s = tape.shape(c.attn).to_vec();
                let shape = [s[0] / c.heads, c.heads, s[1], s[2]];
                let attn = tape.value(c.attn).clone().reshape(&shape)?.with_requires_grad(false);
                let grad = match tape.grad(c.attn) {
                    Some(g) => Some(Tensor::new(&shape, g.to_vec())?),
                    None => None,
                };
                let mut attn = attn;
                attn.zero_grad();
                Ok(AttentionTrace { layer: c.layer, attn, grad })
            })
            .collect()
    }
}

/// Pre-norm block: `z' = z + SA(LN(z))`, `out = z' + MLP(LN(z'))`.
pub fn block_forward(
    tape: &mut Tape,
    z: Var,
    w: &BoundBlock,
    heads: usize,
    layer: usize,
    mut sink: Option<&mut TraceSink>,
) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    contract!(s.len() == 3, "block input must be [B, N, D], got {:?}", s);
    let d_model = s[2];
    contract!(d_model % heads == 0, "embed dim {} not divisible by {} heads", d_model, heads);
    let head_dim = d_model / heads;

    let h = tape.layer_norm(z, w.ln1_g, w.ln1_b, LN_EPS)?;
    let q = tape.matmul(h, w.wq)?;
    let q = tape.add_broadcast(q, w.bq)?;
    let k = tape.matmul(h, w.wk)?;
    let k = tape.add_broadcast(k, w.bk)?;
    let v = tape.matmul(h, w.wv)?;
    let v = tape.add_broadcast(v, w.bv)?;

    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let mut attn = tape.softmax(scores)?;
    if let Some(off) = sink.as_deref().and_then(|s| s.offset(layer)).cloned() {
        let off = tape.constant(off);
        attn = tape.add(attn, off)?;
    }
    if let Some(sink) = sink.as_deref_mut() {
        sink.captures.push(LayerCapture { layer, input: z, attn, heads });
    }
    let ctx = tape.matmul(attn, vh)?;
    let ctx = tape.merge_heads(ctx, heads)?;
    let o = tape.matmul(ctx, w.wo)?;
    let o = tape.add_broadcast(o, w.bo)?;
    let z1 = tape.add(z, o)?;

    let h2 = tape.layer_norm(z1, w.ln2_g, w.ln2_b, LN_EPS)?;
    let f = tape.matmul(h2, w.fc1_w)?;
    let f = tape.add_broadcast(f, w.fc1_b)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, w.fc2_w)?;
    let f = tape.add_broadcast(f, w.fc2_b)?;
    tape.add(z1, f)
}

/// Runs one block on raw tokens (`[N, D]` or `[B, N, D]`) without tracking.
pub fn block_apply(block: &BlockParams, heads: usize, z: &Tensor) -> Result<Tensor> {
    let shape = z.shape().to_vec();
    let batched = match shape.len() {
        2 => z.clone().reshape(&[1, shape[0], shape[1]])?,
        3 => z.clone(),
        _ => return Err(Error::shape("block_apply", &shape, &[0, 0])),
    };
    let mut tape = Tape::new();
    let w = block.map("", &mut |_, t| tape.constant(t.clone()));
    let zv = tape.constant(batched);
    let out = block_forward(&mut tape, zv, &w, heads, 0, None)?;
    tape.value(out).clone().reshape(&shape)
}

pub fn head_forward(tape: &mut Tape, z: Var, w: &HeadWeights<Var>) -> Result<Var> {
    let n = tape.layer_norm(z, w.norm_g, w.norm_b, LN_EPS)?;
    let cls = tape.select_token(n, 0)?;
    let logits = tape.matmul(cls, w.w)?;
    tape.add_broadcast(logits, w.b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vit {
    pub config: ModelConfig,
    pub params: VitParams,
}

impl Vit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self { config, params: VitParams::init(&config, seed)? })
    }

    /// Forward pass on `[B, C, H, W]` images, returning the bound parameters
    /// and the `[B, classes]` logits variable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        track: bool,
        mut sink: Option<&mut TraceSink>,
    ) -> Result<(BoundVit, Var)> {
        let bound = self.params.bind(tape, track);
        let mut z = embed(tape, &self.config, &bound.embed, images)?;
        for (l, block) in bound.blocks.iter().enumerate() {
            z = block_forward(tape, z, block, self.config.heads, l, sink.as_deref_mut())?;
        }
        let logits = head_forward(tape, z, &bound.head)?;
        Ok((bound, logits))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, images, false, None)?;
        Ok(tape.value(logits).clone())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn micro_config() -> ModelConfig {
        ModelConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 4,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn random_images(b: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            &[b, cfg.channels, cfg.image_size, cfg.image_size],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn randomize(params: &mut VitParams, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        params.for_each_mut(&mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale) + if *v == 1.0 { 1.0 } else { 0.0 })
        });
    }

    #[test]
    fn token_counts() {
        let cfg = ModelConfig { image_size: 4, patch_size: 2, ..micro_config() };
        assert_eq!(cfg.tokens(), 5);
        assert_eq!(ModelConfig::deit_tiny().tokens(), 197);
        assert_eq!(ModelConfig::tiny().tokens(), 17);
        assert!(ModelConfig { image_size: 5, ..cfg }.validate().is_err());
        assert!(ModelConfig { heads: 3, ..cfg }.validate().is_err());
    }

    #[test]
    fn patchify_counts_and_bias() {
        let cfg = micro_config();
        let mut p = VitParams::init(&cfg, 1).unwrap();
        let img = random_images(1, &cfg, 2).reshape(&[1, 4, 4]).unwrap();
        assert_eq!(patchify(&img, &cfg, &p.embed).unwrap().shape(), &[5, 4]);

        p.embed.pos = Tensor::zeros(&[5, 4]);
        p.embed.proj_b = Tensor::new(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let z = patchify(&Tensor::zeros(&[1, 4, 4]), &cfg, &p.embed).unwrap();
        for t in 1..5 {
            assert_eq!(z.row(t), p.embed.proj_b.data());
        }
        assert_eq!(z.row(0), p.embed.cls.data());
        assert!(patchify(&Tensor::zeros(&[1, 6, 6]), &cfg, &p.embed).is_err());
    }

    #[test]
    fn deit_tiny_has_197_tokens() {
        let cfg = ModelConfig::deit_tiny();
        let img = Tensor::zeros(&[1, 3, 224, 224]);
        assert_eq!(extract_patches(&img, &cfg).unwrap().shape(), &[1, 196, 768]);
    }

    #[test]
    fn patch_round_trip() {
        let cfg = ModelConfig { channels: 2, ..micro_config() };
        let img = random_images(1, &cfg, 3);
        let patches = extract_patches(&img, &cfg).unwrap().reshape(&[4, 8]).unwrap();
        let back = assemble_patches(&patches, &cfg).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn zero_block_is_residual_passthrough() {
        let cfg = micro_config();
        let mut p = VitParams::init(&cfg, 4).unwrap();
        let block = &mut p.blocks[0];
        block.for_each_mut("", &mut |name, t| {
            if !name.starts_with("ln") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
        let z = random_images(1, &cfg, 5).reshape(&[1, 4, 4]).unwrap();
        let z = Tensor::new(&[4, 4], z.into_data()).unwrap();
        assert_eq!(block_apply(block, 2, &z).unwrap(), z);
    }

    #[test]
    fn single_head_attention_matches_hand_oracle() {
        // D = 2, one head, identity norms are bypassed by making the input
        // already normalized: rows [1, -1] and [-1, 1] have zero mean and unit variance.
        let d = 2;
        let eye = Tensor::eye(d);
        let zero = Tensor::zeros(&[d]);
        let wv = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let block = BlockWeights {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: zero.clone(),
            wq: eye.clone(),
            bq: zero.clone(),
            wk: Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bk: zero.clone(),
            wv: wv.clone(),
            bv: zero.clone(),
            wo: eye.clone(),
            bo: zero.clone(),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: zero.clone(),
            fc1_w: Tensor::zeros(&[d, 4]),
            fc1_b: Tensor::zeros(&[4]),
            fc2_w: Tensor::zeros(&[4, d]),
            fc2_b: zero.clone(),
        };
        let z = Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let out = block_apply(&block, 1, &z).unwrap();

        // Hand evaluation of softmax(QKᵀ/√d)·V·Wo with LN(z) ≈ z·(1/√(1+eps)).
        let s = 1.0 / (1.0 + LN_EPS).sqrt();
        let h = [[s, -s], [-s, s]];
        let q = h;
        let k = [[2.0 * h[0][0], h[0][1]], [2.0 * h[1][0], h[1][1]]];
        let v = [
            [h[0][0] * 1.0 + h[0][1] * 0.5, h[0][0] * 2.0 - h[0][1]],
            [h[1][0] * 1.0 + h[1][1] * 0.5, h[1][0] * 2.0 - h[1][1]],
        ];
        for i in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt())
                .collect();
            let m = logits[0].max(logits[1]);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
            for c in 0..2 {
                let sa = a[0] * v[0][c] + a[1] * v[1][c];
                assert!((out.at(&[i, c]) - (z.at(&[i, c]) + sa)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn captured_attention_is_row_stochastic() {
        let cfg = micro_config();
        let mut model = Vit::new(cfg, 6).unwrap();
        randomize(&mut model.params, 7, 0.8);
        let images = random_images(3, &cfg, 8);
        let mut tape = Tape::new();
        let mut sink = TraceSink::new();
        model.forward(&mut tape, &images, false, Some(&mut sink)).unwrap();
        let traces = sink.traces(&tape).unwrap();
        assert_eq!(traces.len(), 2);
        for tr in &traces {
            assert_eq!(tr.attn.shape(), &[3, 2, 5, 5]);
            assert!(tr.grad.is_none());
            for row in tr.attn.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn depth_zero_reads_class_token() {
        let cfg = ModelConfig { depth: 0, ..micro_config() };
        let model = Vit::new(cfg, 9).unwrap();
        let images = random_images(1, &cfg, 10);
        let logits = model.logits(&images).unwrap();
        let z = patchify(&images.clone().reshape(&[1, 4, 4]).unwrap(), &cfg, &model.params.embed).unwrap();
        let cls = z.row(0);
        let mean = cls.iter().sum::<f64>() / 4.0;
        let var = cls.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let normed: Vec<f64> = cls.iter().map(|v| (v - mean) / (var + LN_EPS).sqrt()).collect();
        for c in 0..3 {
            let expect: f64 = (0..4).map(|j| normed[j] * model.params.head.w.at(&[j, c])).sum();
            assert!((logits.at(&[0, c]) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn permuting_patches_and_positions_leaves_logits_unchanged() {
        let cfg = micro_config();
        let mut model = Vit::new(cfg, 11).unwrap();
        randomize(&mut model.params, 12, 0.7);
        let images = random_images(1, &cfg, 13);
        let base = model.logits(&images).unwrap();

        let perm = [2usize, 0, 3, 1];
        let patches = extract_patches(&images, &cfg).unwrap().reshape(&[4, 4]).unwrap();
        let mut moved = Vec::new();
        for &src in &perm {
            moved.extend_from_slice(patches.row(src));
        }
        let img2 = assemble_patches(&Tensor::new(&[4, 4], moved).unwrap(), &cfg)
            .unwrap()
            .reshape(&[1, 1, 4, 4])
            .unwrap();
        let mut permuted = model.clone();
        let pos = &model.params.embed.pos;
        let mut new_pos = pos.row(0).to_vec();
        for &src in &perm {
            new_pos.extend_from_slice(pos.row(src + 1));
        }
        permuted.params.embed.pos = Tensor::new(&[5, 4], new_pos).unwrap();
        let out = permuted.logits(&img2).unwrap();
        assert!(out.max_abs_diff(&base) < 1e-12);
    }

    #[test]
    fn init_is_seeded_and_truncated() {
        let cfg = ModelConfig::tiny();
        let a = VitParams::init(&cfg, 3).unwrap();
        let b = VitParams::init(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.blocks[0].wq.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.blocks[0].bq.data().iter().all(|&v| v == 0.0));
    }
}
