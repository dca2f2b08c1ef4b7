//! Merge and reconstruct matrices, global plans, and the prune-and-merge
//! forward path that wraps a transformer block.
//!
//! A layer's tokens fall into three classes: pruned tokens bypass the block
//! through the shortcut, important tokens each own one merged row, and the
//! remaining tokens are folded into the contiguous group of the next
//! important token to their right (trailing tokens join the last group).

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};
use crate::scoring::{make_token_mask, prune_order, ImportanceScores, TokenMask};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{block_apply, block_forward, embed, head_forward, BlockParams, BoundVit, TraceSink, Vit};

/// Rank tolerance for the dense pseudoinverse fallback.
pub const PINV_RCOND: f64 = 1e-10;

/// `M ∈ R^{m×n}` with the half-open token range each row covers.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeMatrix {
    pub matrix: Tensor,
    pub groups: Vec<Range<usize>>,
}

/// `M⁺ ∈ R^{n×m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructMatrix {
    pub matrix: Tensor,
}

impl MergeMatrix {
    pub fn rows(&self) -> usize {
        self.matrix.rows()
    }

    pub fn tokens(&self) -> usize {
        self.matrix.cols()
    }

    /// Whether every column has at most one nonzero entry and that entry
    /// lies in the row whose group covers the column.
    pub fn is_grouped(&self) -> bool {
        let n = self.tokens();
        if self.groups.len() != self.rows() {
            return false;
        }
        for (r, g) in self.groups.iter().enumerate() {
            let row = self.matrix.row(r);
            if row.iter().enumerate().any(|(j, &w)| w != 0.0 && !g.contains(&j)) {
                return false;
            }
        }
        self.groups.iter().map(|g| g.len()).sum::<usize>() == n
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::Contract(format!("scores must be finite and nonnegative, found {bad}")));
    }
    Ok(())
}

/// Number of pruned tokens a PM-threshold implies for `n` tokens when `m`
/// are kept: `round(τ·candidates)`, capped at the tokens not kept. The class
/// token is not a candidate.
pub fn prune_count_for(tau: f64, n: usize, m: usize, class_token: bool) -> usize {
    let candidates = n - usize::from(class_token && n > 0);
    ((tau * candidates as f64).round() as usize).min(n.saturating_sub(m))
}

/// Builds the merge matrix from explicit pruned / important sets.
fn build_merge(scores: &[f64], mask: &TokenMask, important: &[usize], class_token: bool) -> Result<MergeMatrix> {
    let n = scores.len();
    let first = usize::from(class_token);
    let mut important = important.to_vec();
    important.sort_unstable();
    let has_merged = (first..n).any(|j| !mask.is_pruned(j) && !important.contains(&j));
    contract!(
        !important.is_empty() || (!has_merged && class_token),
        "no important token to receive merged tokens"
    );

    let mut groups = Vec::with_capacity(important.len() + first);
    if class_token {
        groups.push(0..1);
    }
    let mut start = first;
    for (k, &p) in important.iter().enumerate() {
        let end = if k + 1 == important.len() { n } else { p + 1 };
        groups.push(start..end);
        start = p + 1;
    }

    let rows = groups.len();
    let mut data = vec![0.0; rows * n];
    for (r, g) in groups.iter().enumerate() {
        let live: Vec<usize> = g.clone().filter(|&j| !mask.is_pruned(j)).collect();
        let total: f64 = live.iter().map(|&j| scores[j]).sum();
        let row = &mut data[r * n..(r + 1) * n];
        if total > 0.0 {
            for &j in &live {
                row[j] = scores[j] / total;
            }
        } else {
            // Degenerate group: uniform weights keep the row nonzero.
            for &j in &live {
                row[j] = 1.0 / live.len() as f64;
            }
        }
    }
    Ok(MergeMatrix { matrix: Tensor::new(&[rows, n], data)?, groups })
}

/// Important tokens: the `count` highest post-prune scores among live
/// candidates, ties resolved toward the lower index.
fn select_important(scores: &[f64], mask: &TokenMask, first: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (first..scores.len()).filter(|&j| !mask.is_pruned(j)).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx
}

/// Merge-matrix generation with explicit counts: prune the `prune_count`
/// lowest tokens, keep `m` rows (the class row included when present).
pub fn generate_merge_matrix_counts(
    scores: &[f64],
    prune_count: usize,
    m: usize,
    class_token: bool,
) -> Result<(TokenMask, MergeMatrix)> {
    check_scores(scores)?;
    let n = scores.len();
    let first = usize::from(class_token);
    contract!(m >= 1 && m >= first, "kept-token count must be at least {}, got {}", first.max(1), m);
    contract!(m + prune_count <= n, "kept {} + pruned {} exceeds {} tokens", m, prune_count, n);
    let mask = make_token_mask(scores, prune_count, class_token)?;
    let post: Vec<f64> = scores.iter().enumerate().map(|(j, &s)| if mask.is_pruned(j) { 0.0 } else { s }).collect();
    let important = select_important(&post, &mask, first, m - first);
    let merge = build_merge(&post, &mask, &important, class_token)?;
    Ok((mask, merge))
}

/// Merge-matrix generation from a PM-threshold `tau` (see [`prune_count_for`]).
pub fn generate_merge_matrix(scores: &[f64], tau: f64, m: usize, class_token: bool) -> Result<(TokenMask, MergeMatrix)> {
    contract!(tau >= 0.0 && tau.is_finite(), "PM-threshold must be >= 0, got {}", tau);
    generate_merge_matrix_counts(scores, prune_count_for(tau, scores.len(), m, class_token), m, class_token)
}

/// Moore-Penrose pseudoinverse. Rows with disjoint support give the closed
/// form `M⁺[:, i] = row_i / ‖row_i‖²`; other matrices fall back to SVD.
pub fn pseudoinverse(merge: &Tensor) -> Result<ReconstructMatrix> {
    contract!(merge.rank() == 2, "pseudoinverse expects a matrix, got {:?}", merge.shape());
    let (m, n) = (merge.rows(), merge.cols());
    let norms: Vec<f64> = (0..m).map(|i| merge.row(i).iter().map(|v| v * v).sum()).collect();
    if let Some(i) = norms.iter().position(|&s| s == 0.0) {
        return Err(Error::Singular(format!("merge matrix row {i} is zero")));
    }
    let disjoint = (0..n).all(|j| (0..m).filter(|&i| merge.data()[i * n + j] != 0.0).count() <= 1);
    if !disjoint {
        return dense_pseudoinverse(merge);
    }
    let mut out = vec![0.0; n * m];
    for i in 0..m {
        for (j, &w) in merge.row(i).iter().enumerate() {
            if w != 0.0 {
                out[j * m + i] = w / norms[i];
            }
        }
    }
    Ok(ReconstructMatrix { matrix: Tensor::new(&[n, m], out)? })
}

/// SVD-based pseudoinverse, singular values below `PINV_RCOND·σ_max` dropped.
pub fn dense_pseudoinverse(a: &Tensor) -> Result<ReconstructMatrix> {
    let (m, n) = (a.rows(), a.cols());
    let mat = DMatrix::from_row_slice(m, n, a.data());
    let svd = mat.svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let pinv = svd
        .pseudo_inverse(PINV_RCOND * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Singular(e.to_string()))?;
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            out[r * m + c] = pinv[(r, c)];
        }
    }
    Ok(ReconstructMatrix { matrix: Tensor::new(&[n, m], out)? })
}

/// Max-abs residuals of the four Moore-Penrose conditions for `(A, A⁺)`.
pub fn moore_penrose_residuals(a: &Tensor, pinv: &Tensor) -> Result<[f64; 4]> {
    let ap = a.matmul(pinv)?;
    let pa = pinv.matmul(a)?;
    Ok([
        ap.matmul(a)?.max_abs_diff(a),
        pa.matmul(pinv)?.max_abs_diff(pinv),
        ap.transpose()?.max_abs_diff(&ap),
        pa.transpose()?.max_abs_diff(&pa),
    ])
}

/// One compressed layer: mask, merge and reconstruct matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub mask: TokenMask,
    pub merge: MergeMatrix,
    pub reconstruct: ReconstructMatrix,
}

impl PlanEntry {
    pub fn new(mask: TokenMask, merge: MergeMatrix) -> Result<Self> {
        let reconstruct = pseudoinverse(&merge.matrix)?;
        let entry = Self { mask, merge, reconstruct };
        entry.validate()?;
        Ok(entry)
    }

    /// Every token kept as its own group.
    pub fn identity(n: usize) -> Self {
        Self {
            mask: TokenMask::all(n),
            merge: MergeMatrix { matrix: Tensor::eye(n), groups: (0..n).map(|i| i..i + 1).collect() },
            reconstruct: ReconstructMatrix { matrix: Tensor::eye(n) },
        }
    }

    pub fn tokens(&self) -> usize {
        self.mask.len()
    }

    pub fn kept(&self) -> usize {
        self.merge.rows()
    }

    pub fn pruned(&self) -> usize {
        self.mask.pruned_count()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.merge.rows(), self.merge.tokens());
        contract!(n == self.mask.len(), "mask has {} tokens but merge matrix {}", self.mask.len(), n);
        if self.reconstruct.matrix.shape() != [n, m] {
            return Err(Error::shape("plan entry", self.reconstruct.matrix.shape(), &[n, m]));
        }
        for j in (0..n).filter(|&j| self.mask.is_pruned(j)) {
            contract!((0..m).all(|i| self.merge.matrix.at(&[i, j]) == 0.0), "pruned token {} has merge weight", j);
        }
        Ok(())
    }

    /// The inverted mask broadcast over `d` channels, `[N, D]`.
    pub fn shortcut_mask(&self, d: usize) -> Tensor {
        let data = self.mask.0.iter().flat_map(|&keep| std::iter::repeat(if keep { 0.0 } else { 1.0 }).take(d)).collect();
        Tensor::new(&[self.tokens(), d], data).expect("mask shape")
    }

    /// Whether both matrices still have the group-diagonal structure the
    /// grouped fast path relies on.
    pub fn is_grouped(&self) -> bool {
        if !self.merge.is_grouped() {
            return false;
        }
        (0..self.tokens()).all(|j| {
            let owner = self.merge.groups.iter().position(|g| g.contains(&j));
            self.reconstruct.matrix.row(j).iter().enumerate().all(|(c, &v)| v == 0.0 || Some(c) == owner)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerPlan {
    /// Block runs unmodified with no prune-and-merge module.
    Exempt,
    Compressed(PlanEntry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionPlan {
    pub layers: Vec<LayerPlan>,
}

impl CompressionPlan {
    pub fn exempt(depth: usize) -> Self {
        Self { layers: vec![LayerPlan::Exempt; depth] }
    }

    pub fn identity(depth: usize, tokens: usize) -> Self {
        Self { layers: (0..depth).map(|_| LayerPlan::Compressed(PlanEntry::identity(tokens))).collect() }
    }

    pub fn entry(&self, layer: usize) -> Option<&PlanEntry> {
        match self.layers.get(layer) {
            Some(LayerPlan::Compressed(e)) => Some(e),
            _ => None,
        }
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (usize, &mut PlanEntry)> {
        self.layers.iter_mut().enumerate().filter_map(|(l, p)| match p {
            LayerPlan::Compressed(e) => Some((l, e)),
            LayerPlan::Exempt => None,
        })
    }

    /// Kept-token count per layer; `None` for exempt layers.
    pub fn kept_counts(&self) -> Vec<Option<usize>> {
        self.layers
            .iter()
            .map(|p| match p {
                LayerPlan::Compressed(e) => Some(e.kept()),
                LayerPlan::Exempt => None,
            })
            .collect()
    }

    pub fn pruned_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|p| match p {
                LayerPlan::Compressed(e) => e.pruned(),
                LayerPlan::Exempt => 0,
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let mut out = String::from("layer,kind,tokens,kept,pruned,merged\n");
        for (l, p) in self.layers.iter().enumerate() {
            match p {
                LayerPlan::Exempt => out.push_str(&format!("{l},exempt,,,,\n")),
                LayerPlan::Compressed(e) => {
                    let merged = e.tokens() - e.kept() - e.pruned();
                    out.push_str(&format!("{l},compressed,{},{},{},{merged}\n", e.tokens(), e.kept(), e.pruned()));
                }
            }
        }
        out
    }
}

/// Global token budgeting across layers.
///
/// Scores of the non-exempt layers are pooled; the `round(r·total)` highest
/// are reserved (class tokens always among them) and `round(τ·total)` of the
/// lowest remaining are pruned, capped at what is left after reserving.
/// A layer left with merge candidates but no reserved patch token receives
/// its best live candidate in exchange for the globally weakest reserved
/// patch token of a layer that can spare one.
pub fn global_plan(
    all_scores: &ImportanceScores,
    rate: f64,
    tau: f64,
    exempt_layers: &[usize],
    class_token: bool,
) -> Result<CompressionPlan> {
    contract!(rate > 0.0 && rate <= 1.0, "keep rate must be in (0, 1], got {}", rate);
    contract!(tau >= 0.0 && tau.is_finite(), "PM-threshold must be >= 0, got {}", tau);
    for layer in &all_scores.layers {
        check_scores(layer)?;
    }
    let depth = all_scores.layers.len();
    if let Some(&bad) = exempt_layers.iter().find(|&&l| l >= depth) {
        return Err(Error::Contract(format!("exempt layer {bad} out of range for depth {depth}")));
    }
    let first = usize::from(class_token);
    let active: Vec<usize> = (0..depth).filter(|l| !exempt_layers.contains(l)).collect();
    let total: usize = active.iter().map(|&l| all_scores.layers[l].len()).sum();
    if active.is_empty() {
        return Ok(CompressionPlan::exempt(depth));
    }
    let keep = (rate * total as f64).round() as usize;
    let prune = ((tau * total as f64).round() as usize).min(total - keep);
    let fixed = first * active.len();
    contract!(keep >= fixed.max(1), "keep budget {} cannot cover {} reserved class tokens", keep, fixed);

    // (layer, token) candidates in concatenation order.
    let candidates: Vec<(usize, usize)> = active
        .iter()
        .flat_map(|&l| (first..all_scores.layers[l].len()).map(move |t| (l, t)))
        .collect();
    let score = |c: (usize, usize)| all_scores.layers[c.0][c.1];

    let mut by_desc: Vec<usize> = (0..candidates.len()).collect();
    by_desc.sort_by(|&a, &b| score(candidates[b]).total_cmp(&score(candidates[a])).then(a.cmp(&b)));
    let mut reserved = vec![false; candidates.len()];
    for &i in by_desc.iter().take(keep - fixed) {
        reserved[i] = true;
    }
    let flat: Vec<f64> = candidates.iter().map(|&c| score(c)).collect();
    let mut pruned = vec![false; candidates.len()];
    for &i in prune_order(&flat, (0..candidates.len()).filter(|&i| !reserved[i])).iter().take(prune) {
        pruned[i] = true;
    }

    repair_empty_layers(&candidates, &flat, &mut reserved, &pruned, class_token)?;

    let mut layers = vec![LayerPlan::Exempt; depth];
    for &l in &active {
        let n = all_scores.layers[l].len();
        let mut mask = TokenMask::all(n);
        let mut important = Vec::new();
        for (i, &(cl, t)) in candidates.iter().enumerate() {
            if cl != l {
                continue;
            }
            if pruned[i] {
                mask.0[t] = false;
            }
            if reserved[i] {
                important.push(t);
            }
        }
        let m = important.len() + first;
        contract!(m > 0, "layer {} keeps no tokens", l);
        let post: Vec<f64> = all_scores.layers[l]
            .iter()
            .enumerate()
            .map(|(j, &s)| if mask.is_pruned(j) { 0.0 } else { s })
            .collect();
        let merge = build_merge(&post, &mask, &important, class_token)?;
        layers[l] = LayerPlan::Compressed(PlanEntry::new(mask, merge)?);
    }
    Ok(CompressionPlan { layers })
}

fn repair_empty_layers(
    candidates: &[(usize, usize)],
    flat: &[f64],
    reserved: &mut [bool],
    pruned: &[bool],
    class_token: bool,
) -> Result<()> {
    let layer_of = |i: usize| candidates[i].0;
    let mut layers: Vec<usize> = candidates.iter().map(|c| c.0).collect();
    layers.dedup();
    loop {
        let starving = layers.iter().copied().find(|&l| {
            let any_reserved = (0..candidates.len()).any(|i| layer_of(i) == l && reserved[i]);
            let any_merged = (0..candidates.len()).any(|i| layer_of(i) == l && !reserved[i] && !pruned[i]);
            !any_reserved && any_merged
        });
        let Some(l) = starving else { return Ok(()) };
        let promote = (0..candidates.len())
            .filter(|&i| layer_of(i) == l && !reserved[i] && !pruned[i])
            .min_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)))
            .expect("starving layer has a live candidate");
        let count = |layer: usize| (0..candidates.len()).filter(|&i| layer_of(i) == layer && reserved[i]).count();
        let demote = (0..candidates.len())
            .filter(|&i| reserved[i] && layer_of(i) != l && count(layer_of(i)) >= 2)
            .min_by(|&a, &b| flat[a].total_cmp(&flat[b]).then(b.cmp(&a)));
        match demote {
            Some(d) => {
                reserved[d] = false;
                reserved[promote] = true;
            }
            None if class_token => {
                return Err(Error::Contract(format!("layer {l} has merge candidates but no reserve budget")));
            }
            None => return Err(Error::Contract(format!("layer {l} keeps no tokens"))),
        }
    }
}

/// Grouped evaluation of `M·z` for `z: [N, D]` or `[B, N, D]`, visiting each
/// token once per sequence. Returns the result and the arithmetic count
/// (one multiply and one add per element).
pub fn grouped_merge(z: &Tensor, merge: &MergeMatrix) -> Result<(Tensor, usize)> {
    let (b, n, d, batched) = seq_dims(z)?;
    contract!(n == merge.tokens(), "grouped_merge: {} tokens vs merge width {}", n, merge.tokens());
    contract!(merge.groups.len() == merge.rows(), "merge matrix has no group boundaries");
    let m = merge.rows();
    let mut out = vec![0.0; b * m * d];
    for bi in 0..b {
        for (r, g) in merge.groups.iter().enumerate() {
            let w = merge.matrix.row(r);
            let dst = &mut out[(bi * m + r) * d..(bi * m + r + 1) * d];
            for j in g.clone() {
                let src = &z.data()[(bi * n + j) * d..(bi * n + j + 1) * d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += w[j] * x;
                }
            }
        }
    }
    let shape = if batched { vec![b, m, d] } else { vec![m, d] };
    Ok((Tensor::new(&shape, out)?, 2 * b * n * d))
}

/// Grouped evaluation of `M⁺·y`, using each token's owning group.
pub fn grouped_reconstruct(y: &Tensor, entry: &PlanEntry) -> Result<Tensor> {
    let (b, m, d, batched) = seq_dims(y)?;
    contract!(m == entry.kept(), "grouped_reconstruct: {} rows vs {} kept", m, entry.kept());
    let n = entry.tokens();
    let mut out = vec![0.0; b * n * d];
    for bi in 0..b {
        for (r, g) in entry.merge.groups.iter().enumerate() {
            let src = &y.data()[(bi * m + r) * d..(bi * m + r + 1) * d];
            for j in g.clone() {
                let w = entry.reconstruct.matrix.at(&[j, r]);
                let dst = &mut out[(bi * n + j) * d..(bi * n + j + 1) * d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = w * x;
                }
            }
        }
    }
    let shape = if batched { vec![b, n, d] } else { vec![n, d] };
    Tensor::new(&shape, out)
}

fn seq_dims(z: &Tensor) -> Result<(usize, usize, usize, bool)> {
    match *z.shape() {
        [n, d] => Ok((1, n, d, false)),
        [b, n, d] => Ok((b, n, d, true)),
        _ => Err(Error::shape("token sequence", z.shape(), &[0, 0])),
    }
}

/// Dense `mix · z` per sequence.
pub fn dense_mix(mix: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (b, n, d, batched) = seq_dims(z)?;
    if mix.rank() != 2 || mix.cols() != n {
        return Err(Error::shape("dense_mix", mix.shape(), z.shape()));
    }
    let m = mix.rows();
    let mut out = Vec::with_capacity(b * m * d);
    for bi in 0..b {
        let seq = Tensor::new(&[n, d], z.data()[bi * n * d..(bi + 1) * n * d].to_vec())?;
        out.extend(mix.matmul(&seq)?.into_data());
    }
    let shape = if batched { vec![b, m, d] } else { vec![m, d] };
    Tensor::new(&shape, out)
}

/// Prune-and-merge around one block: `M⁺·B(M·z) + z ⊙ (1 − mask)`.
/// Pruned positions are copied from the input.
pub fn pm_forward(z: &Tensor, entry: &PlanEntry, block: &BlockParams, heads: usize) -> Result<Tensor> {
    let (b, n, d, _) = seq_dims(z)?;
    contract!(n == entry.tokens(), "pm_forward: input has {} tokens, plan expects {}", n, entry.tokens());
    let grouped = entry.is_grouped();
    let compressed = if grouped { grouped_merge(z, &entry.merge)?.0 } else { dense_mix(&entry.merge.matrix, z)? };
    let y = block_apply(block, heads, &compressed)?;
    let mut out = if grouped { grouped_reconstruct(&y, entry)? } else { dense_mix(&entry.reconstruct.matrix, &y)? };
    let data = out.data_mut();
    for bi in 0..b {
        for j in (0..n).filter(|&j| entry.mask.is_pruned(j)) {
            let o = (bi * n + j) * d;
            for c in 0..d {
                data[o + c] += z.data()[o + c];
            }
        }
    }
    Ok(out)
}

/// Tape variables for one compressed layer's matrices.
#[derive(Debug, Clone, Copy)]
pub struct BoundEntry {
    pub merge: Var,
    pub reconstruct: Var,
}

/// A model whose blocks run inside their plan's prune-and-merge module.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedVit {
    pub model: Vit,
    pub plan: CompressionPlan,
}

/// Wraps `model` with `plan`; each compressed layer's width must equal the
/// model's token count.
pub fn compress_model(model: Vit, plan: CompressionPlan) -> Result<CompressedVit> {
    contract!(
        plan.layers.len() == model.config.depth,
        "plan has {} layers, model depth is {}",
        plan.layers.len(),
        model.config.depth
    );
    let n = model.config.tokens();
    for (l, p) in plan.layers.iter().enumerate() {
        if let LayerPlan::Compressed(e) = p {
            contract!(e.tokens() == n, "plan layer {} covers {} tokens, model has {}", l, e.tokens(), n);
            e.validate()?;
        }
    }
    Ok(CompressedVit { model, plan })
}

impl CompressedVit {
    /// Forward on the tape. Model weights are tracked when `track_model`,
    /// plan matrices when `track_matrices`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        track_model: bool,
        track_matrices: bool,
        mut sink: Option<&mut TraceSink>,
    ) -> Result<(BoundVit, Vec<Option<BoundEntry>>, Var)> {
        let cfg = &self.model.config;
        let bound = self.model.params.bind(tape, track_model);
        let mut z = embed(tape, cfg, &bound.embed, images)?;
        let mut entries = Vec::with_capacity(cfg.depth);
        for (l, block) in bound.blocks.iter().enumerate() {
            match &self.plan.layers[l] {
                LayerPlan::Exempt => {
                    z = block_forward(tape, z, block, cfg.heads, l, sink.as_deref_mut())?;
                    entries.push(None);
                }
                LayerPlan::Compressed(e) => {
                    let (merge, reconstruct) = if track_matrices {
                        (tape.param(&e.merge.matrix), tape.param(&e.reconstruct.matrix))
                    } else {
                        (tape.constant(e.merge.matrix.clone()), tape.constant(e.reconstruct.matrix.clone()))
                    };
                    let zc = tape.token_mix(merge, z)?;
                    let y = block_forward(tape, zc, block, cfg.heads, l, sink.as_deref_mut())?;
                    let restored = tape.token_mix(reconstruct, y)?;
                    let keep = tape.constant(e.shortcut_mask(cfg.embed_dim));
                    let shortcut = tape.mul_broadcast(z, keep)?;
                    z = tape.add(restored, shortcut)?;
                    entries.push(Some(BoundEntry { merge, reconstruct }));
                }
            }
        }
        let logits = head_forward(tape, z, &bound.head)?;
        Ok((bound, entries, logits))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, _, logits) = self.forward(&mut tape, images, false, false, None)?;
        Ok(tape.value(logits).clone())
    }

    /// Inference through [`pm_forward`] (grouped fast path where possible).
    pub fn logits_fast(&self, images: &Tensor) -> Result<Tensor> {
        let cfg = &self.model.config;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, false);
        let z = embed(&mut tape, cfg, &bound.embed, images)?;
        let mut z = tape.value(z).clone();
        for (l, block) in self.model.params.blocks.iter().enumerate() {
            z = match &self.plan.layers[l] {
                LayerPlan::Exempt => block_apply(block, cfg.heads, &z)?,
                LayerPlan::Compressed(e) => pm_forward(&z, e, block, cfg.heads)?,
            };
        }
        let zv = tape.constant(z);
        let logits = head_forward(&mut tape, zv, &bound.head)?;
        Ok(tape.value(logits).clone())
    }
}
