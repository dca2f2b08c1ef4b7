//! Token importance from attention maps and their gradients, accumulated
//! over training batches, plus threshold masks derived from the scores.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{BatchSampler, Dataset};
use crate::error::{contract, Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{AttentionTrace, TraceSink, Vit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ScorerVariant {
    /// Gradient-weighted attention summed over queries, averaged over heads.
    #[default]
    GradWeightedAvg,
    /// First-order Taylor term on the block input tokens.
    TaylorToken,
    AttnOnlyAvg,
    AttnOnlyClass,
    GradOnly,
    GradClassAttn,
    Random,
}

impl ScorerVariant {
    pub const ALL: [ScorerVariant; 7] = [
        ScorerVariant::GradWeightedAvg,
        ScorerVariant::TaylorToken,
        ScorerVariant::AttnOnlyAvg,
        ScorerVariant::AttnOnlyClass,
        ScorerVariant::GradOnly,
        ScorerVariant::GradClassAttn,
        ScorerVariant::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScorerVariant::GradWeightedAvg => "grad_weighted_avg",
            ScorerVariant::TaylorToken => "taylor_token",
            ScorerVariant::AttnOnlyAvg => "attn_only_avg",
            ScorerVariant::AttnOnlyClass => "attn_only_class",
            ScorerVariant::GradOnly => "grad_only",
            ScorerVariant::GradClassAttn => "grad_class_attn",
            ScorerVariant::Random => "random",
        }
    }

    pub fn needs_backward(self) -> bool {
        !matches!(self, ScorerVariant::AttnOnlyAvg | ScorerVariant::AttnOnlyClass | ScorerVariant::Random)
    }
}

impl fmt::Display for ScorerVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScorerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer `{s}`")))
    }
}

/// Per-layer token scores and the number of batches summed into them.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub layers: Vec<Vec<f64>>,
    pub iterations: usize,
}

impl ImportanceScores {
    pub fn zeros(lengths: &[usize]) -> Self {
        Self {
            layers: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            iterations: 0,
        }
    }

    pub fn single(layers: Vec<Vec<f64>>) -> Self {
        Self { layers, iterations: 1 }
    }

    /// Running elementwise sum.
    pub fn accumulate(&mut self, batch: &ImportanceScores) -> Result<()> {
        contract!(
            self.layers.len() == batch.layers.len(),
            "accumulate: {} layers vs {}",
            self.layers.len(),
            batch.layers.len()
        );
        for (l, (sum, add)) in self.layers.iter_mut().zip(&batch.layers).enumerate() {
            contract!(sum.len() == add.len(), "accumulate: layer {} has {} tokens vs {}", l, sum.len(), add.len());
            sum.iter_mut().zip(add).for_each(|(s, a)| *s += a);
        }
        self.iterations += batch.iterations;
        Ok(())
    }

    /// Averages the running sum over `iterations` batches.
    pub fn finalize(&self, iterations: usize) -> Result<ImportanceScores> {
        contract!(iterations >= 1, "finalize needs at least one iteration");
        let n = iterations as f64;
        Ok(ImportanceScores {
            layers: self.layers.iter().map(|l| l.iter().map(|v| v / n).collect()).collect(),
            iterations,
        })
    }

    /// CSV with header `layer,token,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,token,score\n");
        for (l, layer) in self.layers.iter().enumerate() {
            for (t, s) in layer.iter().enumerate() {
                out.push_str(&format!("{l},{t},{s:e}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut layers: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("scores line {}: `{line}`", lineno + 1));
            if parts.len() != 3 {
                return Err(bad());
            }
            let l: usize = parts[0].trim().parse().map_err(|_| bad())?;
            let t: usize = parts[1].trim().parse().map_err(|_| bad())?;
            let s: f64 = parts[2].trim().parse().map_err(|_| bad())?;
            if l >= layers.len() {
                layers.resize(l + 1, Vec::new());
            }
            if t != layers[l].len() {
                return Err(bad());
            }
            layers[l].push(s);
        }
        Ok(Self::single(layers))
    }
}

fn require_grad(trace: &AttentionTrace) -> Result<&Tensor> {
    trace
        .grad
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("layer {} trace has no gradient map", trace.layer)))
}

/// Reduces `f(b, h, query, key)` into per-key scores:
/// `|mean_b (1/H) Σ_h Σ_query f|`, restricted to `queries`.
fn key_scores(trace: &AttentionTrace, queries: std::ops::Range<usize>, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let (b, h, n) = (trace.batch(), trace.heads(), trace.tokens());
    let mut out = vec![0.0; n];
    for bi in 0..b {
        for hi in 0..h {
            let base = (bi * h + hi) * n * n;
            for q in queries.clone() {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += f(base + q * n + k);
                }
            }
        }
    }
    let norm = (b * h) as f64;
    out.iter().map(|s| (s / norm).abs()).collect()
}

/// Gradient-weighted attention importance for every key token.
pub fn score_grad_weighted_attention(trace: &AttentionTrace) -> Result<Vec<f64>> {
    let g = require_grad(trace)?.data();
    let a = trace.attn.data();
    Ok(key_scores(trace, 0..trace.tokens(), |i| g[i] * a[i]))
}

/// `|(1/D) Σ_d grad·z|` per token of a block input `[B, N, D]` (batch-averaged).
pub fn score_taylor_token(z: &Tensor, grad_z: &Tensor) -> Result<Vec<f64>> {
    if z.shape() != grad_z.shape() {
        return Err(Error::shape("score_taylor_token", z.shape(), grad_z.shape()));
    }
    let (b, n, d) = match *z.shape() {
        [n, d] => (1, n, d),
        [b, n, d] => (b, n, d),
        _ => return Err(Error::shape("score_taylor_token", z.shape(), &[0, 0])),
    };
    let mut out = vec![0.0; n];
    for bi in 0..b {
        for (t, o) in out.iter_mut().enumerate() {
            let off = (bi * n + t) * d;
            let dot: f64 = z.data()[off..off + d].iter().zip(&grad_z.data()[off..off + d]).map(|(x, g)| x * g).sum();
            *o += dot / d as f64;
        }
    }
    Ok(out.iter().map(|s| (s / b as f64).abs()).collect())
}

pub fn score_attention_only(trace: &AttentionTrace) -> Vec<f64> {
    let a = trace.attn.data();
    key_scores(trace, 0..trace.tokens(), |i| a[i])
}

pub fn score_class_attention(trace: &AttentionTrace) -> Vec<f64> {
    let a = trace.attn.data();
    key_scores(trace, 0..1, |i| a[i])
}

pub fn score_grad_only(trace: &AttentionTrace) -> Result<Vec<f64>> {
    let g = require_grad(trace)?.data();
    Ok(key_scores(trace, 0..trace.tokens(), |i| g[i]))
}

pub fn score_grad_class_attention(trace: &AttentionTrace) -> Result<Vec<f64>> {
    let g = require_grad(trace)?.data();
    let a = trace.attn.data();
    Ok(key_scores(trace, 0..1, |i| g[i] * a[i]))
}

/// Binary keep mask; `false` marks a pruned token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask(pub Vec<bool>);

impl TokenMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_pruned(&self, i: usize) -> bool {
        !self.0[i]
    }

    pub fn pruned_count(&self) -> usize {
        self.0.iter().filter(|k| !**k).count()
    }

    pub fn as_bytes(&self) -> Vec<u8> {
        self.0.iter().map(|&k| k as u8).collect()
    }
}

/// Token order used for pruning: lowest score first, ties prune the higher index first.
pub(crate) fn prune_order(scores: &[f64], candidates: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = candidates.collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
    idx
}

/// Masks the `prune_count` lowest-scoring tokens; the class token at index 0
/// is exempt when `class_token` is set.
pub fn make_token_mask(scores: &[f64], prune_count: usize, class_token: bool) -> Result<TokenMask> {
    let n = scores.len();
    let first = usize::from(class_token);
    contract!(
        prune_count < n && prune_count <= n - first,
        "prune_count {} out of range for {} tokens",
        prune_count,
        n
    );
    let mut mask = TokenMask::all(n);
    for &i in prune_order(scores, first..n).iter().take(prune_count) {
        mask.0[i] = false;
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub scorer: ScorerVariant,
    pub seed: u64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 32,
            scorer: ScorerVariant::GradWeightedAvg,
            seed: 0,
        }
    }
}

/// Scores every layer of `model` on one labelled batch.
pub fn score_batch(model: &Vit, images: &Tensor, labels: &[usize], scorer: ScorerVariant, rng: &mut ChaCha8Rng) -> Result<ImportanceScores> {
    let n = model.config.tokens();
    if scorer == ScorerVariant::Random {
        return Ok(ImportanceScores::single(
            (0..model.config.depth).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect(),
        ));
    }
    let mut tape = Tape::new();
    let mut sink = TraceSink::new();
    let (_, logits) = model.forward(&mut tape, images, scorer.needs_backward(), Some(&mut sink))?;
    if scorer.needs_backward() {
        let loss = tape.cross_entropy(logits, labels)?;
        tape.backward(loss)?;
    }
    let traces = sink.traces(&tape)?;
    let layers = traces
        .iter()
        .map(|tr| match scorer {
            ScorerVariant::GradWeightedAvg => score_grad_weighted_attention(tr),
            ScorerVariant::AttnOnlyAvg => Ok(score_attention_only(tr)),
            ScorerVariant::AttnOnlyClass => Ok(score_class_attention(tr)),
            ScorerVariant::GradOnly => score_grad_only(tr),
            ScorerVariant::GradClassAttn => score_grad_class_attention(tr),
            ScorerVariant::TaylorToken => {
                let cap = sink.capture(tr.layer).expect("capture per trace");
                score_taylor_token(tape.value(cap.input), &tape.grad_tensor(cap.input))
            }
            ScorerVariant::Random => unreachable!(),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceScores::single(layers))
}

/// Accumulates batch scores over `config.iterations` seeded batches and
/// returns their average. The model is not updated.
pub fn collect_scores(model: &Vit, data: &Dataset, config: &ScoreConfig) -> Result<ImportanceScores> {
    contract!(config.iterations >= 1, "score iterations must be >= 1");
    let n = model.config.tokens();
    let mut sum = ImportanceScores::zeros(&vec![n; model.config.depth]);
    let mut sampler = BatchSampler::new(data.len(), config.batch_size, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5c0e);
    for _ in 0..config.iterations {
        let idx = sampler.next_batch();
        let (images, labels) = data.batch(&idx)?;
        let batch = score_batch(model, &images, &labels, config.scorer, &mut rng)?;
        sum.accumulate(&batch)?;
    }
    sum.finalize(config.iterations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(heads: usize, n: usize, attn: Vec<f64>, grad: Option<Vec<f64>>) -> AttentionTrace {
        let shape = [1, heads, n, n];
        AttentionTrace {
            layer: 0,
            attn: Tensor::new(&shape, attn).unwrap(),
            grad: grad.map(|g| Tensor::new(&shape, g).unwrap()),
        }
    }

    #[test]
    fn taylor_examples() {
        let z = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 1.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.5, -0.25], vec![1.0, 1.0]]).unwrap();
        assert_eq!(score_taylor_token(&z, &g).unwrap(), vec![0.0, 1.0]);
        assert_eq!(score_taylor_token(&z, &Tensor::zeros(&[2, 2])).unwrap(), vec![0.0, 0.0]);
        assert!(score_taylor_token(&z, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn grad_weighted_column_sums() {
        let a = vec![0.9, 0.1, 0.6, 0.4];
        let tr = trace(1, 2, a.clone(), Some(vec![1.0; 4]));
        let s = score_grad_weighted_attention(&tr).unwrap();
        assert!((s[0] - 1.5).abs() < 1e-15 && (s[1] - 0.5).abs() < 1e-15);

        let tr = trace(1, 2, a.clone(), Some(vec![0.0; 4]));
        assert_eq!(score_grad_weighted_attention(&tr).unwrap(), vec![0.0, 0.0]);

        let g = vec![0.3, -1.2, 0.7, 2.0];
        let one = trace(1, 2, a.clone(), Some(g.clone()));
        let two = trace(2, 2, [a.clone(), a.clone()].concat(), Some([g.clone(), g.clone()].concat()));
        assert_eq!(score_grad_weighted_attention(&one).unwrap(), score_grad_weighted_attention(&two).unwrap());

        let missing = trace(1, 2, a, None);
        assert!(matches!(score_grad_weighted_attention(&missing), Err(Error::Contract(_))));
    }

    #[test]
    fn absolute_value_is_taken_after_summation() {
        // Contributions +0.5 and -0.5 on key 0 cancel before the absolute value.
        let tr = trace(1, 2, vec![0.5, 0.5, 0.5, 0.5], Some(vec![1.0, 1.0, -1.0, 1.0]));
        let s = score_grad_weighted_attention(&tr).unwrap();
        assert_eq!(s, vec![0.0, 1.0]);
    }

    #[test]
    fn class_attention_reads_first_query_row() {
        let tr = trace(1, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0], None);
        assert_eq!(score_class_attention(&tr), vec![0.2, 0.3, 0.5]);
        let s = score_attention_only(&tr);
        assert!((s.iter().sum::<f64>() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn accumulate_and_finalize() {
        let x = ImportanceScores::single(vec![vec![1.0, 2.0], vec![3.0, 0.5]]);
        assert_eq!(x.finalize(1).unwrap().layers, x.layers);
        let mut sum = ImportanceScores::zeros(&[2, 2]);
        sum.accumulate(&x).unwrap();
        sum.accumulate(&x).unwrap();
        assert_eq!(sum.iterations, 2);
        assert_eq!(sum.finalize(2).unwrap().layers, x.layers);
        assert!(sum.finalize(0).is_err());
        assert!(sum.accumulate(&ImportanceScores::single(vec![vec![1.0]])).is_err());
    }

    #[test]
    fn mask_examples() {
        let s = [0.9, 0.1, 0.5, 0.2];
        assert_eq!(make_token_mask(&s, 0, false).unwrap(), TokenMask::all(4));
        assert_eq!(make_token_mask(&s, 1, false).unwrap().0, vec![true, false, true, true]);
        let all = make_token_mask(&s, 3, true).unwrap();
        assert_eq!(all.0, vec![true, false, false, false]);
        assert!(make_token_mask(&s, 4, true).is_err());
        assert!(make_token_mask(&s, 4, false).is_err());
        // The class token is exempt even when it scores lowest.
        let m = make_token_mask(&[0.0, 0.3, 0.2], 1, true).unwrap();
        assert_eq!(m.0, vec![true, true, false]);
    }

    #[test]
    fn mask_ties_prune_higher_index_first() {
        let m = make_token_mask(&[0.5, 0.1, 0.1, 0.1], 2, false).unwrap();
        assert_eq!(m.0, vec![true, true, false, false]);
    }

    #[test]
    fn scores_csv_round_trip() {
        let s = ImportanceScores::single(vec![vec![1.5, 0.25, 1e-7], vec![3.0, 0.0, 2.0]]);
        assert_eq!(ImportanceScores::from_csv(&s.to_csv()).unwrap(), s);
        assert!(ImportanceScores::from_csv("layer,token,score\n0,1,2.0\n").is_err());
    }

    #[test]
    fn scorer_names_parse() {
        for v in ScorerVariant::ALL {
            assert_eq!(v.name().parse::<ScorerVariant>().unwrap(), v);
        }
        assert!("attn".parse::<ScorerVariant>().is_err());
    }
}
