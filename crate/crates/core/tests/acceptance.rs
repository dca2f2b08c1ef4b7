//! Acceptance criteria. Runs as a plain binary (`harness = false`) so every
//! criterion prints exactly one PASS/FAIL line, and exits non-zero if any fail.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pmvit::bench::{micro_benchmark, MergeVariant};
use pmvit::compress::{
    compress_model, dense_mix, generate_merge_matrix, generate_merge_matrix_counts, global_plan, grouped_merge,
    pm_forward, prune_count_for, pseudoinverse, CompressionPlan, LayerPlan, PlanEntry,
};
use pmvit::data::{synthetic, Dataset};
use pmvit::finetune::{evaluate, evaluate_vit, finetune, train_baseline, DistillConfig};
use pmvit::flops::{block_flops, model_flops};
use pmvit::scoring::{
    collect_scores, score_attention_only, score_grad_weighted_attention, ImportanceScores, ScoreConfig, ScorerVariant,
};
use pmvit::vit::{block_apply, ModelConfig, TraceSink, Vit};
use pmvit::{Tape, Tensor};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Every other vector draws from a handful of values so ties get exercised.
    if rng.gen_bool(0.5) {
        (0..n).map(|_| rng.gen_range(0..5) as f64 * 0.25).collect()
    } else {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}

/// A model with weights well away from initialization, so every
/// nonlinearity is exercised.
fn scrambled_vit(cfg: ModelConfig, seed: u64, scale: f64) -> Vit {
    let mut model = Vit::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    model.params.for_each_mut(&mut |_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    });
    model
}

// ---------------------------------------------------------------------------
// Brute-force oracle for merge-matrix generation and global budgeting: rank
// by pairwise counting instead of sorting.

struct OracleLayer {
    mask: Vec<bool>,
    groups: Vec<(usize, usize)>,
    matrix: Vec<Vec<f64>>,
}

/// `before(a, b)`: a precedes b in the prune order (lower score, then higher index).
fn prunes_before(s: &[f64], a: usize, b: usize) -> bool {
    s[a] < s[b] || (s[a] == s[b] && a > b)
}

/// a outranks b for importance (higher score, then lower index).
fn outranks(s: &[f64], a: usize, b: usize) -> bool {
    s[a] > s[b] || (s[a] == s[b] && a < b)
}

fn oracle_matrix(scores: &[f64], mask: &[bool], important: &BTreeSet<usize>, class_token: bool) -> OracleLayer {
    let n = scores.len();
    let post: Vec<f64> = (0..n).map(|j| if mask[j] { scores[j] } else { 0.0 }).collect();
    let mut groups = Vec::new();
    if class_token {
        groups.push((0, 1));
    }
    let mut start = usize::from(class_token);
    let last = important.iter().next_back().copied();
    for &p in important {
        let end = if Some(p) == last { n } else { p + 1 };
        groups.push((start, end));
        start = p + 1;
    }
    let matrix = groups
        .iter()
        .map(|&(a, b)| {
            let live: Vec<usize> = (a..b).filter(|&j| mask[j]).collect();
            let sum: f64 = live.iter().map(|&j| post[j]).sum();
            let mut row = vec![0.0; n];
            for &j in &live {
                row[j] = if sum > 0.0 { post[j] / sum } else { 1.0 / live.len() as f64 };
            }
            row
        })
        .collect();
    OracleLayer { mask: mask.to_vec(), groups, matrix }
}

fn oracle_alg1(scores: &[f64], prune: usize, m: usize, class_token: bool) -> OracleLayer {
    let n = scores.len();
    let cand: Vec<usize> = (usize::from(class_token)..n).collect();
    let mut mask = vec![true; n];
    for &j in &cand {
        let lower = cand.iter().filter(|&&k| prunes_before(scores, k, j)).count();
        if lower < prune {
            mask[j] = false;
        }
    }
    let post: Vec<f64> = (0..n).map(|j| if mask[j] { scores[j] } else { 0.0 }).collect();
    let live: Vec<usize> = cand.iter().copied().filter(|&j| mask[j]).collect();
    let want = m - usize::from(class_token);
    let important: BTreeSet<usize> = live
        .iter()
        .copied()
        .filter(|&j| live.iter().filter(|&&k| outranks(&post, k, j)).count() < want)
        .collect();
    oracle_matrix(scores, &mask, &important, class_token)
}

/// `None` when the budget cannot give every compressed layer a reserved token.
fn oracle_global(layers: &[Vec<f64>], rate: f64, tau: f64, exempt: &[usize], class_token: bool) -> Option<Vec<Option<OracleLayer>>> {
    let first = usize::from(class_token);
    let active: Vec<usize> = (0..layers.len()).filter(|l| !exempt.contains(l)).collect();
    let total: usize = active.iter().map(|&l| layers[l].len()).sum();
    let keep = (rate * total as f64).round() as usize;
    let prune = ((tau * total as f64).round() as usize).min(total - keep);
    let cands: Vec<(usize, usize)> = active.iter().flat_map(|&l| (first..layers[l].len()).map(move |t| (l, t))).collect();
    let flat: Vec<f64> = cands.iter().map(|&(l, t)| layers[l][t]).collect();
    let reserve = keep - first * active.len();
    let ids: Vec<usize> = (0..cands.len()).collect();
    let mut reserved: Vec<bool> = ids.iter().map(|&i| ids.iter().filter(|&&k| outranks(&flat, k, i)).count() < reserve).collect();
    let pool: Vec<usize> = ids.iter().copied().filter(|&i| !reserved[i]).collect();
    let pruned: Vec<bool> = ids
        .iter()
        .map(|&i| !reserved[i] && pool.iter().filter(|&&k| prunes_before(&flat, k, i)).count() < prune)
        .collect();

    // A layer with merge candidates but no reserved patch token trades for the
    // weakest reserved patch token of a layer that holds at least two.
    loop {
        let (ids, cands) = (&ids, &cands);
        let in_layer = |l: usize| ids.iter().copied().filter(move |&i| cands[i].0 == l);
        let Some(&l) = active.iter().find(|&&l| {
            !in_layer(l).any(|i| reserved[i]) && in_layer(l).any(|i| !reserved[i] && !pruned[i])
        }) else {
            break;
        };
        let best = in_layer(l)
            .filter(|&i| !reserved[i] && !pruned[i])
            .find(|&i| in_layer(l).filter(|&k| !reserved[k] && !pruned[k]).all(|k| k == i || outranks(&flat, i, k)))
            .unwrap();
        let donors: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| reserved[i] && cands[i].0 != l && in_layer(cands[i].0).filter(|&k| reserved[k]).count() >= 2)
            .collect();
        let worst = donors.iter().copied().find(|&i| donors.iter().all(|&k| k == i || prunes_before(&flat, i, k)))?;
        reserved[worst] = false;
        reserved[best] = true;
    }

    let plan = (0..layers.len())
        .map(|l| {
            if !active.contains(&l) {
                return None;
            }
            let n = layers[l].len();
            let mut mask = vec![true; n];
            let mut important = BTreeSet::new();
            for (i, &(cl, t)) in cands.iter().enumerate() {
                if cl == l {
                    if pruned[i] {
                        mask[t] = false;
                    }
                    if reserved[i] {
                        important.insert(t);
                    }
                }
            }
            Some(oracle_matrix(&layers[l], &mask, &important, class_token))
        })
        .collect();
    Some(plan)
}

fn matches_oracle(entry: &PlanEntry, want: &OracleLayer) -> bool {
    let groups: Vec<(usize, usize)> = entry.merge.groups.iter().map(|g| (g.start, g.end)).collect();
    let m = &entry.merge.matrix;
    entry.mask.0 == want.mask
        && groups == want.groups
        && m.rows() == want.matrix.len()
        && want.matrix.iter().enumerate().all(|(i, row)| {
            row.iter().zip(m.row(i)).all(|(a, b)| (a - b).abs() <= 1e-12 && ((*a == 0.0) == (*b == 0.0)))
        })
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let exact = (0..1000).all(|_| {
        let (n, d) = (rng.gen_range(1..5000u64), rng.gen_range(1..5000u64));
        block_flops(n, d).total() == 12 * n * d * d + 2 * n * n * d
    });
    let cfg = ModelConfig::deit_tiny();
    let per_block = block_flops(cfg.tokens() as u64, cfg.embed_dim as u64).total();
    let encoder = model_flops(&cfg, None)?.encoder_total;
    let within = (encoder as f64 - 1.3e9).abs() / 1.3e9 <= 0.10;
    let ok = exact && per_block == 102_049_152 && encoder == 1_224_589_824 && within;
    Ok((ok, format!("1000 pairs exact={exact}; DeiT-Tiny block={per_block}, 12 blocks={encoder} ({:.3} G)", encoder as f64 / 1e9)))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_mp, mut worst_svd) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.gen_range(3..80);
        let class_token = rng.gen_bool(0.5);
        let first = usize::from(class_token);
        let m = rng.gen_range(first + 1..=n);
        let prune = rng.gen_range(0..=n - m);
        let scores = random_scores(&mut rng, n);
        let (_, merge) = generate_merge_matrix_counts(&scores, prune, m, class_token)?;
        let ours = pseudoinverse(&merge.matrix)?.matrix;

        let a = DMatrix::from_row_slice(merge.matrix.rows(), n, merge.matrix.data());
        let p = DMatrix::from_row_slice(n, merge.matrix.rows(), ours.data());
        let max = |x: DMatrix<f64>| x.abs().max();
        let mp = [
            max(&a * &p * &a - &a),
            max(&p * &a * &p - &p),
            max((&a * &p).transpose() - &a * &p),
            max((&p * &a).transpose() - &p * &a),
        ];
        worst_mp = mp.iter().fold(worst_mp, |w, &v| w.max(v));
        let svd = a.clone().pseudo_inverse(1e-12)?;
        worst_svd = worst_svd.max(max(svd - p));
    }
    Ok((worst_mp <= 1e-6 && worst_svd <= 1e-8, format!("200 matrices: worst Moore-Penrose residual {worst_mp:.2e}, worst |closed form - SVD| {worst_svd:.2e}")))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut passthrough = true;
    let (mut worst_id, mut worst_group) = (0.0f64, 0.0f64);
    for k in 0..100 {
        let n = rng.gen_range(3..40);
        let d = rng.gen_range(1..24);
        let b = rng.gen_range(1..4);
        let class_token = rng.gen_bool(0.7);
        let m = rng.gen_range(usize::from(class_token) + 1..=n);
        let prune = rng.gen_range(0..=n - m);
        let scores = random_scores(&mut rng, n);
        let (mask, merge) = generate_merge_matrix_counts(&scores, prune, m, class_token)?;
        let z = random_tensor(&mut rng, &[b, n, d], 2.0);
        let (fast, _) = grouped_merge(&z, &merge)?;
        worst_group = worst_group.max(fast.max_abs_diff(&dense_mix(&merge.matrix, &z)?));

        if k % 4 == 0 {
            let heads = [1, 2, 4][rng.gen_range(0..3)];
            let cfg = ModelConfig { embed_dim: 4 * heads, heads, ..ModelConfig::tiny() };
            let d = cfg.embed_dim;
            let block = &scrambled_vit(cfg, k, 0.5).params.blocks[0];
            let z = random_tensor(&mut rng, &[b, n, d], 2.0);
            let ident = pm_forward(&z, &PlanEntry::identity(n), block, heads)?;
            worst_id = worst_id.max(ident.max_abs_diff(&block_apply(block, heads, &z)?));

            let entry = PlanEntry::new(mask, generate_merge_matrix_counts(&scores, prune, m, class_token)?.1)?;
            let out = pm_forward(&z, &entry, block, heads)?;
            for bi in 0..b {
                for j in (0..n).filter(|&j| entry.mask.is_pruned(j)) {
                    let o = (bi * n + j) * d;
                    passthrough &= out.data()[o..o + d] == z.data()[o..o + d];
                }
            }
        }
    }
    let ok = passthrough && worst_id <= 1e-12 && worst_group <= 1e-12;
    Ok((ok, format!("passthrough exact={passthrough}; identity vs block {worst_id:.2e}; grouped vs dense {worst_group:.2e} (100 instances)")))
}

fn criterion_4() -> Outcome {
    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
    };
    assert_eq!(cfg.tokens(), 5);
    let model = scrambled_vit(cfg, 4, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = Tensor::new(&[2, 1, 8, 8], (0..128).map(|_| rng.gen::<f64>()).collect())?;
    let labels = [0usize, 2];
    let h = 1e-5;

    let loss_of = |m: &Vit, sink: Option<&mut TraceSink>| -> f64 {
        let mut tape = Tape::new();
        let (_, logits) = m.forward(&mut tape, &images, false, sink).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        tape.value(loss).item()
    };
    let rel = |a: &[f64], b: &[f64]| {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        // Floor for structurally zero gradients (e.g. key biases, which
        // softmax cancels), where both sides are rounding noise.
        diff / scale.max(1e-6)
    };

    let mut tape = Tape::new();
    let mut sink = TraceSink::new();
    let (bound, logits) = model.forward(&mut tape, &images, true, Some(&mut sink))?;
    let loss = tape.cross_entropy(logits, &labels)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    bound.for_each(&mut |name, v| analytic.push((name.to_string(), tape.grad_tensor(*v).into_data())));
    let traces = sink.traces(&tape)?;

    let mut worst_param = (0.0f64, String::new());
    let mut index = 0;
    let mut names = Vec::new();
    model.params.for_each(&mut |name, t| names.push((name.to_string(), t.numel())));
    for (name, numel) in names {
        let mut numeric = vec![0.0; numel];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.params.for_each_mut(&mut |n2, t| {
                    if n2 == name {
                        t.data_mut()[e] += delta;
                    }
                });
                loss_of(&m, None)
            };
            *slot = (probe(h) - probe(-h)) / (2.0 * h);
        }
        let r = rel(&analytic[index].1, &numeric);
        if r > worst_param.0 {
            worst_param = (r, name);
        }
        index += 1;
    }

    let mut worst_attn = 0.0f64;
    for tr in &traces {
        let grad = tr.grad.as_ref().expect("attention gradient captured");
        let shape = [tr.batch() * tr.heads(), tr.tokens(), tr.tokens()];
        let mut numeric = vec![0.0; grad.numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let probe = |delta: f64| {
                let mut off = Tensor::zeros(&shape);
                off.data_mut()[e] = delta;
                loss_of(&model, Some(&mut TraceSink::new().with_offset(tr.layer, off)))
            };
            *slot = (probe(h) - probe(-h)) / (2.0 * h);
        }
        worst_attn = worst_attn.max(rel(grad.data(), &numeric));
    }
    let ok = worst_param.0 < 1e-4 && worst_attn < 1e-4 && traces.len() == 2;
    Ok((ok, format!("worst param rel err {:.2e} ({}), worst attention-map rel err {worst_attn:.2e}", worst_param.0, worst_param.1)))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut alg1 = 0;
    for k in 0..100 {
        let n = rng.gen_range(3..40);
        let class_token = rng.gen_bool(0.5);
        let m = rng.gen_range(usize::from(class_token) + 1..=n);
        let scores = random_scores(&mut rng, n);
        let (prune, (mask, merge)) = if k % 2 == 0 {
            let prune = rng.gen_range(0..=n - m);
            (prune, generate_merge_matrix_counts(&scores, prune, m, class_token)?)
        } else {
            let tau = rng.gen_range(0.0..0.9);
            (prune_count_for(tau, n, m, class_token), generate_merge_matrix(&scores, tau, m, class_token)?)
        };
        let entry = PlanEntry::new(mask, merge)?;
        alg1 += usize::from(matches_oracle(&entry, &oracle_alg1(&scores, prune, m, class_token)));
    }

    let (mut alg2, mut infeasible) = (0, 0);
    for _ in 0..100 {
        let depth = rng.gen_range(1..6);
        let n = rng.gen_range(4..25);
        let layers: Vec<Vec<f64>> = (0..depth).map(|_| random_scores(&mut rng, n)).collect();
        let class_token = rng.gen_bool(0.7);
        let exempt: Vec<usize> = (0..depth).filter(|_| depth > 1 && rng.gen_bool(0.2)).take(depth - 1).collect();
        let rate = [0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0][rng.gen_range(0..7)];
        let tau = [0.0, 0.1, 0.2, 0.3, 0.5][rng.gen_range(0..5)];
        let plan = global_plan(&ImportanceScores::single(layers.clone()), rate, tau, &exempt, class_token);
        let same = match (plan, oracle_global(&layers, rate, tau, &exempt, class_token)) {
            (Ok(plan), Some(want)) => plan.layers.iter().zip(&want).all(|(got, want)| match (got, want) {
                (LayerPlan::Exempt, None) => true,
                (LayerPlan::Compressed(e), Some(w)) => matches_oracle(e, w),
                _ => false,
            }),
            (Err(_), None) => {
                infeasible += 1;
                true
            }
            _ => false,
        };
        alg2 += usize::from(same);
    }

    let mut budgets = true;
    for (depth, n) in [(2, 17), (12, 197), (5, 30)] {
        let layers: Vec<Vec<f64>> = (0..depth).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let scores = ImportanceScores::single(layers);
        for r in [0.5, 0.6, 0.7, 0.8] {
            let plan = global_plan(&scores, r, 0.1, &[], true)?;
            let total = depth * n;
            let kept: usize = plan.kept_counts().iter().map(|k| k.unwrap()).sum();
            let pruned: usize = plan.pruned_counts().iter().sum();
            budgets &= kept == (r * total as f64).round() as usize && pruned == (0.1 * total as f64).round() as usize;
        }
    }
    Ok((alg1 == 100 && alg2 == 100 && budgets, format!("merge matrix {alg1}/100 and global plan {alg2}/100 match the oracle ({infeasible} infeasible budgets rejected by both); budgets exact={budgets}")))
}

fn criterion_8() -> Outcome {
    let mut exact = true;
    for cfg in [ModelConfig::tiny(), ModelConfig::deit_tiny()] {
        let plan = CompressionPlan::identity(cfg.depth, cfg.tokens());
        let report = model_flops(&cfg, Some(&plan))?;
        let expected: u64 = (0..cfg.depth).map(|_| 6 * cfg.tokens() as u64 * cfg.embed_dim as u64).sum();
        exact &= report.encoder_total - report.baseline_encoder_total == expected;
    }
    let mut ordering = true;
    let mut detail = Vec::new();
    for (n, d) in [(64, 64), (197, 192), (128, 256)] {
        let stats = micro_benchmark(&[MergeVariant::GroupedMerge, MergeVariant::DenseMatmul], n, d, 30, 8)?;
        let (g, m) = (stats[0].median_ns, stats[1].median_ns);
        ordering &= g <= m;
        detail.push(format!("{n}x{d}: grouped {:.1}us vs dense {:.1}us", g as f64 / 1e3, m as f64 / 1e3));
    }
    Ok((exact && ordering, format!("identity overhead = sum 6ND exact={exact}; {}", detail.join(", "))))
}

// ---------------------------------------------------------------------------
// End-to-end pipeline (criterion 6) and scoring properties on the trained
// model (criterion 7).

struct Pipeline {
    model: Vit,
    train: Dataset,
}

fn criterion_6(out: &mut Option<Pipeline>) -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let train = synthetic(10_000, 10, cfg.image_size, 0)?;
    let val = synthetic(5_000, 10, cfg.image_size, 1)?;
    let mut model = Vit::new(cfg, 0)?;
    let rows = train_baseline(&mut model, &train, None, &DistillConfig::baseline())?;
    let mut finite = rows.iter().all(|r| r.loss.is_finite());
    let base = evaluate_vit(&model, &val, 256)?;
    let scores = collect_scores(&model, &train, &ScoreConfig::default())?;

    let mut acc = Vec::new();
    for tau in [0.1, 0.5] {
        let plan = global_plan(&scores, 0.7, tau, &[], true)?;
        let mut student = compress_model(model.clone(), plan)?;
        let before = evaluate(&student, &val, 256)?;
        let (rows, _) = finetune(&mut student, &model, &train, None, &DistillConfig::default())?;
        finite &= rows.iter().all(|r| r.loss.is_finite());
        acc.push((before, evaluate(&student, &val, 256)?));
    }
    let elapsed = start.elapsed();
    let (t1, t5) = (acc[0].1, acc[1].1);
    let checks = [
        ("baseline >= 90%", base >= 0.90),
        ("tau 0.1 within 2 points", (base - t1) <= 0.02),
        ("tau 0.5 strictly worse", t5 < t1),
        ("finite loss", finite),
        ("under 30 min", elapsed < Duration::from_secs(30 * 60)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    *out = Some(Pipeline { model, train });
    Ok((
        failed.is_empty(),
        format!(
            "baseline {base:.4}; r=0.7 tau=0.1 {:.4} -> {t1:.4}; tau=0.5 {:.4} -> {t5:.4}; {:.0}s{}",
            acc[0].0,
            acc[1].0,
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    ))
}

fn criterion_7(pipeline: Option<&Pipeline>) -> Outcome {
    let Some(Pipeline { model, train }) = pipeline else {
        return Ok((false, "no trained model (criterion 6 errored)".into()));
    };
    let (images, labels) = train.batch(&(0..32).collect::<Vec<_>>())?;
    let mut tape = Tape::new();
    let mut sink = TraceSink::new();
    let (_, logits) = model.forward(&mut tape, &images, true, Some(&mut sink))?;
    let loss = tape.cross_entropy(logits, &labels)?;
    tape.backward(loss)?;
    let traces = sink.traces(&tape)?;
    let plan_for = |c: f64| -> pmvit::Result<CompressionPlan> {
        let layers = traces
            .iter()
            .map(|tr| {
                let mut tr = tr.clone();
                let g = tr.grad.as_mut().unwrap();
                g.data_mut().iter_mut().for_each(|v| *v *= c);
                score_grad_weighted_attention(&tr)
            })
            .collect::<pmvit::Result<Vec<_>>>()?;
        global_plan(&ImportanceScores::single(layers), 0.7, 0.1, &[], true)
    };
    let reference = plan_for(1.0)?;
    let mut invariant = true;
    for c in [1e-3, 0.37, 2.0, 1e3] {
        let p = plan_for(c)?;
        for l in 0..model.config.depth {
            let (a, b) = (reference.entry(l).unwrap(), p.entry(l).unwrap());
            invariant &= a.mask == b.mask && a.merge.groups == b.merge.groups;
        }
    }

    let n = model.config.tokens() as f64;
    let per_batch = traces.iter().map(|tr| (score_attention_only(tr).iter().sum::<f64>() - n).abs()).fold(0.0, f64::max);
    let cfg = ScoreConfig { iterations: 20, scorer: ScorerVariant::AttnOnlyAvg, ..ScoreConfig::default() };
    let averaged = collect_scores(model, train, &cfg)?;
    let sum_err = averaged.layers.iter().map(|l| (l.iter().sum::<f64>() - n).abs()).fold(per_batch, f64::max);

    let long = collect_scores(model, train, &ScoreConfig { iterations: 500, ..ScoreConfig::default() })?;
    let short = collect_scores(model, train, &ScoreConfig { iterations: 1, ..ScoreConfig::default() })?;
    let max_diff = long
        .layers
        .iter()
        .flatten()
        .zip(short.layers.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let plans_differ = global_plan(&long, 0.7, 0.1, &[], true)? != global_plan(&short, 0.7, 0.1, &[], true)?;
    Ok((
        invariant && sum_err <= 1e-8 && max_diff > 0.0,
        format!("rescaling invariant={invariant}; attn_only_avg |sum - N| <= {sum_err:.1e}; 500 vs 1 iterations max |diff| {max_diff:.3e}, plans differ={plans_differ}"),
    ))
}

fn report(id: usize, title: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (ok, line) = match outcome {
        Ok((ok, detail)) => (ok, detail),
        Err(e) => (false, format!("error: {e}")),
    };
    println!("criterion {id} [{}] {title}: {line} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters from the default harness.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut all = true;
    let t = Instant::now();
    all &= report(1, "block FLOPs formula", t, criterion_1());
    let t = Instant::now();
    all &= report(2, "pseudoinverse suite", t, criterion_2());
    let t = Instant::now();
    all &= report(3, "prune-and-merge structural invariants", t, criterion_3());
    let t = Instant::now();
    all &= report(4, "gradient fidelity", t, criterion_4());
    let t = Instant::now();
    all &= report(5, "merge-matrix and global-plan oracle", t, criterion_5());
    let t = Instant::now();
    all &= report(8, "overhead accounting", t, criterion_8());
    let mut pipeline = None;
    let t = Instant::now();
    all &= report(6, "end-to-end pipeline", t, criterion_6(&mut pipeline));
    let t = Instant::now();
    all &= report(7, "scoring properties", t, criterion_7(pipeline.as_ref()));
    println!("acceptance: {}", if all { "all criteria passed" } else { "some criteria FAILED" });
    if all { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
