//! Train a tiny ViT on synthetic shapes, score, compress and fine-tune it.
//!
//! cargo run --release -p pmvit --example pipeline

use std::time::Instant;

use pmvit::compress::{compress_model, global_plan};
use pmvit::data::synthetic;
use pmvit::finetune::{evaluate, evaluate_vit, finetune, train_baseline, DistillConfig};
use pmvit::flops::model_flops;
use pmvit::scoring::{collect_scores, ScoreConfig};
use pmvit::vit::{ModelConfig, Vit};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let train = synthetic(10000, 10, cfg.image_size, 0)?;
    let val = synthetic(2000, 10, cfg.image_size, 1)?;

    let mut model = Vit::new(cfg, 0)?;
    let base_cfg = DistillConfig::baseline();
    for row in train_baseline(&mut model, &train, Some(&val), &base_cfg)? {
        println!("baseline epoch {} loss {:.4} val_acc {:.4} ({:.0?})", row.epoch, row.loss, row.val_acc.unwrap(), start.elapsed());
    }
    let baseline = evaluate_vit(&model, &val, 256)?;

    let scores = collect_scores(&model, &train, &ScoreConfig::default())?;
    println!("scored in {:.0?}", start.elapsed());

    for tau in [0.1, 0.5] {
        let plan = global_plan(&scores, 0.7, tau, &[], true)?;
        let flops = model_flops(&cfg, Some(&plan))?;
        let mut student = compress_model(model.clone(), plan)?;
        let before = evaluate(&student, &val, 256)?;
        let ft = DistillConfig { epochs: 3, freeze_epoch: 2, lr: 1e-4, ..DistillConfig::default() };
        let (rows, _) = finetune(&mut student, &model, &train, Some(&val), &ft)?;
        println!(
            "tau {tau}: flops -{:.1}% acc before {:.4} after {:.4} baseline {:.4} ({:.0?})",
            flops.reduction_pct,
            before,
            rows.last().and_then(|r| r.val_acc).unwrap(),
            baseline,
            start.elapsed()
        );
    }
    Ok(())
}
