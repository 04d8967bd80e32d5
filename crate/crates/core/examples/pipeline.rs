//! End-to-end run on synthetic data: pre-train with and without a private
//! mask, then compare fine-tuning gains on the keyword task.
//!
//! `cargo run --release -p pmp-core --example pipeline -- [seed] [rho]`

use std::time::Instant;

use pmp_core::data::{blocks_from_documents, gen_synthetic, markov_documents, SyntheticTask, TaskKind};
use pmp_core::model::{build_model, ModelConfig};
use pmp_core::trainer::{eval_lm_loss, finetune_gain, pretrain, FinetuneMode, PmpOptions, PretrainMode, TrainConfig};

fn main() -> pmp_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let rho: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.7);

    let mut cfg = TrainConfig::preset("accept")?;
    cfg.seed = seed;
    let blocks = blocks_from_documents(markov_documents(2500, 50, 400, seed), cfg.block_len, Some((1024, seed)))?;
    let held = blocks_from_documents(markov_documents(200, 50, 400, 10_000 + seed), cfg.block_len, None)?;
    let held = &held[..64];
    let task = gen_synthetic(&SyntheticTask { kind: TaskKind::KeywordCls, seed, n_train: 512, n_eval: 256, seq_len: 32 })?;
    let mut ft = TrainConfig::preset("finetune")?;
    ft.seed = seed;

    for (name, mode) in [("standard", PretrainMode::Standard), ("pmp", PretrainMode::Pmp(PmpOptions::new(rho)))] {
        let t0 = Instant::now();
        let mut model = build_model(ModelConfig::default(), seed)?;
        let out = pretrain(&mut model, &blocks, &cfg, &mode)?;
        let loss = eval_lm_loss(&out.checkpoint.to_model()?, held, 32)?;
        println!("{name}: held-out loss {loss:.3} ({:.0}s)", t0.elapsed().as_secs_f64());

        let mut modes = vec![FinetuneMode::UnauthorizedFull];
        if let Some(m) = &out.mask {
            modes.push(FinetuneMode::AuthorizedMasked(m.clone()));
        }
        for fm in modes {
            let r = finetune_gain(&out.checkpoint, &task.train, &task.eval, 2, &ft, &fm)?;
            println!("  {:20} head-only {:.3} accuracy {:.3} gain {:+.3}", r.mode, r.baseline_accuracy, r.accuracy, r.gain);
        }
    }
    Ok(())
}
