//! Traces the IoU between consecutive top-k gradient masks during an
//! unmasked warm-up, then prints the per-tensor share of the final mask.
//!
//! `cargo run --release -p pmp-core --example iou_trace -- [preset] [steps] [ema_beta]`

use pmp_core::data::{blocks_from_documents, markov_documents};
use pmp_core::mask::{k_for, EarlyBirdTracker};
use pmp_core::model::{build_model, ModelConfig};
use pmp_core::trainer::{lm_gradient, step, OptimizerState, TrainConfig};

fn main() -> pmp_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "accept".into());
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let ema: Option<f64> = args.next().and_then(|s| s.parse().ok());
    let cfg = TrainConfig::preset(&preset)?;
    let eff = cfg.effective_batch();
    let docs = markov_documents(steps * eff * cfg.block_len / 150 + 10, 50, 400, cfg.seed);
    let blocks = blocks_from_documents(docs, cfg.block_len, Some((1024, cfg.seed)))?;
    let mut model = build_model(ModelConfig::default(), cfg.seed)?;
    let d = model.layout().d();
    let k = k_for(0.7, d);
    // a threshold above 1 never converges, so the full trace is kept
    let mut tracker = EarlyBirdTracker::new(1.1, 5).with_ema(ema);
    let mut state = OptimizerState::new(d);
    for t in 0..steps {
        let (loss, g) = lm_gradient(&model, &blocks[t * eff..(t + 1) * eff], cfg.micro_batch)?;
        tracker.step(&g.iter().map(|x| x.abs()).collect::<Vec<_>>(), k)?;
        if let Some(h) = tracker.history().last().filter(|_| t % 10 == 0) {
            println!("update {t:4}  loss {loss:.3}  iou {:.4}", h.iou);
        }
        step(model.params_mut(), &g, &mut state, &cfg, None)?;
    }
    if let Some(m) = tracker.last_mask() {
        for e in model.layout().entries() {
            let on = e.range().filter(|&i| m.get(i)).count();
            println!("{:28} {:6.3}", e.name, on as f64 / e.len() as f64);
        }
    }
    Ok(())
}
