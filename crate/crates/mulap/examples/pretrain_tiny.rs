//! Overfit a tiny model on a handful of synthetic pairs.
//!
//! Demonstrates the full pretraining loop — masking, the three losses,
//! Adam, deterministic logging — at a scale that finishes in well under a
//! minute.
//!
//! ```bash
//! cargo run --release --example pretrain_tiny
//! ```

use mulap::corpus;
use mulap::model::{ModelConfig, MulapModel};
use mulap::objectives::{self, PretrainConfig, PretrainItem};
use mulap::rng;
use mulap::text::{tokenize, Vocabulary};

fn main() {
    // Eight synthetic pairs straight from the generator, no disk involved.
    let specs: Vec<_> = (0..8).map(|i| corpus::draw_spec(31, i)).collect();
    let captions: Vec<String> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| corpus::caption(s, &mut rng::stream(31, "caption", i as u64)))
        .collect();
    let vocab = Vocabulary::build(&captions, 64).expect("vocabulary");
    println!("vocabulary: {} entries", vocab.size());

    let cfg = ModelConfig {
        d: 12,
        h: 24,
        heads: 2,
        l: 2,
        n: 1,
        ffn: 48,
        max_len: 16,
        vocab_size: 64,
    };
    let model = MulapModel::new(&cfg, 5);
    let items: Vec<PretrainItem> = specs
        .iter()
        .zip(&captions)
        .map(|(spec, cap)| PretrainItem {
            clip: corpus::synthesize(spec),
            ids: tokenize(cap, &vocab, cfg.max_len),
        })
        .collect();

    let pcfg = PretrainConfig {
        steps: 120,
        batch: 4,
        lr: 3e-4,
        eval_every: 30,
        seed: 5,
        ..Default::default()
    };

    // The same items serve as the "validation" set here; the point of
    // this example is watching the losses fall, not generalization.
    let mut log = Vec::new();
    let start = std::time::Instant::now();
    let outcome =
        objectives::pretrain(&model, &items, &items, &pcfg, &mut log).expect("pretraining");
    let log = String::from_utf8(log).expect("utf8 log");

    // Print first and last few log lines rather than all 120.
    let lines: Vec<&str> = log.lines().collect();
    for line in lines.iter().take(5) {
        println!("{line}");
    }
    println!("... ({} more lines)", lines.len().saturating_sub(10));
    for line in lines.iter().rev().take(5).rev() {
        println!("{line}");
    }
    println!();
    println!(
        "{} steps in {:.1?}; final total {:.4} (mlm {:.4}, mam {:.4}, atm {:.4})",
        outcome.steps_run,
        start.elapsed(),
        outcome.final_losses.total,
        outcome.final_losses.mlm,
        outcome.final_losses.mam,
        outcome.final_losses.atm,
    );
    if let Some(best) = &outcome.best {
        println!("best validation total {:.4} at step {}", best.val_total, best.step);
    }
    let acc = objectives::atm_accuracy(&model, &items).expect("match accuracy");
    println!("audio-text matching accuracy on these pairs: {acc:.2}");
}
