//! Scratch tuner for the transfer-gap run (deleted before release).

use std::path::PathBuf;

use mulap::corpus::LoadedCorpus;
use mulap::model::{ModelConfig, MulapModel};
use mulap::objectives::{self, PretrainConfig, PretrainItem};
use mulap::probe::{self, ProbeConfig, TaskName};
use mulap::text::{tokenize, Vocabulary};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(500);
    let steps: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(200);
    let epochs: usize = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(25);
    let lr: f64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(3e-4);
    let batch: usize = args.get(5).and_then(|a| a.parse().ok()).unwrap_or(8);

    let dir = PathBuf::from(format!("/tmp/tune3-{n}"));
    let t0 = std::time::Instant::now();
    if !dir.join("manifest.jsonl").exists() {
        mulap::corpus::generate_corpus(n, 11, &dir).unwrap();
        println!("gen: {:.0?}", t0.elapsed());
    }
    let t = std::time::Instant::now();
    let corpus = LoadedCorpus::load(&dir.join("manifest.jsonl"), 20.0).unwrap();
    println!("load: {:.0?}", t.elapsed());

    let mcfg = ModelConfig { ..Default::default() };
    let pcfg = ProbeConfig { epochs, ..Default::default() };
    let tasks = [TaskName::Instrument];

    // Random baseline.
    let t = std::time::Instant::now();
    let random_model = MulapModel::new(&mcfg, 42);
    let rand_report = probe::run_benchmark(&random_model.backbone, &corpus, &tasks, &pcfg).unwrap();
    let rand_acc = rand_report.tasks["instrument"]["accuracy"].mean;
    println!(
        "random probe: acc {:.4} (per-seed {:?}) in {:.0?}",
        rand_acc, rand_report.tasks["instrument"]["accuracy"].per_seed, t.elapsed()
    );

    // Pretrain.
    let t = std::time::Instant::now();
    let train_idx = corpus.split_indices("train");
    let val_idx = corpus.split_indices("val");
    let captions: Vec<String> =
        train_idx.iter().map(|&i| corpus.entries[i].caption.clone()).collect();
    let vocab = Vocabulary::build(&captions, mcfg.vocab_size).unwrap();
    let items = |idx: &[usize]| -> Vec<PretrainItem> {
        idx.iter()
            .map(|&i| PretrainItem {
                clip: corpus.clips[i].clone(),
                ids: tokenize(&corpus.entries[i].caption, &vocab, mcfg.max_len),
            })
            .collect()
    };
    let train_items = items(&train_idx);
    let val_items = items(&val_idx);
    let model = MulapModel::new(&mcfg, 42);
    let run_cfg = PretrainConfig {
        steps,
        batch,
        lr,
        seed: 42,
        eval_every: 100,
        ..Default::default()
    };
    let mut log = Vec::new();
    let outcome = objectives::pretrain(&model, &train_items, &val_items, &run_cfg, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    println!("pretrain ({} steps): {:.0?}", steps, t.elapsed());
    println!("  first {}", lines.get(1).unwrap_or(&""));
    println!("  last  {}", lines.last().unwrap_or(&""));
    println!(
        "  final mlm {:.4} mam {:.6} atm {:.4}",
        outcome.final_losses.mlm, outcome.final_losses.mam, outcome.final_losses.atm
    );

    // Pretrained probe.
    let t = std::time::Instant::now();
    let pre_report = probe::run_benchmark(&model.backbone, &corpus, &tasks, &pcfg).unwrap();
    let pre_acc = pre_report.tasks["instrument"]["accuracy"].mean;
    println!(
        "pretrained probe: acc {:.4} (per-seed {:?}) in {:.0?}",
        pre_acc, pre_report.tasks["instrument"]["accuracy"].per_seed, t.elapsed()
    );
    println!(
        "GAP {:.2} points (total wall {:.0?})",
        100.0 * (pre_acc - rand_acc),
        t0.elapsed()
    );
}
