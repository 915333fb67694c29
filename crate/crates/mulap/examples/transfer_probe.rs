//! Frozen-backbone probe evaluation on a small generated corpus.
//!
//! Trains the instrument / tags / mood probes on features from a randomly
//! initialized backbone and prints the resulting report. With a real
//! pretrained checkpoint the same call is what `mulap probe` runs.
//!
//! ```bash
//! cargo run --release --example transfer_probe
//! ```

use mulap::corpus::LoadedCorpus;
use mulap::model::{ModelConfig, MulapModel};
use mulap::probe::{self, ProbeConfig, TaskName};

fn main() {
    let dir = std::env::temp_dir().join("mulap-transfer-probe-demo");
    mulap::corpus::generate_corpus(60, 404, &dir).expect("corpus generation");
    let corpus = LoadedCorpus::load(&dir.join("manifest.jsonl"), 20.0).expect("corpus load");
    println!(
        "corpus: {} tracks ({} train / {} val / {} test)",
        corpus.entries.len(),
        corpus.split_indices("train").len(),
        corpus.split_indices("val").len(),
        corpus.split_indices("test").len(),
    );

    let model_cfg = ModelConfig { d: 24, h: 32, heads: 2, ..Default::default() };
    let backbone = MulapModel::new(&model_cfg, 99).backbone;

    let cfg = ProbeConfig {
        hidden: 64,
        epochs: 15,
        batch: 16,
        seeds: vec![0, 1],
        ..Default::default()
    };
    let tasks = [TaskName::Instrument, TaskName::Tags, TaskName::Mood];
    let start = std::time::Instant::now();
    let report = probe::run_benchmark(&backbone, &corpus, &tasks, &cfg).expect("probe run");
    println!("probes trained in {:.1?}", start.elapsed());
    println!();
    print!("{}", report.to_tsv());
    println!();
    println!("json report:\n{}", report.to_json());
}
