//! Generate a small synthetic corpus and summarize what came out.
//!
//! ```bash
//! cargo run --release --example generate_corpus -- [n] [out_dir]
//! ```

use std::collections::BTreeMap;
use std::path::PathBuf;

use mulap::corpus;

fn main() {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let out: PathBuf =
        args.next().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("corpus-demo"));

    let entries = corpus::generate_corpus(n, 2024, &out).expect("corpus generation");
    println!("wrote {} tracks under {}", entries.len(), out.display());
    println!();

    // A few caption/label pairs, then the instrument histogram.
    for e in entries.iter().take(5) {
        println!(
            "{}  [{}]  instrument={} tags={:?} mood=({:.2}, {:.2})",
            e.id, e.caption, e.labels.instrument, e.labels.tags, e.labels.mood[0], e.labels.mood[1]
        );
    }
    println!();

    let mut by_family: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_split: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &entries {
        *by_family.entry(e.labels.instrument).or_default() += 1;
        *by_split.entry(e.split.as_str()).or_default() += 1;
    }
    println!("instrument counts: {by_family:?}");
    println!("split counts: {by_split:?}");
    println!();
    println!("rerun with the same arguments and the files are byte-identical.");
}
