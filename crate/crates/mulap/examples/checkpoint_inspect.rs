//! Save a model checkpoint, reload it, and verify bit-exactness.
//!
//! ```bash
//! cargo run --release --example checkpoint_inspect
//! ```

use mulap::checkpoint::Checkpoint;
use mulap::model::{ModelConfig, MulapModel};

fn main() {
    let cfg = ModelConfig {
        d: 16,
        h: 32,
        heads: 4,
        l: 3,
        n: 1,
        ffn: 64,
        max_len: 24,
        vocab_size: 128,
    };
    let model = MulapModel::new(&cfg, 8);
    let ckpt = Checkpoint::from_model(&model, None);
    let bytes = ckpt.encode().expect("encode");
    println!("checkpoint: {} bytes for {} parameters", bytes.len(), model.param_count());
    println!();

    let loaded = Checkpoint::decode(&bytes).expect("decode");
    println!("config echo: {}", serde_json::to_string(&loaded.config).expect("json"));
    println!();

    // Group the inventory by top-level prefix instead of dumping
    // every tensor.
    let mut groups: std::collections::BTreeMap<String, (usize, usize)> = Default::default();
    for (name, _, data) in &loaded.params {
        let prefix = name.split('.').next().unwrap_or("?").to_string();
        let slot = groups.entry(prefix).or_default();
        slot.0 += 1;
        slot.1 += data.len();
    }
    println!("{:<10} {:>8} {:>10}", "group", "tensors", "values");
    for (prefix, (tensors, values)) in &groups {
        println!("{prefix:<10} {tensors:>8} {values:>10}");
    }
    println!();

    // Round trip is exact: every value comes back bit-for-bit.
    let rebuilt = loaded.build_model().expect("rebuild");
    let a = model.params();
    let b = rebuilt.params();
    let identical = a
        .iter()
        .zip(&b)
        .all(|((_, x), (_, y))| x.data_vec().iter().zip(y.data_vec()).all(|(u, v)| *u == v));
    assert!(identical, "round trip altered parameter bits");
    println!("round trip verified: all {} tensors identical.", a.len());
}
