//! Finite-difference verification of the model's gradients.
//!
//! Two sweeps: the full joint model (both transformer branches,
//! co-attention, and all three loss heads) driven from feature-level
//! audio inputs, and the convolutional front end on a small random
//! input plane. The split matters: the transformer graph is smooth, so
//! central differences are trustworthy everywhere, while ReLU and
//! max-pool kinks make finite differences through a full-size conv
//! stack unreliable no matter how correct the gradients are.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use rand::Rng;

use mulap::audio::SAMPLE_RATE;
use mulap::gradcheck;
use mulap::model::{ModelConfig, MulapModel};
use mulap::objectives::{self, PretrainConfig, PretrainError};
use mulap::rng;
use mulap::tensor::{Tensor, TensorError};
use mulap::text::{CLS, SEP};

fn tensor_err(e: PretrainError) -> TensorError {
    match e {
        PretrainError::Tensor(t) => t,
        other => TensorError::InvalidArgument { op: "gradient_check", detail: other.to_string() },
    }
}

fn main() {
    let cfg = ModelConfig {
        d: 6,
        h: 8,
        heads: 2,
        l: 2,
        n: 1,
        ffn: 12,
        max_len: 8,
        vocab_size: 24,
    };
    let model = MulapModel::new(&cfg, 11);
    let params = model.params();
    println!(
        "model: {} parameters across {} tensors (hidden {}, {} heads)",
        model.param_count(),
        params.len(),
        cfg.h,
        cfg.heads
    );

    // ── Joint model: audio features [T+1, d] with T = 3, captions S = 6 ──
    let mut data_rng = rng::stream(3, "fd-data", 0);
    let features: Vec<Tensor> = (0..3)
        .map(|_| {
            Tensor::from_vec(
                &[4, cfg.d],
                (0..4 * cfg.d).map(|_| data_rng.random::<f64>() - 0.5).collect(),
            )
            .expect("feature tensor")
        })
        .collect();
    let ids: Vec<Vec<usize>> =
        (0..3).map(|i| vec![CLS, 6 + i, 9 + i, 12 + i, 15 + i, SEP]).collect();
    let pcfg = PretrainConfig { batch: 3, ..Default::default() };

    let start = std::time::Instant::now();
    let report = gradcheck::check(
        &params,
        || {
            // Fixed streams so every probe evaluates the same function.
            let mut rng_mask = rng::stream(5, "mask", 1);
            let mut rng_pair = rng::stream(5, "atm", 1);
            let batch = objectives::prepare_batch_from_features(
                &features,
                &ids,
                0.4,
                &mut rng_mask,
                &mut rng_pair,
            )
            .map_err(tensor_err)?;
            let (total, _) = objectives::batch_losses(&model, &batch, &pcfg).map_err(tensor_err)?;
            Ok(total)
        },
        1e-5,
        4,
        &mut rng::stream(99, "probe", 0),
    )
    .expect("joint gradient check");

    println!();
    println!("joint model: checked {} entries in {:.1?}", report.checked, start.elapsed());
    println!(
        "  max relative error {:.3e} at {} [{}]",
        report.max_rel_err, report.worst.0, report.worst.1
    );
    println!(
        "  analytic {:+.9e}  vs  numeric {:+.9e}",
        report.worst_pair.0, report.worst_pair.1
    );
    assert!(report.max_rel_err < 1e-4, "joint-model gradients disagree");

    // ── Convolutional front end on a small random plane ──
    let x = Tensor::from_vec(
        &[1, 10, 12],
        (0..120).map(|_| data_rng.random::<f64>() - 0.5).collect(),
    )
    .expect("input plane");
    let c = Tensor::from_vec(
        &[1, cfg.d],
        (0..cfg.d).map(|_| data_rng.random::<f64>() + 0.5).collect(),
    )
    .expect("mixer");
    let bb = &model.backbone;
    let start = std::time::Instant::now();
    let conv_report = gradcheck::check(
        &bb.frozen_params(),
        || {
            let h = x
                .conv2d(&bb.conv1_w, &bb.conv1_b, 1)?
                .relu()?
                .max_pool2d(2, 2, 2)?
                .conv2d(&bb.conv2_w, &bb.conv2_b, 1)?
                .relu()?
                .max_pool2d(2, 2, 2)?
                .global_avg_pool()?;
            bb.proj.forward(&h)?.mul(&c)?.mean_all()
        },
        1e-5,
        4,
        &mut rng::stream(100, "probe", 1),
    )
    .expect("conv gradient check");
    println!();
    println!(
        "conv front end: checked {} entries in {:.1?}",
        conv_report.checked,
        start.elapsed()
    );
    println!(
        "  max relative error {:.3e} at {} [{}]",
        conv_report.max_rel_err, conv_report.worst.0, conv_report.worst.1
    );
    assert!(conv_report.max_rel_err < 1e-4, "conv gradients disagree");

    println!();
    println!(
        "analytic gradients agree with central differences (tolerance 1e-4, {} Hz audio path untouched).",
        SAMPLE_RATE
    );
}
