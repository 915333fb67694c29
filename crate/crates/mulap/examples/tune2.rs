//! Scratch tuner for the 16-pair overfit run (deleted before release).

use mulap::corpus;
use mulap::model::{ModelConfig, MulapModel};
use mulap::objectives::{self, PretrainConfig, PretrainItem};
use mulap::optim::{Adam, AdamConfig};
use mulap::rng;
use mulap::text::{tokenize, Vocabulary};

/// Exhaustive masked-token top-1: every maskable position in every caption
/// is masked one at a time and predicted. Deterministic given the model.
fn mlm_top1(model: &MulapModel, items: &[PretrainItem], _p: f64) -> f64 {
    use mulap::text::{CLS, MASK, PAD, SEP};
    let mut hit = 0usize;
    let mut total = 0usize;
    for item in items.iter() {
        let full = model.backbone.encode_track(&item.clip).unwrap().full().unwrap();
        for pos in 0..item.ids.len() {
            let orig = item.ids[pos];
            if orig == CLS || orig == SEP || orig == PAD {
                continue;
            }
            let mut ids = item.ids.clone();
            ids[pos] = MASK;
            let states = model.forward(&full, &ids).unwrap();
            let gathered = states.text.gather_rows(&[pos]).unwrap();
            let logits = model.heads.mlm.forward(&gathered).unwrap();
            let data = logits.data_vec();
            let arg = data
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.total_cmp(b))
                .map(|(j, _)| j)
                .unwrap();
            if arg == orig {
                hit += 1;
            }
            total += 1;
        }
    }
    hit as f64 / total as f64
}

/// Clean-input ATM diagnostic: accuracy plus the score spread, so a
/// constant-output head is visible at a glance.
fn atm_diag(model: &MulapModel, items: &[PretrainItem]) -> (f64, f64, f64, f64, f64) {
    let mut correct = 0usize;
    let mut total = 0usize;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut pm, mut pn) = (0.0, 0.0);
    let fulls: Vec<_> = items
        .iter()
        .map(|it| model.backbone.encode_track(&it.clip).unwrap().full().unwrap())
        .collect();
    for i in 0..items.len() {
        for (full, label) in [(&fulls[i], 1.0), (&fulls[(i + 1) % items.len()], 0.0)] {
            let js = model.forward(full, &items[i].ids).unwrap();
            let p = objectives::atm_score(model, &js).unwrap().item();
            lo = lo.min(p);
            hi = hi.max(p);
            if label == 1.0 {
                pm += p;
            } else {
                pn += p;
            }
            if (p >= 0.5) == (label == 1.0) {
                correct += 1;
            }
            total += 1;
        }
    }
    let n = items.len() as f64;
    (correct as f64 / total as f64, lo, hi, pm / n, pn / n)
}

/// Across-item dispersion of a set of row vectors: mean distance to the
/// centroid, relative to the centroid norm.
fn dispersion(rows: &[Vec<f64>]) -> f64 {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut centroid = vec![0.0; d];
    for r in rows {
        for (c, v) in centroid.iter_mut().zip(r) {
            *c += v / n;
        }
    }
    let cn = centroid.iter().map(|v| v * v).sum::<f64>().sqrt();
    let spread = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / n;
    spread / cn.max(1e-12)
}

fn stage_stats(model: &MulapModel, items: &[PretrainItem]) {
    let mut raw = Vec::new();
    let mut embedded = Vec::new();
    for it in items {
        let sf = model.backbone.encode_track(&it.clip).unwrap();
        raw.push(sf.a0.data_vec());
        let emb = model.backbone.embed_audio(&sf.full().unwrap()).unwrap();
        embedded.push(emb.narrow_rows(0, 1).unwrap().data_vec());
    }
    println!(
        "stage dispersion: conv a0 {:.4} embedded a0 {:.4}",
        dispersion(&raw),
        dispersion(&embedded)
    );
}

fn h0_stats(model: &MulapModel, items: &[PretrainItem]) -> (f64, f64, f64) {
    let mut ha = Vec::new();
    let mut hw = Vec::new();
    let mut prod = Vec::new();
    for it in items {
        let full = model.backbone.encode_track(&it.clip).unwrap().full().unwrap();
        let js = model.forward(&full, &it.ids).unwrap();
        let a = js.h0_audio().unwrap().data_vec();
        let w = js.h0_text().unwrap().data_vec();
        prod.push(a.iter().zip(&w).map(|(x, y)| x * y).collect());
        ha.push(a);
        hw.push(w);
    }
    (dispersion(&ha), dispersion(&hw), dispersion(&prod))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(1e-3);
    let max_steps: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let clip_secs: usize = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(6);
    let lambda_atm: f64 = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let n_co: usize = args.get(5).and_then(|a| a.parse().ok()).unwrap_or(1);
    let batch: usize = args.get(6).and_then(|a| a.parse().ok()).unwrap_or(8);
    println!("== lr {lr} steps {max_steps} clip {clip_secs}s λatm {lambda_atm} n {n_co} batch {batch}");

    let specs: Vec<_> = (0..16).map(|i| corpus::draw_spec(123, i)).collect();
    let captions: Vec<String> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| corpus::caption(s, &mut rng::stream(123, "caption", i as u64)))
        .collect();
    let vocab = Vocabulary::build(&captions, 256).unwrap();

    let mcfg = ModelConfig {
        d: 32,
        h: 64,
        heads: 4,
        l: 2,
        n: n_co,
        ffn: 128,
        max_len: 24,
        vocab_size: 256,
    };
    let model = MulapModel::new(&mcfg, 1);
    let items: Vec<PretrainItem> = specs
        .iter()
        .zip(&captions)
        .map(|(s, c)| {
            let mut clip = corpus::synthesize(s);
            clip.samples.truncate(clip_secs * 16000);
            PretrainItem { clip, ids: tokenize(c, &vocab, mcfg.max_len) }
        })
        .collect();

    let (da, dw, dp) = h0_stats(&model, &items);
    println!("init dispersion: h0_a {da:.4} h0_w {dw:.4} product {dp:.4}");
    stage_stats(&model, &items);

    let pcfg = PretrainConfig { batch, lr, seed: 3, lambda_atm, ..Default::default() };
    let params = model.params();
    let mut opt = Adam::new(AdamConfig { lr, ..Default::default() });
    let start = std::time::Instant::now();
    let mut step1_mam = f64::NAN;
    let mut deck: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    use rand::seq::SliceRandom;
    let mut recent_mam = Vec::new();
    for step in 1..=max_steps {
        if step == 1001 || step == 1501 {
            opt.cfg.lr *= 0.5;
            println!("lr -> {}", opt.cfg.lr);
        }
        if deck.len() < pcfg.batch {
            deck = (0..items.len()).collect();
            deck.shuffle(&mut rng::stream(pcfg.seed, "batch-order", epoch));
            epoch += 1;
        }
        let batch: Vec<PretrainItem> =
            deck.drain(..pcfg.batch).map(|i| items[i].clone()).collect();
        let losses =
            objectives::pretrain_step(&model, &params, &mut opt, &batch, &pcfg, step as u64)
                .unwrap();
        if step == 1 {
            step1_mam = losses.mam;
        }
        recent_mam.push(losses.mam);
        if recent_mam.len() > 10 {
            recent_mam.remove(0);
        }
        if step >= 200 && step % 50 == 0 {
            let mlm_acc = mlm_top1(&model, &items, 0.15);
            let (atm_acc, lo, hi, pm, pn) = atm_diag(&model, &items);
            let mam_avg: f64 = recent_mam.iter().sum::<f64>() / recent_mam.len() as f64;
            println!(
                "step {step}: mlm {:.4} atm {:.4} | mlm_top1 {:.3} mam_ratio {:.4} atm_acc {:.3} p[{:.3},{:.3}] pm {:.3} pn {:.3} | {:.0?}",
                losses.mlm,
                losses.atm,
                mlm_acc,
                mam_avg / step1_mam,
                atm_acc,
                lo,
                hi,
                pm,
                pn,
                start.elapsed()
            );
            if mlm_acc >= 0.9 && mam_avg < 0.1 * step1_mam && atm_acc >= 0.95 {
                println!("ALL CONDITIONS MET at step {step} in {:.0?}", start.elapsed());
                break;
            }
        }
    }
}
