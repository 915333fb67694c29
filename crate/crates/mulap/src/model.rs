//! Assembly of the full two-branch model.
//!
//! Text branch: embeddings + (L−N) self-attention layers. Audio branch:
//! CNN backbone features + embedding. Both meet in N co-attentional
//! layers. Three small heads hang off the joint states for the
//! pre-training objectives (token prediction, feature regression, match
//! scoring).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dense;
use crate::audio::{MelConfig, SAMPLE_RATE};
use crate::backbone::{AudioBackbone, BackboneConfig};
use crate::coattention::{forward_joint, CoAttentionLayer, JointStates};
use crate::tensor::{Tensor, TensorError};
use crate::text::TextEncoder;

/// Model hyperparameters. `l` counts all text-side layers; the last `n`
/// of them are co-attentional, so the text-only stack has `l - n` layers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone feature dimension.
    pub d: usize,
    /// Transformer hidden width.
    pub h: usize,
    /// Attention heads.
    pub heads: usize,
    /// Total text-side depth.
    pub l: usize,
    /// Co-attentional depth.
    pub n: usize,
    /// Feed-forward inner width.
    pub ffn: usize,
    /// Maximum token sequence length.
    pub max_len: usize,
    /// Vocabulary capacity (including reserved ids).
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d: 64, h: 64, heads: 4, l: 6, n: 2, ffn: 256, max_len: 32, vocab_size: 2048 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.n > self.l {
            return Err(format!("n ({}) must not exceed l ({})", self.n, self.l));
        }
        if self.heads == 0 || self.h % self.heads != 0 {
            return Err(format!("h ({}) must be divisible by heads ({})", self.h, self.heads));
        }
        if self.max_len < 2 {
            return Err("max_len must be at least 2 (CLS + SEP)".into());
        }
        if self.vocab_size <= crate::text::RESERVED {
            return Err(format!("vocab_size must exceed {}", crate::text::RESERVED));
        }
        if self.d == 0 || self.h == 0 || self.ffn == 0 {
            return Err("d, h, ffn must be positive".into());
        }
        Ok(())
    }
}

/// Objective heads over the joint states.
pub struct Heads {
    /// H → vocab logits for masked-token prediction.
    pub mlm: Dense,
    /// H → d regression onto masked backbone features.
    pub mam: Dense,
    /// H → 1 match logit (sigmoid applied at the call site).
    pub atm: Dense,
}

pub struct MulapModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub backbone: AudioBackbone,
    pub co: Vec<CoAttentionLayer>,
    pub heads: Heads,
}

impl MulapModel {
    /// Deterministic construction: identical `(cfg, seed)` gives identical
    /// parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> MulapModel {
        let mut rng: ChaCha8Rng = crate::rng::stream(seed, "model-init", 0);
        let text = TextEncoder::new(
            cfg.vocab_size,
            cfg.h,
            cfg.heads,
            cfg.ffn,
            cfg.max_len,
            cfg.l - cfg.n,
            &mut rng,
        );
        let backbone = AudioBackbone::new(
            BackboneConfig { d: cfg.d, ..Default::default() },
            cfg.h,
            MelConfig::default(),
            SAMPLE_RATE,
            &mut rng,
        );
        let co =
            (0..cfg.n).map(|_| CoAttentionLayer::new(cfg.h, cfg.heads, cfg.ffn, &mut rng)).collect();
        let heads = Heads {
            mlm: Dense::new(cfg.h, cfg.vocab_size, &mut rng),
            mam: Dense::new(cfg.h, cfg.d, &mut rng),
            atm: Dense::new(cfg.h, 1, &mut rng),
        };
        MulapModel { cfg: cfg.clone(), text, backbone, co, heads }
    }

    /// The named-parameter registry, in a stable construction order. Names
    /// are dotted paths; the set is the checkpoint contract.
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.text.params("text", &mut out);
        self.backbone.params("audio", &mut out);
        for (i, layer) in self.co.iter().enumerate() {
            layer.params(&format!("co.layer{i}"), &mut out);
        }
        self.heads.mlm.params("head.mlm", &mut out);
        self.heads.mam.params("head.mam", &mut out);
        self.heads.atm.params("head.atm", &mut out);
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Overwrite parameters from named buffers (checkpoint load). Every
    /// registry entry must be present with the exact shape.
    pub fn load_params(&self, named: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), TensorError> {
        let mut by_name: std::collections::HashMap<&str, (&[usize], &[f64])> =
            named.iter().map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice()))).collect();
        for (name, p) in self.params() {
            let Some((shape, data)) = by_name.remove(name.as_str()) else {
                return Err(TensorError::InvalidArgument {
                    op: "load_params",
                    detail: format!("checkpoint missing parameter {name}"),
                });
            };
            if shape != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_params",
                    detail: format!("{name}: checkpoint {shape:?} vs model {:?}", p.shape()),
                });
            }
            p.set_data(data)?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(TensorError::InvalidArgument {
                op: "load_params",
                detail: format!("checkpoint has unknown parameter {extra}"),
            });
        }
        Ok(())
    }

    /// Run both branches and the co-attentional stack.
    ///
    /// `audio_full` is the (possibly masked) `[T+1, d]` feature sequence;
    /// `token_ids` the (possibly masked) token sequence. PAD positions are
    /// masked out of text keys; all audio positions are attendable (zeroed
    /// rows carry information — "this was masked").
    pub fn forward(&self, audio_full: &Tensor, token_ids: &[usize]) -> Result<JointStates, TensorError> {
        let text_states = self.text.encode(token_ids)?;
        let audio_states = self.backbone.embed_audio(audio_full)?;
        let text_mask = TextEncoder::pad_mask(token_ids);
        let audio_mask = vec![true; audio_full.rows()];
        forward_joint(&self.co, &audio_states, &text_states, &text_mask, &audio_mask)
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioClip;
    use crate::text::{CLS, SEP};

    fn tiny_config() -> ModelConfig {
        ModelConfig { d: 8, h: 8, heads: 2, l: 3, n: 1, ffn: 16, max_len: 12, vocab_size: 32 }
    }

    fn tone(freq: f64, seconds: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        AudioClip {
            samples: (0..n)
                .map(|i| {
                    (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin() as f32
                        * 0.5
                })
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn registry_names_are_unique_and_construction_is_deterministic() {
        let cfg = tiny_config();
        let m1 = MulapModel::new(&cfg, 7);
        let m2 = MulapModel::new(&cfg, 7);
        let p1 = m1.params();
        let p2 = m2.params();
        assert_eq!(p1.len(), p2.len());
        let mut names: Vec<&String> = p1.iter().map(|(n, _)| n).collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total, "duplicate registry names");
        for ((n1, t1), (n2, t2)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data_vec(), t2.data_vec(), "{n1} differs across constructions");
        }
        let m3 = MulapModel::new(&cfg, 8);
        let p3 = m3.params();
        assert!(
            p1.iter().zip(p3.iter()).any(|((_, a), (_, b))| a.data_vec() != b.data_vec()),
            "different seeds should differ"
        );
    }

    #[test]
    fn registry_size_matches_config_arithmetic() {
        let cfg = tiny_config();
        let m = MulapModel::new(&cfg, 1);
        // text: 2 embeddings + 2 embed_ln + (l-n) layers x 16
        let text = 4 + (cfg.l - cfg.n) * 16;
        // audio: conv1(2) conv2(2) proj(2) embed(2) pos(1) embed_ln(2)
        let audio = 11;
        // co: n layers x 2 streams x 16; heads: 3 x 2
        let co = cfg.n * 32;
        assert_eq!(m.params().len(), text + audio + co + 6);
    }

    #[test]
    fn forward_produces_joint_states_of_the_right_shape() {
        let cfg = tiny_config();
        let m = MulapModel::new(&cfg, 2);
        let sf = m.backbone.encode_track(&tone(440.0, 9.0)).unwrap();
        let full = sf.full().unwrap();
        let ids = [CLS, 7, 9, 11, SEP];
        let js = m.forward(&full, &ids).unwrap();
        assert_eq!(js.audio.shape(), &[4, 8]);
        assert_eq!(js.text.shape(), &[5, 8]);
        assert_eq!(js.h0_audio().unwrap().shape(), &[1, 8]);
    }

    #[test]
    fn gradient_crosses_modalities() {
        // d ||h0_audio||^2 / d token_embedding must be nonzero: the audio
        // summary attends to text keys, so text parameters matter to it.
        let cfg = tiny_config();
        let m = MulapModel::new(&cfg, 3);
        let sf = m.backbone.encode_track(&tone(440.0, 6.0)).unwrap();
        let full = sf.full().unwrap();
        let ids = [CLS, 6, 7, SEP];
        let js = m.forward(&full, &ids).unwrap();
        let h0 = js.h0_audio().unwrap();
        let norm2 = h0.mul(&h0).unwrap().sum_all().unwrap();
        norm2.backward().unwrap();
        let g = m.text.tok_embed.grad_vec().expect("token embedding gradient");
        let row = |id: usize| &g[id * cfg.h..(id + 1) * cfg.h];
        assert!(row(6).iter().any(|&v| v != 0.0), "attended token got no gradient");
        assert!(row(7).iter().any(|&v| v != 0.0));
        // Tokens absent from the sequence receive nothing.
        assert!(row(20).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn load_params_round_trips_and_rejects_mismatches() {
        let cfg = tiny_config();
        let src = MulapModel::new(&cfg, 4);
        let dst = MulapModel::new(&cfg, 5);
        let blobs: Vec<(String, Vec<usize>, Vec<f64>)> =
            src.params().iter().map(|(n, p)| (n.clone(), p.shape().to_vec(), p.data_vec())).collect();
        dst.load_params(&blobs).unwrap();
        for ((_, a), (_, b)) in src.params().iter().zip(dst.params().iter()) {
            assert_eq!(a.data_vec(), b.data_vec());
        }
        // Wrong shape names the parameter.
        let mut bad = blobs.clone();
        bad[0].1 = vec![1, 1];
        bad[0].2 = vec![0.0];
        let err = dst.load_params(&bad).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        assert!(format!("{err}").contains("text.tok_embed"));
        // Missing parameter is detected.
        let missing = blobs[1..].to_vec();
        assert!(dst.load_params(&missing).is_err());
    }

    #[test]
    fn default_config_validates_and_tiny_invalid_ones_do_not() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = ModelConfig::default();
        bad.n = 9;
        assert!(bad.validate().is_err());
        let mut bad2 = ModelConfig::default();
        bad2.heads = 5;
        assert!(bad2.validate().is_err());
    }
}
