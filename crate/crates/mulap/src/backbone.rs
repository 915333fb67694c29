//! The CNN audio backbone and the audio-side embedding step.
//!
//! Each 3-second mel segment passes through two conv→ReLU→max-pool blocks,
//! a global average pool, and a linear projection to a d-dimensional
//! feature vector. A track becomes the sequence a₁…a_T of segment vectors
//! plus a₀, their mean, prepended as a clip-level summary. The embedding
//! step projects the (T+1)×d feature matrix to the transformer width, adds
//! learned positional embeddings, and layer-norms.
//!
//! The backbone is deliberately small — it is the artifact the transfer
//! probe evaluates, not the point of the architecture — and the interface
//! (mel in, d-vector out) is generic enough to swap in a bigger CNN.

use rand_chacha::ChaCha8Rng;

use crate::attention::{Dense, Norm};
use crate::audio::{segment, AudioClip, AudioError, MelConfig, MelProcessor, MelSpectrogram};
use crate::tensor::{Tensor, TensorError};

/// Backbone hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    /// Output feature dimension (matches the transformer projection input).
    pub d: usize,
    /// Channels after the first conv block.
    pub c1: usize,
    /// Channels after the second conv block.
    pub c2: usize,
    /// Positional table size for the audio stream (a₀ + segments + margin).
    pub max_positions: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { d: 64, c1: 8, c2: 16, max_positions: 8 }
    }
}

/// Per-track backbone output: segment features and their mean summary.
pub struct SegmentFeatures {
    /// `[T, d]` — one row per 3 s segment.
    pub a: Tensor,
    /// `[1, d]` — column mean of `a` (the clip-level summary a₀).
    pub a0: Tensor,
}

impl SegmentFeatures {
    pub fn t(&self) -> usize {
        self.a.rows()
    }

    /// The full audio input sequence `[a₀; a₁…a_T]`, shape `[T+1, d]`.
    pub fn full(&self) -> Result<Tensor, TensorError> {
        Tensor::concat_rows(&[self.a0.clone(), self.a.clone()])
    }
}

/// Errors from the audio model path.
#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub struct AudioBackbone {
    pub cfg: BackboneConfig,
    pub conv1_w: Tensor, // [c1, 1, 3, 3]
    pub conv1_b: Tensor, // [c1]
    pub conv2_w: Tensor, // [c2, c1, 3, 3]
    pub conv2_b: Tensor, // [c2]
    pub proj: Dense,     // c2 -> d
    pub embed: Dense,    // d -> H
    pub pos_embed: Tensor, // [max_positions, H]
    pub embed_ln: Norm,
    mel: MelProcessor,
    mel_frames: usize,
}

impl AudioBackbone {
    pub fn new(
        cfg: BackboneConfig,
        hidden: usize,
        mel_cfg: MelConfig,
        sample_rate: u32,
        rng: &mut ChaCha8Rng,
    ) -> AudioBackbone {
        let mel = MelProcessor::new(mel_cfg, sample_rate);
        let seg_len = (crate::audio::SEGMENT_SECONDS * sample_rate as f64).round() as usize;
        let mel_frames = mel.frames_for(seg_len);
        // Fan-in-scaled init throughout the conv stack. Unlike the
        // transformer trunk there is no layer norm between these stages,
        // so a fixed small std would shrink activations geometrically and
        // the positional table would drown the features at the embedding.
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        AudioBackbone {
            conv1_w: Tensor::param_randn(&[cfg.c1, 1, 3, 3], he(9), rng),
            conv1_b: Tensor::param_zeros(&[cfg.c1]),
            conv2_w: Tensor::param_randn(&[cfg.c2, cfg.c1, 3, 3], he(9 * cfg.c1), rng),
            conv2_b: Tensor::param_zeros(&[cfg.c2]),
            proj: Dense::with_std(cfg.c2, cfg.d, he(cfg.c2), rng),
            embed: Dense::with_std(cfg.d, hidden, (1.0 / cfg.d as f64).sqrt(), rng),
            pos_embed: Tensor::param_randn(&[cfg.max_positions, hidden], crate::attention::INIT_STD, rng),
            embed_ln: Norm::new(hidden),
            mel,
            mel_frames,
            cfg,
        }
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.conv1.w"), self.conv1_w.clone()));
        out.push((format!("{prefix}.conv1.b"), self.conv1_b.clone()));
        out.push((format!("{prefix}.conv2.w"), self.conv2_w.clone()));
        out.push((format!("{prefix}.conv2.b"), self.conv2_b.clone()));
        self.proj.params(&format!("{prefix}.proj"), out);
        self.embed.params(&format!("{prefix}.embed"), out);
        out.push((format!("{prefix}.pos_embed"), self.pos_embed.clone()));
        self.embed_ln.params(&format!("{prefix}.embed_ln"), out);
    }

    /// The parameters the transfer protocol freezes: everything used by
    /// [`encode_segment`](Self::encode_segment).
    pub fn frozen_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        out.push(("audio.conv1.w".to_string(), self.conv1_w.clone()));
        out.push(("audio.conv1.b".to_string(), self.conv1_b.clone()));
        out.push(("audio.conv2.w".to_string(), self.conv2_w.clone()));
        out.push(("audio.conv2.b".to_string(), self.conv2_b.clone()));
        self.proj.params("audio.proj", &mut out);
        out
    }

    pub fn mel_processor(&self) -> &MelProcessor {
        &self.mel
    }

    /// Compute the log-mel spectrogram of a 3 s segment.
    pub fn mel_of(&self, seg: &AudioClip) -> Result<MelSpectrogram, AudioError> {
        self.mel.compute(seg)
    }

    /// Map one 3 s mel segment to its `[1, d]` feature vector.
    pub fn encode_segment(&self, mel: &MelSpectrogram) -> Result<Tensor, BackboneError> {
        let (bands, frames) = (self.mel.config().n_mels, self.mel_frames);
        if mel.n_mels != bands || mel.frames != frames {
            return Err(BackboneError::Tensor(TensorError::ShapeMismatch {
                op: "encode_segment",
                detail: format!(
                    "mel geometry {}x{}, expected {}x{}",
                    mel.frames, mel.n_mels, frames, bands
                ),
            }));
        }
        // Mel data is frame-major; the conv input plane is [1, bands, frames].
        let mut plane = vec![0.0; bands * frames];
        for t in 0..frames {
            for m in 0..bands {
                plane[m * frames + t] = mel.at(t, m);
            }
        }
        // Standardize the plane. Silent cells sit at the log floor, a large
        // negative constant that would otherwise dwarf the harmonic
        // structure and push every segment to nearly the same feature
        // vector under a freshly initialized stack.
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = var.sqrt().max(1e-6);
        for v in &mut plane {
            *v = (*v - mean) / sd;
        }
        let x = Tensor::from_vec(&[1, bands, frames], plane)?;
        let h = x
            .conv2d(&self.conv1_w, &self.conv1_b, 1)?
            .relu()?
            .max_pool2d(2, 2, 2)?
            .conv2d(&self.conv2_w, &self.conv2_b, 1)?
            .relu()?
            .max_pool2d(2, 2, 2)?
            .global_avg_pool()?;
        Ok(self.proj.forward(&h)?)
    }

    /// Segment a track (3 s pieces, 20 s cap), encode each segment, and
    /// summarize: `a` stacks the segment vectors, `a0` is their mean.
    pub fn encode_track(&self, clip: &AudioClip) -> Result<SegmentFeatures, BackboneError> {
        let segs = segment(clip, crate::audio::SEGMENT_SECONDS, crate::audio::MAX_TRACK_SECONDS)?;
        let mut rows = Vec::with_capacity(segs.len());
        for seg in &segs {
            rows.push(self.encode_segment(&self.mel_of(seg)?)?);
        }
        let a = Tensor::concat_rows(&rows)?;
        let a0 = a.mean_rows()?;
        Ok(SegmentFeatures { a, a0 })
    }

    /// Audio-side embedding: project `[T+1, d]` features to the hidden
    /// width, add positional embeddings for positions 0…T, layer-norm.
    pub fn embed_audio(&self, features_full: &Tensor) -> Result<Tensor, TensorError> {
        let rows = features_full.rows();
        if rows > self.cfg.max_positions {
            return Err(TensorError::InvalidArgument {
                op: "embed_audio",
                detail: format!("{} positions exceed the table of {}", rows, self.cfg.max_positions),
            });
        }
        let proj = self.embed.forward(features_full)?;
        let pos = self.pos_embed.narrow_rows(0, rows)?;
        self.embed_ln.forward(&proj.add(&pos)?)
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use crate::rng::stream;

    fn backbone(seed: u64) -> AudioBackbone {
        let mut rng = stream(seed, "backbone-test", 0);
        AudioBackbone::new(BackboneConfig::default(), 64, MelConfig::default(), SAMPLE_RATE, &mut rng)
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
    fn segment_encoding_is_deterministic_with_d_outputs() {
        let bb = backbone(1);
        let clip = tone(440.0, 3.0);
        let mel = bb.mel_of(&clip).unwrap();
        let v1 = bb.encode_segment(&mel).unwrap();
        let v2 = bb.encode_segment(&mel).unwrap();
        assert_eq!(v1.shape(), &[1, 64]);
        assert_eq!(v1.data_vec(), v2.data_vec());
    }

    #[test]
    fn zeroed_projection_yields_zero_features() {
        let bb = backbone(2);
        bb.proj.w.set_data(&vec![0.0; bb.proj.w.len()]).unwrap();
        bb.proj.b.set_data(&vec![0.0; bb.proj.b.len()]).unwrap();
        let v = bb.encode_segment(&bb.mel_of(&tone(330.0, 3.0)).unwrap()).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_mel_geometry_is_rejected() {
        let bb = backbone(3);
        let short = tone(440.0, 2.0);
        let mel = bb.mel_processor().compute(&short).unwrap();
        assert!(matches!(
            bb.encode_segment(&mel),
            Err(BackboneError::Tensor(TensorError::ShapeMismatch { .. }))
        ));
    }

    #[test]
    fn nine_second_track_gives_three_rows_matching_per_segment_encoding() {
        let bb = backbone(4);
        let clip = tone(262.0, 9.0);
        let sf = bb.encode_track(&clip).unwrap();
        assert_eq!(sf.t(), 3);
        assert_eq!(sf.a.shape(), &[3, 64]);
        let segs = segment(&clip, 3.0, 20.0).unwrap();
        let row1 = bb.encode_segment(&bb.mel_of(&segs[1]).unwrap()).unwrap();
        let a = sf.a.data_vec();
        assert_eq!(&a[64..128], row1.data_vec().as_slice(), "row 1 bit-exact");
    }

    #[test]
    fn identical_segments_share_rows_and_their_mean() {
        let bb = backbone(5);
        let one = tone(440.0, 3.0);
        let mut samples = one.samples.clone();
        samples.extend_from_slice(&one.samples);
        samples.extend_from_slice(&one.samples);
        let clip = AudioClip { samples, sample_rate: SAMPLE_RATE };
        let sf = bb.encode_track(&clip).unwrap();
        let a = sf.a.data_vec();
        assert_eq!(&a[0..64], &a[64..128]);
        assert_eq!(&a[0..64], &a[128..192]);
        let a0 = sf.a0.data_vec();
        for j in 0..64 {
            assert!((a0[j] - a[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn a0_is_the_column_mean_of_a() {
        let bb = backbone(6);
        // Two different segments: a ramp-ish tone and a higher tone.
        let mut samples = tone(220.0, 3.0).samples;
        samples.extend(tone(880.0, 3.0).samples);
        let sf = bb.encode_track(&AudioClip { samples, sample_rate: SAMPLE_RATE }).unwrap();
        let a = sf.a.data_vec();
        let a0 = sf.a0.data_vec();
        for j in 0..64 {
            let mean = (a[j] + a[64 + j]) / 2.0;
            assert!((a0[j] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_audio_shapes_positions_and_errors() {
        let bb = backbone(7);
        let sf = bb.encode_track(&tone(440.0, 9.0)).unwrap();
        let full = sf.full().unwrap();
        assert_eq!(full.shape(), &[4, 64]);
        let emb = bb.embed_audio(&full).unwrap();
        assert_eq!(emb.shape(), &[4, 64]);
        let too_many = Tensor::zeros(&[9, 64]);
        assert!(matches!(
            bb.embed_audio(&too_many),
            Err(TensorError::InvalidArgument { op: "embed_audio", .. })
        ));
    }

    #[test]
    fn changing_one_position_embedding_row_changes_only_that_output_row() {
        let bb = backbone(8);
        let full = Tensor::zeros(&[5, 64]);
        let before = bb.embed_audio(&full).unwrap().data_vec();
        // Perturb a single coordinate: a uniform shift across the whole
        // row would be absorbed by the layer norm.
        bb.pos_embed.data_mut()[3 * 64 + 5] += 0.5;
        let after = bb.embed_audio(&full).unwrap().data_vec();
        for r in 0..5 {
            let changed = (0..64).any(|j| (before[r * 64 + j] - after[r * 64 + j]).abs() > 1e-12);
            assert_eq!(changed, r == 3, "row {r}");
        }
    }

    #[test]
    fn zero_features_and_zero_positions_hit_the_norm_analytically() {
        let bb = backbone(9);
        bb.embed.w.set_data(&vec![0.0; bb.embed.w.len()]).unwrap();
        bb.pos_embed.set_data(&vec![0.0; bb.pos_embed.len()]).unwrap();
        let full = Tensor::zeros(&[3, 64]);
        // Pre-norm input is exactly zero everywhere; layer norm of a
        // constant row is beta (zero here).
        let out = bb.embed_audio(&full).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn downstream_head_training_leaves_backbone_bits_untouched() {
        use crate::optim::{Adam, AdamConfig};
        let bb = backbone(10);
        let snapshot: Vec<Vec<f64>> =
            bb.frozen_params().iter().map(|(_, p)| p.data_vec()).collect();
        let feature =
            bb.encode_segment(&bb.mel_of(&tone(523.0, 3.0)).unwrap()).unwrap().detach();
        let mut rng = stream(11, "backbone-test", 1);
        let head = Dense::new(64, 2, &mut rng);
        let mut head_params = Vec::new();
        head.params("head", &mut head_params);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            let logits = head.forward(&feature).unwrap();
            let loss = logits.cross_entropy(&[1]).unwrap();
            loss.backward().unwrap();
            opt.step(&head_params).unwrap();
        }
        for ((_, p), before) in bb.frozen_params().iter().zip(snapshot.iter()) {
            assert_eq!(&p.data_vec(), before, "backbone parameter changed");
            assert!(p.grad_vec().is_none(), "gradient leaked into the backbone");
        }
    }

    #[test]
    fn cnn_block_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = stream(40, "backbone-test", 2);
        let bb = AudioBackbone::new(
            BackboneConfig { d: 6, ..Default::default() },
            16,
            MelConfig::default(),
            SAMPLE_RATE,
            &mut rng,
        );
        // Small random input plane so no ReLU argument or pool window sits
        // within the finite-difference step of a kink (the small element
        // count keeps crossing odds negligible; the seed is fixed anyway).
        let x = Tensor::from_vec(
            &[1, 10, 12],
            (0..120).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let c = Tensor::from_vec(
            &[1, 6],
            (0..6).map(|_| rng.random::<f64>() + 0.5).collect(),
        )
        .unwrap();
        let params = bb.frozen_params();
        let report = crate::gradcheck::check(
            &params,
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
            &mut stream(41, "backbone-fd", 0),
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {:?}: {:.3e}",
            report.worst,
            report.max_rel_err
        );
    }
}
