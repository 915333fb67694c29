//! Co-attentional transformer layers.
//!
//! Each layer runs two parallel streams. The audio stream queries the text
//! states for its keys/values and vice versa — the K/V exchange — followed
//! by the usual residual + norm + feed-forward block per stream. Both
//! streams read the *layer input* of the other stream (synchronous
//! update), so there is no hidden ordering between modalities.
//!
//! Row 0 of each stream (a₀ on the audio side, CLS on the text side)
//! doubles as the sequence summary h₀ᵃ / h₀ʷ once the stack has run.

use rand_chacha::ChaCha8Rng;

use crate::attention::{FeedForward, MultiHeadAttention, Norm};
use crate::tensor::{Tensor, TensorError};

/// One stream's half of a co-attentional layer: cross-attention block plus
/// feed-forward block, post-norm.
#[derive(Clone)]
pub struct CoStreamBlock {
    pub attn: MultiHeadAttention,
    pub ln1: Norm,
    pub ffn: FeedForward,
    pub ln2: Norm,
}

impl CoStreamBlock {
    fn new(hidden: usize, heads: usize, inner: usize, rng: &mut ChaCha8Rng) -> CoStreamBlock {
        CoStreamBlock {
            attn: MultiHeadAttention::new(hidden, heads, rng),
            ln1: Norm::new(hidden),
            ffn: FeedForward::new(hidden, inner, rng),
            ln2: Norm::new(hidden),
        }
    }

    /// `x = LN(x + CrossAttn(Q=x, KV=other)); x = LN(x + FFN(x))`.
    pub fn forward(
        &self,
        x: &Tensor,
        other: &Tensor,
        other_mask: &[bool],
    ) -> Result<Tensor, TensorError> {
        let a = self.attn.forward(x, other, other_mask)?;
        let h = self.ln1.forward(&x.add(&a)?)?;
        let f = self.ffn.forward(&h)?;
        self.ln2.forward(&h.add(&f)?)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.ffn.params(&format!("{prefix}.ffn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
    }
}

/// A full co-attentional layer: one block per stream.
#[derive(Clone)]
pub struct CoAttentionLayer {
    pub audio: CoStreamBlock,
    pub text: CoStreamBlock,
}

impl CoAttentionLayer {
    pub fn new(hidden: usize, heads: usize, inner: usize, rng: &mut ChaCha8Rng) -> CoAttentionLayer {
        CoAttentionLayer {
            audio: CoStreamBlock::new(hidden, heads, inner, rng),
            text: CoStreamBlock::new(hidden, heads, inner, rng),
        }
    }

    /// Update both streams from the layer's input states.
    pub fn forward(
        &self,
        audio_in: &Tensor,
        text_in: &Tensor,
        text_mask: &[bool],
        audio_mask: &[bool],
    ) -> Result<(Tensor, Tensor), TensorError> {
        let audio_out = self.audio.forward(audio_in, text_in, text_mask)?;
        let text_out = self.text.forward(text_in, audio_in, audio_mask)?;
        Ok((audio_out, text_out))
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.audio.params(&format!("{prefix}.audio"), out);
        self.text.params(&format!("{prefix}.text"), out);
    }
}

/// Final states of both streams after the co-attentional stack.
pub struct JointStates {
    /// `[T+1, H]` audio states (row 0 = summary position).
    pub audio: Tensor,
    /// `[S, H]` text states (row 0 = CLS).
    pub text: Tensor,
}

impl JointStates {
    /// h₀ᵃ — the audio summary representation, `[1, H]`.
    pub fn h0_audio(&self) -> Result<Tensor, TensorError> {
        self.audio.narrow_rows(0, 1)
    }

    /// h₀ʷ — the text summary representation, `[1, H]`.
    pub fn h0_text(&self) -> Result<Tensor, TensorError> {
        self.text.narrow_rows(0, 1)
    }
}

/// Run `layers` co-attentional layers over the two streams.
pub fn forward_joint(
    layers: &[CoAttentionLayer],
    audio_states: &Tensor,
    text_states: &Tensor,
    text_mask: &[bool],
    audio_mask: &[bool],
) -> Result<JointStates, TensorError> {
    let mut a = audio_states.clone();
    let mut w = text_states.clone();
    for layer in layers {
        let (na, nw) = layer.forward(&a, &w, text_mask, audio_mask)?;
        a = na;
        w = nw;
    }
    Ok(JointStates { audio: a, text: w })
}

// ─────────────────────────────── Tests ─────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, "coattn-test-data", 0);
        Tensor::param_randn(shape, 1.0, &mut rng)
    }

    #[test]
    fn empty_stack_is_identity() {
        let a = randn(&[4, 8], 1);
        let w = randn(&[5, 8], 2);
        let out = forward_joint(&[], &a, &w, &[true; 5], &[true; 4]).unwrap();
        assert_eq!(out.audio.data_vec(), a.data_vec());
        assert_eq!(out.text.data_vec(), w.data_vec());
    }

    #[test]
    fn default_depth_registers_sixty_four_tensors() {
        let mut rng = stream(3, "coattn-test", 0);
        let layers: Vec<CoAttentionLayer> =
            (0..2).map(|_| CoAttentionLayer::new(64, 4, 256, &mut rng)).collect();
        let mut params = Vec::new();
        for (i, l) in layers.iter().enumerate() {
            l.params(&format!("co.layer{i}"), &mut params);
        }
        // 2 layers x 2 streams x (cross-attn block 10 + FFN block 6).
        assert_eq!(params.len(), 64);
    }

    #[test]
    fn output_shapes_match_input_shapes() {
        let mut rng = stream(4, "coattn-test", 1);
        let layer = CoAttentionLayer::new(8, 2, 16, &mut rng);
        let a = randn(&[3, 8], 5);
        let w = randn(&[6, 8], 6);
        let (na, nw) = layer.forward(&a, &w, &[true; 6], &[true; 3]).unwrap();
        assert_eq!(na.shape(), &[3, 8]);
        assert_eq!(nw.shape(), &[6, 8]);
    }

    #[test]
    fn zeroed_cross_value_path_reduces_each_stream_to_its_ffn() {
        let mut rng = stream(7, "coattn-test", 2);
        let layer = CoAttentionLayer::new(8, 2, 16, &mut rng);
        for block in [&layer.audio, &layer.text] {
            block.attn.wv.w.set_data(&vec![0.0; 64]).unwrap();
            block.attn.wv.b.set_data(&vec![0.0; 8]).unwrap();
            block.attn.wo.b.set_data(&vec![0.0; 8]).unwrap();
        }
        let a = randn(&[3, 8], 8);
        let w = randn(&[4, 8], 9);
        let (na, nw) = layer.forward(&a, &w, &[true; 4], &[true; 3]).unwrap();
        let expect = |block: &CoStreamBlock, x: &Tensor| {
            let h = block.ln1.forward(x).unwrap();
            block.ln2.forward(&h.add(&block.ffn.forward(&h).unwrap()).unwrap()).unwrap()
        };
        let (ea, ew) = (expect(&layer.audio, &a), expect(&layer.text, &w));
        for (x, y) in na.data_vec().iter().zip(ea.data_vec().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in nw.data_vec().iter().zip(ew.data_vec().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn swapping_streams_and_parameter_bundles_swaps_outputs() {
        let mut rng = stream(10, "coattn-test", 3);
        let layer = CoAttentionLayer::new(8, 2, 16, &mut rng);
        let mirrored =
            CoAttentionLayer { audio: layer.text.clone(), text: layer.audio.clone() };
        let a = randn(&[3, 8], 11);
        let w = randn(&[5, 8], 12);
        let (na, nw) = layer.forward(&a, &w, &[true; 5], &[true; 3]).unwrap();
        let (ma, mw) = mirrored.forward(&w, &a, &[true; 3], &[true; 5]).unwrap();
        assert_eq!(na.data_vec(), mw.data_vec());
        assert_eq!(nw.data_vec(), ma.data_vec());
    }

    #[test]
    fn masked_text_position_cannot_influence_audio_outputs() {
        let mut rng = stream(13, "coattn-test", 4);
        let layers: Vec<CoAttentionLayer> =
            (0..2).map(|_| CoAttentionLayer::new(8, 2, 16, &mut rng)).collect();
        let a = randn(&[3, 8], 14);
        let w = randn(&[5, 8], 15);
        let mut text_mask = [true; 5];
        text_mask[2] = false;
        let before = forward_joint(&layers, &a, &w, &text_mask, &[true; 3]).unwrap();
        // Perturb the masked text row and rerun.
        let mut wd = w.data_vec();
        for j in 0..8 {
            wd[2 * 8 + j] += 3.0;
        }
        let w2 = Tensor::from_vec(&[5, 8], wd).unwrap();
        let after = forward_joint(&layers, &a, &w2, &text_mask, &[true; 3]).unwrap();
        for (x, y) in before.audio.data_vec().iter().zip(after.audio.data_vec().iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn summaries_are_row_zero() {
        let a = randn(&[3, 4], 20);
        let w = randn(&[2, 4], 21);
        let js = JointStates { audio: a.clone(), text: w.clone() };
        assert_eq!(js.h0_audio().unwrap().data_vec(), a.data_vec()[0..4]);
        assert_eq!(js.h0_text().unwrap().data_vec(), w.data_vec()[0..4]);
    }

    #[test]
    fn co_attention_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = stream(30, "coattn-test", 0);
        let layer = CoAttentionLayer::new(8, 2, 16, &mut rng);
        let a = Tensor::from_vec(
            &[3, 8],
            (0..24).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            &[4, 8],
            (0..32).map(|_| rng.random::<f64>() - 0.5).collect(),
        )
        .unwrap();
        let ca = Tensor::from_vec(
            &[3, 8],
            (0..24).map(|_| rng.random::<f64>() + 0.5).collect(),
        )
        .unwrap();
        let cw = Tensor::from_vec(
            &[4, 8],
            (0..32).map(|_| rng.random::<f64>() + 0.5).collect(),
        )
        .unwrap();
        let mut params = Vec::new();
        layer.params("co", &mut params);
        let text_mask = [true, true, false, true];
        let audio_mask = [true; 3];
        // Both stream outputs feed the scalar, so gradients cross
        // between streams through the K/V exchange.
        let report = crate::gradcheck::check(
            &params,
            || {
                let (ao, wo) = layer.forward(&a, &w, &text_mask, &audio_mask)?;
                ao.mul(&ca)?.mean_all()?.add(&wo.mul(&cw)?.mean_all()?)
            },
            1e-5,
            4,
            &mut stream(31, "coattn-fd", 0),
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
