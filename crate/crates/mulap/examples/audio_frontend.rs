//! Synthesize one track, run the mel front end, and draw the result.
//!
//! ```bash
//! cargo run --release --example audio_frontend
//! ```

use mulap::audio::{segment, MelProcessor, MAX_TRACK_SECONDS, SAMPLE_RATE, SEGMENT_SECONDS};
use mulap::corpus;

fn main() {
    let spec = corpus::draw_spec(7, 0);
    let clip = corpus::synthesize(&spec);
    println!(
        "track: family {:?}, tempo {} bpm, f0 {:.1} Hz, {:.1} s of audio at {} Hz",
        spec.family,
        spec.tempo,
        spec.f0(),
        clip.samples.len() as f64 / SAMPLE_RATE as f64,
        clip.sample_rate,
    );

    let segs = segment(&clip, SEGMENT_SECONDS, MAX_TRACK_SECONDS).expect("segmentation");
    println!("segments: {} x {:.0} s", segs.len(), SEGMENT_SECONDS);

    let proc = MelProcessor::new(Default::default(), SAMPLE_RATE);
    let mel = proc.compute(&segs[0]).expect("mel spectrogram");
    println!("mel geometry: {} frames x {} bands", mel.frames, mel.n_mels);
    println!();

    // Coarse ASCII rendering: bands top-to-bottom (high to low), time
    // left-to-right, four frames per character column.
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let (lo, hi) = mel
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let step = 4;
    for band in (0..mel.n_mels).rev().step_by(2) {
        let mut row = String::new();
        for t0 in (0..mel.frames).step_by(step) {
            let mut acc = 0.0;
            let mut cnt = 0;
            for t in t0..(t0 + step).min(mel.frames) {
                acc += mel.at(t, band);
                cnt += 1;
            }
            let x = (acc / cnt as f64 - lo) / (hi - lo).max(1e-12);
            row.push(shades[((x * 9.0).round() as usize).min(9)]);
        }
        println!("{:7.0} Hz |{row}|", proc.center_freqs()[band]);
    }
    println!();
    println!(
        "fundamental {:.1} Hz lands in band {}",
        spec.f0(),
        proc.nearest_band(spec.f0())
    );
}
