use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InnerWeights, ModelConfig, Sublayer, SublayerKind, SublayerStack};
use crate::error::Result;
use crate::matrix::Matrix;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let a = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-a..a))
}

/// Builds a randomly initialized model. Weights are drawn in a fixed order
/// from a ChaCha stream, so `(config, seed)` fully determines every bit.
pub fn build_toy_model(config: &ModelConfig, seed: u64) -> Result<SublayerStack> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let f = config.d_ff;

    let embedding = uniform(&mut rng, config.vocab_size, d, 1);
    let mut sublayers = Vec::with_capacity(config.n_sublayers());
    for index in 1..=config.n_sublayers() {
        let kind = SublayerKind::of_index(index);
        let (inner, out_proj) = match kind {
            SublayerKind::Mha => {
                let wq = uniform(&mut rng, d, d, d);
                let wk = uniform(&mut rng, d, d, d);
                let wv = uniform(&mut rng, d, d, d);
                let wo = uniform(&mut rng, d, d, d);
                (InnerWeights::Mha { norm: vec![1.0; d], wq, wk, wv }, wo)
            }
            SublayerKind::Mlp => {
                let w_gate = uniform(&mut rng, f, d, d);
                let w_up = uniform(&mut rng, f, d, d);
                let w_down = uniform(&mut rng, d, f, f);
                (InnerWeights::Mlp { norm: vec![1.0; d], w_gate, w_up }, w_down)
            }
        };
        sublayers.push(Sublayer { index, kind, pruned: false, inner, out_proj });
    }
    let lm_head = uniform(&mut rng, d, config.vocab_size, d);
    Ok(SublayerStack {
        config: config.clone(),
        embedding,
        sublayers,
        final_norm: vec![1.0; d],
        lm_head,
    })
}

/// Log10 range of the output gains drawn by [`vary_sublayer_gains`].
pub const GAIN_LOG10_RANGE: (f64, f64) = (-1.0, 0.3);

/// Rescales every sublayer's output projection by a gain drawn
/// log-uniformly from `10^GAIN_LOG10_RANGE`, so sublayers contribute unequal
/// amounts to the residual stream as in trained models. The gains come from
/// their own ChaCha stream seeded by `seed`.
pub fn vary_sublayer_gains(model: &mut SublayerStack, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = GAIN_LOG10_RANGE;
    for layer in &mut model.sublayers {
        let g = 10f64.powf(rng.gen_range(lo..hi));
        layer.out_proj = layer.out_proj.scale(g);
    }
}
