//! Rotary position embeddings, half-dimension pairing: element `i` rotates
//! with element `i + d/2` at angle `pos * base^(-2i/d)`.

use crate::tensor::{Scalar, Tensor};

/// Rotates every head row of `x` (`[n_heads x seq x head_dim]`) in place.
/// Row `s` is treated as absolute position `offset + s`. `inverse` applies the
/// transpose rotation, which is what the backward pass needs.
pub fn apply_rope<S: Scalar>(x: &mut Tensor<S>, offset: usize, base: f64, inverse: bool) {
    let shape = x.shape().to_vec();
    let (n_heads, seq, d) = (shape[0], shape[1], shape[2]);
    let half = d / 2;
    let inv_freq: Vec<f64> =
        (0..half).map(|i| base.powf(-2.0 * i as f64 / d as f64)).collect();
    let data = x.data_mut();
    for s in 0..seq {
        let pos = (offset + s) as f64;
        let trig: Vec<(f64, f64)> = inv_freq
            .iter()
            .map(|&f| {
                let (sin, cos) = (pos * f).sin_cos();
                (if inverse { -sin } else { sin }, cos)
            })
            .collect();
        for h in 0..n_heads {
            let row = &mut data[(h * seq + s) * d..(h * seq + s + 1) * d];
            for (i, &(sin, cos)) in trig.iter().enumerate() {
                let a = row[i].to_f64();
                let b = row[i + half].to_f64();
                row[i] = S::from_f64(a * cos - b * sin);
                row[i + half] = S::from_f64(a * sin + b * cos);
            }
        }
    }
}
