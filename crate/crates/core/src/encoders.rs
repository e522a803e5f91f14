//! Sentence encoders: piecewise CNN and a position-wise self-attention
//! summary over the same token matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::numerics::{ParamId, Tape, Var};

/// Nonlinearity used inside attention and gate MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape<'_>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PcnnParams<H> {
    /// `[d_c, m, d_in]`
    pub w_c: H,
    /// `[d_c]`
    pub b_c: H,
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttnParams<H> {
    /// `[d_in, d_in]`
    pub w_a1: H,
    pub b_a1: H,
    /// `[d_in, d_in]`
    pub w_a2: H,
    pub b_a2: H,
}

impl PcnnParams<ParamId> {
    pub fn on_tape(&self, leaves: &[Var]) -> PcnnParams<Var> {
        PcnnParams { w_c: leaves[self.w_c.index()], b_c: leaves[self.b_c.index()] }
    }
}

impl SelfAttnParams<ParamId> {
    pub fn on_tape(&self, leaves: &[Var]) -> SelfAttnParams<Var> {
        SelfAttnParams {
            w_a1: leaves[self.w_a1.index()],
            b_a1: leaves[self.b_a1.index()],
            w_a2: leaves[self.w_a2.index()],
            b_a2: leaves[self.b_a2.index()],
        }
    }
}

/// Convolution, max pooling over the three pieces split at the entity
/// positions, then tanh. Returns a `[3·d_c]` vector laid out piece by piece,
/// with an empty piece contributing zeros.
pub fn pcnn_encode(
    tape: &mut Tape<'_>,
    x: Var,
    head_pos: usize,
    tail_pos: usize,
    p: &PcnnParams<Var>,
) -> Result<Var> {
    let n = tape.value(x).shape().get(1).copied().unwrap_or(0);
    if head_pos >= n || tail_pos >= n {
        return Err(SegError::Data(format!(
            "entity positions ({head_pos}, {tail_pos}) outside sentence of length {n}"
        )));
    }
    let (p1, p2) = (head_pos.min(tail_pos), head_pos.max(tail_pos));
    let conv = tape.conv1d(x, p.w_c, p.b_c)?;
    let pooled = tape.segment_max_pool(conv, p1, p2)?;
    let d_c = tape.value(pooled).shape()[0];
    let by_piece = tape.transpose(pooled)?;
    let flat = tape.reshape(by_piece, &[3 * d_c])?;
    Ok(tape.tanh(flat))
}

/// Position-wise attention weights `P` (`[d_in, n]`, each row a
/// distribution over tokens).
pub fn self_attn_weights(
    tape: &mut Tape<'_>,
    x: Var,
    p: &SelfAttnParams<Var>,
    act: Activation,
) -> Result<Var> {
    let hidden = tape.affine(p.w_a1, x, p.b_a1)?;
    let hidden = act.apply(tape, hidden);
    let scores = tape.affine(p.w_a2, hidden, p.b_a2)?;
    tape.softmax(scores, 1)
}

/// Self-attention summary `u = Σ_i P[:, i] ⊙ X[:, i]`. Returns `(u, P)`.
pub fn self_attn_encode(
    tape: &mut Tape<'_>,
    x: Var,
    p: &SelfAttnParams<Var>,
    act: Activation,
) -> Result<(Var, Var)> {
    let weights = self_attn_weights(tape, x, p, act)?;
    let weighted = tape.mul(weights, x)?;
    let u = tape.sum_axis(weighted, 1)?;
    Ok((u, weights))
}

/// Runs the PCNN over the attention-reweighted tokens `P ⊙ X` (plus `X`
/// when `residual` is set).
#[allow(clippy::too_many_arguments)]
pub fn stacked_encode(
    tape: &mut Tape<'_>,
    x: Var,
    head_pos: usize,
    tail_pos: usize,
    pcnn: &PcnnParams<Var>,
    attn: &SelfAttnParams<Var>,
    act: Activation,
    residual: bool,
) -> Result<Var> {
    let weights = self_attn_weights(tape, x, attn, act)?;
    let mut reweighted = tape.mul(weights, x)?;
    if residual {
        reweighted = tape.add(reweighted, x)?;
    }
    pcnn_encode(tape, reweighted, head_pos, tail_pos, pcnn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{testutil::fd_check, uniform, Tensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Independent convolution + pooling, straight from the definition.
    fn pcnn_oracle(x: &Tensor, w: &Tensor, b: &Tensor, h: usize, t: usize) -> Vec<f64> {
        let (d_in, n) = x.dims2().unwrap();
        let (d_c, m) = (w.shape()[0], w.shape()[1]);
        let pad = (m - 1) / 2;
        let at = |j: i64, c: usize| if j < 0 || j >= n as i64 { 0.0 } else { x.at2(c, j as usize) };
        let conv = |o: usize, i: usize| {
            let mut s = b.data()[o];
            for tap in 0..m {
                for c in 0..d_in {
                    s += w.data()[(o * m + tap) * d_in + c] * at(i as i64 + tap as i64 - pad as i64, c);
                }
            }
            s
        };
        let (p1, p2) = (h.min(t), h.max(t));
        let pieces = [(0, p1 + 1), (p1 + 1, p2 + 1), (p2 + 1, n)];
        let mut out = Vec::new();
        for (lo, hi) in pieces {
            for o in 0..d_c {
                out.push(if lo >= hi {
                    0.0
                } else {
                    (lo..hi).map(|i| conv(o, i)).fold(f64::NEG_INFINITY, f64::max).tanh()
                });
            }
        }
        out
    }

    fn pcnn_run(x: &Tensor, w: &Tensor, b: &Tensor, h: usize, t: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = PcnnParams { w_c: tape.param(w), b_c: tape.param(b) };
        let s = pcnn_encode(&mut tape, xv, h, t, &p)?;
        Ok(tape.value(s).clone())
    }

    #[test]
    fn pcnn_matches_direct_evaluation() {
        let mut r = rng(1);
        for (n, h, t) in [(7, 1, 4), (5, 3, 0), (4, 2, 3), (6, 0, 5)] {
            let x = uniform(&[4, n], 1.0, &mut r);
            let w = uniform(&[5, 3, 4], 1.0, &mut r);
            let b = uniform(&[5], 1.0, &mut r);
            let got = pcnn_run(&x, &w, &b, h, t).unwrap();
            assert_eq!(got.shape(), &[15]);
            let want = pcnn_oracle(&x, &w, &b, h, t);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pcnn_tail_at_end_gives_zero_third_piece() {
        let mut r = rng(2);
        let x = uniform(&[3, 5], 1.0, &mut r);
        let w = uniform(&[2, 3, 3], 1.0, &mut r);
        let b = uniform(&[2], 1.0, &mut r);
        let got = pcnn_run(&x, &w, &b, 1, 4).unwrap();
        assert_eq!(&got.data()[4..], &[0.0, 0.0]);
        assert!(got.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn pcnn_output_unchanged_within_pieces_order() {
        // swapping head and tail leaves the piece boundaries alone
        let mut r = rng(3);
        let x = uniform(&[3, 8], 1.0, &mut r);
        let w = uniform(&[2, 3, 3], 1.0, &mut r);
        let b = uniform(&[2], 1.0, &mut r);
        assert_eq!(pcnn_run(&x, &w, &b, 2, 6).unwrap(), pcnn_run(&x, &w, &b, 6, 2).unwrap());
    }

    #[test]
    fn pcnn_rejects_bad_positions() {
        let mut r = rng(4);
        let x = uniform(&[3, 4], 1.0, &mut r);
        let w = uniform(&[2, 3, 3], 1.0, &mut r);
        let b = uniform(&[2], 1.0, &mut r);
        assert!(matches!(pcnn_run(&x, &w, &b, 1, 4), Err(SegError::Data(_))));
    }

    #[test]
    fn pcnn_gradients_match_finite_differences() {
        let mut r = rng(5);
        let inputs = vec![
            uniform(&[4, 6], 1.0, &mut r),
            uniform(&[3, 3, 4], 1.0, &mut r),
            uniform(&[3], 1.0, &mut r),
        ];
        let err = fd_check(inputs, |t, v| {
            pcnn_encode(t, v[0], 1, 3, &PcnnParams { w_c: v[1], b_c: v[2] }).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    fn attn_params(d: usize, r: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            uniform(&[d, d], 1.0, r),
            uniform(&[d], 1.0, r),
            uniform(&[d, d], 1.0, r),
            uniform(&[d], 1.0, r),
        ]
    }

    fn attn_run(x: &Tensor, ps: &[Tensor], act: Activation) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = SelfAttnParams {
            w_a1: tape.param(&ps[0]),
            b_a1: tape.param(&ps[1]),
            w_a2: tape.param(&ps[2]),
            b_a2: tape.param(&ps[3]),
        };
        let (u, w) = self_attn_encode(&mut tape, xv, &p, act).unwrap();
        (tape.value(u).clone(), tape.value(w).clone())
    }

    #[test]
    fn single_token_attention_returns_the_token() {
        let mut r = rng(6);
        let ps = attn_params(4, &mut r);
        let x = uniform(&[4, 1], 1.0, &mut r);
        let (u, w) = attn_run(&x, &ps, Activation::Relu);
        assert!(w.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(u.max_abs_diff(&Tensor::vector(x.data().to_vec())) < 1e-15);
    }

    #[test]
    fn constant_scores_give_column_mean() {
        let mut r = rng(7);
        let mut ps = attn_params(3, &mut r);
        ps[2] = Tensor::zeros(&[3, 3]);
        let x = uniform(&[3, 5], 1.0, &mut r);
        let (u, _) = attn_run(&x, &ps, Activation::Tanh);
        for k in 0..3 {
            let mean = x.row(k).iter().sum::<f64>() / 5.0;
            assert!((u.data()[k] - mean).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions_and_u_is_bounded(seed in 0u64..500, n in 1usize..9) {
            let mut r = rng(seed);
            let ps = attn_params(3, &mut r);
            let x = uniform(&[3, n], 2.0, &mut r);
            let (u, w) = attn_run(&x, &ps, Activation::Relu);
            for k in 0..3 {
                let row = w.row(k);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                let (lo, hi) = x.row(k).iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                prop_assert!(u.data()[k] >= lo - 1e-12 && u.data()[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for act in [Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
            let mut r = rng(8);
            let mut inputs = attn_params(3, &mut r);
            inputs.push(uniform(&[3, 4], 1.0, &mut r));
            let err = fd_check(inputs, |t, v| {
                let p = SelfAttnParams { w_a1: v[0], b_a1: v[1], w_a2: v[2], b_a2: v[3] };
                self_attn_encode(t, v[4], &p, act).unwrap().0
            });
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn stacked_with_uniform_attention_scales_columns() {
        let mut r = rng(9);
        let mut ps = attn_params(3, &mut r);
        ps[2] = Tensor::zeros(&[3, 3]);
        let x = uniform(&[3, 4], 1.0, &mut r);
        let w = uniform(&[2, 3, 3], 1.0, &mut r);
        let b = uniform(&[2], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pc = PcnnParams { w_c: tape.param(&w), b_c: tape.param(&b) };
        let at = SelfAttnParams {
            w_a1: tape.param(&ps[0]),
            b_a1: tape.param(&ps[1]),
            w_a2: tape.param(&ps[2]),
            b_a2: tape.param(&ps[3]),
        };
        let s = stacked_encode(&mut tape, xv, 0, 2, &pc, &at, Activation::Relu, false).unwrap();
        let want = pcnn_oracle(&x.map(|v| v / 4.0), &w, &b, 0, 2);
        for (g, w) in tape.value(s).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn stacked_on_single_token_equals_plain_pcnn() {
        let mut r = rng(11);
        let ps = attn_params(3, &mut r);
        let x = uniform(&[3, 1], 1.0, &mut r);
        let w = uniform(&[2, 3, 3], 1.0, &mut r);
        let b = uniform(&[2], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pc = PcnnParams { w_c: tape.param(&w), b_c: tape.param(&b) };
        let at = SelfAttnParams {
            w_a1: tape.param(&ps[0]),
            b_a1: tape.param(&ps[1]),
            w_a2: tape.param(&ps[2]),
            b_a2: tape.param(&ps[3]),
        };
        let s = stacked_encode(&mut tape, xv, 0, 0, &pc, &at, Activation::Relu, false).unwrap();
        assert_eq!(tape.value(s), &pcnn_run(&x, &w, &b, 0, 0).unwrap());
    }

    #[test]
    fn stacked_gradients_match_finite_differences() {
        let mut r = rng(10);
        let mut inputs = attn_params(3, &mut r);
        inputs.push(uniform(&[2, 3, 3], 1.0, &mut r));
        inputs.push(uniform(&[2], 1.0, &mut r));
        inputs.push(uniform(&[3, 5], 1.0, &mut r));
        for residual in [false, true] {
            let err = fd_check(inputs.clone(), |t, v| {
                let at = SelfAttnParams { w_a1: v[0], b_a1: v[1], w_a2: v[2], b_a2: v[3] };
                let pc = PcnnParams { w_c: v[4], b_c: v[5] };
                stacked_encode(t, v[6], 1, 3, &pc, &at, Activation::Tanh, residual).unwrap()
            });
            assert!(err < 1e-6, "residual={residual}: {err}");
        }
    }
}
