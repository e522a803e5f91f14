//! Bag-level aggregation of sentence representations.

use crate::encoders::Activation;
use crate::error::{Result, SegError};
use crate::numerics::{ParamId, Tape, Var};

#[derive(Clone, Copy, Debug)]
pub struct SelectiveGateParams<H> {
    /// `[3·d_c, d_h]`, the output layer.
    pub w_sg1: H,
    /// `[3·d_c]`
    pub b_sg1: H,
    /// `[d_h, d_h]`, the hidden layer.
    pub w_sg2: H,
    /// `[d_h]`
    pub b_sg2: H,
}

/// Bilinear selective attention: `score_j = s_jᵀ B q_r` with one query row
/// per relation.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveAttnParams<H> {
    /// `[|C|, 3·d_c]`
    pub query: H,
    /// `[3·d_c, 3·d_c]`
    pub bilinear: H,
}

impl SelectiveGateParams<ParamId> {
    pub fn on_tape(&self, leaves: &[Var]) -> SelectiveGateParams<Var> {
        SelectiveGateParams {
            w_sg1: leaves[self.w_sg1.index()],
            b_sg1: leaves[self.b_sg1.index()],
            w_sg2: leaves[self.w_sg2.index()],
            b_sg2: leaves[self.b_sg2.index()],
        }
    }
}

impl SelectiveAttnParams<ParamId> {
    pub fn on_tape(&self, leaves: &[Var]) -> SelectiveAttnParams<Var> {
        SelectiveAttnParams {
            query: leaves[self.query.index()],
            bilinear: leaves[self.bilinear.index()],
        }
    }
}

fn nonempty(xs: &[Var], what: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(SegError::Data(format!("{what}: empty bag")));
    }
    Ok(())
}

/// Per-sentence gate `g_j = sigmoid(W_sg1 σ(W_sg2 u_j + b_sg2) + b_sg1)`.
/// With `scalar` set, each gate is replaced by the mean of its components,
/// broadcast back to full width.
pub fn gate_values(
    tape: &mut Tape<'_>,
    us: &[Var],
    p: &SelectiveGateParams<Var>,
    act: Activation,
    scalar: bool,
) -> Result<Vec<Var>> {
    nonempty(us, "gate_values")?;
    us.iter()
        .map(|&u| {
            let h = tape.affine(p.w_sg2, u, p.b_sg2)?;
            let h = act.apply(tape, h);
            let pre = tape.affine(p.w_sg1, h, p.b_sg1)?;
            let g = tape.sigmoid(pre);
            if scalar {
                let shape = tape.value(g).shape().to_vec();
                let m = tape.mean_all(g);
                tape.expand(m, &shape)
            } else {
                Ok(g)
            }
        })
        .collect()
}

/// `c = (1/m) Σ_j g_j ⊙ s_j`
pub fn gate_aggregate(tape: &mut Tape<'_>, ss: &[Var], gs: &[Var]) -> Result<Var> {
    nonempty(ss, "gate_aggregate")?;
    if ss.len() != gs.len() {
        return Err(SegError::Data(format!(
            "gate_aggregate: {} sentences but {} gates",
            ss.len(),
            gs.len()
        )));
    }
    let gated = ss
        .iter()
        .zip(gs)
        .map(|(&s, &g)| tape.mul(g, s))
        .collect::<Result<Vec<_>>>()?;
    mean_aggregate(tape, &gated)
}

/// `c = (1/m) Σ_j s_j`
pub fn mean_aggregate(tape: &mut Tape<'_>, ss: &[Var]) -> Result<Var> {
    nonempty(ss, "mean_aggregate")?;
    let stacked = tape.stack_columns(ss)?;
    let sum = tape.sum_axis(stacked, 1)?;
    Ok(tape.scale(sum, 1.0 / ss.len() as f64))
}

/// Mean of `[s_j; u_j]`.
pub fn concat_aggregate(tape: &mut Tape<'_>, ss: &[Var], us: &[Var]) -> Result<Var> {
    nonempty(ss, "concat_aggregate")?;
    let joined = ss
        .iter()
        .zip(us)
        .map(|(&s, &u)| tape.concat(&[s, u]))
        .collect::<Result<Vec<_>>>()?;
    mean_aggregate(tape, &joined)
}

/// Attention over sentences queried by `relation`. Returns the bag vector
/// and the attention weights (`[m]`).
pub fn selective_attention_aggregate(
    tape: &mut Tape<'_>,
    ss: &[Var],
    relation: usize,
    p: &SelectiveAttnParams<Var>,
) -> Result<(Var, Var)> {
    nonempty(ss, "selective_attention_aggregate")?;
    let q = tape.select_row(p.query, relation)?;
    let bq = tape.matmul(p.bilinear, q)?;
    let stacked = tape.stack_columns(ss)?;
    let st = tape.transpose(stacked)?;
    let scores = tape.matmul(st, bq)?;
    let weights = tape.softmax(scores, 0)?;
    let c = tape.matmul(stacked, weights)?;
    Ok((c, weights))
}

/// Selective attention over the gated representations `g_j ⊙ s_j`.
pub fn gate_plus_attention_aggregate(
    tape: &mut Tape<'_>,
    ss: &[Var],
    gs: &[Var],
    relation: usize,
    p: &SelectiveAttnParams<Var>,
) -> Result<(Var, Var)> {
    let gated = ss
        .iter()
        .zip(gs)
        .map(|(&s, &g)| tape.mul(g, s))
        .collect::<Result<Vec<_>>>()?;
    selective_attention_aggregate(tape, &gated, relation, p)
}
