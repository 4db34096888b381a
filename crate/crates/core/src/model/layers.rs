use super::config::HeadMode;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Feature transform of one graph convolution.
#[derive(Clone, Copy, Debug)]
pub enum GateWeights {
    /// Per-node weights `[N,Cin,Fout]` and biases `[N,Fout]`, materialised
    /// from the shared pools through the node embedding.
    NodeAdaptive { weight: Var, bias: Var },
    /// One `[Cin,Fout]` matrix and `[Fout]` bias for every node.
    Shared { weight: Var, bias: Var },
}

impl GateWeights {
    /// `W = E·W_pool` reshaped to `[N,Cin,Fout]` and `b = E·b_pool`.
    pub fn from_pools<T: Real>(
        tape: &mut Tape<T>,
        embedding: Var,
        weight_pool: Var,
        bias_pool: Var,
    ) -> Result<Self> {
        let (n, d) = (tape.shape(embedding)[0], tape.shape(embedding)[1]);
        let ps = tape.shape(weight_pool).to_vec();
        if ps.len() != 3 || ps[0] != d {
            return Err(Error::dim("weight_pool", tape.shape(embedding), &ps));
        }
        let flat = tape.reshape(weight_pool, &[d, ps[1] * ps[2]])?;
        let w = tape.matmul(embedding, flat)?;
        let weight = tape.reshape(w, &[n, ps[1], ps[2]])?;
        let bias = tape.matmul(embedding, bias_pool)?;
        Ok(GateWeights::NodeAdaptive { weight, bias })
    }

    fn out_dim<T: Real>(&self, tape: &Tape<T>) -> usize {
        match *self {
            GateWeights::NodeAdaptive { weight, .. } => tape.shape(weight)[2],
            GateWeights::Shared { weight, .. } => tape.shape(weight)[1],
        }
    }
}

/// Applies `(I + Ã)` `layers` times to `x: [..,N,C]`; identity when `operator` is `None`.
pub(crate) fn mix<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    operator: Option<Var>,
    layers: usize,
) -> Result<Var> {
    let mut out = x;
    if let Some(op) = operator {
        for _ in 0..layers {
            out = tape.propagate(op, out)?;
        }
    }
    Ok(out)
}

pub(crate) fn transform<T: Real>(
    tape: &mut Tape<T>,
    mixed: Var,
    gate: &GateWeights,
) -> Result<Var> {
    match *gate {
        GateWeights::NodeAdaptive { weight, bias } => {
            let z = tape.batched_node_contract(mixed, weight)?;
            tape.add_bias(z, bias)
        }
        GateWeights::Shared { weight, bias } => {
            let shape = tape.shape(mixed).to_vec();
            let cin = *shape.last().unwrap();
            let rows = tape.value(mixed).numel() / cin.max(1);
            let flat = tape.reshape(mixed, &[rows, cin])?;
            let z = tape.matmul(flat, weight)?;
            let z = tape.add_bias(z, bias)?;
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = gate.out_dim(tape);
            tape.reshape(z, &out_shape)
        }
    }
}

/// Graph convolution `(I + Ã)·x` followed by the (node-adaptive) affine map.
///
/// `x` is `[B,N,Cin]`; `operator` is the precomputed `I + Ã`, or `None` for
/// no spatial mixing. Returns `[B,N,Fout]`.
pub fn adaptive_gcn<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    operator: Option<Var>,
    layers: usize,
    gate: &GateWeights,
) -> Result<Var> {
    let mixed = mix(tape, x, operator, layers)?;
    transform(tape, mixed, gate)
}

/// The three gate transforms of a recurrent cell.
#[derive(Clone, Copy, Debug)]
pub struct CellWeights {
    pub update: GateWeights,
    pub reset: GateWeights,
    pub candidate: GateWeights,
}

/// One recurrent step:
///
/// ```text
/// z = σ(gcn_z([x, h]))      r = σ(gcn_r([x, h]))
/// c = tanh(gcn_c([x, r⊙h]))
/// h' = z⊙h + (1 - z)⊙c
/// ```
pub fn stfgrn_cell<T: Real>(
    tape: &mut Tape<T>,
    x_t: Var,
    h_prev: Var,
    operator: Option<Var>,
    layers: usize,
    cell: &CellWeights,
) -> Result<Var> {
    let xh = tape.concat_last(x_t, h_prev)?;
    // Both gates read the same propagated input.
    let mixed = mix(tape, xh, operator, layers)?;
    let z = transform(tape, mixed, &cell.update)?;
    let z = tape.sigmoid(z);
    let r = transform(tape, mixed, &cell.reset)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_prev)?;
    let xrh = tape.concat_last(x_t, rh)?;
    let c = adaptive_gcn(tape, xrh, operator, layers, &cell.candidate)?;
    let c = tape.tanh(c);
    let keep = tape.mul(z, h_prev)?;
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.mul(one_minus_z, c)?;
    tape.add(keep, fresh)
}

/// Runs the cell over `x: [B,T,N,C]` forward in time and, when `reverse` is
/// given, backward in time with its own weights, from zero initial states.
///
/// Returns `[B,N,T,F']`, or `[B,N,T,2F']` with the reverse outputs (aligned
/// to their original time positions) concatenated after the forward ones.
pub fn encode_bidirectional<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    operator: Option<Var>,
    layers: usize,
    forward: &CellWeights,
    reverse: Option<&CellWeights>,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] == 0 {
        return Err(Error::dim("encode_bidirectional", &s, &[0, 1, 0, 0]));
    }
    let (b, t, n) = (s[0], s[1], s[2]);
    let hidden = forward.update.out_dim(tape);
    let steps: Vec<Var> = (0..t)
        .map(|i| tape.select(x, 1, i))
        .collect::<Result<_>>()?;
    let h0 = tape.constant(Tensor::zeros([b, n, hidden]));

    let run = |tape: &mut Tape<T>, cell: &CellWeights, order: &mut dyn Iterator<Item = usize>| {
        let mut outs = vec![h0; t];
        let mut h = h0;
        for i in order {
            h = stfgrn_cell(tape, steps[i], h, operator, layers, cell)?;
            outs[i] = h;
        }
        tape.stack(&outs, 2)
    };

    let fwd = run(tape, forward, &mut (0..t))?;
    match reverse {
        None => Ok(fwd),
        Some(rev) => {
            let bwd = run(tape, rev, &mut (0..t).rev())?;
            tape.concat_last(fwd, bwd)
        }
    }
}

/// Projections and normalisation of the temporal attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<T> {
    pub query: (Var, Var),
    pub key: (Var, Var),
    pub value: (Var, Var),
    pub norm_gain: Var,
    pub norm_bias: Var,
    pub eps: T,
}

/// Per-node scaled dot-product self-attention across time, with residual
/// connection and layer normalisation. Projections are shared by all nodes.
///
/// `h` is `[B,N,T,D]`. Returns the output `[B,N,T,D]` and the attention
/// weights `[B·N,T,T]`.
pub fn global_attention<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    w: &AttentionWeights<T>,
) -> Result<(Var, Var)> {
    let s = tape.shape(h).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("global_attention", &s, &[0, 0, 0, 0]));
    }
    let (b, n, t, d) = (s[0], s[1], s[2], s[3]);
    let flat = tape.reshape(h, &[b * n * t, d])?;
    let project = |tape: &mut Tape<T>, (weight, bias): (Var, Var)| -> Result<Var> {
        let width = tape.shape(weight)[1];
        let p = tape.matmul(flat, weight)?;
        let p = tape.add_bias(p, bias)?;
        tape.reshape(p, &[b * n, t, width])
    };
    let q = project(tape, w.query)?;
    let k = project(tape, w.key)?;
    let v = project(tape, w.value)?;
    let dk = tape.shape(k)[2];
    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::lit(dk as f64).sqrt());
    let weights = tape.softmax_rows(scores)?;
    let att = tape.batch_matmul(weights, v, false)?;
    let att = tape.reshape(att, &[b, n, t, d])?;
    let res = tape.add(att, h)?;
    let out = tape.layer_norm(res, w.norm_gain, w.norm_bias, w.eps)?;
    Ok((out, weights))
}

#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub weight: Var,
    pub bias: Var,
    pub mode: HeadMode,
}

/// Affine map from `[B,N,T,D]` features to `[B,N,T,1]` forecasts.
pub fn predict_head<T: Real>(tape: &mut Tape<T>, h: Var, head: &HeadWeights) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 4 {
        return Err(Error::dim("predict_head", &s, &[0, 0, 0, 0]));
    }
    let (b, n, t, d) = (s[0], s[1], s[2], s[3]);
    let flat = match head.mode {
        HeadMode::Flatten => tape.reshape(h, &[b * n, t * d])?,
        HeadMode::PerStep => tape.reshape(h, &[b * n * t, d])?,
    };
    let y = tape.matmul(flat, head.weight)?;
    let y = tape.add_bias(y, head.bias)?;
    tape.reshape(y, &[b, n, t, 1])
}
