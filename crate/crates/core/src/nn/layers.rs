//! Differentiable building blocks of the predictor, expressed as tape
//! subgraphs. Each function takes the node ids of its parameters so the same
//! code serves the target encoder, the neighbor encoder, and the decoder.

use crate::error::{Error, Result};
use crate::nn::tape::{NodeId, Tape};

/// Negative slope of the input-embedding nonlinearity.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Epsilon inside the layer-norm variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Copy, Clone)]
pub struct LinearIds {
    pub w: NodeId,
    pub b: NodeId,
}

#[derive(Copy, Clone)]
pub struct LstmIds {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

/// Bias-free Q/K/V/output projection matrices.
#[derive(Copy, Clone)]
pub struct AttentionIds {
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    pub o: NodeId,
}

#[derive(Copy, Clone)]
pub struct TransformerIds {
    pub attn: AttentionIds,
    pub ffn1: LinearIds,
    pub ffn2: LinearIds,
    pub norm1_gamma: NodeId,
    pub norm1_beta: NodeId,
    pub norm2_gamma: NodeId,
    pub norm2_beta: NodeId,
}

/// y = x @ W^T + b for x `[m,in]`, W `[out,in]`, b `[out]`.
pub fn linear(tape: &mut Tape, x: NodeId, p: LinearIds) -> NodeId {
    let xw = tape.matmul_transb(x, p.w);
    tape.add_row_broadcast(xw, p.b)
}

/// Per-step input embedding: leaky-ReLU(points @ W^T + b) on `[T,2]` input.
pub fn embed(tape: &mut Tape, points: NodeId, p: LinearIds) -> NodeId {
    let z = linear(tape, points, p);
    tape.leaky_relu(z, LEAKY_SLOPE)
}

/// One LSTM step. Gate blocks in the fused weight matrices are ordered
/// (input, forget, cell, output); i, f, o are sigmoid gates and the cell
/// candidate is tanh.
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    p: LstmIds,
    hidden: usize,
) -> Result<(NodeId, NodeId)> {
    let wx = tape.value(p.w_x);
    if wx.rows() != 4 * hidden || wx.cols() != tape.value(x).cols() {
        return Err(Error::shape(
            "lstm_cell",
            format!("w_x [{}, {}]", 4 * hidden, tape.value(x).cols()),
            format!("{:?}", wx.shape().to_vec()),
        ));
    }
    let xg = tape.matmul_transb(x, p.w_x);
    let hg = tape.matmul_transb(h, p.w_h);
    let pre = tape.add(xg, hg);
    let pre = tape.add_row_broadcast(pre, p.b);

    let i_pre = tape.slice_cols(pre, 0, hidden);
    let f_pre = tape.slice_cols(pre, hidden, 2 * hidden);
    let g_pre = tape.slice_cols(pre, 2 * hidden, 3 * hidden);
    let o_pre = tape.slice_cols(pre, 3 * hidden, 4 * hidden);

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let fc = tape.mul_elem(f, c);
    let ig = tape.mul_elem(i, g);
    let c_next = tape.add(fc, ig);
    let c_act = tape.tanh(c_next);
    let h_next = tape.mul_elem(o, c_act);
    Ok((h_next, c_next))
}

/// Run the cell across a `[T,d_in]` sequence from a zero state and return all
/// hidden states stacked as `[T,hidden]`.
pub fn lstm_encode(
    tape: &mut Tape,
    sequence: NodeId,
    p: LstmIds,
    hidden: usize,
) -> Result<NodeId> {
    let steps = tape.value(sequence).rows();
    if steps == 0 {
        return Err(Error::EmptySequence("lstm_encode"));
    }
    let mut h = tape.leaf(crate::nn::tensor::Tensor::zeros(&[1, hidden]));
    let mut c = tape.leaf(crate::nn::tensor::Tensor::zeros(&[1, hidden]));
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = tape.row(sequence, t);
        let (hn, cn) = lstm_cell(tape, x, h, c, p, hidden)?;
        h = hn;
        c = cn;
        states.push(h);
    }
    Ok(tape.concat_rows(&states))
}

/// Multi-head scaled dot-product self-attention over `[T,d]`; `d` must be
/// divisible by `heads`.
pub fn multi_head_attention(
    tape: &mut Tape,
    input: NodeId,
    p: AttentionIds,
    heads: usize,
) -> Result<NodeId> {
    let d = tape.value(input).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::shape(
            "multi_head_attention",
            format!("model dim divisible by {heads} heads"),
            format!("{d}"),
        ));
    }
    let dk = d / heads;
    let q = tape.matmul_transb(input, p.q);
    let k = tape.matmul_transb(input, p.k);
    let v = tape.matmul_transb(input, p.v);

    let mut head_outputs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (from, to) = (head * dk, (head + 1) * dk);
        let qh = tape.slice_cols(q, from, to);
        let kh = tape.slice_cols(k, from, to);
        let vh = tape.slice_cols(v, from, to);
        let scores = tape.matmul_transb(qh, kh);
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(weights, vh));
    }
    let merged = tape.concat_cols(&head_outputs);
    Ok(tape.matmul_transb(merged, p.o))
}

/// Post-norm transformer encoder layer:
/// `Z = LN2(U + FFN(U))` with `U = LN1(H + MHA(H))` and
/// `FFN(u) = relu(u W1^T + b1) W2^T + b2`. No dropout, no positional
/// encoding; the LSTM upstream already orders the sequence.
pub fn transformer_encoder_layer(
    tape: &mut Tape,
    input: NodeId,
    p: TransformerIds,
    heads: usize,
) -> Result<NodeId> {
    let attended = multi_head_attention(tape, input, p.attn, heads)?;
    let res1 = tape.add(input, attended);
    let n1 = tape.layer_norm_rows(res1, LAYER_NORM_EPS);
    let n1 = tape.mul_row_broadcast(n1, p.norm1_gamma);
    let u = tape.add_row_broadcast(n1, p.norm1_beta);

    let f1 = linear(tape, u, p.ffn1);
    let f1 = tape.relu(f1);
    let f2 = linear(tape, f1, p.ffn2);
    let res2 = tape.add(u, f2);
    let n2 = tape.layer_norm_rows(res2, LAYER_NORM_EPS);
    let n2 = tape.mul_row_broadcast(n2, p.norm2_gamma);
    Ok(tape.add_row_broadcast(n2, p.norm2_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Tensor;

    fn leaf_zeros(tape: &mut Tape, shape: &[usize]) -> NodeId {
        tape.leaf(Tensor::zeros(shape))
    }

    #[test]
    fn embed_zero_params_zero_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, -7.0]).unwrap());
        let w = leaf_zeros(&mut tape, &[4, 2]);
        let b = leaf_zeros(&mut tape, &[4]);
        let y = embed(&mut tape, x, LinearIds { w, b });
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_identity_rows_shows_leaky_slope() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![1.0, -2.0]).unwrap());
        // First two rows pick out the coordinates, the rest stay zero.
        let mut w = Tensor::zeros(&[5, 2]);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let w = tape.leaf(w);
        let b = leaf_zeros(&mut tape, &[5]);
        let y = embed(&mut tape, x, LinearIds { w, b });
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert!((v[1] - (-0.2)).abs() < 1e-15);
        assert!(v[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lstm_cell_zero_everything_stays_zero() {
        let mut tape = Tape::new();
        let x = leaf_zeros(&mut tape, &[1, 3]);
        let h = leaf_zeros(&mut tape, &[1, 4]);
        let c = leaf_zeros(&mut tape, &[1, 4]);
        let p = LstmIds {
            w_x: leaf_zeros(&mut tape, &[16, 3]),
            w_h: leaf_zeros(&mut tape, &[16, 4]),
            b: leaf_zeros(&mut tape, &[16]),
        };
        let (hn, cn) = lstm_cell(&mut tape, x, h, c, p, 4).unwrap();
        assert!(tape.value(hn).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(cn).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_carries_memory() {
        let hidden = 3;
        let mut tape = Tape::new();
        let x = leaf_zeros(&mut tape, &[1, 2]);
        let h = leaf_zeros(&mut tape, &[1, hidden]);
        let c = tape.leaf(Tensor::from_vec(&[1, hidden], vec![0.3, -1.2, 2.0]).unwrap());
        // Forget bias +100 (open), input/output biases -100 (closed).
        let mut b = vec![0.0; 4 * hidden];
        for i in 0..hidden {
            b[i] = -100.0;
            b[hidden + i] = 100.0;
            b[3 * hidden + i] = -100.0;
        }
        let p = LstmIds {
            w_x: leaf_zeros(&mut tape, &[4 * hidden, 2]),
            w_h: leaf_zeros(&mut tape, &[4 * hidden, hidden]),
            b: tape.leaf(Tensor::from_vec(&[4 * hidden], b).unwrap()),
        };
        let (_, cn) = lstm_cell(&mut tape, x, h, c, p, hidden).unwrap();
        let c_in = [0.3, -1.2, 2.0];
        for (got, want) in tape.value(cn).data().iter().zip(c_in) {
            assert!((got - want).abs() < 1e-12, "carry {got} vs {want}");
        }
    }

    #[test]
    fn lstm_encode_rejects_empty_sequences() {
        let mut tape = Tape::new();
        let seq = leaf_zeros(&mut tape, &[0, 2]);
        let p = LstmIds {
            w_x: leaf_zeros(&mut tape, &[16, 2]),
            w_h: leaf_zeros(&mut tape, &[16, 4]),
            b: leaf_zeros(&mut tape, &[16]),
        };
        assert!(matches!(
            lstm_encode(&mut tape, seq, p, 4),
            Err(crate::error::Error::EmptySequence(_))
        ));
    }

    #[test]
    fn lstm_encode_equals_chained_cells() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hidden = 4;
        let mut rand_leaf = |tape: &mut Tape, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let t =
                Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
            tape.leaf(t)
        };
        let mut tape = Tape::new();
        let seq = rand_leaf(&mut tape, &[3, 2]);
        let p = LstmIds {
            w_x: rand_leaf(&mut tape, &[4 * hidden, 2]),
            w_h: rand_leaf(&mut tape, &[4 * hidden, hidden]),
            b: rand_leaf(&mut tape, &[4 * hidden]),
        };
        let enc = lstm_encode(&mut tape, seq, p, hidden).unwrap();

        let mut h = leaf_zeros(&mut tape, &[1, hidden]);
        let mut c = leaf_zeros(&mut tape, &[1, hidden]);
        for t in 0..3 {
            let x = tape.row(seq, t);
            let (hn, cn) = lstm_cell(&mut tape, x, h, c, p, hidden).unwrap();
            h = hn;
            c = cn;
            let enc_row = tape.value(enc).row(t).to_vec();
            assert_eq!(enc_row, tape.value(h).data());
        }
    }

    #[test]
    fn attention_single_step_is_projected_value() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let mut rand_leaf = |tape: &mut Tape, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let t =
                Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            tape.leaf(t)
        };
        let mut tape = Tape::new();
        let input = rand_leaf(&mut tape, &[1, d]);
        let ids = AttentionIds {
            q: rand_leaf(&mut tape, &[d, d]),
            k: rand_leaf(&mut tape, &[d, d]),
            v: rand_leaf(&mut tape, &[d, d]),
            o: rand_leaf(&mut tape, &[d, d]),
        };
        let out = multi_head_attention(&mut tape, input, ids, 2).unwrap();
        // With one timestep the attention weight is 1, so the output is just
        // the output projection of V.
        let v = tape.matmul_transb(input, ids.v);
        let expect = tape.matmul_transb(v, ids.o);
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_keys_averages_values() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (t_steps, d) = (5, 4);
        let mut rand_leaf = |tape: &mut Tape, shape: &[usize]| {
            let n: usize = shape.iter().product();
            let t =
                Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            tape.leaf(t)
        };
        let mut tape = Tape::new();
        let input = rand_leaf(&mut tape, &[t_steps, d]);
        let zero_w = tape.leaf(Tensor::zeros(&[d, d]));
        let ids = AttentionIds {
            q: rand_leaf(&mut tape, &[d, d]),
            k: zero_w,
            v: rand_leaf(&mut tape, &[d, d]),
            o: rand_leaf(&mut tape, &[d, d]),
        };
        let out = multi_head_attention(&mut tape, input, ids, 2).unwrap();
        // Zero keys give uniform weights, so every row equals the projected
        // mean of the value rows.
        let v = tape.matmul_transb(input, ids.v);
        let vv = tape.value(v).clone();
        let mut mean = vec![0.0; d];
        for r in 0..t_steps {
            for c in 0..d {
                mean[c] += vv.at(r, c) / t_steps as f64;
            }
        }
        let mean_leaf = tape.leaf(Tensor::from_vec(&[1, d], mean).unwrap());
        let projected = tape.matmul_transb(mean_leaf, ids.o);
        for r in 0..t_steps {
            for (a, b) in tape.value(out).row(r).iter().zip(tape.value(projected).data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transformer_zero_projections_is_double_layer_norm() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (t_steps, d, f) = (4, 6, 8);
        let n = t_steps * d;
        let input_t =
            Tensor::from_vec(&[t_steps, d], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        let mut tape = Tape::new();
        let input = tape.leaf(input_t.clone());
        let zw = tape.leaf(Tensor::zeros(&[d, d]));
        let ones = tape.leaf(Tensor::from_vec(&[d], vec![1.0; d]).unwrap());
        let zeros = tape.leaf(Tensor::zeros(&[d]));
        let w1 = tape.leaf(Tensor::zeros(&[f, d]));
        let b1 = tape.leaf(Tensor::zeros(&[f]));
        let w2 = tape.leaf(Tensor::zeros(&[d, f]));
        let b2 = tape.leaf(Tensor::zeros(&[d]));
        let ids = TransformerIds {
            attn: AttentionIds { q: zw, k: zw, v: zw, o: zw },
            ffn1: LinearIds { w: w1, b: b1 },
            ffn2: LinearIds { w: w2, b: b2 },
            norm1_gamma: ones,
            norm1_beta: zeros,
            norm2_gamma: ones,
            norm2_beta: zeros,
        };
        let out = transformer_encoder_layer(&mut tape, input, ids, 2).unwrap();

        let expect_id = tape.leaf(input_t);
        let ln1 = tape.layer_norm_rows(expect_id, LAYER_NORM_EPS);
        let ln2 = tape.layer_norm_rows(ln1, LAYER_NORM_EPS);
        for (a, b) in tape.value(out).data().iter().zip(tape.value(ln2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
