//! Built-in verification: finite-difference gradient checks for every
//! differentiable op and the assembled model, a brute-force oracle for the
//! masked scatter, and the grid partition sweep. The CLI `selfcheck`
//! subcommand and the acceptance suite both run these.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::samples::{grid_cell_index, NeighborHistory, TrajectorySample, GRID_CELLS, GRID_CHANNELS};
use crate::error::{Error, Result};
use crate::model::{batch_loss_and_grads, dataset_loss, ModelConfig, Variant};
use crate::nn::gradcheck::check_gradients;
use crate::nn::layers::{self, AttentionIds, LinearIds, LstmIds, TransformerIds};
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;
use crate::social::{masked_scatter, OccupancyMask, SocialEncoding};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect()).expect("shape")
}

/// Gradient-check one op: register the store as leaves, build the op with
/// `build`, take sum-of-squares of its output as the loss.
fn check_op<F>(store: &mut ParamStore, max_coords: usize, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &HashMap<String, NodeId>) -> Result<NodeId>,
{
    check_gradients(
        |store, accumulate| {
            let mut tape = Tape::new();
            let mut ids = HashMap::new();
            let mut nodes = Vec::new();
            for i in 0..store.len() {
                let id = tape.leaf(store.value_at(i).clone());
                ids.insert(store.name(i).to_string(), id);
                nodes.push(id);
            }
            let out = build(&mut tape, &ids)?;
            let loss = tape.sum_squares(out);
            let value = tape.value(loss).data()[0];
            if accumulate {
                let grads = tape.backward(loss);
                for (i, node) in nodes.iter().enumerate() {
                    let g = &grads[node.index()];
                    for (d, s) in store.grad_at_mut(i).data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            Ok(value)
        },
        store,
        1e-5,
        max_coords,
        77,
    )
}

/// Max relative gradient error per differentiable component, ending with the
/// assembled model and its training loss on a tiny configuration.
pub fn gradient_suite() -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut results = Vec::new();

    // Input embedding.
    {
        let mut store = ParamStore::new();
        store.insert("w", rand_tensor(&mut rng, &[4, 2]));
        store.insert("b", rand_tensor(&mut rng, &[4]));
        let x = rand_tensor(&mut rng, &[3, 2]);
        let err = check_op(&mut store, 400, |tape, ids| {
            let xi = tape.leaf(x.clone());
            Ok(layers::embed(tape, xi, LinearIds { w: ids["w"], b: ids["b"] }))
        })?;
        results.push(("embed".to_string(), err));
    }

    // One LSTM cell; the loss covers both the hidden and the cell state.
    {
        let hidden = 4;
        let mut store = ParamStore::new();
        store.insert("w_x", rand_tensor(&mut rng, &[4 * hidden, 3]));
        store.insert("w_h", rand_tensor(&mut rng, &[4 * hidden, hidden]));
        store.insert("b", rand_tensor(&mut rng, &[4 * hidden]));
        let x = rand_tensor(&mut rng, &[1, 3]);
        let h = rand_tensor(&mut rng, &[1, hidden]);
        let c = rand_tensor(&mut rng, &[1, hidden]);
        let err = check_op(&mut store, 400, |tape, ids| {
            let xi = tape.leaf(x.clone());
            let hi = tape.leaf(h.clone());
            let ci = tape.leaf(c.clone());
            let p = LstmIds { w_x: ids["w_x"], w_h: ids["w_h"], b: ids["b"] };
            let (hn, cn) = layers::lstm_cell(tape, xi, hi, ci, p, hidden)?;
            Ok(tape.concat_cols(&[hn, cn]))
        })?;
        results.push(("lstm_cell".to_string(), err));
    }

    // LSTM over a sequence.
    {
        let hidden = 4;
        let mut store = ParamStore::new();
        store.insert("w_x", rand_tensor(&mut rng, &[4 * hidden, 2]));
        store.insert("w_h", rand_tensor(&mut rng, &[4 * hidden, hidden]));
        store.insert("b", rand_tensor(&mut rng, &[4 * hidden]));
        let seq = rand_tensor(&mut rng, &[5, 2]);
        let err = check_op(&mut store, 400, |tape, ids| {
            let si = tape.leaf(seq.clone());
            let p = LstmIds { w_x: ids["w_x"], w_h: ids["w_h"], b: ids["b"] };
            layers::lstm_encode(tape, si, p, hidden)
        })?;
        results.push(("lstm_encode".to_string(), err));
    }

    // Multi-head attention.
    {
        let d = 8;
        let mut store = ParamStore::new();
        for name in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(name, rand_tensor(&mut rng, &[d, d]));
        }
        let h = rand_tensor(&mut rng, &[4, d]);
        let err = check_op(&mut store, 400, |tape, ids| {
            let hi = tape.leaf(h.clone());
            let p = AttentionIds {
                q: ids["w_q"],
                k: ids["w_k"],
                v: ids["w_v"],
                o: ids["w_o"],
            };
            layers::multi_head_attention(tape, hi, p, 2)
        })?;
        results.push(("multi_head_attention".to_string(), err));
    }

    // Full transformer encoder layer.
    {
        let (d, f) = (8, 12);
        let mut store = ParamStore::new();
        for name in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert(name, rand_tensor(&mut rng, &[d, d]));
        }
        store.insert("ffn_w1", rand_tensor(&mut rng, &[f, d]));
        store.insert("ffn_b1", rand_tensor(&mut rng, &[f]));
        store.insert("ffn_w2", rand_tensor(&mut rng, &[d, f]));
        store.insert("ffn_b2", rand_tensor(&mut rng, &[d]));
        store.insert("g1", rand_tensor(&mut rng, &[d]));
        store.insert("beta1", rand_tensor(&mut rng, &[d]));
        store.insert("g2", rand_tensor(&mut rng, &[d]));
        store.insert("beta2", rand_tensor(&mut rng, &[d]));
        let h = rand_tensor(&mut rng, &[4, d]);
        let err = check_op(&mut store, 500, |tape, ids| {
            let hi = tape.leaf(h.clone());
            let p = TransformerIds {
                attn: AttentionIds {
                    q: ids["w_q"],
                    k: ids["w_k"],
                    v: ids["w_v"],
                    o: ids["w_o"],
                },
                ffn1: LinearIds { w: ids["ffn_w1"], b: ids["ffn_b1"] },
                ffn2: LinearIds { w: ids["ffn_w2"], b: ids["ffn_b2"] },
                norm1_gamma: ids["g1"],
                norm1_beta: ids["beta1"],
                norm2_gamma: ids["g2"],
                norm2_beta: ids["beta2"],
            };
            layers::transformer_encoder_layer(tape, hi, p, 2)
        })?;
        results.push(("transformer_encoder_layer".to_string(), err));
    }

    // Assembled model with the training loss, tiny dimensions.
    {
        let cfg = ModelConfig::tiny(Variant::Full);
        let mut store = crate::nn::params::init_params(&cfg, 5);
        let batch = tiny_batch(&cfg, 3);
        let err = check_gradients(
            |store, accumulate| {
                if accumulate {
                    batch_loss_and_grads(store, &cfg, &batch)
                } else {
                    dataset_loss(store, &cfg, &batch)
                }
            },
            &mut store,
            1e-5,
            300,
            99,
        )?;
        results.push(("model_with_loss".to_string(), err));
    }

    Ok(results)
}

fn tiny_batch(cfg: &ModelConfig, n: usize) -> Vec<TrajectorySample> {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    (0..n)
        .map(|i| {
            let cells: Vec<(u8, u8)> = match i % 3 {
                0 => vec![],
                1 => vec![(0, 1)],
                _ => vec![(0, 0), (2, 2)],
            };
            let mask = OccupancyMask::from_cells(
                cfg.grid_channels,
                cfg.grid_cells,
                cells.iter().map(|&(c, g)| (c as usize, g as usize)),
            )
            .expect("distinct cells");
            let mut history = |steps: usize| -> Vec<[f64; 2]> {
                (0..steps)
                    .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect()
            };
            TrajectorySample {
                vehicle_id: i as u64,
                anchor_frame: 0,
                target_history: history(cfg.history_steps),
                neighbor_histories: cells
                    .iter()
                    .map(|&(channel, cell)| NeighborHistory {
                        channel,
                        cell,
                        history: history(cfg.history_steps),
                    })
                    .collect(),
                mask,
                future: history(cfg.horizon),
            }
        })
        .collect()
}

/// Compare the scatter against an independent walk over every grid cell.
pub fn scatter_oracle(cases: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let dim = 1 + (case % 7);
        let mut cells = Vec::new();
        for c in 0..GRID_CHANNELS {
            for g in 0..GRID_CELLS {
                if rng.gen_bool(0.25) {
                    cells.push((c, g));
                }
            }
        }
        let mask = OccupancyMask::from_cells(GRID_CHANNELS, GRID_CELLS, cells)?;
        let n = mask.popcount();
        let enc = Tensor::from_vec(
            &[n, dim],
            (0..n * dim).map(|_| rng.gen_range(-10.0..10.0)).collect(),
        )?;
        let got = masked_scatter(&mask, &enc)?;

        // Reference: iterate cells in row-major order, consuming encoding
        // rows in sequence for set bits and zeros otherwise.
        let mut expect = SocialEncoding::zeros(GRID_CHANNELS, GRID_CELLS, dim);
        let mut next = 0usize;
        for c in 0..GRID_CHANNELS {
            for g in 0..GRID_CELLS {
                if mask.get(c, g) {
                    let p = c * GRID_CELLS + g;
                    expect.grid_mut().data_mut()[p * dim..(p + 1) * dim]
                        .copy_from_slice(enc.row(next));
                    next += 1;
                }
            }
        }
        if got != expect {
            return Err(Error::MaskIntegrity(format!(
                "scatter mismatch against brute-force oracle in case {case}"
            )));
        }
        for c in 0..GRID_CHANNELS {
            for g in 0..GRID_CELLS {
                if !mask.get(c, g) && got.cell(c, g).iter().any(|&v| v != 0.0) {
                    return Err(Error::MaskIntegrity(format!(
                        "non-zero unoccupied cell ({c},{g}) in case {case}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Sweep delta_y over [-90, 90) and check the cell map is a partition with
/// monotone boundaries.
pub fn grid_partition_sweep(step_m: f64) -> Result<()> {
    for delta_lane in -1i64..=1 {
        let mut last_cell: Option<usize> = None;
        let mut seen = [false; GRID_CELLS];
        let mut k = 0usize;
        loop {
            let delta_y = -90.0 + step_m * k as f64;
            if delta_y >= 90.0 {
                break;
            }
            let Some((channel, cell)) = grid_cell_index(delta_lane, delta_y) else {
                return Err(Error::Config(format!(
                    "no cell for in-range input ({delta_lane}, {delta_y})"
                )));
            };
            if channel != (delta_lane + 1) as usize || cell >= GRID_CELLS {
                return Err(Error::Config(format!(
                    "cell ({channel},{cell}) out of bounds for ({delta_lane}, {delta_y})"
                )));
            }
            if let Some(prev) = last_cell {
                if cell < prev || cell > prev + 1 {
                    return Err(Error::Config(format!(
                        "non-monotone boundary at delta_y {delta_y}: {prev} -> {cell}"
                    )));
                }
            }
            seen[cell] = true;
            last_cell = Some(cell);
            k += 1;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Config("sweep did not cover every cell".into()));
        }
    }
    // Outside the window nothing is returned.
    for (lane, dy) in [(2i64, 0.0), (-2, 0.0), (0, 90.0), (0, -90.0 - 1e-9), (0, 1e9)] {
        if grid_cell_index(lane, dy).is_some() {
            return Err(Error::Config(format!("({lane}, {dy}) should be outside the grid")));
        }
    }
    Ok(())
}
