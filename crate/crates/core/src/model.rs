//! The full predictor: target encoder, neighbor encoder with masked scatter,
//! concatenation, LSTM decoder with a linear head. The `naive_lstm` variant
//! drops the neighbor branch and decodes from the target encoding alone;
//! everything else is identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::fnv1a64;
use crate::data::samples::TrajectorySample;
use crate::error::{Error, Result};
use crate::nn::layers::{
    self, AttentionIds, LinearIds, LstmIds, TransformerIds,
};
use crate::nn::params::{validate_against, ParamStore};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NaiveLstm,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Full => write!(f, "full"),
            Variant::NaiveLstm => write!(f, "naive_lstm"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub history_steps: usize,
    pub horizon: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub decoder_hidden: usize,
    pub grid_channels: usize,
    pub grid_cells: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            history_steps: 15,
            horizon: 5,
            embed_dim: 32,
            hidden_dim: 64,
            ffn_dim: 512,
            heads: 8,
            decoder_hidden: 128,
            grid_channels: 3,
            grid_cells: 13,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn naive() -> Self {
        ModelConfig {
            variant: Variant::NaiveLstm,
            ..Default::default()
        }
    }

    /// Scaled-down dimensions for tests; the wiring is unchanged.
    pub fn tiny(variant: Variant) -> Self {
        ModelConfig {
            history_steps: 3,
            horizon: 2,
            embed_dim: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            heads: 2,
            decoder_hidden: 8,
            grid_channels: 3,
            grid_cells: 3,
            variant,
        }
    }

    /// Width of the decoder input: flattened social grid plus the target
    /// encoding for the full variant, the target encoding alone otherwise.
    pub fn combined_dim(&self) -> usize {
        match self.variant {
            Variant::Full => self.grid_channels * self.grid_cells * self.hidden_dim + self.hidden_dim,
            Variant::NaiveLstm => self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.history_steps,
            self.horizon,
            self.embed_dim,
            self.hidden_dim,
            self.ffn_dim,
            self.heads,
            self.decoder_hidden,
            self.grid_channels,
            self.grid_cells,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Fingerprint used to pair checkpoints with their configuration.
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "model:{},{},{},{},{},{},{},{},{},{}",
            self.history_steps,
            self.horizon,
            self.embed_dim,
            self.hidden_dim,
            self.ffn_dim,
            self.heads,
            self.decoder_hidden,
            self.grid_channels,
            self.grid_cells,
            self.variant,
        );
        fnv1a64(canonical.as_bytes())
    }
}

/// Predicted future positions, anchor-relative like the samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub coords: Vec<[f64; 2]>,
}

/// A forward graph over one parameter snapshot. Parameters are registered as
/// tape leaves once; any number of samples can then be pushed through the
/// same graph before calling [`ModelGraph::grads_into`].
pub struct ModelGraph {
    cfg: ModelConfig,
    tape: Tape,
    param_nodes: Vec<NodeId>,
    by_name: HashMap<String, NodeId>,
}

impl ModelGraph {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        validate_against(cfg, store)?;
        let mut tape = Tape::new();
        let mut param_nodes = Vec::with_capacity(store.len());
        let mut by_name = HashMap::new();
        for i in 0..store.len() {
            let id = tape.leaf(store.value_at(i).clone());
            param_nodes.push(id);
            by_name.insert(store.name(i).to_string(), id);
        }
        Ok(ModelGraph {
            cfg: cfg.clone(),
            tape,
            param_nodes,
            by_name,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }

    fn id(&self, name: &str) -> NodeId {
        self.by_name[name]
    }

    fn linear_ids(&self, w: &str, b: &str) -> LinearIds {
        LinearIds {
            w: self.id(w),
            b: self.id(b),
        }
    }

    fn encoder_ids(&self, prefix: &str) -> (LinearIds, LstmIds, TransformerIds) {
        let embed = self.linear_ids(&format!("{prefix}.embed.w"), &format!("{prefix}.embed.b"));
        let lstm = LstmIds {
            w_x: self.id(&format!("{prefix}.lstm.w_x")),
            w_h: self.id(&format!("{prefix}.lstm.w_h")),
            b: self.id(&format!("{prefix}.lstm.b")),
        };
        let attn = AttentionIds {
            q: self.id(&format!("{prefix}.attn.w_q")),
            k: self.id(&format!("{prefix}.attn.w_k")),
            v: self.id(&format!("{prefix}.attn.w_v")),
            o: self.id(&format!("{prefix}.attn.w_o")),
        };
        let transformer = TransformerIds {
            attn,
            ffn1: self.linear_ids(&format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1")),
            ffn2: self.linear_ids(&format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2")),
            norm1_gamma: self.id(&format!("{prefix}.norm1.gamma")),
            norm1_beta: self.id(&format!("{prefix}.norm1.beta")),
            norm2_gamma: self.id(&format!("{prefix}.norm2.gamma")),
            norm2_beta: self.id(&format!("{prefix}.norm2.beta")),
        };
        (embed, lstm, transformer)
    }

    fn history_leaf(&mut self, history: &[[f64; 2]], what: &str) -> Result<NodeId> {
        if history.len() != self.cfg.history_steps {
            return Err(Error::shape(
                what,
                format!("{} history rows", self.cfg.history_steps),
                format!("{}", history.len()),
            ));
        }
        let flat: Vec<f64> = history.iter().flatten().copied().collect();
        Ok(self.tape.leaf(Tensor::from_vec(&[history.len(), 2], flat)?))
    }

    /// Embed, LSTM-encode and transform a history; the transformer row at
    /// the last timestep is the sequence encoding.
    fn encode_history(&mut self, prefix: &str, history: &[[f64; 2]], what: &str) -> Result<NodeId> {
        let (embed_ids, lstm_ids, transformer_ids) = self.encoder_ids(prefix);
        let points = self.history_leaf(history, what)?;
        let embedded = layers::embed(&mut self.tape, points, embed_ids);
        let states = layers::lstm_encode(&mut self.tape, embedded, lstm_ids, self.cfg.hidden_dim)?;
        let encoded =
            layers::transformer_encoder_layer(&mut self.tape, states, transformer_ids, self.cfg.heads)?;
        Ok(self.tape.row(encoded, self.cfg.history_steps - 1))
    }

    /// Target temporal encoding: `[1, hidden_dim]`.
    pub fn encode_target(&mut self, history: &[[f64; 2]]) -> Result<NodeId> {
        self.encode_history("tgt", history, "encode_target")
    }

    /// Neighbor encodings scattered onto the grid:
    /// `[grid_channels * grid_cells, hidden_dim]`, zero rows at empty cells.
    /// All neighbors share one encoder.
    pub fn encode_neighbors(&mut self, sample: &TrajectorySample) -> Result<NodeId> {
        let grid_rows = self.cfg.grid_channels * self.cfg.grid_cells;
        if sample.mask.channels() != self.cfg.grid_channels
            || sample.mask.cells() != self.cfg.grid_cells
        {
            return Err(Error::shape(
                "encode_neighbors",
                format!("{}x{} mask", self.cfg.grid_channels, self.cfg.grid_cells),
                format!("{}x{}", sample.mask.channels(), sample.mask.cells()),
            ));
        }
        if sample.neighbor_histories.is_empty() {
            return Ok(self.tape.leaf(Tensor::zeros(&[grid_rows, self.cfg.hidden_dim])));
        }
        let mut rows = Vec::with_capacity(sample.neighbor_histories.len());
        let mut positions = Vec::with_capacity(sample.neighbor_histories.len());
        for n in &sample.neighbor_histories {
            if !sample.mask.get(n.channel as usize, n.cell as usize) {
                return Err(Error::MaskIntegrity(format!(
                    "neighbor at ({}, {}) not present in mask",
                    n.channel, n.cell
                )));
            }
            rows.push(self.encode_history("nbr", &n.history, "encode_neighbors")?);
            positions.push(n.channel as usize * self.cfg.grid_cells + n.cell as usize);
        }
        let stacked = self.tape.concat_rows(&rows);
        self.tape.scatter_rows(stacked, &positions, grid_rows)
    }

    /// Predict the future trajectory of one sample: `[horizon, 2]`.
    ///
    /// The combined encoding is fed to the decoder LSTM at every decode
    /// step; each hidden state maps through the linear head to (x, y).
    pub fn forward_sample(&mut self, sample: &TrajectorySample) -> Result<NodeId> {
        let target = self.encode_target(&sample.target_history)?;
        let combined = match self.cfg.variant {
            Variant::Full => {
                let social = self.encode_neighbors(sample)?;
                let flat_len = self.cfg.grid_channels * self.cfg.grid_cells * self.cfg.hidden_dim;
                let social_flat = self.tape.reshape(social, &[1, flat_len]);
                self.tape.concat_cols(&[social_flat, target])
            }
            Variant::NaiveLstm => target,
        };

        let dec = LstmIds {
            w_x: self.id("dec.lstm.w_x"),
            w_h: self.id("dec.lstm.w_h"),
            b: self.id("dec.lstm.b"),
        };
        let head = self.linear_ids("head.w", "head.b");
        let mut h = self.tape.leaf(Tensor::zeros(&[1, self.cfg.decoder_hidden]));
        let mut c = self.tape.leaf(Tensor::zeros(&[1, self.cfg.decoder_hidden]));
        let mut steps = Vec::with_capacity(self.cfg.horizon);
        for _ in 0..self.cfg.horizon {
            let (hn, cn) = layers::lstm_cell(&mut self.tape, combined, h, c, dec, self.cfg.decoder_hidden)?;
            h = hn;
            c = cn;
            steps.push(layers::linear(&mut self.tape, h, head));
        }
        Ok(self.tape.concat_rows(&steps))
    }

    /// Squared-error loss node of one sample against its ground truth.
    pub fn sample_loss(&mut self, sample: &TrajectorySample) -> Result<NodeId> {
        let pred = self.forward_sample(sample)?;
        self.loss_against(pred, &sample.future)
    }

    fn loss_against(&mut self, pred: NodeId, future: &[[f64; 2]]) -> Result<NodeId> {
        if future.len() != self.cfg.horizon {
            return Err(Error::shape(
                "sample_loss",
                format!("{} future rows", self.cfg.horizon),
                format!("{}", future.len()),
            ));
        }
        let flat: Vec<f64> = future.iter().flatten().copied().collect();
        let truth = self.tape.leaf(Tensor::from_vec(&[future.len(), 2], flat)?);
        let diff = self.tape.sub(pred, truth);
        Ok(self.tape.sum_squares(diff))
    }

    /// Mean over the batch of per-sample summed squared errors.
    pub fn batch_loss(&mut self, batch: &[TrajectorySample]) -> Result<NodeId> {
        if batch.is_empty() {
            return Err(Error::EmptySequence("batch_loss"));
        }
        let mut losses = Vec::with_capacity(batch.len());
        for sample in batch {
            losses.push(self.sample_loss(sample)?);
        }
        let total = self.tape.add_scalars(&losses);
        Ok(self.tape.scale(total, 1.0 / batch.len() as f64))
    }

    /// Run backward from `loss` and add parameter gradients into `store`.
    pub fn grads_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.param_nodes.len() {
            return Err(Error::shape(
                "grads_into",
                format!("{} parameters", self.param_nodes.len()),
                format!("{}", store.len()),
            ));
        }
        let grads = self.tape.backward(loss);
        for (i, node) in self.param_nodes.iter().enumerate() {
            let g = &grads[node.index()];
            let dst = store.grad_at_mut(i);
            for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        Ok(())
    }
}

/// Mean batch loss with gradients accumulated into the store.
pub fn batch_loss_and_grads(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    batch: &[TrajectorySample],
) -> Result<f64> {
    let mut graph = ModelGraph::new(store, cfg)?;
    let loss = graph.batch_loss(batch)?;
    let value = graph.value(loss).data()[0];
    graph.grads_into(loss, store)?;
    Ok(value)
}

/// Forward-only loss over a sample set (chunked to bound tape memory).
pub fn dataset_loss(store: &ParamStore, cfg: &ModelConfig, samples: &[TrajectorySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySequence("dataset_loss"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let mut graph = ModelGraph::new(store, cfg)?;
        for sample in chunk {
            let loss = graph.sample_loss(sample)?;
            total += graph.value(loss).data()[0];
        }
    }
    Ok(total / samples.len() as f64)
}

/// Inference over a sample set, chunked to bound tape memory.
pub fn predict_batch(
    store: &ParamStore,
    cfg: &ModelConfig,
    samples: &[TrajectorySample],
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(64) {
        let mut graph = ModelGraph::new(store, cfg)?;
        for sample in chunk {
            let pred = graph.forward_sample(sample)?;
            let v = graph.value(pred);
            if !v.all_finite() {
                return Err(Error::NonFinite("prediction".into()));
            }
            let coords = (0..cfg.horizon).map(|t| [v.at(t, 0), v.at(t, 1)]).collect();
            out.push(Prediction { coords });
        }
    }
    Ok(out)
}

const CKPT_MAGIC: &[u8; 4] = b"TRJC";
const CKPT_VERSION: u32 = 1;

/// A trained model: parameters, their configuration, and the hash of the
/// preprocessing config the training data was built with.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub data_hash: u64,
    pub params: ParamStore,
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, cfg: &ModelConfig, data_hash: u64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let variant: u8 = match cfg.variant {
        Variant::Full => 0,
        Variant::NaiveLstm => 1,
    };
    w.write_all(&[variant])?;
    for dim in [
        cfg.history_steps,
        cfg.horizon,
        cfg.embed_dim,
        cfg.hidden_dim,
        cfg.ffn_dim,
        cfg.heads,
        cfg.decoder_hidden,
        cfg.grid_channels,
        cfg.grid_cells,
    ] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&data_hash.to_le_bytes())?;
    params.write_to(&mut w, cfg.fingerprint())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut variant = [0u8; 1];
    r.read_exact(&mut variant)?;
    let variant = match variant[0] {
        0 => Variant::Full,
        1 => Variant::NaiveLstm,
        v => return Err(Error::Format(format!("unknown variant tag {v}"))),
    };
    let mut dims = [0usize; 9];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let mut hbuf = [0u8; 8];
    r.read_exact(&mut hbuf)?;
    let data_hash = u64::from_le_bytes(hbuf);
    let config = ModelConfig {
        history_steps: dims[0],
        horizon: dims[1],
        embed_dim: dims[2],
        hidden_dim: dims[3],
        ffn_dim: dims[4],
        heads: dims[5],
        decoder_hidden: dims[6],
        grid_channels: dims[7],
        grid_cells: dims[8],
        variant,
    };
    let (params, fingerprint) = ParamStore::read_from(&mut r)?;
    if fingerprint != config.fingerprint() {
        return Err(Error::Compatibility(
            "checkpoint parameters do not match its model config".into(),
        ));
    }
    validate_against(&config, &params)?;
    Ok(Checkpoint {
        config,
        data_hash,
        params,
    })
}
