//! Named parameter tensors with matching gradient accumulators.
//!
//! Binary container layout (all integers little-endian):
//!
//! ```text
//! magic   b"TPRM"
//! version u32        (currently 1)
//! hash    u64        (config hash supplied by the caller)
//! count   u32
//! entry*  name_len u16, name utf8, rank u8, dims u64×rank, values f64×n
//! ```
//!
//! `f64` values are written as raw IEEE-754 bits, so a round trip is
//! bit-exact.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::nn::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TPRM";
const VERSION: u32 = 1;

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Insertion-ordered store; iteration order is the registration order, which
/// keeps initialization draws and gradient reductions deterministic.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter '{name}'"
        );
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index[name];
        &mut self.entries[i].value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        let i = self.index[name];
        &self.entries[i].grad
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].name
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn grad_at(&self, i: usize) -> &Tensor {
        &self.entries[i].grad
    }

    pub fn grad_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].grad
    }

    /// Value and gradient of entry `i`, borrowed together (optimizer update).
    pub fn value_grad_mut(&mut self, i: usize) -> (&mut Tensor, &Tensor) {
        let e = &mut self.entries[i];
        (&mut e.value, &e.grad)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in e.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    pub fn iter_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }

    /// Deep copy of values (gradients reset to zero).
    pub fn clone_values(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(&e.name, e.value.clone());
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W, config_hash: u64) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&config_hash.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.value.shape().len() as u8])?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(ParamStore, u64)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad parameter store magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter store version {version}"
            )));
        }
        let hash = read_u64(r)?;
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u64(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::from_vec(&shape, data)?);
        }
        Ok((store, hash))
    }
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Copy, Clone)]
enum Init {
    Xavier,
    Zero,
    One,
    /// Zero bias with the forget-gate block set to 1 (gate order i, f, g, o).
    LstmBias,
}

/// The full parameter layout for a model configuration, in registration
/// order. Shared by initialization, the forward graph, and the optimizer so
/// there is exactly one place that knows the shapes.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let h = cfg.hidden_dim;
    let e = cfg.embed_dim;
    let mut out = Vec::new();

    let encoder = |prefix: &str, out: &mut Vec<(String, Vec<usize>, Init)>| {
        out.push((format!("{prefix}.embed.w"), vec![e, 2], Init::Xavier));
        out.push((format!("{prefix}.embed.b"), vec![e], Init::Zero));
        out.push((format!("{prefix}.lstm.w_x"), vec![4 * h, e], Init::Xavier));
        out.push((format!("{prefix}.lstm.w_h"), vec![4 * h, h], Init::Xavier));
        out.push((format!("{prefix}.lstm.b"), vec![4 * h], Init::LstmBias));
        for gate in ["q", "k", "v", "o"] {
            out.push((format!("{prefix}.attn.w_{gate}"), vec![h, h], Init::Xavier));
        }
        out.push((format!("{prefix}.ffn.w1"), vec![cfg.ffn_dim, h], Init::Xavier));
        out.push((format!("{prefix}.ffn.b1"), vec![cfg.ffn_dim], Init::Zero));
        out.push((format!("{prefix}.ffn.w2"), vec![h, cfg.ffn_dim], Init::Xavier));
        out.push((format!("{prefix}.ffn.b2"), vec![h], Init::Zero));
        out.push((format!("{prefix}.norm1.gamma"), vec![h], Init::One));
        out.push((format!("{prefix}.norm1.beta"), vec![h], Init::Zero));
        out.push((format!("{prefix}.norm2.gamma"), vec![h], Init::One));
        out.push((format!("{prefix}.norm2.beta"), vec![h], Init::Zero));
    };

    encoder("tgt", &mut out);
    if cfg.variant == Variant::Full {
        encoder("nbr", &mut out);
    }

    let d = cfg.decoder_hidden;
    let c = cfg.combined_dim();
    out.push(("dec.lstm.w_x".into(), vec![4 * d, c], Init::Xavier));
    out.push(("dec.lstm.w_h".into(), vec![4 * d, d], Init::Xavier));
    out.push(("dec.lstm.b".into(), vec![4 * d], Init::LstmBias));
    out.push(("head.w".into(), vec![2, d], Init::Xavier));
    out.push(("head.b".into(), vec![2], Init::Zero));
    out
}

/// Seeded initialization: linear weights uniform in ±sqrt(6/(fan_in+fan_out)),
/// biases zero except LSTM forget gates (1) and layer-norm gains (1).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(cfg) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Xavier => {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
            Init::LstmBias => {
                let h = n / 4;
                let mut b = vec![0.0; n];
                for v in &mut b[h..2 * h] {
                    *v = 1.0;
                }
                b
            }
        };
        store.insert(&name, Tensor::from_vec(&shape, data).expect("layout shape"));
    }
    store
}

/// Check that a deserialized store matches the layout for `cfg`.
pub fn validate_against(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let lay = layout(cfg);
    if lay.len() != store.len() {
        return Err(Error::shape(
            "parameter store",
            format!("{} entries", lay.len()),
            format!("{}", store.len()),
        ));
    }
    for (name, shape, _) in lay {
        if !store.contains(&name) {
            return Err(Error::Compatibility(format!("missing parameter '{name}'")));
        }
        if store.get(&name).shape() != shape.as_slice() {
            return Err(Error::shape(
                format!("parameter '{name}'"),
                format!("{shape:?}"),
                format!("{:?}", store.get(&name).shape()),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig::tiny(Variant::Full)
    }

    #[test]
    fn same_seed_same_store() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 42);
        let b = init_params(&cfg, 42);
        assert!(a.values_equal(&b));
        let c = init_params(&cfg, 43);
        assert!(!a.values_equal(&c));
    }

    #[test]
    fn biases_zero_except_forget_gate_and_norm_gains() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 1);
        let h = cfg.hidden_dim;
        let b = store.get("tgt.lstm.b");
        for (i, &v) in b.data().iter().enumerate() {
            let expect = if (h..2 * h).contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(v, expect, "lstm bias index {i}");
        }
        assert!(store.get("tgt.embed.b").data().iter().all(|&v| v == 0.0));
        assert!(store.get("head.b").data().iter().all(|&v| v == 0.0));
        assert!(store.get("tgt.norm1.gamma").data().iter().all(|&v| v == 1.0));
        assert!(store.get("tgt.norm2.beta").data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weights_within_fan_bound() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 5);
        let w = store.get("tgt.embed.w");
        let limit = (6.0 / (2 + cfg.embed_dim) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn default_config_shapes() {
        let store = init_params(&ModelConfig::default(), 0);
        assert_eq!(store.get("tgt.embed.w").shape(), &[32, 2]);
        assert_eq!(store.get("tgt.lstm.w_x").shape(), &[256, 32]);
        assert_eq!(store.get("nbr.lstm.w_h").shape(), &[256, 64]);
        assert_eq!(store.get("tgt.attn.w_q").shape(), &[64, 64]);
        assert_eq!(store.get("tgt.ffn.w1").shape(), &[512, 64]);
        assert_eq!(store.get("tgt.ffn.w2").shape(), &[64, 512]);
        assert_eq!(store.get("dec.lstm.w_x").shape(), &[512, 2560]);
        assert_eq!(store.get("dec.lstm.w_h").shape(), &[512, 128]);
        assert_eq!(store.get("head.w").shape(), &[2, 128]);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 9);
        let mut buf = Vec::new();
        store.write_to(&mut buf, 0xDEADBEEF).unwrap();
        let (back, hash) = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(hash, 0xDEADBEEF);
        assert!(store.values_equal(&back));
        validate_against(&cfg, &back).unwrap();
    }

    #[test]
    fn zero_grads_zeroes_everything() {
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 2);
        for v in store.grad_at_mut(0).data_mut() {
            *v = 3.5;
        }
        store.zero_grads();
        for i in 0..store.len() {
            assert!(store.grad_at(i).data().iter().all(|&g| g == 0.0));
        }
    }
}
