//! The encoder-decoder captioning model.
//!
//! An L-layer feature encoder (self-attention + FFN) reads projected region
//! features; an L-layer decoder (relaxed masked self-attention,
//! cross-attention, FFN) produces vocabulary logits. Sublayers are post-norm:
//! sublayer output, then residual add, then layer norm. Attention projections
//! carry no biases; the FFN and the input/output projections do.
//!
//! A [`Model`] owns configuration plus a named parameter store. Forward
//! passes run inside a [`Session`], which records everything on a fresh
//! [`Graph`] so the same code path serves inference (dropout 0) and training
//! (dropout on, gradients via `backward`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masks::AttentionMask;
use crate::rng::SplitMix64;
use crate::tensor::{position_encoding_table, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const CKPT_MAGIC: &[u8; 8] = b"SATICCKP";
const CKPT_VERSION: u32 = 1;

/// Architecture and decoding hyperparameters. `k` is the group size; it
/// never affects parameter shapes, so checkpoints move freely between `k`
/// values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub k: usize,
    pub dropout: f64,
    pub d_feat: usize,
}

impl ModelConfig {
    /// Desk profile: small enough to train on a CPU in minutes.
    pub fn desk(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_k: 16,
            d_v: 16,
            d_ff: 128,
            n_layers: 2,
            vocab_size,
            max_len: 16,
            k: 1,
            dropout: 0.1,
            d_feat: 32,
        }
    }

    /// Full-scale profile (d_model 512, 8 heads, 6 layers).
    pub fn paper(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            n_layers: 6,
            vocab_size,
            max_len: 16,
            k: 1,
            dropout: 0.1,
            d_feat: 2048,
        }
    }

    pub fn with_k(mut self, k: usize) -> ModelConfig {
        self.k = k;
        self
    }

    /// Group size actually used for layouts; a group larger than the longest
    /// caption behaves identically to one of exactly that length.
    pub fn k_eff(&self) -> usize {
        self.k.min(self.max_len)
    }

    /// Rows of the position-encoding table. Group-factorized decoder inputs
    /// can run up to `K * ceil(max_len / K) <= 2 * max_len - 1` positions.
    pub fn pe_rows(&self) -> usize {
        2 * self.max_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 9] = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_len", self.max_len),
            ("k", self.k),
            ("d_feat", self.d_feat),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::validation(
                "vocab_size must cover the four special tokens",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Canonical parameter manifest: `(name, shape)` sorted by name. Shapes
    /// are a pure function of the config excluding `k`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        out.push(("embed.tok".into(), vec![self.vocab_size, d]));
        out.push(("enc.in_proj.w".into(), vec![self.d_feat, d]));
        out.push(("enc.in_proj.b".into(), vec![d]));
        for l in 0..self.n_layers {
            self.push_attn_shapes(&mut out, &format!("enc.{l}.self_attn"));
            self.push_ffn_shapes(&mut out, &format!("enc.{l}.ffn"));
            self.push_attn_shapes(&mut out, &format!("dec.{l}.self_attn"));
            self.push_attn_shapes(&mut out, &format!("dec.{l}.cross_attn"));
            self.push_ffn_shapes(&mut out, &format!("dec.{l}.ffn"));
        }
        out.push(("out_proj.w".into(), vec![d, self.vocab_size]));
        out.push(("out_proj.b".into(), vec![self.vocab_size]));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn push_attn_shapes(&self, out: &mut Vec<(String, Vec<usize>)>, prefix: &str) {
        let d = self.d_model;
        out.push((format!("{prefix}.w_q"), vec![d, self.n_heads * self.d_k]));
        out.push((format!("{prefix}.w_k"), vec![d, self.n_heads * self.d_k]));
        out.push((format!("{prefix}.w_v"), vec![d, self.n_heads * self.d_v]));
        out.push((format!("{prefix}.w_o"), vec![self.n_heads * self.d_v, d]));
        out.push((format!("{prefix}.norm.gain"), vec![d]));
        out.push((format!("{prefix}.norm.bias"), vec![d]));
    }

    fn push_ffn_shapes(&self, out: &mut Vec<(String, Vec<usize>)>, prefix: &str) {
        let d = self.d_model;
        out.push((format!("{prefix}.w1"), vec![d, self.d_ff]));
        out.push((format!("{prefix}.b1"), vec![self.d_ff]));
        out.push((format!("{prefix}.w2"), vec![self.d_ff, d]));
        out.push((format!("{prefix}.b2"), vec![d]));
        out.push((format!("{prefix}.norm.gain"), vec![d]));
        out.push((format!("{prefix}.norm.bias"), vec![d]));
    }
}

/// Checkpoint metadata: which stage produced it and from which seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// One image's region features: an `n_regions x d_feat` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    n_regions: usize,
    d_feat: usize,
    values: Vec<f64>,
}

impl RegionFeatures {
    pub fn new(n_regions: usize, d_feat: usize, values: Vec<f64>) -> Result<RegionFeatures> {
        if values.len() != n_regions * d_feat {
            return Err(Error::validation(format!(
                "expected {n_regions}x{d_feat} feature values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("region features must be finite"));
        }
        Ok(RegionFeatures {
            n_regions,
            d_feat,
            values,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Configuration plus named parameters plus the fixed position-encoding
/// table.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    pe: Tensor,
}

impl Model {
    /// Fresh model with Xavier-uniform weight matrices, zero biases and unit
    /// norm gains. Each tensor draws from its own stream keyed by parameter
    /// name, so initialization is independent of construction order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let base = SplitMix64::new(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let tensor = init_parameter(&name, &shape, base.derive(fnv1a(&name)));
            params.insert(name, tensor);
        }
        let (rows, d) = (config.pe_rows(), config.d_model);
        let pe = position_encoding_table(rows, d);
        Ok(Model { config, params, pe })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    /// Parameters in name order.
    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Position-encoding table, `pe_rows x d_model`.
    pub fn pe(&self) -> &Tensor {
        &self.pe
    }

    pub fn set_k(&mut self, k: usize) {
        assert!(k >= 1, "group size must be positive");
        self.config.k = k;
    }

    /// Writes the checkpoint container: magic, version, header length, JSON
    /// header (config, meta, sorted parameter manifest), raw little-endian
    /// f64 payload. Identical models produce identical bytes.
    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, tensor) in &self.params {
            entries.push(ParamEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            offset += (tensor.numel() * 8) as u64;
        }
        let header = CheckpointHeader {
            config: self.config,
            meta: meta.clone(),
            params: entries,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut bytes =
            Vec::with_capacity(8 + 4 + 8 + header_json.len() + offset as usize);
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for tensor in self.params.values() {
            for v in tensor.values() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// Reads and validates a checkpoint. Every parameter expected under the
    /// stored config must be present with its expected shape; unknown names,
    /// bad shapes, or truncated payloads are rejected with the offending
    /// name in the message.
    pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 20 || &bytes[0..8] != CKPT_MAGIC {
            return Err(Error::CheckpointFormat(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::CheckpointFormat(format!(
                "unsupported checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if bytes.len() < 20 + header_len {
            return Err(Error::CheckpointFormat("truncated header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..20 + header_len])?;
        header.config.validate()?;

        let expected: BTreeMap<String, Vec<usize>> =
            header.config.parameter_shapes().into_iter().collect();
        let mut seen: BTreeMap<&str, (&Vec<usize>, u64)> = BTreeMap::new();
        for entry in &header.params {
            match expected.get(&entry.name) {
                None => {
                    return Err(Error::CheckpointFormat(format!(
                        "unexpected parameter {}",
                        entry.name
                    )))
                }
                Some(shape) if *shape != entry.shape => {
                    return Err(Error::ParameterShape {
                        name: entry.name.clone(),
                        expected: shape.clone(),
                        found: entry.shape.clone(),
                    })
                }
                Some(_) => {}
            }
            seen.insert(&entry.name, (&entry.shape, entry.offset));
        }
        for name in expected.keys() {
            if !seen.contains_key(name.as_str()) {
                return Err(Error::MissingParameter { name: name.clone() });
            }
        }

        let payload = &bytes[20 + header_len..];
        let mut params = BTreeMap::new();
        for entry in &header.params {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * 8;
            if end > payload.len() {
                return Err(Error::CheckpointFormat(format!(
                    "payload truncated at parameter {}",
                    entry.name
                )));
            }
            let values: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(
                entry.name.clone(),
                Tensor::from_vec(entry.shape.clone(), values),
            );
        }
        let (rows, d) = (header.config.pe_rows(), header.config.d_model);
        let pe = position_encoding_table(rows, d);
        Ok((
            Model {
                config: header.config,
                params,
                pe,
            },
            header.meta,
        ))
    }
}

fn init_parameter(name: &str, shape: &[usize], mut rng: SplitMix64) -> Tensor {
    if shape.len() == 1 {
        let fill = if name.ends_with("norm.gain") { 1.0 } else { 0.0 };
        return Tensor::from_vec(shape.to_vec(), vec![fill; shape[0]]);
    }
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.uniform(-limit, limit))
        .collect();
    Tensor::from_vec(shape.to_vec(), values)
}

/// One recorded forward pass (or several, for a batch) over a model.
///
/// Parameters enter the graph lazily on first use; after `backward` their
/// gradients are read back through [`Session::param_vars`].
pub struct Session<'m> {
    pub graph: Graph,
    model: &'m Model,
    vars: HashMap<String, Var>,
    dropout_p: f64,
    rng: SplitMix64,
}

impl<'m> Session<'m> {
    /// Inference session: dropout off, no randomness.
    pub fn eval(model: &'m Model) -> Session<'m> {
        Session {
            graph: Graph::new(),
            model,
            vars: HashMap::new(),
            dropout_p: 0.0,
            rng: SplitMix64::new(0),
        }
    }

    /// Training session: dropout at the configured rate, driven by `rng`.
    pub fn train(model: &'m Model, rng: SplitMix64) -> Session<'m> {
        Session {
            graph: Graph::new(),
            model,
            vars: HashMap::new(),
            dropout_p: model.config.dropout,
            rng,
        }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    /// Graph leaf for a named parameter, registered on first use.
    pub fn param_var(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let tensor = self
            .model
            .param(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.graph.leaf(tensor);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Parameters touched by this session, for gradient collection.
    pub fn param_vars(&self) -> impl Iterator<Item = (&String, Var)> {
        self.vars.iter().map(|(n, &v)| (n, v))
    }

    fn drop_op(&mut self, x: Var) -> Var {
        self.graph.dropout(x, self.dropout_p, &mut self.rng)
    }

    /// Multi-head attention (Concat of per-head scaled dot-product heads,
    /// then the output projection). `prefix` names the parameter block, e.g.
    /// `dec.0.self_attn`. A mask, when given, must match the query/key length.
    pub fn multi_head_attention(
        &mut self,
        q_src: Var,
        kv_src: Var,
        prefix: &str,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let cfg = self.model.config;
        let (h, d_k, d_v) = (cfg.n_heads, cfg.d_k, cfg.d_v);
        let w_q = self.param_var(&format!("{prefix}.w_q"));
        let w_k = self.param_var(&format!("{prefix}.w_k"));
        let w_v = self.param_var(&format!("{prefix}.w_v"));
        let w_o = self.param_var(&format!("{prefix}.w_o"));
        let q = self.graph.matmul(q_src, w_q)?;
        let k = self.graph.matmul(kv_src, w_k)?;
        let v = self.graph.matmul(kv_src, w_v)?;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = self.graph.slice_cols(q, i * d_k, d_k);
            let kh = self.graph.slice_cols(k, i * d_k, d_k);
            let vh = self.graph.slice_cols(v, i * d_v, d_v);
            let scores = self.graph.matmul_nt(qh, kh)?;
            let scaled = self.graph.scale(scores, scale);
            let probs = self.graph.masked_softmax(scaled, mask)?;
            heads.push(self.graph.matmul(probs, vh)?);
        }
        let cat = self.graph.concat_cols(&heads);
        self.graph.matmul(cat, w_o)
    }

    /// Position-wise feed-forward: `max(0, xW1+b1)W2+b2`.
    pub fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w1 = self.param_var(&format!("{prefix}.w1"));
        let b1 = self.param_var(&format!("{prefix}.b1"));
        let w2 = self.param_var(&format!("{prefix}.w2"));
        let b2 = self.param_var(&format!("{prefix}.b2"));
        let h = self.graph.matmul(x, w1)?;
        let h = self.graph.add_bias(h, b1);
        let h = self.graph.relu(h);
        let out = self.graph.matmul(h, w2)?;
        Ok(self.graph.add_bias(out, b2))
    }

    /// Post-norm wrap: dropout on the sublayer output, residual add, norm.
    fn sublayer(&mut self, x: Var, sub_out: Var, prefix: &str) -> Var {
        let dropped = self.drop_op(sub_out);
        let sum = self.graph.add(x, dropped);
        let gain = self.param_var(&format!("{prefix}.norm.gain"));
        let bias = self.param_var(&format!("{prefix}.norm.bias"));
        self.graph.layer_norm(sum, gain, bias, LAYER_NORM_EPS)
    }

    /// Encodes region features to contextual region states
    /// (`n_regions x d_model`).
    pub fn encode(&mut self, feats: &RegionFeatures) -> Result<Var> {
        let cfg = self.model.config;
        if feats.n_regions() == 0 {
            return Err(Error::validation("encoder needs at least one region"));
        }
        if feats.d_feat() != cfg.d_feat {
            return Err(Error::validation(format!(
                "feature width {} does not match configured d_feat {}",
                feats.d_feat(),
                cfg.d_feat
            )));
        }
        let x = self.graph.leaf(Tensor::matrix(
            feats.n_regions(),
            cfg.d_feat,
            feats.values().to_vec(),
        ));
        let w = self.param_var("enc.in_proj.w");
        let b = self.param_var("enc.in_proj.b");
        let proj = self.graph.matmul(x, w)?;
        let proj = self.graph.add_bias(proj, b);
        let mut h = self.drop_op(proj);
        for l in 0..cfg.n_layers {
            let attn_prefix = format!("enc.{l}.self_attn");
            let att = self.multi_head_attention(h, h, &attn_prefix, None)?;
            h = self.sublayer(h, att, &attn_prefix);
            let ffn_prefix = format!("enc.{l}.ffn");
            let f = self.ffn(h, &ffn_prefix)?;
            h = self.sublayer(h, f, &ffn_prefix);
        }
        Ok(h)
    }

    /// Full decoder pass over `tokens`, returning `T_in x V` logits.
    /// Embeddings are scaled by sqrt(d_model) and summed with sinusoidal
    /// position encodings. `mask`, when given, must be `T_in`-sized; `None`
    /// means unmasked self-attention.
    pub fn decode(
        &mut self,
        tokens: &[usize],
        enc_out: Var,
        mask: Option<&AttentionMask>,
    ) -> Result<Var> {
        let cfg = self.model.config;
        let t_in = tokens.len();
        if t_in == 0 {
            return Err(Error::validation("decoder needs at least one token"));
        }
        if t_in > cfg.pe_rows() {
            return Err(Error::validation(format!(
                "decoder input length {t_in} exceeds position table ({} rows)",
                cfg.pe_rows()
            )));
        }
        if let Some(m) = mask {
            if m.len() != t_in {
                return Err(Error::validation(format!(
                    "mask size {} does not match input length {t_in}",
                    m.len()
                )));
            }
        }
        let table = self.param_var("embed.tok");
        let emb = self.graph.embedding(table, tokens)?;
        let scaled = self.graph.scale(emb, (cfg.d_model as f64).sqrt());
        let pe_rows = Tensor::matrix(
            t_in,
            cfg.d_model,
            self.model.pe.values()[..t_in * cfg.d_model].to_vec(),
        );
        let summed = self.graph.add_const(scaled, &pe_rows);
        let mut h = self.drop_op(summed);
        for l in 0..cfg.n_layers {
            let sa_prefix = format!("dec.{l}.self_attn");
            let sa = self.multi_head_attention(h, h, &sa_prefix, mask)?;
            h = self.sublayer(h, sa, &sa_prefix);
            let ca_prefix = format!("dec.{l}.cross_attn");
            let ca = self.multi_head_attention(h, enc_out, &ca_prefix, None)?;
            h = self.sublayer(h, ca, &ca_prefix);
            let ffn_prefix = format!("dec.{l}.ffn");
            let f = self.ffn(h, &ffn_prefix)?;
            h = self.sublayer(h, f, &ffn_prefix);
        }
        let w = self.param_var("out_proj.w");
        let b = self.param_var("out_proj.b");
        let logits = self.graph.matmul(h, w)?;
        Ok(self.graph.add_bias(logits, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{causal_mask, relaxed_mask};
    use crate::tensor::{matmul_into, softmax_rows_masked};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_k: 4,
            d_v: 4,
            d_ff: 16,
            n_layers: 1,
            vocab_size: 11,
            max_len: 16,
            k: 1,
            dropout: 0.0,
            d_feat: 6,
        }
    }

    fn random_features(cfg: &ModelConfig, n: usize, seed: u64) -> RegionFeatures {
        let mut rng = SplitMix64::new(seed);
        RegionFeatures::new(
            n,
            cfg.d_feat,
            (0..n * cfg.d_feat).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.d_model = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.vocab_size = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_config().validate().is_ok());
        assert!(ModelConfig::desk(50).validate().is_ok());
        assert!(ModelConfig::paper(50).validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_and_order_free() {
        let a = Model::new(tiny_config(), 11).unwrap();
        let b = Model::new(tiny_config(), 11).unwrap();
        for ((na, ta), (nb, tb)) in a.params().zip(b.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "{na}");
        }
        let c = Model::new(tiny_config(), 12).unwrap();
        assert_ne!(
            a.param("out_proj.w").unwrap(),
            c.param("out_proj.w").unwrap()
        );
    }

    #[test]
    fn parameter_names_match_manifest() {
        let cfg = ModelConfig::desk(40);
        let model = Model::new(cfg, 1).unwrap();
        let manifest = cfg.parameter_shapes();
        assert_eq!(model.params().count(), manifest.len());
        for (name, shape) in &manifest {
            assert_eq!(
                model.param(name).map(|t| t.shape().to_vec()).as_ref(),
                Some(shape),
                "{name}"
            );
        }
        assert!(manifest.iter().any(|(n, _)| n == "dec.1.cross_attn.w_o"));
    }

    #[test]
    fn k_does_not_change_shapes() {
        let a = ModelConfig::desk(40).with_k(1).parameter_shapes();
        let b = ModelConfig::desk(40).with_k(6).parameter_shapes();
        assert_eq!(a, b);
    }

    #[test]
    fn encode_shape_contract() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 3).unwrap();
        for n in [1, 2, 5] {
            let feats = random_features(&cfg, n, 40 + n as u64);
            let mut s = Session::eval(&model);
            let out = s.encode(&feats).unwrap();
            assert_eq!(s.graph.value(out).shape(), &[n, cfg.d_model]);
        }
    }

    #[test]
    fn encode_rejects_zero_regions() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 3).unwrap();
        let feats = RegionFeatures::new(0, cfg.d_feat, vec![]).unwrap();
        let mut s = Session::eval(&model);
        assert!(s.encode(&feats).is_err());
    }

    #[test]
    fn decode_shape_contract_and_bad_token() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 3).unwrap();
        let feats = random_features(&cfg, 3, 9);
        let mut s = Session::eval(&model);
        let enc = s.encode(&feats).unwrap();
        let mask = causal_mask(4);
        let logits = s.decode(&[1, 5, 6, 2], enc, Some(&mask)).unwrap();
        assert_eq!(s.graph.value(logits).shape(), &[4, cfg.vocab_size]);

        let mut s = Session::eval(&model);
        let enc = s.encode(&feats).unwrap();
        let err = s.decode(&[1, 99], enc, Some(&causal_mask(2))).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 99, .. }));
    }

    #[test]
    fn attention_selects_matching_key() {
        // h=1, identity projections: a query equal to one of two orthogonal
        // keys (large scale) attends almost entirely to that key's value.
        let cfg = ModelConfig {
            d_model: 4,
            n_heads: 1,
            d_k: 4,
            d_v: 4,
            d_ff: 8,
            n_layers: 1,
            vocab_size: 8,
            max_len: 8,
            k: 1,
            dropout: 0.0,
            d_feat: 4,
        };
        let mut model = Model::new(cfg, 0).unwrap();
        let eye = Tensor::matrix(
            4,
            4,
            (0..16)
                .map(|i| if i / 4 == i % 4 { 1.0 } else { 0.0 })
                .collect(),
        );
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            *model.param_mut(&format!("enc.0.self_attn.{w}")).unwrap() = eye.clone();
        }
        let mut s = Session::eval(&model);
        let kv = s.graph.leaf(Tensor::matrix(
            2,
            4,
            vec![100.0, 0.0, 0.0, 0.0, 0.0, 100.0, 0.0, 0.0],
        ));
        let q = s
            .graph
            .leaf(Tensor::matrix(1, 4, vec![100.0, 0.0, 0.0, 0.0]));
        let out = s.multi_head_attention(q, kv, "enc.0.self_attn", None).unwrap();
        let got = s.graph.value(out).values();
        for (g, want) in got.iter().zip(&[100.0, 0.0, 0.0, 0.0]) {
            assert!((g - want).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn attention_two_head_compositional_oracle() {
        // Manual two-head computation from raw kernels, atol 1e-10.
        let cfg = tiny_config();
        let model = Model::new(cfg, 17).unwrap();
        let mut rng = SplitMix64::new(91);
        let t = 5;
        let x = Tensor::matrix(
            t,
            cfg.d_model,
            (0..t * cfg.d_model).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );
        let mask = relaxed_mask(t, 2);

        let mut s = Session::eval(&model);
        let xv = s.graph.leaf(x.clone());
        let out = s
            .multi_head_attention(xv, xv, "dec.0.self_attn", Some(&mask))
            .unwrap();
        let got = s.graph.value(out).values().to_vec();

        let p = |n: &str| model.param(&format!("dec.0.self_attn.{n}")).unwrap();
        let (h, dk, dv, d) = (cfg.n_heads, cfg.d_k, cfg.d_v, cfg.d_model);
        let full = |w: &Tensor, cols: usize| {
            let mut out = vec![0.0; t * cols];
            matmul_into(&mut out, x.values(), w.values(), t, d, cols);
            out
        };
        let q = full(p("w_q"), h * dk);
        let k = full(p("w_k"), h * dk);
        let v = full(p("w_v"), h * dv);
        let mut cat = vec![0.0; t * h * dv];
        for head in 0..h {
            let take = |src: &[f64], width: usize, start: usize, w: usize| {
                let mut out = vec![0.0; t * w];
                for r in 0..t {
                    out[r * w..(r + 1) * w]
                        .copy_from_slice(&src[r * width + start..r * width + start + w]);
                }
                out
            };
            let qh = take(&q, h * dk, head * dk, dk);
            let kh = take(&k, h * dk, head * dk, dk);
            let vh = take(&v, h * dv, head * dv, dv);
            let mut scores = vec![0.0; t * t];
            for i in 0..t {
                for j in 0..t {
                    let dot: f64 = (0..dk).map(|c| qh[i * dk + c] * kh[j * dk + c]).sum();
                    scores[i * t + j] = dot / (dk as f64).sqrt();
                }
            }
            let mut probs = vec![0.0; t * t];
            softmax_rows_masked(&mut probs, &scores, t, t, |i| Some(mask.row(i))).unwrap();
            for i in 0..t {
                for c in 0..dv {
                    let o: f64 = (0..t).map(|j| probs[i * t + j] * vh[j * dv + c]).sum();
                    cat[i * h * dv + head * dv + c] = o;
                }
            }
        }
        let mut expect = vec![0.0; t * d];
        matmul_into(&mut expect, &cat, p("w_o").values(), t, h * dv, d);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-10, "{g} vs {e}");
        }
    }

    #[test]
    fn ffn_matches_oracle_and_is_positionwise() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 29).unwrap();
        let mut rng = SplitMix64::new(30);
        let t = 4;
        let x = Tensor::matrix(
            t,
            cfg.d_model,
            (0..t * cfg.d_model).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        );

        let run = |rows: &Tensor| {
            let mut s = Session::eval(&model);
            let xv = s.graph.leaf(rows.clone());
            let out = s.ffn(xv, "enc.0.ffn").unwrap();
            s.graph.value(out).values().to_vec()
        };
        let got = run(&x);

        let w1 = model.param("enc.0.ffn.w1").unwrap();
        let b1 = model.param("enc.0.ffn.b1").unwrap();
        let w2 = model.param("enc.0.ffn.w2").unwrap();
        let b2 = model.param("enc.0.ffn.b2").unwrap();
        let mut hidden = vec![0.0; t * cfg.d_ff];
        matmul_into(&mut hidden, x.values(), w1.values(), t, cfg.d_model, cfg.d_ff);
        for r in 0..t {
            for c in 0..cfg.d_ff {
                hidden[r * cfg.d_ff + c] = (hidden[r * cfg.d_ff + c] + b1.values()[c]).max(0.0);
            }
        }
        let mut expect = vec![0.0; t * cfg.d_model];
        matmul_into(&mut expect, &hidden, w2.values(), t, cfg.d_ff, cfg.d_model);
        for r in 0..t {
            for c in 0..cfg.d_model {
                expect[r * cfg.d_model + c] += b2.values()[c];
            }
        }
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }

        // Position-wise: swapping input rows swaps output rows.
        let mut swapped = x.values().to_vec();
        let d = cfg.d_model;
        for c in 0..d {
            swapped.swap(c, d + c);
        }
        let got_swapped = run(&Tensor::matrix(t, d, swapped));
        assert_eq!(&got_swapped[0..d], &got[d..2 * d]);
        assert_eq!(&got_swapped[d..2 * d], &got[0..d]);
        assert_eq!(&got_swapped[2 * d..], &got[2 * d..]);
    }

    #[test]
    fn ffn_zero_weights_give_constant_bias_rows() {
        let cfg = tiny_config();
        let mut model = Model::new(cfg, 29).unwrap();
        model.param_mut("enc.0.ffn.w1").unwrap().values_mut().fill(0.0);
        model.param_mut("enc.0.ffn.w2").unwrap().values_mut().fill(0.0);
        let b2: Vec<f64> = (0..cfg.d_model).map(|i| i as f64 / 2.0).collect();
        model
            .param_mut("enc.0.ffn.b2")
            .unwrap()
            .values_mut()
            .copy_from_slice(&b2);
        let mut s = Session::eval(&model);
        let mut rng = SplitMix64::new(3);
        let xv = s.graph.leaf(Tensor::matrix(
            3,
            cfg.d_model,
            (0..3 * cfg.d_model).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        ));
        let out = s.ffn(xv, "enc.0.ffn").unwrap();
        for r in 0..3 {
            assert_eq!(s.graph.value(out).row(r), &b2[..]);
        }
    }

    #[test]
    fn encoder_l1_h1_matches_hand_composition() {
        // One layer, one head, dropout 0: replicate the whole encoder with
        // raw kernels, atol 1e-8.
        let cfg = ModelConfig {
            d_model: 6,
            n_heads: 1,
            d_k: 6,
            d_v: 6,
            d_ff: 12,
            n_layers: 1,
            vocab_size: 8,
            max_len: 8,
            k: 1,
            dropout: 0.0,
            d_feat: 5,
        };
        let model = Model::new(cfg, 77).unwrap();
        let feats = random_features(&cfg, 3, 78);
        let mut s = Session::eval(&model);
        let out = s.encode(&feats).unwrap();
        let got = s.graph.value(out).values().to_vec();

        let d = cfg.d_model;
        let n = 3;
        let p = |name: &str| model.param(name).unwrap().values();
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| {
            let mut out = vec![0.0; m * nn];
            matmul_into(&mut out, a, b, m, k, nn);
            out
        };
        let addb = |x: &mut [f64], b: &[f64]| {
            let w = b.len();
            for (i, v) in x.iter_mut().enumerate() {
                *v += b[i % w];
            }
        };
        let ln = |x: &[f64], gain: &[f64], bias: &[f64]| {
            let mut out = vec![0.0; x.len()];
            crate::tensor::layer_norm_into(&mut out, x, gain, bias, n, d, LAYER_NORM_EPS);
            out
        };

        let mut h = mm(feats.values(), p("enc.in_proj.w"), n, cfg.d_feat, d);
        addb(&mut h, p("enc.in_proj.b"));

        let q = mm(&h, p("enc.0.self_attn.w_q"), n, d, cfg.d_k);
        let k = mm(&h, p("enc.0.self_attn.w_k"), n, d, cfg.d_k);
        let v = mm(&h, p("enc.0.self_attn.w_v"), n, d, cfg.d_v);
        let mut scores = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..cfg.d_k)
                    .map(|c| q[i * cfg.d_k + c] * k[j * cfg.d_k + c])
                    .sum();
                scores[i * n + j] = dot / (cfg.d_k as f64).sqrt();
            }
        }
        let mut probs = vec![0.0; n * n];
        softmax_rows_masked(&mut probs, &scores, n, n, |_| None).unwrap();
        let mixed = mm(&probs, &v, n, n, cfg.d_v);
        let att = mm(&mixed, p("enc.0.self_attn.w_o"), n, cfg.d_v, d);
        let summed: Vec<f64> = h.iter().zip(&att).map(|(a, b)| a + b).collect();
        let h1 = ln(
            &summed,
            p("enc.0.self_attn.norm.gain"),
            p("enc.0.self_attn.norm.bias"),
        );

        let mut hidden = mm(&h1, p("enc.0.ffn.w1"), n, d, cfg.d_ff);
        addb(&mut hidden, p("enc.0.ffn.b1"));
        for v in hidden.iter_mut() {
            *v = v.max(0.0);
        }
        let mut f = mm(&hidden, p("enc.0.ffn.w2"), n, cfg.d_ff, d);
        addb(&mut f, p("enc.0.ffn.b2"));
        let summed2: Vec<f64> = h1.iter().zip(&f).map(|(a, b)| a + b).collect();
        let expect = ln(&summed2, p("enc.0.ffn.norm.gain"), p("enc.0.ffn.norm.bias"));

        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn residual_sanity_zeroed_sublayers() {
        // Zero attention and FFN output projections: the encoder reduces to
        // repeated layer norm of the projected input.
        let cfg = tiny_config();
        let mut model = Model::new(cfg, 5).unwrap();
        for l in 0..cfg.n_layers {
            for name in [
                format!("enc.{l}.self_attn.w_o"),
                format!("enc.{l}.ffn.w2"),
                format!("enc.{l}.ffn.b2"),
            ] {
                model.param_mut(&name).unwrap().values_mut().fill(0.0);
            }
        }
        let feats = random_features(&cfg, 4, 50);
        let mut s = Session::eval(&model);
        let out = s.encode(&feats).unwrap();
        let got = s.graph.value(out).values().to_vec();

        let d = cfg.d_model;
        let mut proj = vec![0.0; 4 * d];
        matmul_into(
            &mut proj,
            feats.values(),
            model.param("enc.in_proj.w").unwrap().values(),
            4,
            cfg.d_feat,
            d,
        );
        let b = model.param("enc.in_proj.b").unwrap().values();
        for (i, v) in proj.iter_mut().enumerate() {
            *v += b[i % d];
        }
        // Each of the 2L sublayers contributes exactly one norm of the
        // running state (its own output is zero).
        let gain = vec![1.0; d];
        let bias = vec![0.0; d];
        let mut expect = proj;
        for _ in 0..2 * cfg.n_layers {
            let mut next = vec![0.0; 4 * d];
            crate::tensor::layer_norm_into(&mut next, &expect, &gain, &bias, 4, d, LAYER_NORM_EPS);
            expect = next;
        }
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-8, "{g} vs {e}");
        }
    }

    #[test]
    fn nar_mask_equals_unmasked_bitexact() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 10).unwrap();
        let feats = random_features(&cfg, 3, 11);
        let tokens = [1usize, 4, 7, 5, 2, 0];
        let mask = relaxed_mask(tokens.len(), tokens.len() + 3);

        let mut s1 = Session::eval(&model);
        let enc1 = s1.encode(&feats).unwrap();
        let a = s1.decode(&tokens, enc1, Some(&mask)).unwrap();

        let mut s2 = Session::eval(&model);
        let enc2 = s2.encode(&feats).unwrap();
        let b = s2.decode(&tokens, enc2, None).unwrap();

        assert_eq!(s1.graph.value(a).values(), s2.graph.value(b).values());
    }

    #[test]
    fn k1_mask_is_causal_and_logits_ignore_future() {
        let cfg = tiny_config();
        let model = Model::new(cfg, 13).unwrap();
        let feats = random_features(&cfg, 2, 14);
        let t = 6;
        let base = [1usize, 4, 7, 5, 6, 3];

        let run = |tokens: &[usize], k: usize| {
            let mut s = Session::eval(&model);
            let enc = s.encode(&feats).unwrap();
            let mask = relaxed_mask(t, k);
            let logits = s.decode(tokens, enc, Some(&mask)).unwrap();
            s.graph.value(logits).values().to_vec()
        };

        // Causal: corrupt position 4; rows 0..=3 unchanged bit for bit.
        let a = run(&base, 1);
        let mut corrupted = base;
        corrupted[4] = 9;
        let b = run(&corrupted, 1);
        let v = cfg.vocab_size;
        assert_eq!(&a[..4 * v], &b[..4 * v]);
        assert_ne!(&a[4 * v..], &b[4 * v..]);

        // Relaxed K=2: corrupt position 4 (group 2); groups 0-1 unchanged.
        let a = run(&base, 2);
        let b = run(&corrupted, 2);
        assert_eq!(&a[..4 * v], &b[..4 * v]);
    }

    #[test]
    fn eval_forward_is_deterministic_and_ignores_dropout_config() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.5;
        let model = Model::new(cfg, 21).unwrap();
        let feats = random_features(&cfg, 3, 22);
        let run = || {
            let mut s = Session::eval(&model);
            let enc = s.encode(&feats).unwrap();
            let mask = causal_mask(3);
            let logits = s.decode(&[1, 5, 2], enc, Some(&mask)).unwrap();
            s.graph.value(logits).values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn train_session_applies_dropout() {
        let mut cfg = tiny_config();
        cfg.dropout = 0.5;
        let model = Model::new(cfg, 21).unwrap();
        let feats = random_features(&cfg, 3, 22);
        let mut eval = Session::eval(&model);
        let e = eval.encode(&feats).unwrap();
        let mut train = Session::train(&model, SplitMix64::new(1));
        let t = train.encode(&feats).unwrap();
        assert_ne!(eval.graph.value(e).values(), train.graph.value(t).values());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let model = Model::new(cfg, 33).unwrap();
        let meta = CheckpointMeta {
            stage: "xe".into(),
            epoch: 3,
            seed: 33,
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        model.save_checkpoint(&p1, &meta).unwrap();
        let (loaded, meta2) = Model::load_checkpoint(&p1).unwrap();
        assert_eq!(meta2, meta);
        loaded.save_checkpoint(&p2, &meta2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_k_is_portable() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config().with_k(1), 33).unwrap();
        let meta = CheckpointMeta {
            stage: "xe".into(),
            epoch: 0,
            seed: 33,
        };
        let path = dir.path().join("teacher.ckpt");
        model.save_checkpoint(&path, &meta).unwrap();
        let (mut loaded, _) = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config.k, 1);
        loaded.set_k(4);
        let feats = random_features(&loaded.config, 2, 1);
        let mut s = Session::eval(&loaded);
        let enc = s.encode(&feats).unwrap();
        let mask = relaxed_mask(4, 4);
        assert!(s.decode(&[1, 1, 1, 1], enc, Some(&mask)).is_ok());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            Model::load_checkpoint(&path),
            Err(Error::CheckpointFormat(_))
        ));

        let model = Model::new(tiny_config(), 1).unwrap();
        let meta = CheckpointMeta {
            stage: "xe".into(),
            epoch: 0,
            seed: 1,
        };
        let good = dir.path().join("good.ckpt");
        model.save_checkpoint(&good, &meta).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[8] = 9; // version
        let tampered = dir.path().join("ver.ckpt");
        std::fs::write(&tampered, &bytes).unwrap();
        let err = Model::load_checkpoint(&tampered).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn checkpoint_rejects_tampered_shape_naming_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config(), 2).unwrap();
        let meta = CheckpointMeta {
            stage: "xe".into(),
            epoch: 0,
            seed: 2,
        };
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_len =
            u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
        for entry in header["params"].as_array_mut().unwrap() {
            if entry["name"] == "out_proj.b" {
                entry["shape"] = serde_json::json!([7]);
            }
        }
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut tampered = bytes[..12].to_vec();
        tampered.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        tampered.extend_from_slice(&new_header);
        tampered.extend_from_slice(&bytes[20 + header_len..]);
        let path2 = dir.path().join("tampered.ckpt");
        std::fs::write(&path2, &tampered).unwrap();
        let err = Model::load_checkpoint(&path2).unwrap_err();
        match err {
            Error::ParameterShape { name, .. } => assert_eq!(name, "out_proj.b"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn checkpoint_rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(tiny_config(), 2).unwrap();
        let meta = CheckpointMeta {
            stage: "xe".into(),
            epoch: 0,
            seed: 2,
        };
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path, &meta).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("short.ckpt");
        std::fs::write(&path2, &bytes[..bytes.len() - 16]).unwrap();
        let err = Model::load_checkpoint(&path2).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
