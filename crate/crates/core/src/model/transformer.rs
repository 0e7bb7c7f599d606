use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

const MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder-decoder transformer. Parameter shapes are a pure function of the
/// config; the values depend only on the build seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    mode: Mode,
}

impl TransformerModel {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ffn);
        let embed_std = (d as f64).powf(-0.5);
        let normal = Normal::new(0.0, embed_std).expect("positive std");

        let embedding = |rng: &mut ChaCha8Rng| {
            Tensor::from_fn(vec![v, d], |_| normal.sample(rng) as f32)
        };
        params.insert("enc.embed", embedding(&mut rng));
        params.insert("dec.embed", embedding(&mut rng));

        for l in 0..config.n_enc_layers {
            let p = format!("enc.{l}");
            add_norm(&mut params, &format!("{p}.ln_attn"), d);
            add_attention(&mut params, &mut rng, &format!("{p}.attn"), d);
            add_norm(&mut params, &format!("{p}.ln_ffn"), d);
            add_ffn(&mut params, &mut rng, &format!("{p}.ffn"), d, f);
        }
        add_norm(&mut params, "enc.ln_final", d);

        for l in 0..config.n_dec_layers {
            let p = format!("dec.{l}");
            add_norm(&mut params, &format!("{p}.ln_self"), d);
            add_attention(&mut params, &mut rng, &format!("{p}.self"), d);
            add_norm(&mut params, &format!("{p}.ln_cross"), d);
            add_attention(&mut params, &mut rng, &format!("{p}.cross"), d);
            add_norm(&mut params, &format!("{p}.ln_ffn"), d);
            add_ffn(&mut params, &mut rng, &format!("{p}.ffn"), d, f);
        }
        add_norm(&mut params, "dec.ln_final", d);

        if !config.tie_embeddings {
            let w = xavier(&mut rng, d, v);
            params.insert("out_proj", w);
        }

        Ok(Self {
            config,
            params,
            mode: Mode::Eval,
        })
    }

    /// Rebuild a model around existing parameters (checkpoint loading).
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::build(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        // Reorder to the canonical insertion order so ids line up.
        let mut ordered = ParamStore::new();
        for name in reference.params.names() {
            ordered.insert(name.clone(), params.get(name).expect("checked above").clone());
        }
        Ok(Self {
            config,
            params: ordered,
            mode: Mode::Eval,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    /// Number of scalar parameters actually allocated.
    pub fn param_count(&self) -> usize {
        self.params.total_elements()
    }

    /// Start a forward pass on `graph`. With `trainable` set, parameters enter
    /// the graph as gradient-receiving leaves.
    pub fn forward<'a, T: Scalar>(&'a self, graph: &'a mut Graph<T>, trainable: bool) -> Forward<'a, T> {
        Forward {
            model: self,
            graph,
            bound: vec![None; self.params.len()],
            trainable,
        }
    }

    fn dropout_p(&self) -> f64 {
        match self.mode {
            Mode::Train => self.config.dropout_p,
            Mode::Eval => 0.0,
        }
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(vec![fan_in, fan_out], |_| rng.gen_range(-a..a) as f32)
}

fn add_norm(params: &mut ParamStore, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(vec![d], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(vec![d]));
}

fn add_linear(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    params.insert(format!("{prefix}.w"), xavier(rng, fan_in, fan_out));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![fan_out]));
}

fn add_attention(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        add_linear(params, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

fn add_ffn(params: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, f: usize) {
    add_linear(params, rng, &format!("{prefix}.fc1"), d, f);
    add_linear(params, rng, &format!("{prefix}.fc2"), f, d);
}

/// Sinusoidal position table, `[len, d]`.
pub(crate) fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(vec![len, d], |i| {
        let (pos, j) = (i / d, i % d);
        let rate = 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        T::of(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Padded id matrix with its pad mask (`true` = padding).
#[derive(Debug, Clone, Copy)]
pub struct Ids<'a> {
    pub ids: &'a [usize],
    pub pad: &'a [bool],
    pub batch: usize,
    pub len: usize,
}

/// One forward pass of a [`TransformerModel`] on a graph. Each parameter is
/// bound to the graph at most once.
pub struct Forward<'a, T: Scalar> {
    model: &'a TransformerModel,
    pub graph: &'a mut Graph<T>,
    bound: Vec<Option<crate::tensor::Var>>,
    trainable: bool,
}

impl<'a, T: Scalar> Forward<'a, T> {
    fn p(&mut self, name: &str) -> Result<Var> {
        let id = self
            .model
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(v) = self.bound[id] {
            return Ok(v);
        }
        let value = self.model.params.value(id).cast::<T>();
        let v = if self.trainable {
            self.graph.param(value, id)?
        } else {
            self.graph.constant(value)?
        };
        self.bound[id] = Some(v);
        Ok(v)
    }

    fn check_ids(&self, ids: &[usize], len: usize) -> Result<()> {
        let cfg = &self.model.config;
        if len > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max_len: cfg.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: cfg.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embeddings scaled by `sqrt(d)` plus positions, `[batch, len, d]`.
    fn embed(&mut self, table: &str, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let d = self.model.config.d_model;
        let e = self.p(table)?;
        let x = self.graph.gather(e, ids)?;
        let x = self.graph.scale(x, (d as f64).sqrt())?;
        let x = self.graph.reshape(x, &[batch, len, d])?;
        let pe = self.graph.constant(positional_encoding(len, d))?;
        let x = self.graph.add(x, pe)?;
        Ok(self.graph.dropout(x, self.model.dropout_p())?)
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let shape = self.graph.shape(x).to_vec();
        let fan_in = *shape.last().expect("rank >= 1");
        let rows = shape.iter().product::<usize>() / fan_in;
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let fan_out = self.graph.shape(w)[1];
        let x2 = self.graph.reshape(x, &[rows, fan_in])?;
        let y = self.graph.matmul(x2, w)?;
        let y = self.graph.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = fan_out;
        Ok(self.graph.reshape(y, &out_shape)?)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(&format!("{prefix}.gamma"))?;
        let b = self.p(&format!("{prefix}.beta"))?;
        Ok(self.graph.layer_norm(x, g, b)?)
    }

    /// `[batch, len, d]` -> `[batch, heads, len, d/heads]`
    fn split_heads(&mut self, x: Var, batch: usize, len: usize) -> Result<Var> {
        let cfg = &self.model.config;
        let (h, dh) = (cfg.n_heads, cfg.d_model / cfg.n_heads);
        let x = self.graph.reshape(x, &[batch, len, h, dh])?;
        Ok(self.graph.transpose(x, 1, 2)?)
    }

    /// Multi-head attention. `mask` has one entry per `[batch, heads, q, k]`
    /// score, `true` where attention is forbidden.
    fn attention(&mut self, query: Var, memory: Var, mask: &[bool], prefix: &str) -> Result<Var> {
        let cfg = &self.model.config;
        let (h, d) = (cfg.n_heads, cfg.d_model);
        let dh = d / h;
        let qs = self.graph.shape(query).to_vec();
        let ks = self.graph.shape(memory).to_vec();
        let (batch, lq, lk) = (qs[0], qs[1], ks[1]);

        let q = self.linear(query, &format!("{prefix}.q"))?;
        let k = self.linear(memory, &format!("{prefix}.k"))?;
        let v = self.linear(memory, &format!("{prefix}.v"))?;
        let q = self.split_heads(q, batch, lq)?;
        let k = self.split_heads(k, batch, lk)?;
        let v = self.split_heads(v, batch, lk)?;
        let kt = self.graph.transpose(k, 2, 3)?;
        let scores = self.graph.matmul(q, kt)?;
        let scores = self.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = self.graph.masked_fill(scores, mask, MASK_VALUE)?;
        let attn = self.graph.softmax(scores)?;
        let attn = self.graph.dropout(attn, self.model.dropout_p())?;
        let ctx = self.graph.matmul(attn, v)?;
        let ctx = self.graph.transpose(ctx, 1, 2)?;
        let ctx = self.graph.reshape(ctx, &[batch, lq, d])?;
        self.linear(ctx, &format!("{prefix}.o"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let hdn = self.linear(x, &format!("{prefix}.fc1"))?;
        let hdn = self.graph.relu(hdn)?;
        let hdn = self.graph.dropout(hdn, self.model.dropout_p())?;
        self.linear(hdn, &format!("{prefix}.fc2"))
    }

    fn residual(&mut self, x: Var, sub: Var) -> Result<Var> {
        let sub = self.graph.dropout(sub, self.model.dropout_p())?;
        Ok(self.graph.add(x, sub)?)
    }

    /// Encoder states `[batch, src_len, d]`.
    pub fn encode(&mut self, src: Ids<'_>) -> Result<Var> {
        self.check_ids(src.ids, src.len)?;
        let h = self.model.config.n_heads;
        let mask = key_padding_mask(src.pad, src.batch, h, src.len, src.len);
        let mut x = self.embed("enc.embed", src.ids, src.batch, src.len)?;
        for l in 0..self.model.config.n_enc_layers {
            let y = self.norm(x, &format!("enc.{l}.ln_attn"))?;
            let y = self.attention(y, y, &mask, &format!("enc.{l}.attn"))?;
            x = self.residual(x, y)?;
            let y = self.norm(x, &format!("enc.{l}.ln_ffn"))?;
            let y = self.feed_forward(y, &format!("enc.{l}.ffn"))?;
            x = self.residual(x, y)?;
        }
        self.norm(x, "enc.ln_final")
    }

    /// Next-token logits `[batch, tgt_len, vocab]` for a BOS-prefixed target
    /// view. Position `j` sees target positions `<= j` only.
    pub fn decode(&mut self, tgt: Ids<'_>, memory: Var, src_pad: &[bool]) -> Result<Var> {
        self.check_ids(tgt.ids, tgt.len)?;
        let cfg = self.model.config.clone();
        let src_len = self.graph.shape(memory)[1];
        let self_mask = causal_mask(tgt.batch, cfg.n_heads, tgt.len);
        let cross_mask = key_padding_mask(src_pad, tgt.batch, cfg.n_heads, tgt.len, src_len);
        let mut x = self.embed("dec.embed", tgt.ids, tgt.batch, tgt.len)?;
        for l in 0..cfg.n_dec_layers {
            let y = self.norm(x, &format!("dec.{l}.ln_self"))?;
            let y = self.attention(y, y, &self_mask, &format!("dec.{l}.self"))?;
            x = self.residual(x, y)?;
            let y = self.norm(x, &format!("dec.{l}.ln_cross"))?;
            let y = self.attention(y, memory, &cross_mask, &format!("dec.{l}.cross"))?;
            x = self.residual(x, y)?;
            let y = self.norm(x, &format!("dec.{l}.ln_ffn"))?;
            let y = self.feed_forward(y, &format!("dec.{l}.ffn"))?;
            x = self.residual(x, y)?;
        }
        let x = self.norm(x, "dec.ln_final")?;
        let rows = tgt.batch * tgt.len;
        let x = self.graph.reshape(x, &[rows, cfg.d_model])?;
        let proj = if cfg.tie_embeddings {
            let e = self.p("dec.embed")?;
            self.graph.transpose(e, 0, 1)?
        } else {
            self.p("out_proj")?
        };
        let logits = self.graph.matmul(x, proj)?;
        Ok(self.graph.reshape(logits, &[tgt.batch, tgt.len, cfg.vocab_size])?)
    }

    /// Mean of encoder states over non-pad positions, `[batch, d]`.
    pub fn mean_pool(&mut self, states: Var, pad: &[bool]) -> Result<Var> {
        let shape = self.graph.shape(states).to_vec();
        let (batch, len, d) = (shape[0], shape[1], shape[2]);
        let mut weights = vec![T::zero(); batch * len * d];
        for b in 0..batch {
            let real = (0..len).filter(|&t| !pad[b * len + t]).count().max(1);
            let w = T::of(1.0 / real as f64);
            for t in 0..len {
                if !pad[b * len + t] {
                    weights[(b * len + t) * d..(b * len + t + 1) * d].fill(w);
                }
            }
        }
        let w = self.graph.constant(Tensor::new(vec![batch, len, d], weights)?)?;
        let weighted = self.graph.mul(states, w)?;
        let weighted = self.graph.transpose(weighted, 1, 2)?;
        Ok(self.graph.sum_last(weighted)?)
    }
}

fn key_padding_mask(pad: &[bool], batch: usize, heads: usize, lq: usize, lk: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(batch * heads * lq * lk);
    for b in 0..batch {
        let row = &pad[b * lk..(b + 1) * lk];
        for _ in 0..heads * lq {
            mask.extend_from_slice(row);
        }
    }
    mask
}

fn causal_mask(batch: usize, heads: usize, len: usize) -> Vec<bool> {
    let mut one = Vec::with_capacity(len * len);
    for q in 0..len {
        for k in 0..len {
            one.push(k > q);
        }
    }
    one.repeat(batch * heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::param_count;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(10, 8, 2, 1, 16)
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = TransformerModel::build(cfg(), 7).unwrap();
        let b = TransformerModel::build(cfg(), 7).unwrap();
        let c = TransformerModel::build(cfg(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn built_count_matches_analytic() {
        for tie in [true, false] {
            let mut c = cfg();
            c.tie_embeddings = tie;
            let m = TransformerModel::build(c.clone(), 1).unwrap();
            assert_eq!(m.param_count(), param_count(&c));
        }
    }

    #[test]
    fn decode_shapes_and_normalization() {
        let m = TransformerModel::build(cfg(), 3).unwrap();
        let mut g = Graph::<f64>::new();
        let mut f = m.forward(&mut g, false);
        let src = [4usize, 5, 6];
        let pad = [false; 3];
        let mem = f
            .encode(Ids { ids: &src, pad: &pad, batch: 1, len: 3 })
            .unwrap();
        let logits = f
            .decode(Ids { ids: &[1], pad: &[false], batch: 1, len: 1 }, mem, &pad)
            .unwrap();
        assert_eq!(g.shape(logits), &[1, 1, 10]);
        let lp = crate::tensor::log_softmax_row(g.value(logits).data());
        assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_ids_and_overlong_prefix() {
        let mut c = cfg();
        c.max_len = 4;
        let m = TransformerModel::build(c, 3).unwrap();
        let mut g = Graph::<f32>::new();
        let mut f = m.forward(&mut g, false);
        let err = f
            .encode(Ids { ids: &[11], pad: &[false], batch: 1, len: 1 })
            .unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { id: 11, .. }));
        let mem = f.encode(Ids { ids: &[4], pad: &[false], batch: 1, len: 1 }).unwrap();
        let err = f
            .decode(Ids { ids: &[1; 5], pad: &[false; 5], batch: 1, len: 5 }, mem, &[false])
            .unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 5, max_len: 4 }));
    }
}
