//! Encoder-decoder transformer with two latent memories.
//!
//! The entailment memory (`erm.*`) and the discourse memory (`ddm.*`) each
//! hold a `slots × d_model` row matrix plus a read-head projection. Reads are
//! deterministic expectations over the rows; the resulting latents are added
//! to the `[SOH]` decoder embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{EncodedSequence, SOH};
use crate::error::{contract, Result};
use crate::params::ParamStore;
use crate::tensor::{Axis, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Names of the entailment-memory parameters held fixed during dialogue training.
pub const ERM_PARAMS: [&str; 3] = ["erm.rows", "erm.proj_w", "erm.proj_b"];
pub const DDM_PARAMS: [&str; 3] = ["ddm.rows", "ddm.proj_w", "ddm.proj_b"];
/// Heads that only the dialogue objective trains.
pub const DIALOGUE_HEADS: [&str; 4] = ["bow.w", "bow.b", "cls.w", "cls.b"];

/// Never gradient-tracked: the candidate softmax is invariant to a shared
/// score offset, so this bias has an identically zero gradient.
pub const FIXED_PARAMS: [&str; 1] = ["cls.b"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Token count including the reserved specials; filled from the vocabulary.
    pub vocab_size: usize,
    /// Entailment memory slots.
    pub k: usize,
    /// Discourse memory slots.
    pub l: usize,
    pub max_len: usize,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            k: 10,
            l: 10,
            max_len: 64,
            init_std: INIT_STD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(contract(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k == 0 || self.l == 0 {
            return Err(contract("memory slot counts k and l must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(contract("max_len must be at least 2"));
        }
        if self.vocab_size <= crate::data::RSP as usize {
            return Err(contract(format!(
                "vocab_size {} does not cover the special tokens",
                self.vocab_size
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(contract("init_std must be positive"));
        }
        if self.d_ff == 0 || self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return Err(contract("layer counts and d_ff must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng, dist: &Normal<f64>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl Model {
    /// Random initialization: N(0, init_std) weights (memory rows included),
    /// zero biases, unit layer-norm gains.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dist = Normal::new(0.0, config.init_std).expect("valid std");
        let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
        let mut p = ParamStore::new();
        let mut w = |p: &mut ParamStore, name: String, shape: &[usize]| {
            p.insert(name, normal(shape, &mut rng, &dist))
        };
        let zeros = |p: &mut ParamStore, name: String, n: usize| p.insert(name, Tensor::zeros(&[n]));
        let ones = |p: &mut ParamStore, name: String, n: usize| {
            p.insert(name, Tensor::vector(vec![1.0; n]))
        };

        w(&mut p, "embed.tok".into(), &[v, d])?;
        w(&mut p, "enc.pos".into(), &[config.max_len, d])?;
        w(&mut p, "dec.pos".into(), &[config.max_len, d])?;
        for i in 0..config.n_layers_enc {
            let pre = format!("enc.{i}");
            attn_params(&mut p, &mut w, &zeros, &ones, &format!("{pre}.attn"), &format!("{pre}.ln1"), d)?;
            ffn_params(&mut p, &mut w, &zeros, &ones, &pre, &format!("{pre}.ln2"), d, ff)?;
        }
        ones(&mut p, "enc.ln_f.g".into(), d)?;
        zeros(&mut p, "enc.ln_f.b".into(), d)?;
        for i in 0..config.n_layers_dec {
            let pre = format!("dec.{i}");
            attn_params(&mut p, &mut w, &zeros, &ones, &format!("{pre}.self"), &format!("{pre}.ln1"), d)?;
            attn_params(&mut p, &mut w, &zeros, &ones, &format!("{pre}.cross"), &format!("{pre}.ln2"), d)?;
            ffn_params(&mut p, &mut w, &zeros, &ones, &pre, &format!("{pre}.ln3"), d, ff)?;
        }
        ones(&mut p, "dec.ln_f.g".into(), d)?;
        w(&mut p, "lm_head.w".into(), &[d, v])?;
        zeros(&mut p, "lm_head.b".into(), v)?;
        for (pre, slots) in [("erm", config.k), ("ddm", config.l)] {
            w(&mut p, format!("{pre}.rows"), &[slots, d])?;
            w(&mut p, format!("{pre}.proj_w"), &[d, slots])?;
            zeros(&mut p, format!("{pre}.proj_b"), slots)?;
        }
        w(&mut p, "bow.w".into(), &[d, v])?;
        zeros(&mut p, "bow.b".into(), v)?;
        w(&mut p, "cls.w".into(), &[d, 1])?;
        zeros(&mut p, "cls.b".into(), 1)?;
        Ok(Model { config, params: p })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let reference = Model::new(config.clone())?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(contract(format!(
                        "parameter {name} has shape {:?}, config implies {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(contract(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(contract("checkpoint carries unexpected parameters"));
        }
        Ok(Model { config, params })
    }

    /// Wraps already-recorded parameter leaves, in store order.
    pub fn graph(&self, vars: Vec<Var>) -> Result<Graph<'_>> {
        if vars.len() != self.params.len() {
            return Err(contract(format!("expected {} parameter vars, got {}", self.params.len(), vars.len())));
        }
        Ok(Graph { model: self, vars })
    }

    /// Records parameters on `tape`; names rejected by `trainable` are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Graph<'_> {
        Graph {
            model: self,
            vars: self.params.bind(tape, &|n| trainable(n) && !FIXED_PARAMS.contains(&n)),
        }
    }
}

type InitFn<'a> = dyn FnMut(&mut ParamStore, String, &[usize]) -> Result<()> + 'a;

fn attn_params(
    p: &mut ParamStore,
    w: &mut InitFn<'_>,
    zeros: &dyn Fn(&mut ParamStore, String, usize) -> Result<()>,
    ones: &dyn Fn(&mut ParamStore, String, usize) -> Result<()>,
    pre: &str,
    ln: &str,
    d: usize,
) -> Result<()> {
    ones(p, format!("{ln}.g"), d)?;
    zeros(p, format!("{ln}.b"), d)?;
    for m in ["q", "k", "v", "o"] {
        w(p, format!("{pre}.w{m}"), &[d, d])?;
        if m != "k" {
            zeros(p, format!("{pre}.b{m}"), d)?;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ffn_params(
    p: &mut ParamStore,
    w: &mut InitFn<'_>,
    zeros: &dyn Fn(&mut ParamStore, String, usize) -> Result<()>,
    ones: &dyn Fn(&mut ParamStore, String, usize) -> Result<()>,
    pre: &str,
    ln: &str,
    d: usize,
    ff: usize,
) -> Result<()> {
    ones(p, format!("{ln}.g"), d)?;
    zeros(p, format!("{ln}.b"), d)?;
    w(p, format!("{pre}.ff.w1"), &[d, ff])?;
    zeros(p, format!("{pre}.ff.b1"), ff)?;
    w(p, format!("{pre}.ff.w2"), &[ff, d])?;
    zeros(p, format!("{pre}.ff.b2"), d)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `[seq × d_model]`
    pub hidden: Var,
    /// Final-layer state at position 0, the `[z]` token.
    pub h_z: Var,
    /// true = attendable key.
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// `[seq × vocab]`
    pub logits: Var,
    /// `[seq × d_model]`
    pub hidden: Var,
}

/// Read weights (`[slots]`, on the simplex) and the resulting latent (`[d]`).
#[derive(Clone, Copy, Debug)]
pub struct MemoryRead {
    pub weights: Var,
    pub latent: Var,
}

/// One latent memory as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LatentMemory {
    /// `[slots × d]`
    pub rows: Var,
    /// `[d × slots]`
    pub proj_w: Var,
    /// `[slots]`
    pub proj_b: Var,
}

impl LatentMemory {
    /// `weights = softmax(h_z · W + b)`, `latent = Σ weightsᵢ · rowsᵢ`.
    pub fn read(&self, tape: &mut Tape, h_z: Var) -> Result<MemoryRead> {
        let logits = tape.matmul(h_z, self.proj_w)?;
        let logits = tape.add(logits, self.proj_b)?;
        let weights = tape.softmax(logits)?;
        let latent = tape.matmul(weights, self.rows)?;
        Ok(MemoryRead { weights, latent })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemoryKind {
    Entailment,
    Discourse,
}

/// Latents added to the `[SOH]` embedding. `None` leaves it untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct Injection {
    pub z: Option<Var>,
    pub z_d: Option<Var>,
}

/// A model bound to a tape for one forward/backward pass.
pub struct Graph<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl<'m> Graph<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn param(&self, name: &str) -> Var {
        let i = self
            .model
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    pub fn memory(&self, kind: MemoryKind) -> LatentMemory {
        let pre = match kind {
            MemoryKind::Entailment => "erm",
            MemoryKind::Discourse => "ddm",
        };
        LatentMemory {
            rows: self.param(&format!("{pre}.rows")),
            proj_w: self.param(&format!("{pre}.proj_w")),
            proj_b: self.param(&format!("{pre}.proj_b")),
        }
    }

    pub fn read_memory(&self, tape: &mut Tape, kind: MemoryKind, h_z: Var) -> Result<MemoryRead> {
        self.memory(kind).read(tape, h_z)
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        let cfg = self.config();
        if ids.len() > cfg.max_len {
            return Err(contract(format!(
                "sequence of length {} exceeds max_len {}; truncate upstream",
                ids.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
            return Err(contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, ids: &[u32], pos: &str) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok = tape.gather(self.param("embed.tok"), &idx)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = tape.gather(self.param(pos), &positions)?;
        tape.add(tok, pe)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let g = self.param(&format!("{name}.g"));
        let b = match self.model.params.position(&format!("{name}.b")) {
            Some(i) => self.vars[i],
            None => tape.constant(Tensor::zeros(&[self.config().d_model])),
        };
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul(x, self.param(w))?;
        tape.add(y, self.param(b))
    }

    /// Multi-head attention. `blocked[i * n_k + j]` hides key `j` from query `i`.
    fn attention(&self, tape: &mut Tape, pre: &str, q_in: Var, kv_in: Var, blocked: &[bool]) -> Result<Var> {
        let d = self.config().d_model;
        let heads = self.config().n_heads;
        let dh = d / heads;
        let q = self.linear(tape, q_in, &format!("{pre}.wq"), &format!("{pre}.bq"))?;
        let k = tape.matmul(kv_in, self.param(&format!("{pre}.wk")))?;
        let v = self.linear(tape, kv_in, &format!("{pre}.wv"), &format!("{pre}.bv"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, Axis::Cols, h * dh, dh)?;
            let kh = tape.slice(k, Axis::Cols, h * dh, dh)?;
            let vh = tape.slice(v, Axis::Cols, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.masked_fill(scores, blocked, f64::NEG_INFINITY)?;
            let probs = tape.softmax(scores)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, Axis::Cols)?
        };
        self.linear(tape, cat, &format!("{pre}.wo"), &format!("{pre}.bo"))
    }

    fn feed_forward(&self, tape: &mut Tape, pre: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{pre}.ff.w1"), &format!("{pre}.ff.b1"))?;
        let h = tape.gelu(h);
        self.linear(tape, h, &format!("{pre}.ff.w2"), &format!("{pre}.ff.b2"))
    }

    /// Pre-norm encoder stack. Masked positions are never attended to.
    pub fn encode(&self, tape: &mut Tape, seq: &EncodedSequence) -> Result<EncoderOutput> {
        if seq.mask.len() != seq.ids.len() {
            return Err(contract("mask length differs from sequence length"));
        }
        if seq.ids.is_empty() || !seq.mask[0] {
            return Err(contract("encoder input must start with an unmasked [z] token"));
        }
        self.check_ids(&seq.ids)?;
        let n = seq.ids.len();
        let blocked: Vec<bool> = (0..n * n).map(|ij| !seq.mask[ij % n]).collect();
        let mut x = self.embed(tape, &seq.ids, "enc.pos")?;
        for i in 0..self.config().n_layers_enc {
            let pre = format!("enc.{i}");
            let h = self.layer_norm(tape, x, &format!("{pre}.ln1"))?;
            let a = self.attention(tape, &format!("{pre}.attn"), h, h, &blocked)?;
            x = tape.add(x, a)?;
            let h = self.layer_norm(tape, x, &format!("{pre}.ln2"))?;
            let f = self.feed_forward(tape, &pre, h)?;
            x = tape.add(x, f)?;
        }
        let hidden = self.layer_norm(tape, x, "enc.ln_f")?;
        let h_z = tape.slice(hidden, Axis::Rows, 0, 1)?;
        Ok(EncoderOutput {
            hidden,
            h_z,
            mask: seq.mask.clone(),
        })
    }

    /// Token plus position embeddings of the decoder input.
    pub fn embed_decoder(&self, tape: &mut Tape, ids: &[u32]) -> Result<Var> {
        self.check_ids(ids)?;
        if ids.is_empty() {
            return Err(contract("decoder input is empty"));
        }
        self.embed(tape, ids, "dec.pos")
    }

    /// Runs the decoder stack over already-embedded (and possibly injected)
    /// inputs. Without an encoder output, cross-attention contributes nothing.
    pub fn decode_embedded(&self, tape: &mut Tape, enc: Option<&EncoderOutput>, emb: Var) -> Result<DecoderOutput> {
        let (n, _) = tape.dims2(emb);
        let causal: Vec<bool> = (0..n * n).map(|ij| ij % n > ij / n).collect();
        let cross = enc.filter(|e| !e.mask.is_empty()).map(|e| {
            let m = e.mask.len();
            let blocked: Vec<bool> = (0..n * m).map(|ij| !e.mask[ij % m]).collect();
            (e.hidden, blocked)
        });
        let mut x = emb;
        for i in 0..self.config().n_layers_dec {
            let pre = format!("dec.{i}");
            let h = self.layer_norm(tape, x, &format!("{pre}.ln1"))?;
            let a = self.attention(tape, &format!("{pre}.self"), h, h, &causal)?;
            x = tape.add(x, a)?;
            if let Some((mem, blocked)) = &cross {
                let h = self.layer_norm(tape, x, &format!("{pre}.ln2"))?;
                let a = self.attention(tape, &format!("{pre}.cross"), h, *mem, blocked)?;
                x = tape.add(x, a)?;
            }
            let h = self.layer_norm(tape, x, &format!("{pre}.ln3"))?;
            let f = self.feed_forward(tape, &pre, h)?;
            x = tape.add(x, f)?;
        }
        let hidden = self.layer_norm(tape, x, "dec.ln_f")?;
        let logits = self.linear(tape, hidden, "lm_head.w", "lm_head.b")?;
        Ok(DecoderOutput { logits, hidden })
    }

    /// Embeds `ids`, injects the latents at position 0, and decodes.
    pub fn decode(
        &self,
        tape: &mut Tape,
        enc: Option<&EncoderOutput>,
        ids: &[u32],
        injection: Injection,
    ) -> Result<DecoderOutput> {
        let emb = self.embed_decoder(tape, ids)?;
        let emb = if injection.z.is_some() || injection.z_d.is_some() {
            inject_latent(tape, emb, ids, injection.z, injection.z_d)?
        } else {
            emb
        };
        self.decode_embedded(tape, enc, emb)
    }

    /// Multiple-choice score `h_eos · W_h + b_h`.
    pub fn candidate_score(&self, tape: &mut Tape, h_eos: Var) -> Result<Var> {
        let s = tape.matmul(h_eos, self.param("cls.w"))?;
        let s = tape.add(s, self.param("cls.b"))?;
        Ok(s)
    }

    /// Position-independent vocabulary logits from `z + z_d`.
    pub fn bow_logits(&self, tape: &mut Tape, z: Var, z_d: Var) -> Result<Var> {
        let h = tape.add(z, z_d)?;
        self.linear(tape, h, "bow.w", "bow.b")
    }
}

/// Adds `z` (and `z_d`) to the position-0 `[SOH]` embedding; every other
/// row passes through untouched.
pub fn inject_latent(tape: &mut Tape, embeddings: Var, ids: &[u32], z: Option<Var>, z_d: Option<Var>) -> Result<Var> {
    if ids.first() != Some(&SOH) {
        return Err(contract("decoder input must start with [SOH] for latent injection"));
    }
    let (n, _) = tape.dims2(embeddings);
    let mut head = tape.slice(embeddings, Axis::Rows, 0, 1)?;
    for latent in [z, z_d].into_iter().flatten() {
        head = tape.add(head, latent)?;
    }
    if n == 1 {
        return Ok(head);
    }
    let tail = tape.slice(embeddings, Axis::Rows, 1, n - 1)?;
    tape.concat(&[head, tail], Axis::Rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_erm_input, BOS, LATENT};
    use approx::assert_abs_diff_eq;

    pub(crate) fn tiny() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_layers_enc: 2,
            n_layers_dec: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 20,
            k: 3,
            l: 2,
            max_len: 16,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn mem(tape: &mut Tape, rows: &[Vec<f64>], logits: Vec<f64>) -> (LatentMemory, Var) {
        let k = rows.len();
        let d = rows[0].len();
        let rows = tape.leaf(&Tensor::from_rows(rows).unwrap());
        let proj_w = tape.leaf(&Tensor::zeros(&[d, k]));
        let proj_b = tape.leaf(&Tensor::vector(logits));
        let h = tape.leaf(&Tensor::zeros(&[d]));
        (LatentMemory { rows, proj_w, proj_b }, h)
    }

    #[test]
    fn config_validation() {
        let mut c = tiny().config;
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny().config;
        c.k = 0;
        assert!(c.validate().is_err());
        let mut c = tiny().config;
        c.max_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn memory_read_closed_forms() {
        let mut tape = Tape::new();
        // one-hot by saturating logits
        let (m, h) = mem(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], vec![0.0, 800.0, 0.0]);
        let r = m.read(&mut tape, h).unwrap();
        assert_eq!(tape.value(r.latent), &[3.0, 4.0]);
        // uniform
        let (m, h) = mem(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0]);
        let r = m.read(&mut tape, h).unwrap();
        assert_eq!(tape.value(r.latent), &[0.5, 0.5]);
        // pi = [1/3, 2/3]
        let (m, h) = mem(&mut tape, &[vec![3.0, 0.0], vec![0.0, 3.0]], vec![0.0, 2f64.ln()]);
        let r = m.read(&mut tape, h).unwrap();
        assert_abs_diff_eq!(tape.value(r.latent)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(r.latent)[1], 2.0, epsilon = 1e-12);
        // rho = [1/4, 3/4]
        let (m, h) = mem(&mut tape, &[vec![4.0, 0.0], vec![0.0, 4.0]], vec![0.0, 3f64.ln()]);
        let r = m.read(&mut tape, h).unwrap();
        assert_abs_diff_eq!(tape.value(r.latent)[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(r.latent)[1], 3.0, epsilon = 1e-12);
        // single slot
        let (m, h) = mem(&mut tape, &[vec![0.3, -0.7]], vec![12.0]);
        let r = m.read(&mut tape, h).unwrap();
        assert_eq!(tape.value(r.weights), &[1.0]);
        assert_eq!(tape.value(r.latent), &[0.3, -0.7]);
    }

    #[test]
    fn encode_is_deterministic_and_shape_correct() {
        let model = tiny();
        let seq = assemble_erm_input(&[11, 12, 13], 16).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let g = model.bind(&mut tape, &|_| false);
            let out = g.encode(&mut tape, &seq).unwrap();
            tape.value(out.hidden).to_vec()
        };
        let a = run();
        assert_eq!(a.len(), 6 * 8);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), run().iter().map(|v| v.to_bits()).collect::<Vec<_>>());

        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let single = EncodedSequence { ids: vec![LATENT], mask: vec![true], roles: vec![crate::data::Role::Latent], layout: crate::data::Layout::Entailment };
        let out = g.encode(&mut tape, &single).unwrap();
        assert_eq!(tape.shape(out.hidden), &[1, 8]);
        assert_eq!(tape.value(out.h_z), &tape.value(out.hidden)[..8]);
    }

    #[test]
    fn encode_rejects_overlong_and_bad_ids() {
        let model = tiny();
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let long = assemble_erm_input(&[11; 30], 40).unwrap();
        assert!(g.encode(&mut tape, &long).is_err());
        let bad = assemble_erm_input(&[99], 16).unwrap();
        assert!(g.encode(&mut tape, &bad).is_err());
    }

    #[test]
    fn padding_does_not_change_real_rows() {
        let model = tiny();
        let seq = assemble_erm_input(&[11, 12, 13], 16).unwrap();
        let padded = seq.padded_to(9);
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let a = g.encode(&mut tape, &seq).unwrap();
        let b = g.encode(&mut tape, &padded).unwrap();
        let (va, vb) = (tape.value(a.hidden).to_vec(), tape.value(b.hidden)[..va_len(&seq)].to_vec());
        for (x, y) in va.iter().zip(&vb) {
            assert!((x - y).abs() < 1e-9);
        }
        // decoder cross-attention ignores the pads as well
        let ids = [SOH, BOS, 12];
        let da = g.decode(&mut tape, Some(&a), &ids, Injection::default()).unwrap();
        let db = g.decode(&mut tape, Some(&b), &ids, Injection::default()).unwrap();
        for (x, y) in tape.value(da.logits).iter().zip(tape.value(db.logits)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn va_len(seq: &EncodedSequence) -> usize {
        seq.len() * 8
    }

    #[test]
    fn decoder_is_causal() {
        let model = tiny();
        let seq = assemble_erm_input(&[11, 12], 16).unwrap();
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let enc = g.encode(&mut tape, &seq).unwrap();
        let a = g.decode(&mut tape, Some(&enc), &[SOH, BOS, 14, 15, 16], Injection::default()).unwrap();
        let b = g.decode(&mut tape, Some(&enc), &[SOH, BOS, 14, 19, 11], Injection::default()).unwrap();
        let v = 20;
        let (la, lb) = (tape.value(a.logits), tape.value(b.logits));
        assert_eq!(&la[..3 * v], &lb[..3 * v]);
        assert_ne!(&la[3 * v..4 * v], &lb[3 * v..4 * v]);
    }

    #[test]
    fn decode_without_encoder() {
        let model = tiny();
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let out = g.decode(&mut tape, None, &[SOH], Injection::default()).unwrap();
        assert_eq!(tape.shape(out.logits), &[1, 20]);
    }

    #[test]
    fn injection_touches_only_position_zero() {
        let model = tiny();
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let ids = [SOH, BOS, 12, 13];
        let emb = g.embed_decoder(&mut tape, &ids).unwrap();
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        let mut e2 = vec![0.0; 8];
        e2[1] = 1.0;
        let z = tape.constant(Tensor::vector(e1));
        let zd = tape.constant(Tensor::vector(e2));
        let out = inject_latent(&mut tape, emb, &ids, Some(z), Some(zd)).unwrap();
        let (before, after) = (tape.value(emb).to_vec(), tape.value(out).to_vec());
        assert_eq!(&before[8..], &after[8..]);
        assert_eq!(after[0], before[0] + 1.0);
        assert_eq!(after[1], before[1] + 1.0);
        assert_eq!(&after[2..8], &before[2..8]);
        let zero = tape.constant(Tensor::zeros(&[8]));
        let same = inject_latent(&mut tape, emb, &ids, Some(zero), None).unwrap();
        assert_eq!(tape.value(same), &before[..]);
        assert!(inject_latent(&mut tape, emb, &[BOS, SOH, 1, 2], Some(z), None).is_err());
    }

    #[test]
    fn zero_latents_match_uninjected_logits() {
        let model = tiny();
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let enc = g.encode(&mut tape, &assemble_erm_input(&[11, 12], 16).unwrap()).unwrap();
        let ids = [SOH, BOS, 12, 13];
        let plain = g.decode(&mut tape, Some(&enc), &ids, Injection::default()).unwrap();
        let zero = tape.constant(Tensor::zeros(&[1, 8]));
        let inj = g
            .decode(&mut tape, Some(&enc), &ids, Injection { z: Some(zero), z_d: Some(zero) })
            .unwrap();
        assert_eq!(tape.value(plain.logits), tape.value(inj.logits));
    }

    #[test]
    fn candidate_score_projection() {
        let mut model = tiny();
        model.params.get_mut("cls.w").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let h = tape.constant(Tensor::vector(vec![2.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let s = g.candidate_score(&mut tape, h).unwrap();
        assert_eq!(tape.item(s).unwrap(), 0.0);
        let mut model = tiny();
        let w = model.params.get_mut("cls.w").unwrap().data_mut();
        w.fill(0.0);
        w[0] = 1.0;
        let mut tape = Tape::new();
        let g = model.bind(&mut tape, &|_| false);
        let h = tape.constant(Tensor::vector(vec![2.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let s = g.candidate_score(&mut tape, h).unwrap();
        assert_eq!(tape.item(s).unwrap(), 2.0);
    }
}
