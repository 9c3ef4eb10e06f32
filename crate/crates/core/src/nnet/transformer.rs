use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::graph::{AttnLayout, Graph, Var};
use super::params::{glorot, uniform, Bound, ParamSet};
use super::tensor::Tensor;
use crate::corpus::PAD;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_img: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ff: 128,
            dropout_rate: 0.1,
            max_len: 64,
            src_vocab: 0,
            tgt_vocab: 0,
            d_img: 64,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers_enc", self.n_layers_enc),
            ("n_layers_dec", self.n_layers_dec),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_img", self.d_img),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// A padded batch of token sequences, flattened row-major `[batch x len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    /// False at padding positions.
    pub valid: Vec<bool>,
}

impl SeqBatch {
    /// Right-pads `seqs` with the pad id to the longest length.
    pub fn from_seqs(seqs: &[Vec<u32>]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::InvalidArgument("empty sequence batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(core::iter::repeat_n(true, s.len()));
            ids.extend(core::iter::repeat_n(PAD, len - s.len()));
            valid.extend(core::iter::repeat_n(false, len - s.len()));
        }
        Ok(Self { ids, batch: seqs.len(), len, valid })
    }

    /// One unpadded sequence.
    pub fn single(ids: &[u32]) -> Result<Self> {
        Self::from_seqs(&[ids.to_vec()])
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.batch * self.len).map(|i| i % self.len).collect()
    }
}

/// Visual input to a fusion layer: one `[batch x d_img]` row per sequence,
/// and whether each sequence's gate may open.
#[derive(Debug, Clone)]
pub struct Visual {
    pub features: Var,
    pub open: Vec<bool>,
}

pub fn sinusoidal(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let angle = pos as f64 / libm::pow(10000.0, (2 * (i / 2)) as f64 / d as f64);
            if i % 2 == 0 {
                libm::sin(angle)
            } else {
                libm::cos(angle)
            }
        })
        .collect()
}

fn layer_norm_params(p: &mut ParamSet, name: &str, d: usize) {
    p.insert(format!("{name}/g"), Tensor::filled(&[d], 1.0));
    p.insert(format!("{name}/b"), Tensor::zeros(&[d]));
}

fn linear_params(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    p.insert(format!("{name}/w"), glorot(rng, fan_in, fan_out));
    p.insert(format!("{name}/b"), Tensor::zeros(&[fan_out]));
}

fn attention_params(p: &mut ParamSet, name: &str, d: usize, rng: &mut Rng) {
    for part in ["q", "k", "v", "o"] {
        linear_params(p, &format!("{name}/{part}"), d, d, rng);
    }
}

fn ffn_params(p: &mut ParamSet, name: &str, d: usize, d_ff: usize, rng: &mut Rng) {
    linear_params(p, &format!("{name}/1"), d, d_ff, rng);
    linear_params(p, &format!("{name}/2"), d_ff, d, rng);
}

/// Token embedding shared by encoder and decoder (one joint vocabulary).
pub fn init_embedding(p: &mut ParamSet, cfg: &TransformerConfig, prefix: &str, rng: &mut Rng) {
    let a = libm::sqrt(3.0 / cfg.d_model as f64);
    p.insert(format!("{prefix}/embed"), uniform(rng, &[cfg.src_vocab.max(cfg.tgt_vocab), cfg.d_model], a));
}

pub fn init_encoder(p: &mut ParamSet, cfg: &TransformerConfig, prefix: &str, rng: &mut Rng) {
    for l in 0..cfg.n_layers_enc {
        let base = format!("{prefix}/enc/{l}");
        layer_norm_params(p, &format!("{base}/ln1"), cfg.d_model);
        attention_params(p, &format!("{base}/attn"), cfg.d_model, rng);
        layer_norm_params(p, &format!("{base}/ln2"), cfg.d_model);
        ffn_params(p, &format!("{base}/ffn"), cfg.d_model, cfg.d_ff, rng);
    }
    layer_norm_params(p, &format!("{prefix}/enc/ln"), cfg.d_model);
}

pub fn init_decoder(p: &mut ParamSet, cfg: &TransformerConfig, prefix: &str, rng: &mut Rng) {
    for l in 0..cfg.n_layers_dec {
        let base = format!("{prefix}/dec/{l}");
        layer_norm_params(p, &format!("{base}/ln1"), cfg.d_model);
        attention_params(p, &format!("{base}/self"), cfg.d_model, rng);
        layer_norm_params(p, &format!("{base}/ln2"), cfg.d_model);
        attention_params(p, &format!("{base}/cross"), cfg.d_model, rng);
        layer_norm_params(p, &format!("{base}/ln3"), cfg.d_model);
        ffn_params(p, &format!("{base}/ffn"), cfg.d_model, cfg.d_ff, rng);
    }
    layer_norm_params(p, &format!("{prefix}/dec/ln"), cfg.d_model);
}

/// Output projection onto the vocabulary, initialized small so that an
/// untrained model predicts close to uniformly.
pub fn init_head(p: &mut ParamSet, name: &str, d: usize, vocab: usize, rng: &mut Rng) {
    p.insert(format!("{name}/w"), uniform(rng, &[d, vocab], 0.02 * libm::sqrt(3.0)));
    p.insert(format!("{name}/b"), Tensor::zeros(&[vocab]));
}

pub fn init_fusion(p: &mut ParamSet, name: &str, d_img: usize, d: usize, rng: &mut Rng) {
    p.insert(format!("{name}/wv"), glorot(rng, d_img, d));
    p.insert(format!("{name}/bv"), Tensor::zeros(&[d]));
    p.insert(format!("{name}/wgh"), glorot(rng, d, 1));
    p.insert(format!("{name}/wgv"), glorot(rng, d, 1));
    p.insert(format!("{name}/bg"), Tensor::zeros(&[1]));
}

/// Graph-building forward passes over parameters named under `prefix`.
#[derive(Debug, Clone, Copy)]
pub struct Transformer<'a> {
    pub cfg: &'a TransformerConfig,
    pub prefix: &'a str,
}

impl<'a> Transformer<'a> {
    pub fn new(cfg: &'a TransformerConfig, prefix: &'a str) -> Self {
        Self { cfg, prefix }
    }

    fn name(&self, part: &str) -> String {
        format!("{}/{part}", self.prefix)
    }

    fn p(&self, b: &Bound, part: &str) -> Result<Var> {
        b.var(&self.name(part))
    }

    fn check_len(&self, x: &SeqBatch) -> Result<()> {
        if x.len > self.cfg.max_len {
            return Err(Error::SequenceTooLong { len: x.len, max: self.cfg.max_len });
        }
        let vocab = self.cfg.src_vocab.max(self.cfg.tgt_vocab);
        if let Some(&bad) = x.ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::UnknownId { id: bad, size: vocab });
        }
        Ok(())
    }

    fn drop(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut Rng>) -> Result<Var> {
        match rng {
            Some(r) if g.is_training() && self.cfg.dropout_rate > 0.0 => g.dropout(x, self.cfg.dropout_rate, r),
            _ => Ok(x),
        }
    }

    fn embed(&self, g: &mut Graph, b: &Bound, x: &SeqBatch, rng: &mut Option<&mut Rng>) -> Result<Var> {
        self.check_len(x)?;
        let d = self.cfg.d_model;
        let idx: Vec<usize> = x.ids.iter().map(|&i| i as usize).collect();
        let e = g.gather_rows(self.p(b, "embed")?, &idx)?;
        let e = g.scale(e, libm::sqrt(d as f64))?;
        let mut pe = Vec::with_capacity(idx.len() * d);
        for pos in x.positions() {
            pe.extend(sinusoidal(pos, d));
        }
        let pe = g.constant(Tensor::matrix(idx.len(), d, pe)?);
        let h = g.add(e, pe)?;
        self.drop(g, h, rng)
    }

    fn layer_norm(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(b, &format!("{name}/g"))?;
        let beta = self.p(b, &format!("{name}/b"))?;
        g.layer_norm(x, gamma, beta)
    }

    fn linear(&self, g: &mut Graph, b: &Bound, x: Var, name: &str) -> Result<Var> {
        let w = self.p(b, &format!("{name}/w"))?;
        let bias = self.p(b, &format!("{name}/b"))?;
        g.linear(x, w, Some(bias))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(&self, g: &mut Graph, b: &Bound, name: &str, xq: Var, xkv: Var, layout: AttnLayout) -> Result<(Var, Var)> {
        let q = self.linear(g, b, xq, &format!("{name}/q"))?;
        let k = self.linear(g, b, xkv, &format!("{name}/k"))?;
        let v = self.linear(g, b, xkv, &format!("{name}/v"))?;
        let a = g.attention(q, k, v, layout)?;
        Ok((self.linear(g, b, a, &format!("{name}/o"))?, a))
    }

    fn ffn(&self, g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, b, x, &format!("{name}/1"))?;
        let h = g.relu(h)?;
        self.linear(g, b, h, &format!("{name}/2"))
    }

    /// Encoder hidden states `[batch*len x d_model]`, after the final norm.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: &SeqBatch, mut rng: Option<&mut Rng>) -> Result<Var> {
        let mut h = self.embed(g, b, x, &mut rng)?;
        for l in 0..self.cfg.n_layers_enc {
            let base = format!("enc/{l}");
            let n = self.layer_norm(g, b, h, &format!("{base}/ln1"))?;
            let layout = AttnLayout {
                batch: x.batch,
                lq: x.len,
                lk: x.len,
                heads: self.cfg.n_heads,
                key_valid: x.valid.clone(),
                causal: false,
            };
            let (a, _) = self.attention(g, b, &format!("{base}/attn"), n, n, layout)?;
            let a = self.drop(g, a, &mut rng)?;
            h = g.add(h, a)?;
            let n = self.layer_norm(g, b, h, &format!("{base}/ln2"))?;
            let f = self.ffn(g, b, &format!("{base}/ffn"), n)?;
            let f = self.drop(g, f, &mut rng)?;
            h = g.add(h, f)?;
        }
        self.layer_norm(g, b, h, "enc/ln")
    }

    /// Decoder hidden states `[batch*len x d_model]` after the final norm,
    /// with `visual` fused in when given.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        y: &SeqBatch,
        enc: Var,
        src: &SeqBatch,
        visual: Option<&Visual>,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        if y.batch != src.batch {
            return Err(Error::Shape(format!("{} target rows for {} source rows", y.batch, src.batch)));
        }
        let mut h = self.embed(g, b, y, &mut rng)?;
        for l in 0..self.cfg.n_layers_dec {
            let base = format!("dec/{l}");
            let n = self.layer_norm(g, b, h, &format!("{base}/ln1"))?;
            let layout = AttnLayout {
                batch: y.batch,
                lq: y.len,
                lk: y.len,
                heads: self.cfg.n_heads,
                key_valid: vec![true; y.batch * y.len],
                causal: true,
            };
            let (a, _) = self.attention(g, b, &format!("{base}/self"), n, n, layout)?;
            let a = self.drop(g, a, &mut rng)?;
            h = g.add(h, a)?;
            let n = self.layer_norm(g, b, h, &format!("{base}/ln2"))?;
            let layout = AttnLayout {
                batch: y.batch,
                lq: y.len,
                lk: src.len,
                heads: self.cfg.n_heads,
                key_valid: src.valid.clone(),
                causal: false,
            };
            let (c, _) = self.attention(g, b, &format!("{base}/cross"), n, enc, layout)?;
            let c = self.drop(g, c, &mut rng)?;
            h = g.add(h, c)?;
            let n = self.layer_norm(g, b, h, &format!("{base}/ln3"))?;
            let f = self.ffn(g, b, &format!("{base}/ffn"), n)?;
            let f = self.drop(g, f, &mut rng)?;
            h = g.add(h, f)?;
        }
        let h = self.layer_norm(g, b, h, "dec/ln")?;
        match visual {
            Some(v) => self.fuse(g, b, "dec_fusion", h, y.len, v),
            None => Ok(h),
        }
    }

    /// Gated fusion of one visual vector per sequence into every position of
    /// that sequence: `h + sigmoid(h.w_gh + v'.w_gv + b_g) * v'` where
    /// `v' = W_v f + b_v`. Positions of closed sequences pass `h` through.
    pub fn fuse(&self, g: &mut Graph, b: &Bound, name: &str, h: Var, len: usize, visual: &Visual) -> Result<Var> {
        let rows = g.value(h).rows();
        let fv = g.value(visual.features);
        if fv.cols() != self.cfg.d_img || fv.shape().len() != 2 {
            return Err(Error::Dimension { expected: self.cfg.d_img, got: fv.cols() });
        }
        let batch = fv.rows();
        if batch * len != rows || visual.open.len() != batch {
            return Err(Error::Shape(format!("visual batch {batch} for {rows} rows of length {len}")));
        }
        let wv = self.p(b, &format!("{name}/wv"))?;
        let bv = self.p(b, &format!("{name}/bv"))?;
        let vp = g.linear(visual.features, wv, Some(bv))?;
        let idx: Vec<usize> = (0..rows).map(|r| r / len).collect();
        let vp = g.gather_rows(vp, &idx)?;
        let gh = g.matmul(h, self.p(b, &format!("{name}/wgh"))?)?;
        let gv = g.matmul(vp, self.p(b, &format!("{name}/wgv"))?)?;
        let z = g.add(gh, gv)?;
        let z = g.add_bias(z, self.p(b, &format!("{name}/bg"))?)?;
        let gate = g.sigmoid(z)?;
        let open: Vec<bool> = idx.iter().map(|&s| visual.open[s]).collect();
        g.gate_add(h, vp, gate, &open)
    }

    /// Vocabulary logits through the head named `head` (e.g. "out" or "mlm").
    pub fn project(&self, g: &mut Graph, b: &Bound, h: Var, head: &str) -> Result<Var> {
        self.linear(g, b, h, head)
    }

    /// Mean of the encoder states over valid positions, `[batch x d_model]`.
    pub fn pool(&self, g: &mut Graph, enc: Var, x: &SeqBatch) -> Result<Var> {
        g.mean_pool(enc, x.len, &x.valid)
    }
}

/// Encoder states for one batch without recording gradients.
pub fn encoder_forward(cfg: &TransformerConfig, params: &ParamSet, prefix: &str, x: &SeqBatch) -> Result<Tensor> {
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let h = Transformer::new(cfg, prefix).encode(&mut g, &b, x, None)?;
    Ok(g.value(h).clone())
}

/// Decoder logits `[batch*len x vocab]` for given encoder states. `visual`
/// holds one `d_img` row per sequence and is ignored unless `gate_enabled`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward(
    cfg: &TransformerConfig,
    params: &ParamSet,
    prefix: &str,
    y: &SeqBatch,
    enc: &Tensor,
    src: &SeqBatch,
    visual: Option<&Tensor>,
    gate_enabled: bool,
) -> Result<Tensor> {
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let enc = g.constant(enc.clone());
    let vis = match visual {
        Some(v) if gate_enabled => {
            if v.cols() != cfg.d_img {
                return Err(Error::Dimension { expected: cfg.d_img, got: v.cols() });
            }
            Some(Visual { features: g.constant(v.clone()), open: vec![true; v.rows()] })
        }
        _ => None,
    };
    let t = Transformer::new(cfg, prefix);
    let h = t.decode(&mut g, &b, y, enc, src, vis.as_ref(), None)?;
    let logits = t.project(&mut g, &b, h, "out")?;
    Ok(g.value(logits).clone())
}

/// Plain gated fusion of `[len x d_model]` states with one visual vector,
/// using parameters `{name}/...`.
pub fn gated_fusion(cfg: &TransformerConfig, params: &ParamSet, name: &str, h: &Tensor, v: &[f64]) -> Result<Tensor> {
    if !h.is_finite() || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gated_fusion input".into()));
    }
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let hv = g.constant(h.clone());
    let fv = g.constant(Tensor::matrix(1, v.len(), v.to_vec())?);
    let (prefix, leaf) =
        name.rsplit_once('/').ok_or_else(|| Error::InvalidArgument(format!("fusion name {name} needs a prefix")))?;
    let vis = Visual { features: fv, open: vec![true] };
    let out = Transformer::new(cfg, prefix).fuse(&mut g, &b, leaf, hv, h.rows(), &vis)?;
    Ok(g.value(out).clone())
}
