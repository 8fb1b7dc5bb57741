//! Inference forward pass: CNN + Conformer encoder, cross-modal Conformer fusion with
//! CLAP and visual embeddings, and the multi-ACCDDOA head.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::datagen::SplitMix64;
use crate::dsp::FeatureTensor;
use crate::error::{Error, Result};
use crate::labels::{MultiAccddoa, N_LANES};
use crate::numerics::{
    avgpool2d_stride2, conv2d_3x3, depthwise_conv1d, glu, layer_norm_rows, linear, matmul, norm_infer, relu,
    sigmoid, softmax_in_place, swish, NormAxis, NormParams, Tensor,
};

const WEIGHTS_MAGIC: &[u8; 4] = b"SSW1";
const EMBEDDING_MAGIC: &[u8; 4] = b"SSE1";
const NORM_EPS: f32 = 1e-5;
const MAX_NAME_BYTES: usize = 1 << 12;
const MAX_CONFIG_BYTES: usize = 1 << 16;

/// Architecture hyper-parameters. Stored inside every weights file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub in_channels: usize,
    /// Output channels of each CNN block; the last must equal `d_model`.
    pub cnn_channels: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub conv_kernel: usize,
    pub n_conformer: usize,
    pub n_audio_cmc: usize,
    pub n_av_cmc: usize,
    pub clap_dim: usize,
    pub visual_dim: usize,
    /// Tokens per video frame (patch tokens plus the class token).
    pub visual_tokens: usize,
    pub n_tracks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 13,
            in_channels: 4,
            cnn_channels: vec![64, 128, 256, 512],
            d_model: 512,
            n_heads: 8,
            ff_dim: 1024,
            conv_kernel: 51,
            n_conformer: 4,
            n_audio_cmc: 1,
            n_av_cmc: 2,
            clap_dim: 512,
            visual_dim: 768,
            visual_tokens: 577,
            n_tracks: 3,
        }
    }
}

impl ModelConfig {
    /// A scaled-down configuration for fixtures and quick experiments.
    pub fn tiny() -> Self {
        Self {
            n_classes: 13,
            in_channels: 4,
            cnn_channels: vec![8, 8, 16, 16],
            d_model: 16,
            n_heads: 2,
            ff_dim: 32,
            conv_kernel: 5,
            n_conformer: 2,
            n_audio_cmc: 1,
            n_av_cmc: 2,
            clap_dim: 12,
            visual_dim: 24,
            visual_tokens: 5,
            n_tracks: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("model config: {m}")));
        if self.cnn_channels.last() != Some(&self.d_model) {
            return bad(format!("last CNN block must output d_model = {}", self.d_model));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible into {} heads", self.d_model, self.n_heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("depthwise kernel {} must be odd", self.conv_kernel));
        }
        if self.n_tracks != crate::labels::N_TRACKS {
            return bad(format!("n_tracks must be {}", crate::labels::N_TRACKS));
        }
        let dims = [self.n_classes, self.in_channels, self.d_model, self.ff_dim, self.clap_dim, self.visual_dim, self.visual_tokens];
        if dims.contains(&0) || self.cnn_channels.contains(&0) {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }

    /// Time downsampling of the CNN stack.
    pub fn time_reduction(&self) -> usize {
        1 << self.cnn_channels.len()
    }

    pub fn output_dim(&self) -> usize {
        self.n_classes * self.n_tracks * N_LANES
    }

    /// Every parameter the forward pass reads, with its stored shape. Linear weights are
    /// stored `out x in`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut p = Vec::new();
        let d = self.d_model;
        let mut cin = self.in_channels;
        for (i, &co) in self.cnn_channels.iter().enumerate() {
            let pre = format!("encoder.cnn.{i}");
            p.push((format!("{pre}.conv1.weight"), vec![co, cin, 3, 3]));
            push_norm(&mut p, &format!("{pre}.bn1"), co, true);
            p.push((format!("{pre}.conv2.weight"), vec![co, co, 3, 3]));
            push_norm(&mut p, &format!("{pre}.bn2"), co, true);
            push_linear(&mut p, &format!("{pre}.shortcut"), co, cin);
            cin = co;
        }
        for j in 0..self.n_conformer {
            self.push_block(&mut p, &format!("encoder.conformer.{j}"), false);
        }
        for j in 0..self.n_audio_cmc {
            self.push_block(&mut p, &format!("audio_cmc.{j}"), true);
        }
        for j in 0..self.n_av_cmc {
            self.push_block(&mut p, &format!("av_cmc.{j}"), true);
        }
        if self.clap_dim != d {
            push_linear(&mut p, "clap.proj", d, self.clap_dim);
        }
        push_linear(&mut p, "visual.proj", d, self.visual_dim);
        push_linear(&mut p, "head.fc1", d, d);
        push_linear(&mut p, "head.fc2", self.output_dim(), d);
        p
    }

    fn push_block(&self, p: &mut Vec<(String, Vec<usize>)>, pre: &str, cross: bool) {
        let d = self.d_model;
        let ff = |p: &mut Vec<_>, name: &str| {
            push_norm(p, &format!("{pre}.{name}.norm"), d, false);
            push_linear(p, &format!("{pre}.{name}.linear1"), self.ff_dim, d);
            push_linear(p, &format!("{pre}.{name}.linear2"), d, self.ff_dim);
        };
        if cross {
            ff(p, "ff_alpha");
            ff(p, "ff_beta");
            push_norm(p, &format!("{pre}.attn.norm_q"), d, false);
            push_norm(p, &format!("{pre}.attn.norm_kv"), d, false);
        } else {
            ff(p, "ff1");
            push_norm(p, &format!("{pre}.attn.norm"), d, false);
        }
        for proj in ["q", "k", "v", "out"] {
            push_linear(p, &format!("{pre}.attn.{proj}"), d, d);
        }
        push_norm(p, &format!("{pre}.conv.norm"), d, false);
        push_linear(p, &format!("{pre}.conv.pointwise1"), 2 * d, d);
        p.push((format!("{pre}.conv.depthwise.weight"), vec![d, self.conv_kernel]));
        p.push((format!("{pre}.conv.depthwise.bias"), vec![d]));
        push_norm(p, &format!("{pre}.conv.bn"), d, true);
        push_linear(p, &format!("{pre}.conv.pointwise2"), d, d);
        ff(p, "ff2");
        push_norm(p, &format!("{pre}.final_norm"), d, false);
    }
}

fn push_linear(p: &mut Vec<(String, Vec<usize>)>, pre: &str, out: usize, inp: usize) {
    p.push((format!("{pre}.weight"), vec![out, inp]));
    p.push((format!("{pre}.bias"), vec![out]));
}

fn push_norm(p: &mut Vec<(String, Vec<usize>)>, pre: &str, n: usize, running: bool) {
    p.push((format!("{pre}.weight"), vec![n]));
    p.push((format!("{pre}.bias"), vec![n]));
    if running {
        p.push((format!("{pre}.running_mean"), vec![n]));
        p.push((format!("{pre}.running_var"), vec![n]));
    }
}

/// Named parameter store plus the configuration it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelWeights {
    /// Deterministic pseudo-random initialisation: fan-in scaled uniform weights and
    /// near-identity normalisation layers.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut uniform = |lo: f64, hi: f64| (lo + (hi - lo) * rng.next_f64()) as f32;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if shape.len() >= 2 {
                let bound = 1.0 / (shape[1..].iter().product::<usize>() as f64).sqrt();
                (0..n).map(|_| uniform(-bound, bound)).collect()
            } else if name.ends_with("running_var") {
                (0..n).map(|_| uniform(0.8, 1.5)).collect()
            } else if name.ends_with("running_mean") || name.ends_with(".bias") {
                (0..n).map(|_| uniform(-0.1, 0.1)).collect()
            } else {
                (0..n).map(|_| uniform(0.9, 1.1)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Checks the tensor set against the configuration's parameter table.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let table = self.config.parameter_shapes();
        let missing: Vec<String> = table.iter().filter(|(n, _)| !self.tensors.contains_key(n)).map(|(n, _)| n.clone()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingParameters(missing));
        }
        let known: BTreeMap<&str, &[usize]> = table.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
        let unknown: Vec<String> = self.tensors.keys().filter(|n| !known.contains_key(n.as_str())).cloned().collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownParameters(unknown));
        }
        for (name, t) in &self.tensors {
            if t.shape() != known[name.as_str()] {
                return Err(Error::shape(format!("parameter {name} has shape {:?}, expected {:?}", t.shape(), known[name.as_str()])));
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, WEIGHTS_MAGIC, 1)?;
        binio::write_bytes(w, serde_json::to_string(&self.config)?.as_bytes())?;
        binio::write_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            binio::write_bytes(w, name.as_bytes())?;
            binio::write_u32(w, t.shape().len() as u32)?;
            for &d in t.shape() {
                binio::write_u32(w, d as u32)?;
            }
            binio::write_f32s(w, t.data())?;
        }
        Ok(())
    }

    /// Reads and validates a weights container.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, WEIGHTS_MAGIC, 1)?;
        let config: ModelConfig = serde_json::from_slice(&binio::read_bytes(r, MAX_CONFIG_BYTES)?)
            .map_err(|e| Error::format(format!("weights config: {e}")))?;
        let count = binio::read_u32(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(binio::read_bytes(r, MAX_NAME_BYTES)?)
                .map_err(|_| Error::format("parameter name is not UTF-8"))?;
            let rank = binio::read_u32(r)? as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::format(format!("parameter {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| binio::read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format("shape overflow"))?;
            let data = binio::read_f32s(r, n)?;
            let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("parameter {name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::format(format!("duplicate parameter {name}")));
            }
        }
        binio::expect_eof(r)?;
        let weights = Self { config, tensors };
        weights.validate()?;
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}

/// Writes a `tokens x dim` embedding matrix (`SSE1`).
pub fn write_embedding<W: Write>(w: &mut W, t: &Tensor<f32>) -> Result<()> {
    let (n, d) = t.dims2()?;
    binio::write_header(w, EMBEDDING_MAGIC, 1)?;
    binio::write_u32(w, n as u32)?;
    binio::write_u32(w, d as u32)?;
    binio::write_f32s(w, t.data())
}

pub fn read_embedding<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    binio::read_header(r, EMBEDDING_MAGIC, 1)?;
    let n = binio::read_u32(r)? as usize;
    let d = binio::read_u32(r)? as usize;
    if n == 0 || d == 0 {
        return Err(Error::format("embedding has no tokens"));
    }
    let data = binio::read_f32s(r, n.checked_mul(d).ok_or_else(|| Error::format("embedding too large"))?)?;
    binio::expect_eof(r)?;
    let t = Tensor::new(vec![n, d], data)?;
    if !t.is_finite() {
        return Err(Error::data("embedding contains non-finite values"));
    }
    Ok(t)
}

struct Params<'a>(&'a BTreeMap<String, Tensor<f32>>);

impl Params<'_> {
    fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.0.get(name).ok_or_else(|| Error::MissingParameters(vec![name.to_string()]))
    }

    fn vec(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.data().to_vec())
    }

    fn linear(&self, pre: &str) -> Result<Linear> {
        Ok(Linear { w: self.get(&format!("{pre}.weight"))?.transpose()?, b: self.vec(&format!("{pre}.bias"))? })
    }

    fn layer_norm(&self, pre: &str) -> Result<LayerNorm> {
        Ok(LayerNorm { gamma: self.vec(&format!("{pre}.weight"))?, beta: self.vec(&format!("{pre}.bias"))? })
    }

    fn batch_norm(&self, pre: &str) -> Result<NormParams<f32>> {
        Ok(NormParams {
            gamma: self.vec(&format!("{pre}.weight"))?,
            beta: self.vec(&format!("{pre}.bias"))?,
            mean: self.vec(&format!("{pre}.running_mean"))?,
            var: self.vec(&format!("{pre}.running_var"))?,
        })
    }

    fn feed_forward(&self, pre: &str) -> Result<FeedForward> {
        Ok(FeedForward {
            norm: self.layer_norm(&format!("{pre}.norm"))?,
            linear1: self.linear(&format!("{pre}.linear1"))?,
            linear2: self.linear(&format!("{pre}.linear2"))?,
        })
    }

    fn attention(&self, pre: &str, cross: bool, n_heads: usize) -> Result<MultiHeadAttention> {
        let (norm_q, norm_kv) = if cross {
            (self.layer_norm(&format!("{pre}.norm_q"))?, Some(self.layer_norm(&format!("{pre}.norm_kv"))?))
        } else {
            (self.layer_norm(&format!("{pre}.norm"))?, None)
        };
        Ok(MultiHeadAttention {
            norm_q,
            norm_kv,
            q: self.linear(&format!("{pre}.q"))?,
            k: self.linear(&format!("{pre}.k"))?,
            v: self.linear(&format!("{pre}.v"))?,
            out: self.linear(&format!("{pre}.out"))?,
            n_heads,
        })
    }

    fn conv_module(&self, pre: &str) -> Result<ConvModule> {
        Ok(ConvModule {
            norm: self.layer_norm(&format!("{pre}.norm"))?,
            pointwise1: self.linear(&format!("{pre}.pointwise1"))?,
            depthwise: self.get(&format!("{pre}.depthwise.weight"))?.clone(),
            depthwise_bias: self.vec(&format!("{pre}.depthwise.bias"))?,
            bn: self.batch_norm(&format!("{pre}.bn"))?,
            pointwise2: self.linear(&format!("{pre}.pointwise2"))?,
        })
    }
}

/// Dense layer with the weight held `in x out`.
#[derive(Debug, Clone)]
struct Linear {
    w: Tensor<f32>,
    b: Vec<f32>,
}

impl Linear {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        linear(x, &self.w, Some(&self.b))
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

impl LayerNorm {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        layer_norm_rows(x, &self.gamma, &self.beta, NORM_EPS)
    }
}

/// `LN -> linear -> swish -> linear`.
#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    linear1: Linear,
    linear2: Linear,
}

impl FeedForward {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let h = self.linear1.forward(&self.norm.forward(x)?)?.map(swish);
        self.linear2.forward(&h)
    }

    /// Half-step residual `x + FF(x) / 2`.
    fn half_step(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        x.add_scaled(&self.forward(x)?, 0.5)
    }
}

/// Pre-normalised multi-head dot-product attention without positional terms.
///
/// Self-attention normalises once; cross-attention normalises queries and keys/values
/// with separate layer norms.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    norm_q: LayerNorm,
    norm_kv: Option<LayerNorm>,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    /// Attention output (before the residual) and the per-head `T_q x T_kv` weights.
    pub fn attend(&self, query: &Tensor<f32>, context: &Tensor<f32>) -> Result<(Tensor<f32>, Vec<Tensor<f32>>)> {
        let (tq, d) = query.dims2()?;
        let (tk, dk) = context.dims2()?;
        if d != dk {
            return Err(Error::shape(format!("query dim {d} != context dim {dk}")));
        }
        let qn = self.norm_q.forward(query)?;
        let kn = match &self.norm_kv {
            Some(n) => n.forward(context)?,
            None => self.norm_q.forward(context)?,
        };
        let (q, k, v) = (self.q.forward(&qn)?, self.k.forward(&kn)?, self.v.forward(&kn)?);
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut concat = vec![0f32; tq * d];
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = Tensor::from_fn(&[tq, dh], |i| q.data()[(i / dh) * d + cols.start + i % dh]);
            let kt = Tensor::from_fn(&[dh, tk], |i| k.data()[(i % tk) * d + cols.start + i / tk]);
            let vh = Tensor::from_fn(&[tk, dh], |i| v.data()[(i / dh) * d + cols.start + i % dh]);
            let mut p = matmul(&qh, &kt)?.map(|s| s * scale);
            for row in p.data_mut().chunks_mut(tk) {
                softmax_in_place(row);
            }
            let oh = matmul(&p, &vh)?;
            for (t, row) in oh.data().chunks(dh).enumerate() {
                concat[t * d + cols.start..t * d + cols.end].copy_from_slice(row);
            }
            weights.push(p);
        }
        Ok((self.out.forward(&Tensor::new(vec![tq, d], concat)?)?, weights))
    }
}

/// `LN -> pointwise (2d) -> GLU -> depthwise -> BN -> swish -> pointwise`.
#[derive(Debug, Clone)]
struct ConvModule {
    norm: LayerNorm,
    pointwise1: Linear,
    depthwise: Tensor<f32>,
    depthwise_bias: Vec<f32>,
    bn: NormParams<f32>,
    pointwise2: Linear,
}

impl ConvModule {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let h = glu(&self.pointwise1.forward(&self.norm.forward(x)?)?)?;
        let h = depthwise_conv1d(&h, &self.depthwise, Some(&self.depthwise_bias))?;
        let h = norm_infer(&h, &self.bn, NORM_EPS, NormAxis::Trailing)?.map(swish);
        self.pointwise2.forward(&h)
    }
}

/// Shared second half of both block types: conv module, half-step FF, final norm.
#[derive(Debug, Clone)]
struct BlockTail {
    conv: ConvModule,
    ff2: FeedForward,
    final_norm: LayerNorm,
}

impl BlockTail {
    fn forward(&self, x: Tensor<f32>) -> Result<Tensor<f32>> {
        let x = x.add(&self.conv.forward(&x)?)?;
        let x = self.ff2.half_step(&x)?;
        self.final_norm.forward(&x)
    }
}

/// Macaron Conformer layer with self-attention.
#[derive(Debug, Clone)]
pub struct ConformerLayer {
    ff1: FeedForward,
    attn: MultiHeadAttention,
    tail: BlockTail,
}

impl ConformerLayer {
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = self.ff1.half_step(x)?;
        let (a, _) = self.attn.attend(&x, &x)?;
        self.tail.forward(x.add(&a)?)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }
}

/// Cross-modal Conformer layer: queries from `alpha`, keys and values from `beta`.
/// Both streams get their own half-step feed-forward first; the remaining sublayers and
/// all residuals run on `alpha`.
#[derive(Debug, Clone)]
pub struct CmcLayer {
    ff_alpha: FeedForward,
    ff_beta: FeedForward,
    attn: MultiHeadAttention,
    tail: BlockTail,
}

impl CmcLayer {
    pub fn forward(&self, alpha: &Tensor<f32>, beta: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, da) = alpha.dims2()?;
        let (_, db) = beta.dims2()?;
        if da != db {
            return Err(Error::shape(format!("alpha dim {da} != beta dim {db}")));
        }
        let a = self.ff_alpha.half_step(alpha)?;
        let b = self.ff_beta.half_step(beta)?;
        let (att, _) = self.attn.attend(&a, &b)?;
        self.tail.forward(a.add(&att)?)
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    /// Attention weights of this layer for the given inputs, one `T_a x T_b` map per head.
    pub fn attention_weights(&self, alpha: &Tensor<f32>, beta: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let a = self.ff_alpha.half_step(alpha)?;
        let b = self.ff_beta.half_step(beta)?;
        Ok(self.attn.attend(&a, &b)?.1)
    }
}

#[derive(Debug, Clone)]
struct CnnBlock {
    conv1: Tensor<f32>,
    bn1: NormParams<f32>,
    conv2: Tensor<f32>,
    bn2: NormParams<f32>,
    shortcut: Tensor<f32>,
    shortcut_bias: Vec<f32>,
}

impl CnnBlock {
    fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = x.dims3()?;
        let y = norm_infer(&conv2d_3x3(x, &self.conv1, None)?, &self.bn1, NORM_EPS, NormAxis::Leading)?.map(relu);
        let y = norm_infer(&conv2d_3x3(&y, &self.conv2, None)?, &self.bn2, NORM_EPS, NormAxis::Leading)?;
        let flat = x.clone().reshape(&[c, h * w])?;
        let mut skip = matmul(&self.shortcut, &flat)?;
        for (plane, &b) in skip.data_mut().chunks_mut(h * w).zip(&self.shortcut_bias) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        let co = self.shortcut_bias.len();
        let sum = y.add(&skip.reshape(&[co, h, w])?)?.map(relu);
        avgpool2d_stride2(&sum)
    }
}

/// The full network, built from validated weights. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct SeldModel {
    config: ModelConfig,
    cnn: Vec<CnnBlock>,
    conformer: Vec<ConformerLayer>,
    audio_cmc: Vec<CmcLayer>,
    av_cmc: Vec<CmcLayer>,
    clap_proj: Option<Linear>,
    visual_proj: Linear,
    head_fc1: Linear,
    head_fc2: Linear,
}

impl SeldModel {
    pub fn from_weights(weights: &ModelWeights) -> Result<Self> {
        weights.validate()?;
        let cfg = weights.config.clone();
        let p = Params(&weights.tensors);
        let cnn = (0..cfg.cnn_channels.len())
            .map(|i| {
                let pre = format!("encoder.cnn.{i}");
                Ok(CnnBlock {
                    conv1: p.get(&format!("{pre}.conv1.weight"))?.clone(),
                    bn1: p.batch_norm(&format!("{pre}.bn1"))?,
                    conv2: p.get(&format!("{pre}.conv2.weight"))?.clone(),
                    bn2: p.batch_norm(&format!("{pre}.bn2"))?,
                    shortcut: p.get(&format!("{pre}.shortcut.weight"))?.clone(),
                    shortcut_bias: p.vec(&format!("{pre}.shortcut.bias"))?,
                })
            })
            .collect::<Result<_>>()?;
        let tail = |pre: &str| -> Result<BlockTail> {
            Ok(BlockTail {
                conv: p.conv_module(&format!("{pre}.conv"))?,
                ff2: p.feed_forward(&format!("{pre}.ff2"))?,
                final_norm: p.layer_norm(&format!("{pre}.final_norm"))?,
            })
        };
        let conformer = (0..cfg.n_conformer)
            .map(|j| {
                let pre = format!("encoder.conformer.{j}");
                Ok(ConformerLayer {
                    ff1: p.feed_forward(&format!("{pre}.ff1"))?,
                    attn: p.attention(&format!("{pre}.attn"), false, cfg.n_heads)?,
                    tail: tail(&pre)?,
                })
            })
            .collect::<Result<_>>()?;
        let cmc = |pre: String| -> Result<CmcLayer> {
            Ok(CmcLayer {
                ff_alpha: p.feed_forward(&format!("{pre}.ff_alpha"))?,
                ff_beta: p.feed_forward(&format!("{pre}.ff_beta"))?,
                attn: p.attention(&format!("{pre}.attn"), true, cfg.n_heads)?,
                tail: tail(&pre)?,
            })
        };
        let audio_cmc = (0..cfg.n_audio_cmc).map(|j| cmc(format!("audio_cmc.{j}"))).collect::<Result<_>>()?;
        let av_cmc = (0..cfg.n_av_cmc).map(|j| cmc(format!("av_cmc.{j}"))).collect::<Result<_>>()?;
        let clap_proj = if cfg.clap_dim != cfg.d_model { Some(p.linear("clap.proj")?) } else { None };
        Ok(Self {
            visual_proj: p.linear("visual.proj")?,
            head_fc1: p.linear("head.fc1")?,
            head_fc2: p.linear("head.fc2")?,
            config: cfg,
            cnn,
            conformer,
            audio_cmc,
            av_cmc,
            clap_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn conformer_layer(&self, j: usize) -> Option<&ConformerLayer> {
        self.conformer.get(j)
    }

    pub fn audio_cmc_layer(&self, j: usize) -> Option<&CmcLayer> {
        self.audio_cmc.get(j)
    }

    pub fn av_cmc_layer(&self, j: usize) -> Option<&CmcLayer> {
        self.av_cmc.get(j)
    }

    /// CNN stack only: `C x T x F` -> `d_model x T/16 x F/16`.
    pub fn cnn_forward(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, _, _) = features.dims3()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!("model expects {} input channels, got {c}", self.config.in_channels)));
        }
        self.cnn.iter().try_fold(features.clone(), |x, b| b.forward(&x))
    }

    /// SELD encoder: CNN, frequency mean, Conformer stack. Output `T/16 x d_model`.
    pub fn encode(&self, features: &FeatureTensor) -> Result<Tensor<f32>> {
        let maps = self.cnn_forward(features.tensor())?;
        let (d, t, f) = maps.dims3()?;
        let x = Tensor::from_fn(&[t, d], |i| {
            let (ti, ch) = (i / d, i % d);
            let row = &maps.data()[(ch * t + ti) * f..(ch * t + ti + 1) * f];
            row.iter().sum::<f32>() / f as f32
        });
        self.conformer.iter().try_fold(x, |x, l| l.forward(&x))
    }

    /// CLAP embeddings mapped to `d_model` (identity when the dims already match).
    pub fn project_clap(&self, clap: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, dim) = clap.dims2()?;
        if dim != self.config.clap_dim {
            return Err(Error::shape(format!("CLAP embedding dim {dim}, model expects {}", self.config.clap_dim)));
        }
        match &self.clap_proj {
            Some(p) => p.forward(clap),
            None => Ok(clap.clone()),
        }
    }

    /// Token-wise mean over video frames followed by the visual projection.
    pub fn visual_pool_project(&self, frames: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let first = frames.first().ok_or_else(|| Error::data("no visual frames"))?;
        let want = [self.config.visual_tokens, self.config.visual_dim];
        let mut acc = vec![0f64; first.len()];
        for f in frames {
            if f.shape() != want {
                return Err(Error::shape(format!("visual frame shape {:?}, expected {want:?}", f.shape())));
            }
            acc.iter_mut().zip(f.data()).for_each(|(a, &v)| *a += v as f64);
        }
        let n = frames.len() as f64;
        let mean = Tensor::new(want.to_vec(), acc.iter().map(|&a| (a / n) as f32).collect())?;
        self.visual_proj.forward(&mean)
    }

    /// Splits a stacked `n_frames * tokens x dim` embedding into frames.
    pub fn split_visual_frames(&self, stacked: &Tensor<f32>) -> Result<Vec<Tensor<f32>>> {
        let (rows, dim) = stacked.dims2()?;
        let tokens = self.config.visual_tokens;
        if dim != self.config.visual_dim || rows % tokens != 0 {
            return Err(Error::shape(format!("visual embedding {rows}x{dim} is not a stack of {tokens}x{} frames", self.config.visual_dim)));
        }
        stacked
            .data()
            .chunks(tokens * dim)
            .map(|c| Tensor::new(vec![tokens, dim], c.to_vec()))
            .collect()
    }

    /// Raw head output `T/16 x (C * 3 * 4)` with tanh on lanes 0..3 and sigmoid on lane 3.
    pub fn forward_raw(&self, features: &FeatureTensor, clap: &Tensor<f32>, visual: Option<&[Tensor<f32>]>) -> Result<Tensor<f32>> {
        let mut x = self.encode(features)?;
        let clap = self.project_clap(clap)?;
        for l in &self.audio_cmc {
            x = l.forward(&x, &clap)?;
        }
        if let Some(frames) = visual {
            let beta = self.visual_pool_project(frames)?;
            for l in &self.av_cmc {
                x = l.forward(&x, &beta)?;
            }
        }
        let h = self.head_fc1.forward(&x)?.map(relu);
        let mut y = self.head_fc2.forward(&h)?;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = if i % N_LANES == N_LANES - 1 { sigmoid(*v) } else { v.tanh() };
        }
        Ok(y)
    }

    /// Full forward pass; pass `None` for visual to run audio only.
    pub fn forward(&self, features: &FeatureTensor, clap: &Tensor<f32>, visual: Option<&[Tensor<f32>]>) -> Result<MultiAccddoa> {
        let y = self.forward_raw(features, clap, visual)?;
        let (t, _) = y.dims2()?;
        MultiAccddoa::from_vec(t, self.config.n_classes, y.data().iter().map(|&v| v as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::N_FEATURE_CHANNELS;

    fn tiny() -> (ModelWeights, SeldModel) {
        let w = ModelWeights::random(&ModelConfig::tiny(), 7).unwrap();
        let m = SeldModel::from_weights(&w).unwrap();
        (w, m)
    }

    fn features(t: usize, f: usize, seed: u64) -> FeatureTensor {
        let mut rng = SplitMix64::new(seed);
        FeatureTensor::new(Tensor::from_fn(&[N_FEATURE_CHANNELS, t, f], |_| rng.next_f64() as f32 * 2.0 - 1.0)).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| rng.next_f64() as f32 - 0.5)
    }

    #[test]
    fn output_shapes() {
        let (_, m) = tiny();
        let cfg = m.config().clone();
        let out = m.forward(&features(64, 32, 1), &rand_tensor(&[3, cfg.clap_dim], 2), None).unwrap();
        assert_eq!((out.n_frames(), out.n_classes()), (4, 13));
        assert!(out.data().iter().all(|v| v.is_finite()));
        let enc = m.encode(&features(80, 16, 1)).unwrap();
        assert_eq!(enc.shape(), &[5, cfg.d_model]);
    }

    #[test]
    fn zero_input_zero_bias_cnn_is_zero() {
        let mut w = ModelWeights::random(&ModelConfig::tiny(), 3).unwrap();
        for (name, t) in w.tensors.iter_mut() {
            if name.starts_with("encoder.cnn") && (name.ends_with("bias") || name.ends_with("running_mean")) {
                t.data_mut().fill(0.0);
            }
        }
        let m = SeldModel::from_weights(&w).unwrap();
        let zeros = Tensor::zeros(&[4, 32, 32]);
        assert!(m.cnn_forward(&zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cnn_is_linear_without_relu_crossings() {
        // Positive weights, identity norms and positive inputs keep every ReLU in its
        // linear region, so doubling the input doubles the output.
        let mut w = ModelWeights::random(&ModelConfig::tiny(), 5).unwrap();
        for (name, t) in w.tensors.iter_mut() {
            if !name.starts_with("encoder.cnn") {
                continue;
            }
            if name.ends_with("running_var") || (name.contains(".bn") && name.ends_with("weight")) {
                t.data_mut().fill(1.0);
            } else if name.ends_with("bias") || name.ends_with("running_mean") {
                t.data_mut().fill(0.0);
            } else {
                t.data_mut().iter_mut().for_each(|v| *v = v.abs());
            }
        }
        let m = SeldModel::from_weights(&w).unwrap();
        let x = Tensor::from_fn(&[4, 16, 16], |i| 0.25 + (i % 7) as f32 * 0.125);
        let y1 = m.cnn_forward(&x).unwrap();
        let y2 = m.cnn_forward(&x.map(|v| 2.0 * v)).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((2.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_key_attention_ignores_logits() {
        let (mut w, m) = tiny();
        let d = m.config().d_model;
        let alpha = rand_tensor(&[6, d], 11);
        let beta = rand_tensor(&[1, d], 12);
        let layer = m.audio_cmc_layer(0).unwrap();
        let out = layer.forward(&alpha, &beta).unwrap();
        for p in layer.attention_weights(&alpha, &beta).unwrap() {
            assert!(p.data().iter().all(|&v| v == 1.0));
        }
        // Scrambling the query and key projections must not change anything.
        for name in ["audio_cmc.0.attn.q.weight", "audio_cmc.0.attn.k.weight"] {
            w.tensors.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v *= -3.0);
        }
        let m2 = SeldModel::from_weights(&w).unwrap();
        assert_eq!(m2.audio_cmc_layer(0).unwrap().forward(&alpha, &beta).unwrap(), out);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (_, m) = tiny();
        let d = m.config().d_model;
        let ws = m.av_cmc_layer(1).unwrap().attention_weights(&rand_tensor(&[7, d], 1), &rand_tensor(&[9, d], 2)).unwrap();
        assert_eq!(ws.len(), m.config().n_heads);
        for p in ws {
            for row in p.data().chunks(9) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn beta_rows_form_a_set() {
        let (_, m) = tiny();
        let d = m.config().d_model;
        let alpha = rand_tensor(&[5, d], 3);
        let beta = rand_tensor(&[4, d], 4);
        let perm = [2usize, 0, 3, 1];
        let shuffled = Tensor::from_fn(&[4, d], |i| beta.data()[perm[i / d] * d + i % d]);
        let l = m.audio_cmc_layer(0).unwrap();
        let a = l.forward(&alpha, &beta).unwrap();
        let b = l.forward(&alpha, &shuffled).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }

    #[test]
    fn visual_pooling() {
        let (_, m) = tiny();
        let cfg = m.config().clone();
        let f1 = rand_tensor(&[cfg.visual_tokens, cfg.visual_dim], 8);
        let f2 = rand_tensor(&[cfg.visual_tokens, cfg.visual_dim], 9);
        let one = m.visual_pool_project(std::slice::from_ref(&f1)).unwrap();
        assert_eq!(one.shape(), &[cfg.visual_tokens, cfg.d_model]);
        assert_eq!(m.visual_pool_project(&[f1.clone(), f1.clone()]).unwrap(), one);
        let mid = Tensor::from_fn(f1.shape(), |i| ((f1.data()[i] as f64 + f2.data()[i] as f64) / 2.0) as f32);
        assert_eq!(m.visual_pool_project(&[f1, f2]).unwrap(), m.visual_pool_project(&[mid]).unwrap());
        assert!(m.visual_pool_project(&[]).is_err());
    }

    #[test]
    fn audio_only_ignores_visual_weights() {
        let (mut w, m) = tiny();
        let feats = features(32, 16, 4);
        let clap = rand_tensor(&[2, m.config().clap_dim], 5);
        let before = m.forward(&feats, &clap, None).unwrap();
        for (name, t) in w.tensors.iter_mut() {
            if name.starts_with("av_cmc") || name.starts_with("visual") {
                t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            }
        }
        let after = SeldModel::from_weights(&w).unwrap().forward(&feats, &clap, None).unwrap();
        assert_eq!(before, after);
        let frames = vec![rand_tensor(&[m.config().visual_tokens, m.config().visual_dim], 6)];
        assert_ne!(m.forward(&feats, &clap, Some(&frames)).unwrap(), before);
    }

    #[test]
    fn weights_round_trip_and_errors() {
        let (w, _) = tiny();
        let mut buf = Vec::new();
        w.write(&mut buf).unwrap();
        assert_eq!(ModelWeights::read(&mut buf.as_slice()).unwrap(), w);

        let cut = &buf[..buf.len() - 3];
        assert!(matches!(ModelWeights::read(&mut &cut[..]), Err(Error::Format(_))));

        let mut missing = w.clone();
        missing.tensors.remove("head.fc2.bias");
        missing.tensors.remove("visual.proj.weight");
        match missing.validate() {
            Err(Error::MissingParameters(names)) => assert_eq!(names, vec!["visual.proj.weight", "head.fc2.bias"]),
            other => panic!("unexpected {other:?}"),
        }
        let mut extra = w.clone();
        extra.tensors.insert("head.fc3.weight".into(), Tensor::zeros(&[1]));
        assert!(matches!(extra.validate(), Err(Error::UnknownParameters(_))));

        let mut wrong = w;
        wrong.tensors.insert("head.fc1.bias".into(), Tensor::zeros(&[3]));
        assert!(matches!(wrong.validate(), Err(Error::Shape(_))));
    }

    #[test]
    fn embedding_round_trip() {
        let t = rand_tensor(&[3, 5], 1);
        let mut buf = Vec::new();
        write_embedding(&mut buf, &t).unwrap();
        assert_eq!(read_embedding(&mut buf.as_slice()).unwrap(), t);
        assert!(read_embedding(&mut &buf[..10]).is_err());
    }

    #[test]
    fn default_parameter_table() {
        let cfg = ModelConfig::default();
        let table = cfg.parameter_shapes();
        let get = |n: &str| table.iter().find(|(k, _)| k == n).map(|(_, s)| s.clone());
        assert_eq!(get("visual.proj.weight"), Some(vec![512, 768]));
        assert_eq!(get("encoder.conformer.3.conv.depthwise.weight"), Some(vec![512, 51]));
        assert_eq!(get("head.fc2.weight"), Some(vec![13 * 12, 512]));
        assert!(get("clap.proj.weight").is_none());
        assert!(get("av_cmc.1.attn.norm_kv.weight").is_some());
        assert!(get("audio_cmc.1.attn.q.weight").is_none());
    }
}
