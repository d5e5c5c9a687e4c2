//! Generic and Personalized Transformer Encoders for stop-or-go prediction.
//!
//! Both variants embed the common window with a linear map plus sinusoidal
//! positions and run a post-norm encoder stack, mean-pool over the window and
//! read out a go probability. They differ only in where attention keys come
//! from:
//!
//! * Generic: the first layer's keys come from a separate projection of the
//!   common window (with positions); later layers use plain self-attention.
//! * Personalized: keys come from the driver's statistics vector, projected
//!   to `d_model` and replicated across positions, combined with the layer
//!   input according to [`KeyMix`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::tape::{Tape, Var};
use super::tensor::Mat;
use crate::dataset::{Sample, COMMON_FEATURES, PERSONAL_FEATURES};
use crate::error::{Error, Result};
use crate::rng::SimRng;

const LN_EPS: f64 = 1e-5;
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Personalized,
    Generic,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Personalized => "personalized",
            Variant::Generic => "generic",
        }
    }
}

/// How the personal key source `P` combines with the layer input `H` in the
/// Personalized variant.
///
/// `Off` and `Add` leave every row of the key matrix carrying the same
/// personal term, and softmax cancels any score term that is constant across
/// keys: with `Off` each attention row is the uniform average of the values,
/// with `Add` the personal term drops out of the weights entirely. `Gate`
/// scales the layer input feature-wise by `1 + P`, which lets the statistics
/// change which positions are attended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyMix {
    Off,
    Add,
    Gate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub k_mix: KeyMix,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            layers: 2,
            d_ff: 64,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig::default(),
            k_mix: KeyMix::Gate,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.batch_size == 0 {
            return Err(Error::Config("layers, d_ff and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Named parameter arrays of one transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub variant: Variant,
    pub hyper: Hyper,
    pub init_seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

fn xavier(rows: usize, cols: usize, rng: &mut SimRng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.uniform_range(-limit, limit)).collect())
}

impl ModelParams {
    pub fn init(variant: Variant, hyper: &Hyper, init_seed: u64) -> Result<Self> {
        hyper.validate()?;
        let d = hyper.d_model;
        let mut rng = SimRng::new(init_seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut add = |name: String, m: Mat| {
            names.push(name);
            tensors.push(m);
        };
        add("embed.w".into(), xavier(COMMON_FEATURES, d, &mut rng));
        add("embed.b".into(), Mat::zeros(1, d));
        let key_in = match variant {
            Variant::Personalized => PERSONAL_FEATURES,
            Variant::Generic => COMMON_FEATURES,
        };
        add("key_embed.w".into(), xavier(key_in, d, &mut rng));
        add("key_embed.b".into(), Mat::zeros(1, d));
        for l in 0..hyper.layers {
            for p in ["wq", "wk", "wv", "wo"] {
                add(format!("layer{l}.{p}"), xavier(d, d, &mut rng));
                add(format!("layer{l}.{p}_b"), Mat::zeros(1, d));
            }
            add(format!("layer{l}.ln1_g"), Mat::from_vec(1, d, vec![1.0; d]));
            add(format!("layer{l}.ln1_b"), Mat::zeros(1, d));
            add(format!("layer{l}.ff1"), xavier(d, hyper.d_ff, &mut rng));
            add(format!("layer{l}.ff1_b"), Mat::zeros(1, hyper.d_ff));
            add(format!("layer{l}.ff2"), xavier(hyper.d_ff, d, &mut rng));
            add(format!("layer{l}.ff2_b"), Mat::zeros(1, d));
            add(format!("layer{l}.ln2_g"), Mat::from_vec(1, d, vec![1.0; d]));
            add(format!("layer{l}.ln2_b"), Mat::zeros(1, d));
        }
        add("head.w".into(), xavier(d, 1, &mut rng));
        add("head.b".into(), Mat::zeros(1, 1));
        Ok(Self {
            variant,
            hyper: hyper.clone(),
            init_seed,
            names,
            tensors,
        })
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    /// `(name, rows, cols)` for every array, in storage order.
    pub fn shapes(&self) -> Vec<(String, usize, usize)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, m)| (n.clone(), m.rows, m.cols))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Go probability for each sample.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(PREDICT_CHUNK) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let mut tape = Tape::new();
            let g = self.build(&mut tape, &batch)?;
            out.extend_from_slice(&tape.value(g.prob).data);
        }
        Ok(out)
    }

    pub fn forward(&self, sample: &Sample) -> Result<f64> {
        Ok(self.predict(std::slice::from_ref(sample))?[0])
    }

    /// Mean cross-entropy over `samples` and its gradient for every array.
    pub fn loss_and_grad(&self, samples: &[&Sample]) -> Result<(f64, Vec<Mat>)> {
        let batch = Batch::new(samples)?;
        let mut tape = Tape::new();
        let g = self.build(&mut tape, &batch)?;
        let loss = tape.bce(g.prob, &batch.labels);
        let value = tape.value(loss).data[0];
        let grads = tape.backward(loss);
        let out = g
            .params
            .iter()
            .zip(&self.tensors)
            .map(|(&v, m)| grads.of(v, m))
            .collect();
        Ok((value, out))
    }

    pub fn loss(&self, samples: &[&Sample]) -> Result<f64> {
        let batch = Batch::new(samples)?;
        let mut tape = Tape::new();
        let g = self.build(&mut tape, &batch)?;
        let loss = tape.bce(g.prob, &batch.labels);
        Ok(tape.value(loss).data[0])
    }

    /// Common-window embedding (`W×d_model`) for one sample.
    pub fn embed_common(&self, sample: &Sample) -> Result<Mat> {
        self.inspect(sample, |t, g| t.value(g.embedded).clone())
    }

    /// Personal-key embedding (`W×d_model`) for one sample.
    pub fn embed_personal(&self, sample: &Sample) -> Result<Mat> {
        if self.variant != Variant::Personalized {
            return Err(Error::Shape("only the personalized variant embeds statistics".into()));
        }
        self.inspect(sample, |t, g| t.value(g.key_embedded).clone())
    }

    /// Attention weights per layer and head (`W×W` each) for one sample.
    pub fn attention_weights(&self, sample: &Sample) -> Result<Vec<Vec<Mat>>> {
        self.inspect(sample, |t, g| {
            g.attention
                .iter()
                .map(|heads| heads.iter().map(|&v| t.value(v).clone()).collect())
                .collect()
        })
    }

    /// Layer-norm outputs (before gain and bias), two per layer.
    pub fn normalized_activations(&self, sample: &Sample) -> Result<Vec<Mat>> {
        self.inspect(sample, |t, g| g.norms.iter().map(|&v| t.value(v).clone()).collect())
    }

    fn inspect<T>(&self, sample: &Sample, f: impl Fn(&Tape, &Graph) -> T) -> Result<T> {
        let batch = Batch::new(&[sample])?;
        let mut tape = Tape::new();
        let g = self.build(&mut tape, &batch)?;
        Ok(f(&tape, &g))
    }

    fn build(&self, tape: &mut Tape, batch: &Batch) -> Result<Graph> {
        let hp = &self.hyper;
        let d = hp.d_model;
        let w = batch.window;
        let params: Vec<Var> = self.tensors.iter().map(|m| tape.leaf(m.clone())).collect();
        let p = |name: &str| -> Var {
            params[self.index(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
        };

        let pe = tape.leaf(positional_encoding(w, d).tile_rows(batch.len()));
        let common = tape.leaf(batch.common.clone());
        let x = tape.matmul(common, p("embed.w"));
        let x = tape.add_row(x, p("embed.b"));
        let embedded = tape.add(x, pe);

        let key_embedded = match self.variant {
            Variant::Personalized => {
                let personal = tape.leaf(batch.personal.clone());
                let k = tape.matmul(personal, p("key_embed.w"));
                tape.add_row(k, p("key_embed.b"))
            }
            Variant::Generic => {
                let k = tape.matmul(common, p("key_embed.w"));
                let k = tape.add_row(k, p("key_embed.b"));
                tape.add(k, pe)
            }
        };

        let mut h = embedded;
        let mut attention = Vec::with_capacity(hp.layers);
        let mut norms = Vec::with_capacity(2 * hp.layers);
        for l in 0..hp.layers {
            let key_src = match (self.variant, hp.k_mix) {
                (Variant::Generic, _) if l == 0 => key_embedded,
                (Variant::Generic, _) => h,
                (Variant::Personalized, KeyMix::Off) => key_embedded,
                (Variant::Personalized, KeyMix::Add) => tape.add(key_embedded, h),
                (Variant::Personalized, KeyMix::Gate) => {
                    let gate = tape.affine(key_embedded, 1.0, 1.0);
                    tape.mul(h, gate)
                }
            };
            let lp = |s: &str| p(&format!("layer{l}.{s}"));
            let (attn_out, weights) = multi_head(
                tape,
                h,
                key_src,
                [lp("wq"), lp("wq_b"), lp("wk"), lp("wk_b"), lp("wv"), lp("wv_b"), lp("wo"), lp("wo_b")],
                hp.heads,
                w,
                l,
            )?;
            attention.push(weights);
            let r = tape.add(h, attn_out);
            let n1 = tape.layer_norm(r, LN_EPS);
            norms.push(n1);
            let n1g = tape.mul_row(n1, lp("ln1_g"));
            let h1 = tape.add_row(n1g, lp("ln1_b"));
            let f = tape.matmul(h1, lp("ff1"));
            let f = tape.add_row(f, lp("ff1_b"));
            let f = tape.relu(f);
            let f = tape.matmul(f, lp("ff2"));
            let f = tape.add_row(f, lp("ff2_b"));
            let r2 = tape.add(h1, f);
            let n2 = tape.layer_norm(r2, LN_EPS);
            norms.push(n2);
            let n2g = tape.mul_row(n2, lp("ln2_g"));
            h = tape.add_row(n2g, lp("ln2_b"));
        }
        let pooled = tape.block_mean(h, w);
        let logit = tape.matmul(pooled, p("head.w"));
        let logit = tape.add_row(logit, p("head.b"));
        let prob = tape.sigmoid(logit);
        if !tape.value(prob).is_finite() {
            return Err(Error::Numeric {
                layer: hp.layers,
                msg: "non-finite output probability".into(),
            });
        }
        Ok(Graph {
            params,
            embedded,
            key_embedded,
            attention,
            norms,
            prob,
        })
    }
}

struct Graph {
    params: Vec<Var>,
    embedded: Var,
    key_embedded: Var,
    attention: Vec<Vec<Var>>,
    norms: Vec<Var>,
    prob: Var,
}

/// Scaled dot-product attention over `heads` column groups; `w` is the
/// sequence length of each stacked sample.
fn multi_head(
    tape: &mut Tape,
    src: Var,
    key_src: Var,
    [wq, bq, wk, bk, wv, bv, wo, bo]: [Var; 8],
    heads: usize,
    w: usize,
    layer: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(src).cols;
    let dh = d / heads;
    let q = tape.matmul(src, wq);
    let q = tape.add_row(q, bq);
    let k = tape.matmul(key_src, wk);
    let k = tape.add_row(k, bk);
    let v = tape.matmul(src, wv);
    let v = tape.add_row(v, bv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * dh, dh);
        let kh = tape.slice_cols(k, hd * dh, dh);
        let vh = tape.slice_cols(v, hd * dh, dh);
        let s = tape.block_scores(qh, kh, w);
        let s = tape.affine(s, scale, 0.0);
        let a = tape.softmax_rows(s);
        if !tape.value(a).is_finite() {
            return Err(Error::Numeric {
                layer,
                msg: format!("non-finite attention scores in head {hd}"),
            });
        }
        weights.push(a);
        outs.push(tape.block_mix(a, vh, w));
    }
    let cat = tape.concat_cols(&outs);
    let o = tape.matmul(cat, wo);
    let o = tape.add_row(o, bo);
    Ok((o, weights))
}

/// Sinusoidal encoding: even columns `sin`, odd columns `cos`.
pub fn positional_encoding(w: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(w, d);
    for pos in 0..w {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            m.data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    m
}

impl Mat {
    fn tile_rows(&self, times: usize) -> Mat {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Mat::from_vec(self.rows * times, self.cols, data)
    }
}

/// Samples stacked into `(B·W)×features` matrices.
struct Batch {
    window: usize,
    common: Mat,
    personal: Mat,
    labels: Vec<f64>,
}

impl Batch {
    fn new(samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let window = first.common_seq.len();
        if window == 0 {
            return Err(Error::Shape("sample has an empty window".into()));
        }
        let rows = samples.len() * window;
        let mut common = Vec::with_capacity(rows * COMMON_FEATURES);
        let mut personal = Vec::with_capacity(rows * PERSONAL_FEATURES);
        for s in samples {
            if s.common_seq.len() != window {
                return Err(Error::Shape(format!(
                    "window length {} differs from {window}",
                    s.common_seq.len()
                )));
            }
            for row in &s.common_seq {
                common.extend_from_slice(row);
                personal.extend_from_slice(&s.personal);
            }
        }
        Ok(Self {
            window,
            common: Mat::from_vec(rows, COMMON_FEATURES, common),
            personal: Mat::from_vec(rows, PERSONAL_FEATURES, personal),
            labels: samples.iter().map(|s| f64::from(s.label)).collect(),
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

/// Mini-batch Adam training. Shuffling and reduction order are fixed by
/// `seed`, so equal inputs give bit-identical parameters.
pub fn train(
    samples: &[Sample],
    hyper: &Hyper,
    seed: u64,
    variant: Variant,
) -> Result<(ModelParams, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut params = ModelParams::init(variant, hyper, seed)?;
    let mut adam = Adam::new(hyper.adam, &params.tensors);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = SimRng::stream(seed, 0x5EED);
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) = params.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            total += loss * batch.len() as f64;
            adam.update(&mut params.tensors, &grads);
        }
        let mean = total / samples.len() as f64;
        if !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: f64::NAN });
        }
        history.push(mean);
    }
    Ok((params, history))
}

/// Loads parameters by name from a map, checking every shape.
pub fn params_from_map(
    variant: Variant,
    hyper: &Hyper,
    init_seed: u64,
    mut arrays: HashMap<String, Mat>,
) -> Result<ModelParams> {
    let mut params = ModelParams::init(variant, hyper, init_seed)?;
    for (name, slot) in params.names.iter().zip(params.tensors.iter_mut()) {
        let m = arrays
            .remove(name)
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks {name}")))?;
        if m.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "{name}: expected {:?}, found {:?}",
                slot.shape(),
                m.shape()
            )));
        }
        *slot = m;
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Shape(format!("checkpoint has unknown array {extra}")));
    }
    Ok(params)
}

/// Worst relative error between analytic gradients and central finite
/// differences over every parameter entry.
pub fn finite_difference_check(params: &ModelParams, samples: &[&Sample], h: f64) -> Result<f64> {
    let (_, grads) = params.loss_and_grad(samples)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for k in 0..g.data.len() {
            let orig = probe.tensors[i].data[k];
            probe.tensors[i].data[k] = orig + h;
            let up = probe.loss(samples)?;
            probe.tensors[i].data[k] = orig - h;
            let down = probe.loss(samples)?;
            probe.tensors[i].data[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = g.data[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
