//! Image-to-sequence model: convolutional stem with a global-context block,
//! transformer decoder, and an optional head that fuses the last two decoder
//! layers.
//!
//! Shapes follow one convention throughout: activations are row-major
//! `[rows, features]` matrices. Image batches are stored channels-last, one
//! row per pixel, so a convolution is a patch gather followed by a GEMM.
//! Token sequences of a batch are packed back to back without padding; the
//! attention kernels work on per-sample segments.

mod config;
pub mod graph;
mod infer;
pub mod kernels;
pub mod tensor;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

pub use config::ModelConfig;
pub use infer::{greedy_decode, GreedyOutput};

use crate::image::ImageTensor;
use crate::rng::{derive_seed, rng_from};
use crate::vocab::{PAD, SOS};
use crate::{Error, Result};
use graph::{Graph, Var};
use kernels::{ConvGeom, Segment};
use tensor::{Mat, Real, Tensor, TensorMap};

/// Momentum of the batch-normalization running statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored running statistics (inference).
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
    Zeros,
    Ones,
}

/// Every trainable tensor a config implies, with its initializer.
fn param_specs(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));
    let mut cin = c.in_channels;
    for (i, &cout) in c.conv_channels().iter().enumerate() {
        push(format!("encoder.conv{i}.weight"), vec![cout, cin, 3, 3], Init::FanIn(cin * 9));
        push(format!("encoder.bn{i}.weight"), vec![cout], Init::Ones);
        push(format!("encoder.bn{i}.bias"), vec![cout], Init::Zeros);
        cin = cout;
    }
    let (d, r) = (c.d_model, c.gc_bottleneck());
    let mut linear = |name: &str, out: usize, inp: usize| {
        push(format!("{name}.weight"), vec![out, inp], Init::FanIn(inp));
        push(format!("{name}.bias"), vec![out], Init::Zeros);
    };
    linear("encoder.gc.key", 1, d);
    linear("encoder.gc.transform1", r, d);
    linear("encoder.gc.transform2", d, r);
    for l in 0..c.n_decoder_layers {
        for part in ["self_attn", "cross_attn"] {
            for proj in ["q", "k", "v", "o"] {
                linear(&format!("decoder.layer{l}.{part}.{proj}"), d, d);
            }
        }
        linear(&format!("decoder.layer{l}.ffn.fc1"), c.ffn_dim, d);
        linear(&format!("decoder.layer{l}.ffn.fc2"), d, c.ffn_dim);
    }
    if c.feac_enabled {
        linear("decoder.feac", d, 2 * d);
    }
    linear("decoder.proj", c.vocab_size, d);
    let mut norm = |name: String, n: usize| {
        push(format!("{name}.weight"), vec![n], Init::Ones);
        push(format!("{name}.bias"), vec![n], Init::Zeros);
    };
    norm("encoder.gc.ln".into(), r);
    for l in 0..c.n_decoder_layers {
        for i in 1..=3 {
            norm(format!("decoder.layer{l}.ln{i}"), d);
        }
    }
    norm("decoder.norm".into(), d);
    push("decoder.embed.weight".into(), vec![c.vocab_size, d], Init::FanIn(d));
    specs
}

/// Parameters and normalization buffers of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: TensorMap<T>,
    /// Batch-normalization running statistics (not trained).
    pub buffers: TensorMap<T>,
}

/// Gradients plus the batch statistics observed during the forward pass.
pub struct LossOutput<T: Real> {
    pub loss: T,
    pub grads: TensorMap<T>,
    pub batch_stats: Vec<(String, Vec<T>, Vec<T>, usize)>,
    /// Number of predicted positions that contributed to the loss.
    pub positions: usize,
}

/// One teacher-forced training example: decoder inputs and next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl TeacherForced {
    /// From an encoded `SOS ... EOS` sequence. Targets equal to PAD are masked.
    pub fn from_sequence(ids: &[usize]) -> Result<Self> {
        if ids.len() < 2 || ids[0] != SOS {
            return Err(Error::Shape("teacher forcing needs SOS followed by at least one token".into()));
        }
        Ok(Self {
            inputs: ids[..ids.len() - 1].to_vec(),
            targets: ids[1..].iter().map(|&t| (t != PAD).then_some(t)).collect(),
        })
    }
}

impl<T: Real> Model<T> {
    /// Deterministic initialization; each tensor draws from its own stream
    /// derived from `seed` and its name.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape, init) in param_specs(&config) {
            let mut t = Tensor::zeros(&shape);
            match init {
                Init::Zeros => {}
                Init::Ones => t.data.iter_mut().for_each(|v| *v = T::one()),
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / libm::sqrt(fan_in as f64);
                    let mut rng = rng_from(derive_seed(seed, &name));
                    for v in &mut t.data {
                        *v = T::from_f64(rng.random_range(-bound..bound));
                    }
                }
            }
            params.insert(name, t);
        }
        let mut buffers = BTreeMap::new();
        for (i, &c) in config.conv_channels().iter().enumerate() {
            buffers.insert(format!("encoder.bn{i}.running_mean"), Tensor::zeros(&[c]));
            buffers.insert(format!("encoder.bn{i}.running_var"), Tensor::filled(&[c], T::one()));
        }
        Ok(Self { config, params, buffers })
    }

    /// Checks that parameter and buffer names and shapes match the config.
    pub fn check_layout(&self) -> Result<()> {
        let specs = param_specs(&self.config);
        if specs.len() != self.params.len() {
            return Err(Error::KeyMismatch(format!("expected {} parameters, found {}", specs.len(), self.params.len())));
        }
        for (name, shape, _) in &specs {
            match self.params.get(name) {
                Some(t) if &t.shape == shape && t.data.len() == shape.iter().product::<usize>() => {}
                Some(t) => return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", t.shape))),
                None => return Err(Error::KeyMismatch(format!("missing parameter {name}"))),
            }
        }
        for (i, &c) in self.config.conv_channels().iter().enumerate() {
            for key in ["running_mean", "running_var"] {
                let name = format!("encoder.bn{i}.{key}");
                if self.buffers.get(&name).map(|t| t.data.len()) != Some(c) {
                    return Err(Error::KeyMismatch(format!("buffer {name} missing or wrong size")));
                }
            }
        }
        if self.buffers.len() != 2 * self.config.conv_stages() {
            return Err(Error::KeyMismatch("unexpected buffers".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: tensor::cast_map(&self.params),
            buffers: tensor::cast_map(&self.buffers),
        }
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Folds observed batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<T>, Vec<T>, usize)]) {
        let m = T::from_f64(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (prefix, mean, var, count) in stats {
            let unbias = if *count > 1 { T::from_f64(*count as f64 / (*count - 1) as f64) } else { T::one() };
            if let Some(rm) = self.buffers.get_mut(&format!("{prefix}.running_mean")) {
                for (r, &b) in rm.data.iter_mut().zip(mean) {
                    *r = m * *r + one_m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{prefix}.running_var")) {
                for (r, &b) in rv.data.iter_mut().zip(var) {
                    *r = m * *r + one_m * b * unbias;
                }
            }
        }
    }

    /// Mean teacher-forced cross-entropy and its gradient for every parameter.
    pub fn loss(&self, images: &[&ImageTensor], targets: &[TeacherForced], mode: NormMode) -> Result<LossOutput<T>> {
        if images.len() != targets.len() || images.is_empty() {
            return Err(Error::Shape("need one target per image and at least one image".into()));
        }
        let mut fwd = Forward::new(self, true);
        let memory = fwd.encode(images, mode)?;
        let inputs: Vec<&[usize]> = targets.iter().map(|t| t.inputs.as_slice()).collect();
        let logits = fwd.decode(memory, &inputs)?.logits;
        let flat: Vec<Option<usize>> = targets.iter().flat_map(|t| t.targets.iter().copied()).collect();
        let positions = flat.iter().filter(|t| t.is_some()).count();
        let loss_var = fwd.g.cross_entropy(logits, flat);
        let loss = fwd.g.value(loss_var).data[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads_raw = fwd.g.backward(loss_var);
        let mut grads = BTreeMap::new();
        for (name, var) in &fwd.vars {
            let shape = self.params[name].shape.clone();
            let data = match grads_raw.take(*var) {
                Some(m) => m.data,
                None => vec![T::zero(); self.params[name].len()],
            };
            grads.insert(name.clone(), Tensor { shape, data });
        }
        for (name, t) in &self.params {
            grads.entry(name.clone()).or_insert_with(|| Tensor::zeros(&t.shape));
        }
        let batch_stats = fwd.take_batch_stats();
        Ok(LossOutput { loss, grads, batch_stats, positions })
    }

    /// Mean teacher-forced cross-entropy without gradients, with the number of
    /// counted positions.
    pub fn eval_loss(&self, images: &[&ImageTensor], targets: &[TeacherForced], mode: NormMode) -> Result<(f64, usize)> {
        if images.len() != targets.len() || images.is_empty() {
            return Err(Error::Shape("need one target per image and at least one image".into()));
        }
        let mut fwd = Forward::new(self, false);
        let memory = fwd.encode(images, mode)?;
        let inputs: Vec<&[usize]> = targets.iter().map(|t| t.inputs.as_slice()).collect();
        let logits = fwd.decode(memory, &inputs)?.logits;
        let flat: Vec<Option<usize>> = targets.iter().flat_map(|t| t.targets.iter().copied()).collect();
        let positions = flat.iter().filter(|t| t.is_some()).count();
        let loss = fwd.g.cross_entropy(logits, flat);
        Ok((fwd.g.value(loss).data[0].as_f64(), positions))
    }

    /// Teacher-forced logits `[inputs.len(), vocab]` for one image.
    pub fn teacher_forced_logits(&self, img: &ImageTensor, inputs: &[usize], mode: NormMode) -> Result<Mat<T>> {
        let mut fwd = Forward::new(self, false);
        let memory = fwd.encode(&[img], mode)?;
        let logits = fwd.decode(memory, &[inputs])?.logits;
        Ok(fwd.g.value(logits).clone())
    }

    /// Encoder output `[h*w/df^2, d_model]` for one image.
    pub fn encode_image(&self, img: &ImageTensor, mode: NormMode) -> Result<Mat<T>> {
        let mut fwd = Forward::new(self, false);
        let memory = fwd.encode(&[img], mode)?;
        Ok(fwd.g.value(memory).clone())
    }

    /// Logits for the position after `prefix` (which starts with SOS). Runs the
    /// whole prefix through the decoder without caching.
    pub fn decode_step(&self, memory: &Mat<T>, prefix: &[usize]) -> Result<Vec<T>> {
        if prefix.is_empty() {
            return Err(Error::Shape("prefix must contain at least SOS".into()));
        }
        if prefix.len() > self.config.max_decode_len + 1 {
            return Err(Error::SequenceTooLong { len: prefix.len(), max: self.config.max_decode_len + 1 });
        }
        let mut fwd = Forward::new(self, false);
        let mem = fwd.g.constant(memory.clone());
        let logits = fwd.decode(mem, &[prefix])?.logits;
        Ok(fwd.g.value(logits).row(prefix.len() - 1).to_vec())
    }
}

/// Outputs of a decoder pass.
pub struct DecoderVars {
    pub logits: Var,
    /// Residual stream after each decoder layer.
    pub layer_outputs: Vec<Var>,
    /// Self-attention nodes, one per layer.
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

/// One forward pass under construction.
pub struct Forward<'m, T: Real> {
    model: &'m Model<T>,
    pub g: Graph<T>,
    vars: BTreeMap<String, Var>,
    bn_prefixes: Vec<String>,
}

impl<'m, T: Real> Forward<'m, T> {
    pub fn new(model: &'m Model<T>, record: bool) -> Self {
        Self { model, g: Graph::new(record), vars: BTreeMap::new(), bn_prefixes: Vec::new() }
    }

    /// Graph node for a named parameter, created on first use.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let t = self.model.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let (r, c) = t.as_mat_dims();
        let v = self.g.param(Mat::from_vec(r, c, t.data.clone()));
        self.vars.insert(name.into(), v);
        v
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    fn lin(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.g.linear(x, w, Some(b))
    }

    fn ln(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.g.layer_norm(x, w, b)
    }

    fn take_batch_stats(&mut self) -> Vec<(String, Vec<T>, Vec<T>, usize)> {
        self.g
            .batch_stats()
            .iter()
            .zip(&self.bn_prefixes)
            .map(|((_, s), p)| (p.clone(), s.mean.clone(), s.var.clone(), s.count))
            .collect()
    }

    /// Convolutional stem, global-context block and 2-D positional encoding.
    /// Output rows are grouped per image: `[n * grid_h * grid_w, d_model]`.
    pub fn encode(&mut self, images: &[&ImageTensor], mode: NormMode) -> Result<Var> {
        let c = &self.model.config;
        let (h0, w0, cin) = (c.input_h, c.input_w, c.in_channels);
        let n = images.len();
        let mut x = Mat::zeros(n * h0 * w0, cin);
        for (i, img) in images.iter().enumerate() {
            if img.height() != h0 || img.width() != w0 || img.channels() != cin {
                return Err(Error::Shape(format!(
                    "image {}x{}x{} does not match model input {}x{}x{}",
                    img.channels(),
                    img.height(),
                    img.width(),
                    cin,
                    h0,
                    w0
                )));
            }
            for ch in 0..cin {
                for (p, &v) in img.plane(ch).iter().enumerate() {
                    x.data[(i * h0 * w0 + p) * cin + ch] = T::from_f64(f64::from(v));
                }
            }
        }
        let mut x = self.g.constant(x);
        let (mut h, mut w, mut ch) = (h0, w0, cin);
        let channels = c.conv_channels();
        for (i, &cout) in channels.iter().enumerate() {
            let geom = ConvGeom { batch: n, height: h, width: w, channels: ch, kernel: 3, stride: 2, pad: 1 };
            let cols = self.g.im2col(x, geom);
            let wv = self.p(&format!("encoder.conv{i}.weight"));
            let y = self.g.linear(cols, wv, None);
            let gamma = self.p(&format!("encoder.bn{i}.weight"));
            let beta = self.p(&format!("encoder.bn{i}.bias"));
            let prefix = format!("encoder.bn{i}");
            let y = match mode {
                NormMode::Batch => {
                    self.bn_prefixes.push(prefix);
                    self.g.batch_norm(y, gamma, beta, None)
                }
                NormMode::Running => {
                    let rm = &self.model.buffers[&format!("{prefix}.running_mean")].data;
                    let rv = &self.model.buffers[&format!("{prefix}.running_var")].data;
                    self.g.batch_norm(y, gamma, beta, Some((rm, rv)))
                }
            };
            x = self.g.relu(y);
            h = geom.out_height();
            w = geom.out_width();
            ch = cout;
        }
        let seg = h * w;
        // Global context: attention-pooled descriptor, bottleneck transform, broadcast add.
        let logits = self.lin(x, "encoder.gc.key");
        let ctx = self.g.gc_pool(x, logits, seg);
        let t = self.lin(ctx, "encoder.gc.transform1");
        let t = self.ln(t, "encoder.gc.ln");
        let t = self.g.relu(t);
        let t = self.lin(t, "encoder.gc.transform2");
        let x = self.g.segment_add(x, t, seg);
        let pe = kernels::positional_2d::<T>(h, w, ch);
        let mut tiled = Mat::zeros(n * seg, ch);
        for i in 0..n {
            tiled.data[i * seg * ch..(i + 1) * seg * ch].copy_from_slice(&pe.data);
        }
        let pe = self.g.constant(tiled);
        Ok(self.g.add(x, pe))
    }

    /// Decoder over packed input sequences; `memory` holds one block of
    /// `memory_len` rows per sequence.
    pub fn decode(&mut self, memory: Var, inputs: &[&[usize]]) -> Result<DecoderVars> {
        let c = self.model.config.clone();
        let d = c.d_model;
        let mem_len = c.memory_len();
        if self.g.value(memory).rows != mem_len * inputs.len() {
            return Err(Error::Shape("memory rows do not match batch size".into()));
        }
        let mut ids = Vec::new();
        let mut self_segs = Vec::new();
        let mut cross_segs = Vec::new();
        let mut start = 0;
        for (i, seq) in inputs.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Shape("empty decoder input".into()));
            }
            if seq.len() > c.max_decode_len + 1 {
                return Err(Error::SequenceTooLong { len: seq.len(), max: c.max_decode_len + 1 });
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= c.vocab_size) {
                return Err(Error::InvalidId { id: bad, size: c.vocab_size });
            }
            ids.extend_from_slice(seq);
            self_segs.push(Segment { q_start: start, q_len: seq.len(), k_start: start, k_len: seq.len() });
            cross_segs.push(Segment { q_start: start, q_len: seq.len(), k_start: i * mem_len, k_len: mem_len });
            start += seq.len();
        }
        let mut pe = Mat::zeros(ids.len(), d);
        let mut row = 0;
        for seq in inputs {
            let p = kernels::positional_1d::<T>(seq.len(), d);
            pe.data[row * d..(row + seq.len()) * d].copy_from_slice(&p.data);
            row += seq.len();
        }
        let table = self.p("decoder.embed.weight");
        let emb = self.g.embedding(table, ids, T::from_f64(libm::sqrt(d as f64)));
        let pe = self.g.constant(pe);
        let mut x = self.g.add(emb, pe);
        let mut layer_outputs = Vec::new();
        let mut self_attention = Vec::new();
        let mut cross_attention = Vec::new();
        for l in 0..c.n_decoder_layers {
            let pre = format!("decoder.layer{l}");
            let h = self.ln(x, &format!("{pre}.ln1"));
            let q = self.lin(h, &format!("{pre}.self_attn.q"));
            let k = self.lin(h, &format!("{pre}.self_attn.k"));
            let v = self.lin(h, &format!("{pre}.self_attn.v"));
            let a = self.g.attention(q, k, v, self_segs.clone(), c.n_heads, true);
            self_attention.push(a);
            let o = self.lin(a, &format!("{pre}.self_attn.o"));
            x = self.g.add(x, o);

            let h = self.ln(x, &format!("{pre}.ln2"));
            let q = self.lin(h, &format!("{pre}.cross_attn.q"));
            let k = self.lin(memory, &format!("{pre}.cross_attn.k"));
            let v = self.lin(memory, &format!("{pre}.cross_attn.v"));
            let a = self.g.attention(q, k, v, cross_segs.clone(), c.n_heads, false);
            cross_attention.push(a);
            let o = self.lin(a, &format!("{pre}.cross_attn.o"));
            x = self.g.add(x, o);

            let h = self.ln(x, &format!("{pre}.ln3"));
            let f = self.lin(h, &format!("{pre}.ffn.fc1"));
            let f = self.g.relu(f);
            let f = self.lin(f, &format!("{pre}.ffn.fc2"));
            x = self.g.add(x, f);
            layer_outputs.push(x);
        }
        let feat = if c.feac_enabled {
            let n = layer_outputs.len();
            let cat = self.g.concat_cols(layer_outputs[n - 2], layer_outputs[n - 1]);
            self.lin(cat, "decoder.feac")
        } else {
            x
        };
        let feat = self.ln(feat, "decoder.norm");
        let logits = self.lin(feat, "decoder.proj");
        Ok(DecoderVars { logits, layer_outputs, self_attention, cross_attention })
    }
}
