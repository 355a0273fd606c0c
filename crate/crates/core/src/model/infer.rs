//! Greedy decoding with cached self-attention keys and values.

use alloc::format;
use alloc::vec::Vec;

use super::kernels::{self, Segment};
use super::tensor::{Mat, Real};
use super::{Model, NormMode};
use crate::image::ImageTensor;
use crate::vocab::{TokenSequence, EOS, SOS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyOutput {
    /// Body tokens (no SOS/EOS) with their log-probabilities.
    pub sequence: TokenSequence,
    /// Log-probability of the terminating EOS, if one was emitted.
    pub eos_logprob: Option<f64>,
    /// Mean over every decoding step, the EOS step included.
    pub mean_logprob: f64,
}

struct LayerCache<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    cross_k: Mat<T>,
    cross_v: Mat<T>,
}

fn lin<T: Real>(m: &Model<T>, x: &Mat<T>, name: &str) -> Mat<T> {
    let w = &m.params[&format!("{name}.weight")];
    let b = &m.params[&format!("{name}.bias")];
    kernels::linear(x.view(), &w.data, w.shape[0], Some(&b.data))
}

fn ln<T: Real>(m: &Model<T>, x: &Mat<T>, name: &str) -> Mat<T> {
    let g = &m.params[&format!("{name}.weight")].data;
    let b = &m.params[&format!("{name}.bias")].data;
    kernels::layer_norm(x, g, b).0
}

fn add_in_place<T: Real>(x: &mut Mat<T>, y: &Mat<T>) {
    for (a, &b) in x.data.iter_mut().zip(&y.data) {
        *a += b;
    }
}

/// Index of the largest value (lowest index on ties) and its log-softmax.
pub fn argmax_logprob<T: Real>(logits: &[T]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let max = logits[best].as_f64();
    let lse = max + libm::log(logits.iter().map(|&v| libm::exp(v.as_f64() - max)).sum::<f64>());
    (best, logits[best].as_f64() - lse)
}

/// Greedy decoding from SOS until EOS or `max_decode_len` body tokens.
/// Batch normalization uses running statistics.
pub fn greedy_decode<T: Real>(model: &Model<T>, img: &ImageTensor) -> Result<GreedyOutput> {
    let c = &model.config;
    let d = c.d_model;
    let memory = model.encode_image(img, NormMode::Running)?;
    let mut caches: Vec<LayerCache<T>> = (0..c.n_decoder_layers)
        .map(|l| LayerCache {
            self_k: Vec::new(),
            self_v: Vec::new(),
            cross_k: lin(model, &memory, &format!("decoder.layer{l}.cross_attn.k")),
            cross_v: lin(model, &memory, &format!("decoder.layer{l}.cross_attn.v")),
        })
        .collect();
    let embed = &model.params["decoder.embed.weight"].data;
    let scale = T::from_f64(libm::sqrt(d as f64));
    let mem_len = memory.rows;

    let mut body = Vec::new();
    let mut logprobs = Vec::new();
    let mut eos_logprob = None;
    let mut token = SOS;
    while body.len() < c.max_decode_len {
        let pos = body.len();
        let mut x = Mat::zeros(1, d);
        kernels::sinusoid(pos, d, &mut x.data);
        for (o, &e) in x.data.iter_mut().zip(&embed[token * d..(token + 1) * d]) {
            *o += e * scale;
        }
        let mut outputs = Vec::with_capacity(c.n_decoder_layers);
        for (l, cache) in caches.iter_mut().enumerate() {
            let pre = format!("decoder.layer{l}");
            let h = ln(model, &x, &format!("{pre}.ln1"));
            let q = lin(model, &h, &format!("{pre}.self_attn.q"));
            cache.self_k.extend(lin(model, &h, &format!("{pre}.self_attn.k")).data);
            cache.self_v.extend(lin(model, &h, &format!("{pre}.self_attn.v")).data);
            let k = Mat::from_vec(pos + 1, d, cache.self_k.clone());
            let v = Mat::from_vec(pos + 1, d, cache.self_v.clone());
            let seg = [Segment { q_start: 0, q_len: 1, k_start: 0, k_len: pos + 1 }];
            let (a, _) = kernels::attention(&q, &k, &v, &seg, c.n_heads, true);
            add_in_place(&mut x, &lin(model, &a, &format!("{pre}.self_attn.o")));

            let h = ln(model, &x, &format!("{pre}.ln2"));
            let q = lin(model, &h, &format!("{pre}.cross_attn.q"));
            let seg = [Segment { q_start: 0, q_len: 1, k_start: 0, k_len: mem_len }];
            let (a, _) = kernels::attention(&q, &cache.cross_k, &cache.cross_v, &seg, c.n_heads, false);
            add_in_place(&mut x, &lin(model, &a, &format!("{pre}.cross_attn.o")));

            let h = ln(model, &x, &format!("{pre}.ln3"));
            let mut f = lin(model, &h, &format!("{pre}.ffn.fc1"));
            f.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
            add_in_place(&mut x, &lin(model, &f, &format!("{pre}.ffn.fc2")));
            outputs.push(x.clone());
        }
        let feat = if c.feac_enabled {
            let n = outputs.len();
            let mut cat = Mat::zeros(1, 2 * d);
            cat.data[..d].copy_from_slice(&outputs[n - 2].data);
            cat.data[d..].copy_from_slice(&outputs[n - 1].data);
            lin(model, &cat, "decoder.feac")
        } else {
            x
        };
        let feat = ln(model, &feat, "decoder.norm");
        let logits = lin(model, &feat, "decoder.proj");
        if logits.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        let (next, lp) = argmax_logprob(&logits.data);
        if next == EOS {
            eos_logprob = Some(lp);
            break;
        }
        body.push(next);
        logprobs.push(lp);
        token = next;
    }
    let steps = logprobs.len() + usize::from(eos_logprob.is_some());
    let total = logprobs.iter().sum::<f64>() + eos_logprob.unwrap_or(0.0);
    let mean_logprob = if steps == 0 { 0.0 } else { total / steps as f64 };
    Ok(GreedyOutput { sequence: TokenSequence { ids: body, logprobs: Some(logprobs) }, eos_logprob, mean_logprob })
}
