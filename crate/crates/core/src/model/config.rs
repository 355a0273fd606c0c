use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_decoder_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest body (excluding SOS/EOS) greedy decoding will produce.
    pub max_decode_len: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub in_channels: usize,
    /// Total stride of the convolutional stem; one stride-2 block per factor of two.
    pub downsample_factor: usize,
    /// Concatenate the last two decoder layers before the output head.
    pub feac_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 128-wide model, three decoder layers, 64x64 input.
    pub fn desk(vocab_size: usize, max_decode_len: usize) -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            n_decoder_layers: 3,
            ffn_dim: 512,
            vocab_size,
            max_decode_len,
            input_h: 64,
            input_w: 64,
            in_channels: 1,
            downsample_factor: 8,
            feac_enabled: true,
        }
    }

    /// Closer to a full-size setup: 512-wide model on 400x400 input.
    pub fn paper_like(vocab_size: usize, max_decode_len: usize) -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_decoder_layers: 3,
            ffn_dim: 2048,
            input_h: 400,
            input_w: 400,
            ..Self::desk(vocab_size, max_decode_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be a positive multiple of n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_decoder_layers == 0 {
            return bad("n_decoder_layers must be positive".into());
        }
        if self.feac_enabled && self.n_decoder_layers < 2 {
            return bad("feature concatenation needs at least two decoder layers".into());
        }
        if self.ffn_dim == 0 || self.max_decode_len == 0 {
            return bad("ffn_dim and max_decode_len must be positive".into());
        }
        if self.vocab_size <= crate::vocab::SPECIAL_TEXTS.len() {
            return bad(format!("vocab_size {} leaves no room for real tokens", self.vocab_size));
        }
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return bad("in_channels must be 1 or 3".into());
        }
        if self.downsample_factor < 2 || !self.downsample_factor.is_power_of_two() {
            return bad("downsample_factor must be a power of two >= 2".into());
        }
        if self.input_h == 0
            || self.input_w == 0
            || !self.input_h.is_multiple_of(self.downsample_factor)
            || !self.input_w.is_multiple_of(self.downsample_factor)
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of downsample_factor {}",
                self.input_w, self.input_h, self.downsample_factor
            ));
        }
        if self.d_model >> (self.conv_stages() - 1) == 0 {
            return bad("d_model too small for the number of stem stages".into());
        }
        Ok(())
    }

    pub fn conv_stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Output channels of each stem stage; the last equals `d_model`.
    pub fn conv_channels(&self) -> Vec<usize> {
        let n = self.conv_stages();
        (0..n).map(|i| (self.d_model >> (n - 1 - i)).max(1)).collect()
    }

    pub fn gc_bottleneck(&self) -> usize {
        (self.d_model / 4).max(1)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_h / self.downsample_factor, self.input_w / self.downsample_factor)
    }

    pub fn memory_len(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `key = value` pairs used when echoing the config into checkpoints.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("d_model", format!("{}", self.d_model)),
            ("n_heads", format!("{}", self.n_heads)),
            ("n_decoder_layers", format!("{}", self.n_decoder_layers)),
            ("ffn_dim", format!("{}", self.ffn_dim)),
            ("vocab_size", format!("{}", self.vocab_size)),
            ("max_decode_len", format!("{}", self.max_decode_len)),
            ("input_h", format!("{}", self.input_h)),
            ("input_w", format!("{}", self.input_w)),
            ("in_channels", format!("{}", self.in_channels)),
            ("downsample_factor", format!("{}", self.downsample_factor)),
            ("feac_enabled", format!("{}", self.feac_enabled)),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::desk(5, 1);
        let mut seen = 0usize;
        for (k, v) in pairs {
            let num = || v.parse::<usize>().map_err(|_| Error::Format(format!("bad value for {k}: {v}")));
            match k {
                "d_model" => c.d_model = num()?,
                "n_heads" => c.n_heads = num()?,
                "n_decoder_layers" => c.n_decoder_layers = num()?,
                "ffn_dim" => c.ffn_dim = num()?,
                "vocab_size" => c.vocab_size = num()?,
                "max_decode_len" => c.max_decode_len = num()?,
                "input_h" => c.input_h = num()?,
                "input_w" => c.input_w = num()?,
                "in_channels" => c.in_channels = num()?,
                "downsample_factor" => c.downsample_factor = num()?,
                "feac_enabled" => {
                    c.feac_enabled = v.parse().map_err(|_| Error::Format(format!("bad bool for {k}: {v}")))?
                }
                other => return Err(Error::Format(format!("unknown model key `{other}`"))),
            }
            seen += 1;
        }
        if seen != 11 {
            return Err(Error::Format(format!("expected 11 model keys, got {seen}")));
        }
        c.validate()?;
        Ok(c)
    }
}
