//! Sequence-length and token-frequency statistics over raw labels.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetStats {
    pub seq_len_histogram: BTreeMap<usize, u64>,
    pub token_freq: BTreeMap<String, u64>,
    pub n_samples: u64,
    /// Zero when `n_samples == 0`; check `mean_valid`.
    pub mean_seq_len: f64,
    pub mean_valid: bool,
}

/// Which distribution to emit as plot rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    SequenceLength,
    TokenFrequency,
}

pub fn compute_stats<I, S>(labels: I) -> DatasetStats
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut stats = DatasetStats::default();
    for label in labels {
        let mut len = 0usize;
        for tok in label.as_ref().split_whitespace() {
            len += 1;
            *stats.token_freq.entry(tok.to_string()).or_insert(0) += 1;
        }
        *stats.seq_len_histogram.entry(len).or_insert(0) += 1;
        stats.n_samples += 1;
    }
    stats.refresh_mean();
    stats
}

impl DatasetStats {
    fn refresh_mean(&mut self) {
        if self.n_samples == 0 {
            self.mean_seq_len = 0.0;
            self.mean_valid = false;
        } else {
            let total: f64 = self
                .seq_len_histogram
                .iter()
                .map(|(&len, &n)| len as f64 * n as f64)
                .sum();
            self.mean_seq_len = total / self.n_samples as f64;
            self.mean_valid = true;
        }
    }

    /// Combines statistics of two disjoint label sets.
    pub fn merge(&mut self, other: &DatasetStats) {
        for (&len, &n) in &other.seq_len_histogram {
            *self.seq_len_histogram.entry(len).or_insert(0) += n;
        }
        for (tok, &n) in &other.token_freq {
            *self.token_freq.entry(tok.clone()).or_insert(0) += n;
        }
        self.n_samples += other.n_samples;
        self.refresh_mean();
    }

    /// Rows of `(x, y)`. Lengths ascend; tokens are ordered by descending count,
    /// ties by text. With `log_scale`, `y = ln(1 + count)`.
    pub fn plot_data(&self, which: Distribution, log_scale: bool) -> Vec<(String, f64)> {
        let y = |n: u64| if log_scale { libm::log1p(n as f64) } else { n as f64 };
        match which {
            Distribution::SequenceLength => self
                .seq_len_histogram
                .iter()
                .map(|(len, &n)| (len.to_string(), y(n)))
                .collect(),
            Distribution::TokenFrequency => {
                let mut rows: Vec<(&String, u64)> =
                    self.token_freq.iter().map(|(t, &n)| (t, n)).collect();
                rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
                rows.into_iter().map(|(t, n)| (t.clone(), y(n))).collect()
            }
        }
    }
}
