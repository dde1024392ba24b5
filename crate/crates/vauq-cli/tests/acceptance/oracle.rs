//! Brute-force oracle used by the acceptance suite, independent of the
//! library's numeric paths: naive softmax by direct exponentiation and
//! normalization, entropies by direct summation, AUROC by O(n^2) pairwise
//! comparison with half credit for ties.

#[derive(Debug, Clone)]
pub struct OracleToy {
    pub vocab_size: usize,
    pub evidence: Vec<usize>,
    pub answer_img: u32,
    pub answer_prior: u32,
    pub beta_img: f64,
    pub beta_prior: f64,
}

impl OracleToy {
    fn logits(&self, g: f64) -> Vec<f64> {
        let mut z = vec![0.0f64; self.vocab_size];
        z[self.answer_img as usize] += self.beta_img * g;
        z[self.answer_prior as usize] += self.beta_prior;
        z
    }

    pub fn probs(&self, g: f64) -> Vec<f64> {
        let z = self.logits(g);
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        z.iter().map(|v| v.exp() / total).collect()
    }

    pub fn entropy(&self, g: f64) -> f64 {
        self.probs(g)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    pub fn greedy_token(&self) -> u32 {
        let z = self.logits(if self.evidence.is_empty() { 0.0 } else { 1.0 });
        let mut best = 0usize;
        for (i, &v) in z.iter().enumerate().skip(1) {
            if v > z[best] {
                best = i;
            }
        }
        best as u32
    }

    pub fn g_under(&self, masked: &[usize]) -> f64 {
        if self.evidence.is_empty() {
            return 0.0;
        }
        let visible = self
            .evidence
            .iter()
            .filter(|i| !masked.contains(i))
            .count();
        visible as f64 / self.evidence.len() as f64
    }

    pub fn perplexity(&self, tokens: &[u32], g: f64) -> f64 {
        let probs = self.probs(g);
        let mean_nll = -tokens
            .iter()
            .map(|&t| probs[t as usize].ln())
            .sum::<f64>()
            / tokens.len() as f64;
        mean_nll.exp()
    }
}

/// The oracle's own top-K selection over the toy's banded attention,
/// replicating the exported-f32 quantization so near-ties resolve the same
/// way.
pub struct OracleAttention {
    pub n_tokens: usize,
    pub focus: Vec<usize>,
    pub rho: f64,
    pub visual_frac: f64,
    pub n_heads: usize,
    pub n_generated: usize,
    pub band_layers: usize,
}

impl OracleAttention {
    fn aggregated_weights(&self) -> Vec<f64> {
        let n = self.n_tokens;
        let focused = !self.focus.is_empty() && self.focus.len() < n;
        let inside = if focused {
            (self.visual_frac * self.rho / self.focus.len() as f64) as f32
        } else {
            (self.visual_frac / n as f64) as f32
        };
        let outside = if focused {
            (self.visual_frac * (1.0 - self.rho) / (n - self.focus.len()) as f64) as f32
        } else {
            (self.visual_frac / n as f64) as f32
        };
        let copies = self.band_layers * self.n_heads * self.n_generated;
        (0..n)
            .map(|i| {
                let w = if self.focus.contains(&i) { inside } else { outside };
                let mut acc = 0.0f64;
                for _ in 0..copies {
                    acc += w as f64;
                }
                acc
            })
            .collect()
    }

    pub fn top_k_indices(&self, k_percent: u32) -> Vec<usize> {
        let weights = self.aggregated_weights();
        let count = (k_percent as usize * self.n_tokens) / 100;
        let mut order: Vec<usize> = (0..self.n_tokens).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        order.truncate(count);
        order.sort_unstable();
        order
    }
}

pub fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
