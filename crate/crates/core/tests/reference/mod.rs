//! Plain-loop reference forward pass, written without the autodiff graph.
//! Used as an oracle for the model and for recomputing the penalty.

#![allow(dead_code)]

use spvt::vit::ParamStore;
use spvt::{SparsePosition, ViTConfig};

/// Logits plus every hookable activation, flattened per block.
pub struct Trace {
    pub logits: Vec<f64>,
    pub similarity_score: Vec<Vec<f64>>,
    pub attention_weight: Vec<Vec<f64>>,
    pub weighted_value: Vec<Vec<f64>>,
    pub attention_output: Vec<Vec<f64>>,
    pub mlp_gelu_input: Vec<Vec<f64>>,
}

impl Trace {
    pub fn at(&self, position: SparsePosition) -> &[Vec<f64>] {
        match position {
            SparsePosition::SimilarityScore => &self.similarity_score,
            SparsePosition::AttentionWeight => &self.attention_weight,
            SparsePosition::WeightedValue => &self.weighted_value,
            SparsePosition::AttentionOutput => &self.attention_output,
            SparsePosition::MlpGeluInput => &self.mlp_gelu_input,
        }
    }

    /// `lambda * Σ ln(1 + h²)` over every block's activation.
    pub fn penalty(&self, position: SparsePosition, lambda: f64) -> f64 {
        let s: f64 = self.at(position).iter().flatten().map(|h| (1.0 + h * h).ln()).sum();
        lambda * s
    }
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).data()
}

/// `x [rows, n] · w [n, m] + b [m]`.
fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize, m: usize) -> Vec<f64> {
    let rows = x.len() / n;
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        for j in 0..m {
            let mut acc = b[j];
            for i in 0..n {
                acc += x[r * n + i] * w[i * m + j];
            }
            out[r * m + j] = acc;
        }
    }
    out
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
        let sd = (var + eps).sqrt();
        out.extend(row.iter().enumerate().map(|(k, v)| (v - mu) / sd * gamma[k] + beta[k]));
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Forward pass of `images` (`[B, S, S, C]`, flat) under `store`.
pub fn forward(store: &ParamStore, cfg: &ViTConfig, images: &[f64], batch: usize) -> Trace {
    let (s, ps, c, d) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.hidden_size);
    let grid = s / ps;
    let n = grid * grid;
    let t = n + 1;
    let h = cfg.num_heads;
    let dk = d / h;
    let pd = ps * ps * c;
    let mut trace = Trace {
        logits: Vec::new(),
        similarity_score: vec![Vec::new(); cfg.depth],
        attention_weight: vec![Vec::new(); cfg.depth],
        weighted_value: vec![Vec::new(); cfg.depth],
        attention_output: vec![Vec::new(); cfg.depth],
        mlp_gelu_input: vec![Vec::new(); cfg.depth],
    };
    for b in 0..batch {
        let img = &images[b * s * s * c..(b + 1) * s * s * c];
        // Patch (gr, gc) flattened over (row, column, channel).
        let mut patches = Vec::with_capacity(n * pd);
        for gr in 0..grid {
            for gc in 0..grid {
                for r in 0..ps {
                    for col in 0..ps {
                        for ch in 0..c {
                            patches.push(img[((gr * ps + r) * s + gc * ps + col) * c + ch]);
                        }
                    }
                }
            }
        }
        let proj = affine(&patches, p(store, "patch_embed.weight"), p(store, "patch_embed.bias"), pd, d);
        let mut x = Vec::with_capacity(t * d);
        x.extend_from_slice(p(store, "cls_token"));
        x.extend_from_slice(&proj);
        for (v, e) in x.iter_mut().zip(p(store, "pos_embed")) {
            *v += e;
        }

        for blk in 0..cfg.depth {
            let name = |s: &str| format!("blocks.{blk}.{s}");
            let hn = layer_norm(&x, p(store, &name("norm1.gamma")), p(store, &name("norm1.beta")), cfg.layer_norm_eps);
            let q = affine(&hn, p(store, &name("attn.q.weight")), p(store, &name("attn.q.bias")), d, d);
            let k = affine(&hn, p(store, &name("attn.k.weight")), p(store, &name("attn.k.bias")), d, d);
            let v = affine(&hn, p(store, &name("attn.v.weight")), p(store, &name("attn.v.bias")), d, d);
            let mut merged = vec![0.0; t * d];
            for head in 0..h {
                let off = head * dk;
                let mut scores = vec![0.0; t * t];
                for i in 0..t {
                    for j in 0..t {
                        let dot: f64 = (0..dk).map(|e| q[i * d + off + e] * k[j * d + off + e]).sum();
                        scores[i * t + j] = dot / (dk as f64).sqrt();
                    }
                }
                let mut weights = vec![0.0; t * t];
                for i in 0..t {
                    let row = &scores[i * t..(i + 1) * t];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|r| (r - m).exp()).sum();
                    for j in 0..t {
                        weights[i * t + j] = (row[j] - m).exp() / z;
                    }
                }
                let mut out = vec![0.0; t * dk];
                for i in 0..t {
                    for e in 0..dk {
                        out[i * dk + e] = (0..t).map(|j| weights[i * t + j] * v[j * d + off + e]).sum();
                        merged[i * d + off + e] = out[i * dk + e];
                    }
                }
                trace.similarity_score[blk].extend(scores);
                trace.attention_weight[blk].extend(weights);
                trace.weighted_value[blk].extend(out);
            }
            let attn = affine(&merged, p(store, &name("attn.out.weight")), p(store, &name("attn.out.bias")), d, d);
            trace.attention_output[blk].extend_from_slice(&attn);
            for (xv, a) in x.iter_mut().zip(&attn) {
                *xv += a;
            }
            let hn = layer_norm(&x, p(store, &name("norm2.gamma")), p(store, &name("norm2.beta")), cfg.layer_norm_eps);
            let pre = affine(&hn, p(store, &name("mlp.fc1.weight")), p(store, &name("mlp.fc1.bias")), d, cfg.mlp_size);
            trace.mlp_gelu_input[blk].extend_from_slice(&pre);
            let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let mlp = affine(&act, p(store, &name("mlp.fc2.weight")), p(store, &name("mlp.fc2.bias")), cfg.mlp_size, d);
            for (xv, m) in x.iter_mut().zip(&mlp) {
                *xv += m;
            }
        }
        let xn = layer_norm(&x[..d], p(store, "norm.gamma"), p(store, "norm.beta"), cfg.layer_norm_eps);
        let logits = affine(&xn, p(store, "head.weight"), p(store, "head.bias"), d, cfg.num_classes);
        trace.logits.extend(logits);
    }
    trace
}

/// Mean cross-entropy of flat `[B, C]` logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}
