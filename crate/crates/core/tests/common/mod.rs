//! Plain nested-loop reimplementations used as independent oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uam_core::autodiff::Tensor;
use uam_core::layers::{AttentionParams, ExpertParams, LinearParams, MoeParams, RmsNormParams, SsmParams};
use uam_core::model::UamClassifier;
use uam_core::uam::{AmambaMoeParams, AmambaParams, Block, ChannelMixer, SequenceMixer, StandardLayer, UamBlockParams};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::matrix(m)
}

pub fn from_tensor(t: &Tensor) -> Mat {
    let w = t.last_dim();
    t.data().chunks(w).map(|r| r.to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn linear(x: &Mat, p: &LinearParams) -> Mat {
    let (d_in, d_out) = (p.d_in(), p.d_out());
    let w = p.weight.data();
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), d_in);
            (0..d_out)
                .map(|j| {
                    let mut s = p.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                    for i in 0..d_in {
                        s += row[i] * w[i * d_out + j];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn rmsnorm(x: &Mat, p: &RmsNormParams) -> Mat {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let r = (ms + p.eps).sqrt();
            row.iter().zip(p.gain.data()).map(|(v, g)| g * v / r).collect()
        })
        .collect()
}

/// `h_t = (1 - g_t) h_{t-1} + g_t x_t`, one step at a time.
pub fn scan(x: &Mat, p: &SsmParams) -> Mat {
    let gates = linear(x, &p.gate);
    let mut h = p.initial_state.data().to_vec();
    let mut out = Vec::new();
    for (xt, gt) in x.iter().zip(&gates) {
        for c in 0..h.len() {
            let g = sigmoid(gt[c]);
            h[c] = (1.0 - g) * h[c] + g * xt[c];
        }
        out.push(h.clone());
    }
    out
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Returns the output and per-head weight matrices.
pub fn attention_with_weights(q_src: &Mat, v_src: &Mat, p: &AttentionParams) -> (Mat, Vec<Mat>) {
    let q = linear(q_src, &p.w_q);
    let k = linear(q_src, &p.w_k);
    let v = linear(v_src, &p.w_v);
    let t = q.len();
    let d = p.dim();
    let dk = d / p.heads;
    let mut joined = vec![vec![0.0; d]; t];
    let mut all_w = Vec::new();
    for h in 0..p.heads {
        let cols = h * dk..(h + 1) * dk;
        let mut w_h = Vec::new();
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for c in cols.clone() {
                joined[i][c] = (0..t).map(|j| w[j] * v[j][c]).sum();
            }
            w_h.push(w);
        }
        all_w.push(w_h);
    }
    (linear(&joined, &p.w_o), all_w)
}

pub fn attention(q_src: &Mat, v_src: &Mat, p: &AttentionParams) -> Mat {
    attention_with_weights(q_src, v_src, p).0
}

pub fn gelu(x: f64) -> f64 {
    x * sigmoid(1.702 * x)
}

pub fn expert(x: &Mat, p: &ExpertParams) -> Mat {
    let h: Mat = linear(x, &p.up)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(&h, &p.down)
}

/// Top-k by logit, lower index first on ties.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn moe(x: &Mat, p: &MoeParams) -> (Mat, f64) {
    let logits = linear(x, &p.router);
    let e = p.experts.len();
    let n = x.len();
    let mut out = vec![vec![0.0; x[0].len()]; n];
    let mut counts = vec![0.0; e];
    let mut mean_prob = vec![0.0; e];
    for (i, row) in logits.iter().enumerate() {
        let chosen = top_k(row, p.top_k);
        let gates = softmax(&chosen.iter().map(|&c| row[c]).collect::<Vec<_>>());
        for (&c, gw) in chosen.iter().zip(&gates) {
            counts[c] += 1.0;
            let y = expert(&vec![x[i].clone()], &p.experts[c]);
            for (o, v) in out[i].iter_mut().zip(&y[0]) {
                *o += gw * v;
            }
        }
        for (m, pr) in mean_prob.iter_mut().zip(softmax(row)) {
            *m += pr / n as f64;
        }
    }
    let balance: f64 = (0..e).map(|c| counts[c] / n as f64 * mean_prob[c]).sum();
    (out, p.load_balance_coeff * e as f64 * balance)
}

pub fn amamba(x_bar: &Mat, p: &AmambaParams) -> Mat {
    let h = scan(x_bar, &p.ssm);
    let values = add(&h, x_bar);
    add(x_bar, &attention(x_bar, &values, &p.attn))
}

pub fn amamba_moe(o: &Mat, p: &AmambaMoeParams) -> (Mat, f64) {
    let a = attention(o, o, &p.self_attn);
    let m = scan(o, &p.ssm);
    let joined: Mat = a.iter().zip(&m).map(|(x, y)| x.iter().chain(y).copied().collect()).collect();
    let projected = linear(&joined, &p.concat_proj);
    let (y, aux) = moe(&add(&projected, o), &p.moe);
    (add(&y, o), aux)
}

pub fn uam_block(x: &Mat, p: &UamBlockParams) -> (Mat, f64) {
    let x_bar = rmsnorm(x, &p.norm);
    let y = match &p.amamba {
        Some(a) => amamba(&x_bar, a),
        None => x_bar,
    };
    match &p.amamba_moe {
        Some(m) => amamba_moe(&y, m),
        None => (y, 0.0),
    }
}

pub fn standard_layer(x: &Mat, p: &StandardLayer) -> (Mat, f64) {
    let n = rmsnorm(x, &p.mix_norm);
    let mixed = match &p.mixer {
        SequenceMixer::Attention(a) => attention(&n, &n, a),
        SequenceMixer::Scan(s) => scan(&n, s),
    };
    let h = add(x, &mixed);
    let n = rmsnorm(&h, &p.channel_norm);
    let (c, aux) = match &p.channel {
        ChannelMixer::Ffn(e) => (expert(&n, e), 0.0),
        ChannelMixer::Moe(m) => moe(&n, m),
    };
    (add(&h, &c), aux)
}

pub fn block(x: &Mat, b: &Block) -> (Mat, f64) {
    match b {
        Block::Uam(u) => uam_block(x, u),
        Block::Standard(layers) => {
            let mut h = x.clone();
            let mut aux = 0.0;
            for l in layers {
                let (next, a) = standard_layer(&h, l);
                h = next;
                aux += a;
            }
            (h, aux)
        }
    }
}

/// Logits for each cell, given one `[T, chunk]` token matrix per cell.
/// Routing is per token, so logits do not depend on batch composition.
pub fn classifier_logits(cells: &[Mat], m: &UamClassifier) -> Vec<Vec<f64>> {
    cells
        .iter()
        .map(|tokens| {
            let mut h = linear(tokens, &m.lift);
            for b in &m.blocks {
                h = block(&h, b).0;
            }
            let t = h.len() as f64;
            let pooled: Vec<f64> = (0..h[0].len()).map(|c| h.iter().map(|r| r[c]).sum::<f64>() / t).collect();
            linear(&vec![pooled], &m.head.proj).remove(0)
        })
        .collect()
}
