//! Small transformer with hand-written backward passes, in f64.
//!
//! Token + position embeddings, a stack of pre-norm single-head attention
//! blocks with ReLU feed-forwards, a final RMS norm, and an untied output
//! projection. Everything lives in one flat parameter vector so the
//! optimizer and checkpointing stay trivial. Input positions accept either a
//! token id or a raw embedding-space vector, which is how soft prompts enter
//! the sequence.

use serde::{Deserialize, Serialize};

use crate::backend::normal_sample;
use crate::seeding::stream_rng;

const RMS_EPS: f64 = 1e-8;

fn default_layers() -> usize {
    1
}

fn default_heads() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub vocab: usize,
    pub dim: usize,
    pub ff: usize,
    pub context: usize,
    pub causal: bool,
    // Defaults keep older single-block checkpoints loadable.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
}

/// Named ranges into the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    dim: usize,
    ff: usize,
    emb: (usize, usize),
    pos: (usize, usize),
    blocks_start: usize,
    block_stride: usize,
    gf: (usize, usize),
    w_out: (usize, usize),
    b_out: (usize, usize),
    pub total: usize,
}

// Per-block parameter order: g1, wq, wk, wv, wo, g2, w1, b1, w2, b2.
impl Layout {
    pub fn new(cfg: &NetConfig) -> Self {
        let (v, d, f, c) = (cfg.vocab, cfg.dim, cfg.ff, cfg.context);
        let emb = (0, v * d);
        let pos = (emb.1, emb.1 + c * d);
        let blocks_start = pos.1;
        let block_stride = d + 4 * d * d + d + f * d + f + d * f + d;
        let blocks_end = blocks_start + cfg.layers * block_stride;
        let gf = (blocks_end, blocks_end + d);
        let w_out = (gf.1, gf.1 + v * d);
        let b_out = (w_out.1, w_out.1 + v);
        Layout {
            dim: d,
            ff: f,
            emb,
            pos,
            blocks_start,
            block_stride,
            gf,
            w_out,
            b_out,
            total: b_out.1,
        }
    }

    pub fn emb(&self) -> std::ops::Range<usize> {
        self.emb.0..self.emb.1
    }
    pub fn pos(&self) -> std::ops::Range<usize> {
        self.pos.0..self.pos.1
    }
    fn block_field(&self, block: usize, offset: usize, len: usize) -> std::ops::Range<usize> {
        let start = self.blocks_start + block * self.block_stride + offset;
        start..start + len
    }
    pub fn g1(&self, block: usize) -> std::ops::Range<usize> {
        self.block_field(block, 0, self.dim)
    }
    pub fn wq(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, d, d * d)
    }
    pub fn wk(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, d + d * d, d * d)
    }
    pub fn wv(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, d + 2 * d * d, d * d)
    }
    pub fn wo(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, d + 3 * d * d, d * d)
    }
    pub fn g2(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, d + 4 * d * d, d)
    }
    pub fn w1(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, 2 * d + 4 * d * d, self.ff * d)
    }
    pub fn b1(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, 2 * d + 4 * d * d + self.ff * d, self.ff)
    }
    pub fn w2(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(block, 2 * d + 4 * d * d + self.ff * d + self.ff, d * self.ff)
    }
    pub fn b2(&self, block: usize) -> std::ops::Range<usize> {
        let d = self.dim;
        self.block_field(
            block,
            2 * d + 4 * d * d + self.ff * d + self.ff + d * self.ff,
            d,
        )
    }
    pub fn gf(&self) -> std::ops::Range<usize> {
        self.gf.0..self.gf.1
    }
    pub fn w_out(&self) -> std::ops::Range<usize> {
        self.w_out.0..self.w_out.1
    }
    pub fn b_out(&self) -> std::ops::Range<usize> {
        self.b_out.0..self.b_out.1
    }
}

/// One input position: a vocabulary token or a raw embedding-space vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Token(u32),
    Vector(Vec<f64>),
}

/// Cached activations of one block. The block input is the previous block's
/// `z` (or the embedded input for block 0).
struct BlockTape {
    r1: Vec<f64>, // len
    n1: Vec<f64>, // len × dim
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    p: Vec<f64>, // heads × len × len attention weights
    c: Vec<f64>, // len × dim attention context
    y: Vec<f64>, // len × dim, after the attention residual
    r2: Vec<f64>,
    n2: Vec<f64>,
    a: Vec<f64>, // len × ff, post-ReLU
    z: Vec<f64>, // len × dim, block output
}

/// Cached activations from one forward pass.
pub struct Tape {
    pub items: Vec<Item>,
    pub len: usize,
    x0: Vec<f64>, // len × dim, embedded input
    blocks: Vec<BlockTape>,
    rf: Vec<f64>,
    pub h: Vec<f64>, // len × dim, final normed output
}

impl Tape {
    pub fn hidden_at(&self, pos: usize) -> &[f64] {
        let dim = self.h.len() / self.len;
        &self.h[pos * dim..(pos + 1) * dim]
    }
}

pub struct NetCore {
    pub cfg: NetConfig,
    pub layout: Layout,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

/// out += w^T dy (gradient wrt the input of a matvec).
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let d = dy[r];
        for c in 0..cols {
            out[c] += row[c] * d;
        }
    }
}

/// grads += dy ⊗ x (gradient wrt the weight of a matvec).
fn outer_acc(grads: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for r in 0..rows {
        let row = &mut grads[r * cols..(r + 1) * cols];
        let d = dy[r];
        for c in 0..cols {
            row[c] += d * x[c];
        }
    }
}

fn rms(x: &[f64]) -> f64 {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    (mean_sq + RMS_EPS).sqrt()
}

impl NetCore {
    pub fn new(cfg: NetConfig) -> Self {
        assert!(cfg.heads > 0 && cfg.dim.is_multiple_of(cfg.heads), "dim must divide into heads");
        let layout = Layout::new(&cfg);
        NetCore { cfg, layout }
    }

    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng("tiny.init", &[&seed.to_le_bytes()]);
        let mut params = vec![0.0; self.layout.total];
        let dim = self.cfg.dim;
        let emb_std = 1.0 / (dim as f64).sqrt();
        for i in self.layout.emb() {
            params[i] = normal_sample(&mut rng) * emb_std;
        }
        for i in self.layout.pos() {
            params[i] = normal_sample(&mut rng) * emb_std * 0.5;
        }
        for block in 0..self.cfg.layers {
            for range in [
                self.layout.wq(block),
                self.layout.wk(block),
                self.layout.wv(block),
                self.layout.wo(block),
            ] {
                let std = (2.0 / (2 * dim) as f64).sqrt();
                for i in range {
                    params[i] = normal_sample(&mut rng) * std;
                }
            }
            let std1 = (2.0 / (dim + self.cfg.ff) as f64).sqrt();
            for i in self.layout.w1(block) {
                params[i] = normal_sample(&mut rng) * std1;
            }
            for i in self.layout.w2(block) {
                params[i] = normal_sample(&mut rng) * std1;
            }
            for range in [self.layout.g1(block), self.layout.g2(block)] {
                for i in range {
                    params[i] = 1.0;
                }
            }
        }
        let std_out = (2.0 / (dim + self.cfg.vocab) as f64).sqrt();
        for i in self.layout.w_out() {
            params[i] = normal_sample(&mut rng) * std_out;
        }
        for i in self.layout.gf() {
            params[i] = 1.0;
        }
        params
    }

    /// Mean embedding-row norm; soft prompts are initialized to match it.
    pub fn embedding_norm_mean(&self, params: &[f64]) -> f64 {
        let dim = self.cfg.dim;
        let emb = &params[self.layout.emb()];
        let mut total = 0.0;
        for row in 0..self.cfg.vocab {
            let r = &emb[row * dim..(row + 1) * dim];
            total += r.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        total / self.cfg.vocab as f64
    }

    fn rms_norm_forward(&self, input: &[f64], gain: &[f64], len: usize) -> (Vec<f64>, Vec<f64>) {
        let dim = self.cfg.dim;
        let mut r = vec![0.0; len];
        let mut normed = vec![0.0; len * dim];
        for i in 0..len {
            let xi = &input[i * dim..(i + 1) * dim];
            r[i] = rms(xi);
            for d in 0..dim {
                normed[i * dim + d] = xi[d] / r[i] * gain[d];
            }
        }
        (r, normed)
    }

    /// dinput += backward of `normed = (input / r) * gain`; accumulates the
    /// gain gradient.
    #[allow(clippy::too_many_arguments)]
    fn rms_norm_backward(
        &self,
        input: &[f64],
        gain: &[f64],
        r: &[f64],
        d_normed: &[f64],
        len: usize,
        d_gain: &mut [f64],
        d_input: &mut [f64],
    ) {
        let dim = self.cfg.dim;
        for i in 0..len {
            let xi = &input[i * dim..(i + 1) * dim];
            let dni = &d_normed[i * dim..(i + 1) * dim];
            let ri = r[i];
            let mut inner = 0.0;
            for d in 0..dim {
                d_gain[d] += dni[d] * xi[d] / ri;
                inner += dni[d] * gain[d] * xi[d];
            }
            let correction = inner / (dim as f64 * ri * ri * ri);
            for d in 0..dim {
                d_input[i * dim + d] += dni[d] * gain[d] / ri - xi[d] * correction;
            }
        }
    }

    fn block_forward(&self, params: &[f64], block: usize, input: &[f64], len: usize) -> BlockTape {
        let dim = self.cfg.dim;
        let ff = self.cfg.ff;
        let (r1, n1) = self.rms_norm_forward(input, &params[self.layout.g1(block)], len);
        let wq = &params[self.layout.wq(block)];
        let wk = &params[self.layout.wk(block)];
        let wv = &params[self.layout.wv(block)];
        let wo = &params[self.layout.wo(block)];
        let mut q = vec![0.0; len * dim];
        let mut k = vec![0.0; len * dim];
        let mut v = vec![0.0; len * dim];
        for i in 0..len {
            let n1i = &n1[i * dim..(i + 1) * dim];
            matvec(wq, dim, dim, n1i, &mut q[i * dim..(i + 1) * dim]);
            matvec(wk, dim, dim, n1i, &mut k[i * dim..(i + 1) * dim]);
            matvec(wv, dim, dim, n1i, &mut v[i * dim..(i + 1) * dim]);
        }
        // Per-head softmax attention over disjoint slices of the
        // projected vectors.
        let heads = self.cfg.heads;
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut p = vec![0.0; heads * len * len];
        let mut scores = vec![0.0; len];
        for head in 0..heads {
            let off = head * hd;
            let plane = &mut p[head * len * len..(head + 1) * len * len];
            for i in 0..len {
                let limit = if self.cfg.causal { i + 1 } else { len };
                let qi = &q[i * dim + off..i * dim + off + hd];
                let mut max_s = f64::NEG_INFINITY;
                for j in 0..limit {
                    let kj = &k[j * dim + off..j * dim + off + hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    if s > max_s {
                        max_s = s;
                    }
                }
                let mut denom = 0.0;
                for score in scores.iter().take(limit) {
                    denom += (score - max_s).exp();
                }
                for j in 0..limit {
                    plane[i * len + j] = (scores[j] - max_s).exp() / denom;
                }
            }
        }
        let mut c = vec![0.0; len * dim];
        for head in 0..heads {
            let off = head * hd;
            let plane = &p[head * len * len..(head + 1) * len * len];
            for i in 0..len {
                let ci = &mut c[i * dim + off..i * dim + off + hd];
                for j in 0..len {
                    let w = plane[i * len + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &v[j * dim + off..j * dim + off + hd];
                    for d in 0..hd {
                        ci[d] += w * vj[d];
                    }
                }
            }
        }
        let mut y = vec![0.0; len * dim];
        let mut ao = vec![0.0; dim];
        for i in 0..len {
            matvec(wo, dim, dim, &c[i * dim..(i + 1) * dim], &mut ao);
            for d in 0..dim {
                y[i * dim + d] = input[i * dim + d] + ao[d];
            }
        }

        let (r2, n2) = self.rms_norm_forward(&y, &params[self.layout.g2(block)], len);
        let w1 = &params[self.layout.w1(block)];
        let b1 = &params[self.layout.b1(block)];
        let w2 = &params[self.layout.w2(block)];
        let b2 = &params[self.layout.b2(block)];
        let mut a = vec![0.0; len * ff];
        let mut z = vec![0.0; len * dim];
        let mut u = vec![0.0; ff];
        let mut f = vec![0.0; dim];
        for i in 0..len {
            matvec(w1, ff, dim, &n2[i * dim..(i + 1) * dim], &mut u);
            for j in 0..ff {
                a[i * ff + j] = (u[j] + b1[j]).max(0.0);
            }
            matvec(w2, dim, ff, &a[i * ff..(i + 1) * ff], &mut f);
            for d in 0..dim {
                z[i * dim + d] = y[i * dim + d] + f[d] + b2[d];
            }
        }
        BlockTape {
            r1,
            n1,
            q,
            k,
            v,
            p,
            c,
            y,
            r2,
            n2,
            a,
            z,
        }
    }

    /// Backward through one block. `dz` is the gradient at the block output;
    /// returns the gradient at the block input.
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        params: &[f64],
        block: usize,
        input: &[f64],
        tape: &BlockTape,
        dz: &[f64],
        len: usize,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let dim = self.cfg.dim;
        let ff = self.cfg.ff;

        // FFN + residual.
        let g2 = &params[self.layout.g2(block)];
        let w1 = &params[self.layout.w1(block)];
        let w2 = &params[self.layout.w2(block)];
        let mut dy = vec![0.0; len * dim];
        let mut dn2_all = vec![0.0; len * dim];
        let mut da = vec![0.0; ff];
        let mut du = vec![0.0; ff];
        for i in 0..len {
            let dzi = &dz[i * dim..(i + 1) * dim];
            for d in 0..dim {
                dy[i * dim + d] += dzi[d];
                grads[self.layout.b2(block)][d] += dzi[d];
            }
            let ai = &tape.a[i * ff..(i + 1) * ff];
            da.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(w2, dim, ff, dzi, &mut da);
            outer_acc(&mut grads[self.layout.w2(block)], dim, ff, dzi, ai);
            for j in 0..ff {
                du[j] = if ai[j] > 0.0 { da[j] } else { 0.0 };
                grads[self.layout.b1(block)][j] += du[j];
            }
            let n2i = &tape.n2[i * dim..(i + 1) * dim];
            outer_acc(&mut grads[self.layout.w1(block)], ff, dim, &du, n2i);
            matvec_t_acc(w1, ff, dim, &du, &mut dn2_all[i * dim..(i + 1) * dim]);
        }
        {
            // Split the gain gradient slice away from the rest of `grads`.
            let range = self.layout.g2(block);
            let mut d_gain = vec![0.0; dim];
            self.rms_norm_backward(&tape.y, g2, &tape.r2, &dn2_all, len, &mut d_gain, &mut dy);
            for (g, d) in grads[range].iter_mut().zip(&d_gain) {
                *g += d;
            }
        }

        // Attention + residual.
        let g1 = &params[self.layout.g1(block)];
        let wq = &params[self.layout.wq(block)];
        let wk = &params[self.layout.wk(block)];
        let wv = &params[self.layout.wv(block)];
        let wo = &params[self.layout.wo(block)];
        let scale = 1.0 / ((dim / self.cfg.heads) as f64).sqrt();
        let mut dx = vec![0.0; len * dim];
        let mut dq = vec![0.0; len * dim];
        let mut dk = vec![0.0; len * dim];
        let mut dv = vec![0.0; len * dim];
        let heads = self.cfg.heads;
        let hd = dim / heads;
        let mut dc_full = vec![0.0; len * dim];
        for i in 0..len {
            let dyi = &dy[i * dim..(i + 1) * dim];
            for d in 0..dim {
                dx[i * dim + d] += dyi[d];
            }
            let ci = &tape.c[i * dim..(i + 1) * dim];
            outer_acc(&mut grads[self.layout.wo(block)], dim, dim, dyi, ci);
            matvec_t_acc(wo, dim, dim, dyi, &mut dc_full[i * dim..(i + 1) * dim]);
        }
        for head in 0..heads {
            let off = head * hd;
            let plane = &tape.p[head * len * len..(head + 1) * len * len];
            for i in 0..len {
                let dc = &dc_full[i * dim + off..i * dim + off + hd];
                let limit = if self.cfg.causal { i + 1 } else { len };
                let mut dp = vec![0.0; limit];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vj = &tape.v[j * dim + off..j * dim + off + hd];
                    let w = plane[i * len + j];
                    let mut acc = 0.0;
                    for d in 0..hd {
                        acc += dc[d] * vj[d];
                        dv[j * dim + off + d] += w * dc[d];
                    }
                    *dpj = acc;
                }
                let mut mix = 0.0;
                for (j, dpj) in dp.iter().enumerate() {
                    mix += plane[i * len + j] * dpj;
                }
                let qi = &tape.q[i * dim + off..i * dim + off + hd];
                for (j, dpj) in dp.iter().enumerate() {
                    let ds = plane[i * len + j] * (dpj - mix) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &tape.k[j * dim + off..j * dim + off + hd];
                    for d in 0..hd {
                        dq[i * dim + off + d] += ds * kj[d];
                        dk[j * dim + off + d] += ds * qi[d];
                    }
                }
            }
        }
        let mut dn1_all = vec![0.0; len * dim];
        for i in 0..len {
            let n1i = &tape.n1[i * dim..(i + 1) * dim];
            let dqi = &dq[i * dim..(i + 1) * dim];
            let dki = &dk[i * dim..(i + 1) * dim];
            let dvi = &dv[i * dim..(i + 1) * dim];
            outer_acc(&mut grads[self.layout.wq(block)], dim, dim, dqi, n1i);
            outer_acc(&mut grads[self.layout.wk(block)], dim, dim, dki, n1i);
            outer_acc(&mut grads[self.layout.wv(block)], dim, dim, dvi, n1i);
            let dn1 = &mut dn1_all[i * dim..(i + 1) * dim];
            matvec_t_acc(wq, dim, dim, dqi, dn1);
            matvec_t_acc(wk, dim, dim, dki, dn1);
            matvec_t_acc(wv, dim, dim, dvi, dn1);
        }
        {
            let range = self.layout.g1(block);
            let mut d_gain = vec![0.0; dim];
            self.rms_norm_backward(input, g1, &tape.r1, &dn1_all, len, &mut d_gain, &mut dx);
            for (g, d) in grads[range].iter_mut().zip(&d_gain) {
                *g += d;
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], items: &[Item]) -> Tape {
        let dim = self.cfg.dim;
        let len = items.len();
        assert!(len <= self.cfg.context, "sequence length checked by caller");

        let emb = &params[self.layout.emb()];
        let pos = &params[self.layout.pos()];
        let mut x0 = vec![0.0; len * dim];
        for (i, item) in items.iter().enumerate() {
            let row = &mut x0[i * dim..(i + 1) * dim];
            match item {
                Item::Token(t) => {
                    let t = *t as usize;
                    row.copy_from_slice(&emb[t * dim..(t + 1) * dim]);
                }
                Item::Vector(v) => {
                    debug_assert_eq!(v.len(), dim);
                    row.copy_from_slice(v);
                }
            }
            for d in 0..dim {
                row[d] += pos[i * dim + d];
            }
        }

        let mut blocks: Vec<BlockTape> = Vec::with_capacity(self.cfg.layers);
        for block in 0..self.cfg.layers {
            let input = if block == 0 {
                &x0
            } else {
                &blocks[block - 1].z
            };
            let tape = self.block_forward(params, block, input, len);
            blocks.push(tape);
        }

        let final_input = blocks.last().map(|b| b.z.as_slice()).unwrap_or(&x0);
        let (rf, h) = self.rms_norm_forward(final_input, &params[self.layout.gf()], len);

        Tape {
            items: items.to_vec(),
            len,
            x0,
            blocks,
            rf,
            h,
        }
    }

    /// Vocabulary logits from the final output at one position.
    pub fn logits_at(&self, params: &[f64], tape: &Tape, pos: usize) -> Vec<f64> {
        let dim = self.cfg.dim;
        let w_out = &params[self.layout.w_out()];
        let b_out = &params[self.layout.b_out()];
        let h = tape.hidden_at(pos);
        let mut logits = vec![0.0; self.cfg.vocab];
        matvec(w_out, self.cfg.vocab, dim, h, &mut logits);
        for (l, b) in logits.iter_mut().zip(b_out) {
            *l += b;
        }
        logits
    }

    /// Cross-entropy at a position. Returns the loss and d(loss)/d(logits).
    pub fn ce_loss(&self, logits: &[f64], gold: u32) -> (f64, Vec<f64>) {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let denom: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= denom;
        }
        let loss = -(probs[gold as usize].max(f64::MIN_POSITIVE)).ln();
        probs[gold as usize] -= 1.0;
        (loss, probs)
    }

    /// Accumulate the output-projection gradient for `dlogits` at `pos` and
    /// add the resulting hidden-state gradient into `dh`.
    pub fn logits_backward(
        &self,
        params: &[f64],
        tape: &Tape,
        pos: usize,
        dlogits: &[f64],
        grads: &mut [f64],
        dh: &mut [f64],
    ) {
        let dim = self.cfg.dim;
        let vocab = self.cfg.vocab;
        let h = tape.hidden_at(pos);
        outer_acc(&mut grads[self.layout.w_out()], vocab, dim, dlogits, h);
        for (g, d) in grads[self.layout.b_out()].iter_mut().zip(dlogits) {
            *g += d;
        }
        let w_out = &params[self.layout.w_out()];
        matvec_t_acc(w_out, vocab, dim, dlogits, &mut dh[pos * dim..(pos + 1) * dim]);
    }

    /// Backward through the whole stack given dL/dh for every position.
    /// Accumulates parameter gradients and returns dL/d(input) per position
    /// (the soft-prompt gradient surface).
    pub fn backward(&self, params: &[f64], tape: &Tape, dh: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let dim = self.cfg.dim;
        let len = tape.len;
        debug_assert_eq!(dh.len(), len * dim);
        debug_assert_eq!(grads.len(), self.layout.total);

        // Final RMS norm.
        let final_input = tape
            .blocks
            .last()
            .map(|b| b.z.as_slice())
            .unwrap_or(&tape.x0);
        let gf = &params[self.layout.gf()];
        let mut dz = vec![0.0; len * dim];
        {
            let mut d_gain = vec![0.0; dim];
            self.rms_norm_backward(final_input, gf, &tape.rf, dh, len, &mut d_gain, &mut dz);
            let range = self.layout.gf();
            for (g, d) in grads[range].iter_mut().zip(&d_gain) {
                *g += d;
            }
        }

        for block in (0..self.cfg.layers).rev() {
            let input = if block == 0 {
                &tape.x0
            } else {
                &tape.blocks[block - 1].z
            };
            dz = self.block_backward(params, block, input, &tape.blocks[block], &dz, len, grads);
        }
        let dx = dz;

        // Scatter input gradients to embeddings / positions; vectors are the
        // caller's (soft prompts) and come back through the return value.
        for (i, item) in tape.items.iter().enumerate() {
            let dxi = &dx[i * dim..(i + 1) * dim];
            for d in 0..dim {
                grads[self.layout.pos()][i * dim + d] += dxi[d];
            }
            if let Item::Token(t) = item {
                let t = *t as usize;
                for d in 0..dim {
                    grads[self.layout.emb()][t * dim + d] += dxi[d];
                }
            }
        }
        dx
    }
}
