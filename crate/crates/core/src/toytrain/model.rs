//! Tiny transformer with hand-written forward and backward passes.
//!
//! Parameters live in one flat vector addressed through [`Layout`], so the
//! optimizer and finite-difference checks can treat them uniformly. All
//! matrices are row-major and act on row vectors (`y = x W + b`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    /// Clean vocabulary size; id `vocab` is the mask token.
    pub vocab: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub attn_mode: AttnMode,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            vocab: 256,
            seq_len: 64,
            d_model: 64,
            d_ff: 256,
            n_layers: 1,
            attn_mode: AttnMode::Causal,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.seq_len < 2 || self.d_model == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Domain(format!(
                "toy model needs vocab >= 2, seq_len >= 2 and positive widths and depth, got {self:?}"
            )));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(Error::Domain(format!("init_std must be finite and non-negative, got {}", self.init_std)));
        }
        Ok(())
    }

    pub fn mask_id(&self) -> u32 {
        self.vocab as u32
    }
}

/// Start offsets of one layer's tensors. Keys carry no bias: softmax is
/// invariant to it, so its gradient is identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerOffsets {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Start offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub layers: Vec<LayerOffsets>,
    pub w_out: usize,
    pub b_out: usize,
    pub len: usize,
    /// `(start, len)` of every matrix; the rest are biases.
    pub matrices: Vec<(usize, usize)>,
}

impl Layout {
    pub fn new(cfg: &ToyModelConfig) -> Self {
        let (v, l, d, f) = (cfg.vocab, cfg.seq_len, cfg.d_model, cfg.d_ff);
        let mut at = 0;
        let mut matrices = Vec::new();
        let mut take = |n: usize, matrix: bool| {
            let s = at;
            at += n;
            if matrix {
                matrices.push((s, n));
            }
            s
        };
        let tok = take((v + 1) * d, true);
        let pos = take(l * d, true);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerOffsets {
                wq: take(d * d, true),
                bq: take(d, false),
                wk: take(d * d, true),
                wv: take(d * d, true),
                bv: take(d, false),
                wo: take(d * d, true),
                bo: take(d, false),
                w1: take(d * f, true),
                b1: take(f, false),
                w2: take(f * d, true),
                b2: take(d, false),
            })
            .collect();
        let w_out = take(d * v, true);
        let b_out = take(v, false);
        Self { tok, pos, layers, w_out, b_out, len: at, matrices }
    }
}

/// Model weights and their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub cfg: ToyModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

impl<T: Scalar> ToyModel<T> {
    /// Normal(0, init_std) matrices and zero biases from `cfg.seed`.
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![T::zero(); layout.len];
        if cfg.init_std > 0.0 {
            let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Domain(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for &(s, n) in &layout.matrices {
                for p in &mut params[s..s + n] {
                    *p = T::of(normal.sample(&mut rng));
                }
            }
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Zeroes the output projection and bias so every prediction is uniform.
    pub fn zero_head(&mut self) {
        let (v, d) = (self.cfg.vocab, self.cfg.d_model);
        self.params[self.layout.w_out..self.layout.w_out + d * v].fill(T::zero());
        self.params[self.layout.b_out..self.layout.b_out + v].fill(T::zero());
    }

    pub(crate) fn check_sequence(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() != self.cfg.seq_len {
            return Err(Error::Contract(format!("sequence has {} tokens, model expects {}", tokens.len(), self.cfg.seq_len)));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize > self.cfg.vocab) {
            return Err(Error::Contract(format!("token id {t} outside vocabulary of {} (+ mask)", self.cfg.vocab)));
        }
        Ok(())
    }

    /// Logits for one sequence, `seq_len x vocab` row-major.
    pub fn logits(&self, tokens: &[u32]) -> Result<Vec<T>> {
        self.check_sequence(tokens)?;
        Ok(self.forward(tokens).logits)
    }

    pub(crate) fn forward(&self, tokens: &[u32]) -> Cache<T> {
        let (l, d, f, v) = (self.cfg.seq_len, self.cfg.d_model, self.cfg.d_ff, self.cfg.vocab);
        let p = &self.params;
        let lay = &self.layout;
        let mut x = vec![T::zero(); l * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = &p[lay.tok + t as usize * d..][..d];
            let pe = &p[lay.pos + i * d..][..d];
            for k in 0..d {
                x[i * d + k] = te[k] + pe[k];
            }
        }
        let scale = T::one() / T::of_usize(d).sqrt();
        let causal = self.cfg.attn_mode == AttnMode::Causal;
        let mut layers = Vec::with_capacity(lay.layers.len());
        for o in &lay.layers {
            let q = affine(&x, &p[o.wq..][..d * d], &p[o.bq..][..d], l, d, d);
            let k = affine(&x, &p[o.wk..][..d * d], &vec![T::zero(); d], l, d, d);
            let val = affine(&x, &p[o.wv..][..d * d], &p[o.bv..][..d], l, d, d);
            let mut att = vec![T::zero(); l * l];
            for i in 0..l {
                let span = if causal { i + 1 } else { l };
                let row = &mut att[i * l..i * l + span];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = dot(&q[i * d..][..d], &k[j * d..][..d]) * scale;
                }
                softmax_in_place(row);
            }
            let mut ctx = vec![T::zero(); l * d];
            for i in 0..l {
                for j in 0..l {
                    let a = att[i * l + j];
                    if a != T::zero() {
                        axpy(a, &val[j * d..][..d], &mut ctx[i * d..][..d]);
                    }
                }
            }
            let attn_out = affine(&ctx, &p[o.wo..][..d * d], &p[o.bo..][..d], l, d, d);
            let mid: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();
            let pre = affine(&mid, &p[o.w1..][..d * f], &p[o.b1..][..f], l, d, f);
            let act: Vec<T> = pre.iter().map(|&z| gelu(z)).collect();
            let ff = affine(&act, &p[o.w2..][..f * d], &p[o.b2..][..d], l, f, d);
            let out: Vec<T> = mid.iter().zip(&ff).map(|(&a, &b)| a + b).collect();
            layers.push(LayerCache { x_in: std::mem::replace(&mut x, out), q, k, val, att, ctx, mid, pre, act });
        }
        let logits = affine(&x, &p[lay.w_out..][..d * v], &p[lay.b_out..][..v], l, d, v);
        Cache { tokens: tokens.to_vec(), layers, x_final: x, logits }
    }

    /// Accumulates into `grad` the gradient of a loss whose derivative with
    /// respect to the logits is `dlogits`.
    pub(crate) fn backward(&self, cache: &Cache<T>, dlogits: &[T], grad: &mut [T]) {
        let (l, d, f, v) = (self.cfg.seq_len, self.cfg.d_model, self.cfg.d_ff, self.cfg.vocab);
        let p = &self.params;
        let lay = &self.layout;
        let mut dx = vec![T::zero(); l * d];
        affine_backward(&cache.x_final, &p[lay.w_out..][..d * v], dlogits, l, d, v, lay.w_out, Some(lay.b_out), grad, &mut dx);

        let scale = T::one() / T::of_usize(d).sqrt();
        for (o, c) in lay.layers.iter().zip(&cache.layers).rev() {
            // out = mid + ff(mid)
            let mut dact = vec![T::zero(); l * f];
            affine_backward(&c.act, &p[o.w2..][..f * d], &dx, l, f, d, o.w2, Some(o.b2), grad, &mut dact);
            let dpre: Vec<T> = dact.iter().zip(&c.pre).map(|(&g, &z)| g * gelu_grad(z)).collect();
            let mut dmid = dx;
            affine_backward(&c.mid, &p[o.w1..][..d * f], &dpre, l, d, f, o.w1, Some(o.b1), grad, &mut dmid);

            // mid = x_in + attn(x_in)
            let mut dctx = vec![T::zero(); l * d];
            affine_backward(&c.ctx, &p[o.wo..][..d * d], &dmid, l, d, d, o.wo, Some(o.bo), grad, &mut dctx);
            let mut dq = vec![T::zero(); l * d];
            let mut dk = vec![T::zero(); l * d];
            let mut dv = vec![T::zero(); l * d];
            let mut da = vec![T::zero(); l];
            for i in 0..l {
                let arow = &c.att[i * l..][..l];
                let g = &dctx[i * d..][..d];
                let mut weighted = T::zero();
                for j in 0..l {
                    if arow[j] != T::zero() {
                        da[j] = dot(g, &c.val[j * d..][..d]);
                        axpy(arow[j], g, &mut dv[j * d..][..d]);
                        weighted = weighted + arow[j] * da[j];
                    }
                }
                for j in 0..l {
                    if arow[j] != T::zero() {
                        let ds = arow[j] * (da[j] - weighted) * scale;
                        axpy(ds, &c.k[j * d..][..d], &mut dq[i * d..][..d]);
                        axpy(ds, &c.q[i * d..][..d], &mut dk[j * d..][..d]);
                    }
                }
            }
            let mut dx_in = dmid;
            affine_backward(&c.x_in, &p[o.wq..][..d * d], &dq, l, d, d, o.wq, Some(o.bq), grad, &mut dx_in);
            affine_backward(&c.x_in, &p[o.wk..][..d * d], &dk, l, d, d, o.wk, None, grad, &mut dx_in);
            affine_backward(&c.x_in, &p[o.wv..][..d * d], &dv, l, d, d, o.wv, Some(o.bv), grad, &mut dx_in);
            dx = dx_in;
        }
        for (i, &t) in cache.tokens.iter().enumerate() {
            let g = &dx[i * d..][..d];
            axpy(T::one(), g, &mut grad[lay.tok + t as usize * d..][..d]);
            axpy(T::one(), g, &mut grad[lay.pos + i * d..][..d]);
        }
    }
}

pub(crate) struct LayerCache<T> {
    x_in: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    val: Vec<T>,
    /// Attention probabilities; masked entries are exactly zero.
    att: Vec<T>,
    ctx: Vec<T>,
    mid: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

pub(crate) struct Cache<T> {
    tokens: Vec<u32>,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    pub logits: Vec<T>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// `x W + b` for `x: rows x n_in`, `W: n_in x n_out`.
fn affine<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        y.extend_from_slice(b);
        let yr = &mut y[r * n_out..];
        for (k, &xk) in x[r * n_in..][..n_in].iter().enumerate() {
            if xk != T::zero() {
                axpy(xk, &w[k * n_out..][..n_out], yr);
            }
        }
    }
    y
}

/// Backward of [`affine`]: accumulates `dW`, `db` into `grad` at the given
/// offsets and `dy W^T` into `dx`.
#[allow(clippy::too_many_arguments)]
fn affine_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
    w_at: usize,
    b_at: Option<usize>,
    grad: &mut [T],
    dx: &mut [T],
) {
    for r in 0..rows {
        let g = &dy[r * n_out..][..n_out];
        if let Some(b) = b_at {
            axpy(T::one(), g, &mut grad[b..][..n_out]);
        }
        let xr = &x[r * n_in..][..n_in];
        let dxr = &mut dx[r * n_in..][..n_in];
        for k in 0..n_in {
            let wk = &w[k * n_out..][..n_out];
            dxr[k] = dxr[k] + dot(g, wk);
            if xr[k] != T::zero() {
                axpy(xr[k], g, &mut grad[w_at + k * n_out..][..n_out]);
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for z in row.iter_mut() {
        *z = (*z - m).exp();
        s = s + *z;
    }
    for z in row.iter_mut() {
        *z = *z / s;
    }
}

const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
fn gelu<T: Scalar>(z: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let t = (c * (z + T::of(GELU_CUBIC) * z * z * z)).tanh();
    T::of(0.5) * z * (T::one() + t)
}

fn gelu_grad<T: Scalar>(z: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let t = (c * (z + T::of(GELU_CUBIC) * z * z * z)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * z * (T::one() - t * t) * c * (T::one() + T::of(3.0 * GELU_CUBIC) * z * z)
}
