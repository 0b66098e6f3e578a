//! Shared layers: linear maps, layer norm, multi-head attention, convolutions
//! and residual conv blocks. Each layer owns parameters named under a prefix
//! in a [`ParamStore`]; `init_*` creates them, the matching function applies
//! them inside a [`Graph`].

use rand::Rng;

use crate::graph::{Conv2dSpec, Graph, Var};
use crate::params::ParamStore;
use crate::rng::uniform_tensor;
use crate::tensor::Tensor;

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        uniform_tensor(rng, &[fan_out, fan_in], -bound, bound),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{name}.weight"));
    let b = g.param(store, &format!("{name}.bias"));
    g.linear(x, w, Some(b))
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let gamma = g.param(store, &format!("{name}.gamma"));
    let beta = g.param(store, &format!("{name}.beta"));
    g.layer_norm(x, gamma, beta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

pub fn init_attention(store: &mut ParamStore, rng: &mut impl Rng, name: &str, shape: AttentionShape) {
    let inner = shape.inner();
    for proj in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{name}.{proj}"), shape.dim, inner);
    }
    init_linear(store, rng, &format!("{name}.out"), inner, shape.dim);
}

/// Multi-head scaled dot-product attention of `queries (Nq×dim)` over
/// `context (Nk×dim)`. `key_mask` hides context tokens; when `probs` is given
/// the per-head attention matrices are appended to it.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    shape: AttentionShape,
    queries: Var,
    context: Var,
    key_mask: Option<&[bool]>,
    mut probs: Option<&mut Vec<Tensor>>,
) -> Var {
    let q = linear(g, store, &format!("{name}.q"), queries);
    let k = linear(g, store, &format!("{name}.k"), context);
    let v = linear(g, store, &format!("{name}.v"), context);
    let scale = 1.0 / (shape.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(shape.heads);
    for h in 0..shape.heads {
        let off = h * shape.head_dim;
        let qh = g.slice_cols(q, off, shape.head_dim);
        let kh = g.slice_cols(k, off, shape.head_dim);
        let vh = g.slice_cols(v, off, shape.head_dim);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let p = g.softmax_rows(scores, key_mask);
        if let Some(rec) = probs.as_deref_mut() {
            rec.push(g.value(p).clone());
        }
        heads.push(g.matmul(p, vh));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    linear(g, store, &format!("{name}.out"), merged)
}

pub fn attention_param_count(shape: AttentionShape) -> usize {
    let inner = shape.inner();
    3 * (shape.dim * inner + inner) + inner * shape.dim + shape.dim
}

pub fn init_feedforward(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) {
    init_linear(store, rng, &format!("{name}.fc1"), dim, hidden);
    init_linear(store, rng, &format!("{name}.fc2"), hidden, dim);
}

pub fn feedforward(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let h = linear(g, store, &format!("{name}.fc1"), x);
    let h = g.gelu(h);
    linear(g, store, &format!("{name}.fc2"), h)
}

pub fn init_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    store.insert(
        format!("{name}.weight"),
        uniform_tensor(rng, &[cout, cin, k, k], -bound, bound),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

/// Convolution with "same" padding for odd kernels at the given stride.
pub fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Var {
    let w = g.param(store, &format!("{name}.weight"));
    let b = g.param(store, &format!("{name}.bias"));
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), Conv2dSpec { stride, pad: k / 2 })
}

/// Residual block `x + conv(silu(conv(silu(x)) [+ emb]))` with a 1×1 skip
/// projection when channel counts differ. `emb_dim > 0` adds a per-channel
/// projection of a conditioning vector after the first convolution.
pub fn init_res_block(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, emb_dim: usize) {
    init_conv(store, rng, &format!("{name}.conv1"), cin, cout, 3);
    init_conv(store, rng, &format!("{name}.conv2"), cout, cout, 3);
    if cin != cout {
        init_conv(store, rng, &format!("{name}.skip"), cin, cout, 1);
    }
    if emb_dim > 0 {
        init_linear(store, rng, &format!("{name}.emb"), emb_dim, cout);
    }
}

pub fn res_block(g: &mut Graph, store: &ParamStore, name: &str, x: Var, emb: Option<Var>) -> Var {
    let h = g.silu(x);
    let mut h = conv(g, store, &format!("{name}.conv1"), h, 1);
    if let Some(e) = emb {
        let e = linear(g, store, &format!("{name}.emb"), e);
        h = g.add_channel(h, e);
    }
    let h = g.silu(h);
    let h = conv(g, store, &format!("{name}.conv2"), h, 1);
    let skip_name = format!("{name}.skip.weight");
    let skip = if store.contains(&skip_name) {
        conv(g, store, &format!("{name}.skip"), x, 1)
    } else {
        x
    };
    g.add(skip, h)
}
