//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node. Parameters enter as named
//! leaves pulled from a [`ParamStore`]; after [`Graph::backward`] their
//! gradients are read back by name with [`Graph::param_grads`].

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Sin(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Upsample2x(Var),
    AddChannel(Var, Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    RepeatCols {
        x: Var,
        k: usize,
    },
    NormalizeCols {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grads: Vec<Option<Tensor>>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn conv_out(size: usize, k: usize, spec: Conv2dSpec) -> usize {
    (size + 2 * spec.pad - k) / spec.stride + 1
}

/// Unfolds one image `[C, H, W]` into a `(C·kh·kw) × (Ho·Wo)` column matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec, cols: &mut [f64]) {
    let ho = conv_out(h, kh, spec);
    let wo = conv_out(w, kw, spec);
    let mut row = 0;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[ci * h * w + iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec, dx: &mut [f64]) {
    let ho = conv_out(h, kh, spec);
    let wo = conv_out(w, kw, spec);
    let mut row = 0;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[ci * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf not backed by the parameter store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Named parameter leaf; repeated requests for one name share a node.
    ///
    /// Panics if the store has no such parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let trainable = store.is_trainable(name);
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    /// Adds a vector of length `n` to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vb.numel();
        assert_eq!(*vx.shape().last().unwrap(), n, "bias length mismatch");
        let mut t = vx.clone();
        for row in t.data_mut().chunks_mut(n) {
            for (r, bb) in row.iter_mut().zip(vb.data()) {
                *r += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(t, Op::AddBias(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(t, Op::Offset(x), rg)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.rank() == 2 && vb.rank() == 2, "matmul needs matrices");
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (kb, n) = if trans_b {
            (vb.shape()[1], vb.shape()[0])
        } else {
            (vb.shape()[0], vb.shape()[1])
        };
        assert_eq!(
            k,
            kb,
            "matmul inner dimension mismatch {:?} {:?}",
            va.shape(),
            vb.shape()
        );
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), false, vb.data(), trans_b, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, trans_b }, rg)
    }

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a (m×k) · bᵀ` with `b` stored as (n×k).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    /// `x (m×in) · wᵀ + b` with `w` stored as (out×in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_t(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::sin);
        let rg = self.rg(x);
        self.push(t, Op::Sin(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(t, Op::Exp(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(t, Op::Square(x), rg)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(t, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let vx = self.value(x);
        let n = *vx.shape().last().unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), n);
        let rows = vx.numel() / n;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mu) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise softmax of a matrix. Columns with `mask[j] == false` get
    /// probability zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.rank(), 2);
        let n = vx.shape()[1];
        if let Some(m) = mask {
            assert_eq!(m.len(), n);
            assert!(m.iter().any(|&b| b), "softmax mask hides every column");
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = vec![0.0; vx.numel()];
        for (row, orow) in vx.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                if keep(j) {
                    orow[j] = (row[j] - mx).exp();
                    s += orow[j];
                }
            }
            for v in orow.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::Softmax(x), rg)
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let [n, c, h, wd] = vx.shape() else {
            panic!("conv2d input must be rank 4")
        };
        let [o, cw, kh, kw] = vw.shape() else {
            panic!("conv2d weight must be rank 4")
        };
        let (n, c, h, wd, o, kh, kw) = (*n, *c, *h, *wd, *o, *kh, *kw);
        assert_eq!(c, *cw, "conv2d channel mismatch");
        let ho = conv_out(h, kh, spec);
        let wo = conv_out(wd, kw, spec);
        let ckk = c * kh * kw;
        let mut cols = vec![0.0; ckk * ho * wo];
        let mut out = vec![0.0; n * o * ho * wo];
        for i in 0..n {
            im2col(
                &vx.data()[i * c * h * wd..(i + 1) * c * h * wd],
                c,
                h,
                wd,
                kh,
                kw,
                spec,
                &mut cols,
            );
            let dst = &mut out[i * o * ho * wo..(i + 1) * o * ho * wo];
            gemm(o, ckk, ho * wo, 1.0, vw.data(), false, &cols, false, 0.0, dst);
            if let Some(b) = b {
                let vb = self.value(b).data();
                for oc in 0..o {
                    for v in &mut dst[oc * ho * wo..(oc + 1) * ho * wo] {
                        *v += vb[oc];
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, o, ho, wo], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(t, Op::Conv2d { x, w, b, spec }, rg)
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let [n, c, h, w] = vx.shape() else {
            panic!("upsample2x needs rank 4")
        };
        let (n, c, h, w) = (*n, *c, *h, *w);
        let t = Tensor::from_fn(&[n, c, 2 * h, 2 * w], |i| {
            let ox = i % (2 * w);
            let oy = (i / (2 * w)) % (2 * h);
            let nc = i / (4 * h * w);
            vx.data()[nc * h * w + (oy / 2) * w + ox / 2]
        });
        let rg = self.rg(x);
        self.push(t, Op::Upsample2x(x), rg)
    }

    /// Adds `v: [N, C]` to every spatial position of `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (self.value(x), self.value(v));
        let [n, c, h, w] = vx.shape() else {
            panic!("add_channel needs rank 4")
        };
        assert_eq!(vv.shape(), [*n, *c]);
        let hw = h * w;
        let mut t = vx.clone();
        for (chunk, add) in t.data_mut().chunks_mut(hw).zip(vv.data()) {
            for e in chunk {
                *e += add;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(t, Op::AddChannel(x, v), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        assert!(start + len <= n);
        let t = Tensor::from_fn(&[m, len], |i| vx.data()[(i / len) * n + start + i % len]);
        let rg = self.rg(x);
        self.push(t, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let m = self.shape(xs[0])[0];
        let widths: Vec<usize> = xs.iter().map(|&v| self.shape(v)[1]).collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&v, &wv) in xs.iter().zip(&widths) {
            let d = self.value(v).data();
            assert_eq!(self.shape(v)[0], m);
            for r in 0..m {
                out[r * n + off..r * n + off + wv].copy_from_slice(&d[r * wv..(r + 1) * wv]);
            }
            off += wv;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(vec![m, n], out), Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        let n = vx.shape()[1];
        assert!(start + len <= vx.shape()[0]);
        let t = Tensor::new(vec![len, n], vx.data()[start * n..(start + len) * n].to_vec());
        let rg = self.rg(x);
        self.push(t, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let n = self.shape(xs[0])[1];
        let mut out = Vec::new();
        let mut m = 0;
        for &v in xs {
            assert_eq!(self.shape(v)[1], n);
            m += self.shape(v)[0];
            out.extend_from_slice(self.value(v).data());
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(vec![m, n], out), Op::ConcatRows(xs.to_vec()), rg)
    }

    /// `(d × G) → (d × G·k)`: output column `c` copies input column `c / k`.
    pub fn repeat_cols(&mut self, x: Var, k: usize) -> Var {
        let vx = self.value(x);
        let (d, g) = (vx.shape()[0], vx.shape()[1]);
        let t = Tensor::from_fn(&[d, g * k], |i| {
            let (r, c) = (i / (g * k), i % (g * k));
            vx.data()[r * g + c / k]
        });
        let rg = self.rg(x);
        self.push(t, Op::RepeatCols { x, k }, rg)
    }

    /// Scales every column of a matrix to unit Euclidean norm. Callers must
    /// reject zero-norm columns beforehand.
    pub fn normalize_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (d, n) = (vx.shape()[0], vx.shape()[1]);
        let norms: Vec<f64> = (0..n)
            .map(|c| (0..d).map(|r| vx.data()[r * n + c].powi(2)).sum::<f64>().sqrt())
            .collect();
        let t = Tensor::from_fn(&[d, n], |i| vx.data()[i] / norms[i % n]);
        let rg = self.rg(x);
        self.push(t, Op::NormalizeCols { x, norms }, rg)
    }

    /// `y[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(index.len(), shape.iter().product::<usize>());
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data);
        let rg = self.rg(x);
        self.push(t, Op::Gather { x, index }, rg)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter touched by the graph, zero-filled when
    /// the parameter did not influence the loss.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(_, &v)| self.nodes[v.0].requires_grad)
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, t: Tensor| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let ga = Tensor::from_fn(va.shape(), |k| gd[k] * vb.data()[k]);
                let gb = Tensor::from_fn(vb.shape(), |k| gd[k] * va.data()[k]);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddBias(x, b) => {
                let n = val(*b).numel();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (s, r) in gb.iter_mut().zip(row) {
                        *s += r;
                    }
                }
                acc(*x, g.clone());
                acc(*b, Tensor::new(val(*b).shape().to_vec(), gb));
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::Offset(x) => acc(*x, g.clone()),
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = g.shape()[1];
                if nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    // y = a·b  → da = g·bᵀ ; y = a·bᵀ → da = g·b
                    gemm(m, n, k, 1.0, gd, false, vb.data(), !trans_b, 0.0, &mut ga);
                    acc(*a, Tensor::new(vec![m, k], ga));
                }
                if nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // db (n×k) = gᵀ·a
                        gemm(n, m, k, 1.0, gd, true, va.data(), false, 0.0, &mut gb);
                    } else {
                        // db (k×n) = aᵀ·g
                        gemm(k, m, n, 1.0, va.data(), true, gd, false, 0.0, &mut gb);
                    }
                    acc(*b, Tensor::new(vb.shape().to_vec(), gb));
                }
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Sin(x) => {
                let vx = val(*x);
                acc(*x, Tensor::from_fn(vx.shape(), |k| gd[k] * vx.data()[k].cos()));
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, Tensor::from_fn(vx.shape(), |k| gd[k] * gelu_parts(vx.data()[k]).1));
            }
            Op::Silu(x) => {
                let vx = val(*x);
                acc(
                    *x,
                    Tensor::from_fn(vx.shape(), |k| {
                        let v = vx.data()[k];
                        let s = sigmoid(v);
                        gd[k] * (s + v * s * (1.0 - s))
                    }),
                );
            }
            Op::Exp(x) => {
                let y = &nodes[i].value;
                acc(*x, Tensor::from_fn(y.shape(), |k| gd[k] * y.data()[k]));
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, Tensor::from_fn(vx.shape(), |k| 2.0 * gd[k] * vx.data()[k]));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                acc(
                    *x,
                    Tensor::from_fn(vx.shape(), |k| {
                        let v = vx.data()[k];
                        if v < *lo || v > *hi {
                            0.0
                        } else {
                            gd[k]
                        }
                    }),
                );
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), gd[0])),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma).data();
                let n = gm.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gm[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                        gg[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        gx[r * n + j] = rs * (gr[j] * gm[j] - mean_d - xr[j] * mean_dx);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), gx));
                acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), gg));
                acc(*beta, Tensor::new(val(*beta).shape().to_vec(), gbeta));
            }
            Op::Softmax(x) => {
                let y = &nodes[i].value;
                let n = y.shape()[1];
                let mut gx = vec![0.0; y.numel()];
                for r in 0..y.shape()[0] {
                    let yr = &y.data()[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), gx));
            }
            Op::Conv2d { x, w, b, spec } => {
                let (vx, vw) = (val(*x), val(*w));
                let [n, c, h, wd] = vx.shape() else { unreachable!() };
                let [o, _, kh, kw] = vw.shape() else { unreachable!() };
                let (n, c, h, wd, o, kh, kw) = (*n, *c, *h, *wd, *o, *kh, *kw);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let ckk = c * kh * kw;
                let mut cols = vec![0.0; ckk * ho * wo];
                let mut dcols = vec![0.0; ckk * ho * wo];
                let mut gw = vec![0.0; vw.numel()];
                let mut gx = vec![0.0; vx.numel()];
                let mut gb = vec![0.0; o];
                let need_x = nodes[x.0].requires_grad;
                for s in 0..n {
                    let gs = &gd[s * o * ho * wo..(s + 1) * o * ho * wo];
                    let xs = &vx.data()[s * c * h * wd..(s + 1) * c * h * wd];
                    im2col(xs, c, h, wd, kh, kw, *spec, &mut cols);
                    gemm(o, ho * wo, ckk, 1.0, gs, false, &cols, true, 1.0, &mut gw);
                    if need_x {
                        gemm(ckk, o, ho * wo, 1.0, vw.data(), true, gs, false, 0.0, &mut dcols);
                        col2im(
                            &dcols,
                            c,
                            h,
                            wd,
                            kh,
                            kw,
                            *spec,
                            &mut gx[s * c * h * wd..(s + 1) * c * h * wd],
                        );
                    }
                    for oc in 0..o {
                        gb[oc] += gs[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), gx));
                acc(*w, Tensor::new(vw.shape().to_vec(), gw));
                if let Some(b) = b {
                    acc(*b, Tensor::new(vec![o], gb));
                }
            }
            Op::Upsample2x(x) => {
                let vx = val(*x);
                let [_, _, h, w] = vx.shape() else { unreachable!() };
                let (h, w) = (*h, *w);
                let mut gx = vec![0.0; vx.numel()];
                for (k, gv) in gd.iter().enumerate() {
                    let ox = k % (2 * w);
                    let oy = (k / (2 * w)) % (2 * h);
                    let nc = k / (4 * h * w);
                    gx[nc * h * w + (oy / 2) * w + ox / 2] += gv;
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), gx));
            }
            Op::AddChannel(x, v) => {
                let vx = val(*x);
                let hw = vx.shape()[2] * vx.shape()[3];
                let gv: Vec<f64> = gd.chunks(hw).map(|c| c.iter().sum()).collect();
                acc(*x, g.clone());
                acc(*v, Tensor::new(val(*v).shape().to_vec(), gv));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshaped(val(*x).shape())),
            Op::SliceCols { x, start } => {
                let vx = val(*x);
                let (m, n) = (vx.shape()[0], vx.shape()[1]);
                let len = g.shape()[1];
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                acc(*x, Tensor::new(vec![m, n], gx));
            }
            Op::ConcatCols(xs) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut off = 0;
                for v in xs {
                    let wv = val(*v).shape()[1];
                    let t = Tensor::from_fn(&[m, wv], |k| gd[(k / wv) * n + off + k % wv]);
                    acc(*v, t);
                    off += wv;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = val(*x);
                let n = vx.shape()[1];
                let mut gx = vec![0.0; vx.numel()];
                gx[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*x, Tensor::new(vx.shape().to_vec(), gx));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for v in xs {
                    let len = val(*v).numel();
                    acc(*v, Tensor::new(val(*v).shape().to_vec(), gd[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::RepeatCols { x, k } => {
                let vx = val(*x);
                let (d, gcols) = (vx.shape()[0], vx.shape()[1]);
                let mut gx = vec![0.0; d * gcols];
                for r in 0..d {
                    for c in 0..gcols * k {
                        gx[r * gcols + c / k] += gd[r * gcols * k + c];
                    }
                }
                acc(*x, Tensor::new(vec![d, gcols], gx));
            }
            Op::NormalizeCols { x, norms } => {
                let y = &nodes[i].value;
                let (d, n) = (y.shape()[0], y.shape()[1]);
                let mut gx = vec![0.0; d * n];
                for c in 0..n {
                    let dot: f64 = (0..d).map(|r| y.data()[r * n + c] * gd[r * n + c]).sum();
                    for r in 0..d {
                        gx[r * n + c] = (gd[r * n + c] - y.data()[r * n + c] * dot) / norms[c];
                    }
                }
                acc(*x, Tensor::new(vec![d, n], gx));
            }
            Op::Gather { x, index } => {
                let vx = val(*x);
                let mut gx = vec![0.0; vx.numel()];
                for (k, &src) in index.iter().enumerate() {
                    gx[src] += gd[k];
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), gx));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder
    /// taking the listed inputs.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |xs: &[Tensor]| {
            let mut g = Graph::new();
            let vs: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
            let out = build(&mut g, &vs);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vs);
        g.backward(out);
        let h = 1e-6;
        for (idx, v) in vs.iter().enumerate() {
            let analytic = g
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
            for k in 0..inputs[idx].numel() {
                let mut plus = inputs.clone();
                plus[idx].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[idx].data_mut()[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + a.abs().max(fd.abs())),
                    "input {idx} entry {k}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    /// Weighted sum so every output entry carries a distinct gradient.
    fn reduce(g: &mut Graph, y: Var) -> Var {
        let shape = g.shape(y).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |k| ((k * 7 % 11) as f64 - 5.0) / 5.0));
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let bt = rand_tensor(&mut rng, &[2, 4]);
        check(vec![a.clone(), b], |g, v| {
            let y = g.matmul(v[0], v[1]);
            let y = g.gelu(y);
            reduce(g, y)
        });
        check(vec![a.clone(), bt], |g, v| {
            let y = g.matmul_t(v[0], v[1]);
            let y = g.silu(y);
            let y = g.sin(y);
            reduce(g, y)
        });
        let c = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        check(vec![a, c, bias], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let e = g.exp(s);
            let q = g.square(e);
            let t = g.transpose(q);
            let t = g.transpose(t);
            let y = g.add_bias(t, v[2]);
            let y = g.scale(y, 0.3);
            let y = g.offset(y, 2.0);
            reduce(g, y)
        });
    }

    #[test]
    fn norm_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let gamma = rand_tensor(&mut rng, &[5]);
        let beta = rand_tensor(&mut rng, &[5]);
        check(vec![x.clone(), gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            reduce(g, y)
        });
        check(vec![x.clone()], |g, v| {
            let y = g.softmax_rows(v[0], None);
            reduce(g, y)
        });
        check(vec![x.clone()], |g, v| {
            let y = g.softmax_rows(v[0], Some(&[true, false, true, true, false]));
            reduce(g, y)
        });
        check(vec![x.clone()], |g, v| {
            let y = g.normalize_cols(v[0]);
            reduce(g, y)
        });
        check(vec![x], |g, v| {
            let y = g.repeat_cols(v[0], 3);
            let a = g.slice_cols(y, 2, 7);
            let b = g.slice_rows(y, 1, 2);
            let b = g.reshape(b, &[5, 6]);
            let b = g.slice_rows(b, 0, 3);
            let c = g.concat_cols(&[a, b]);
            let d = g.concat_rows(&[c, c]);
            let e = g.gather(d, vec![0, 5, 5, 30, 2, 1], &[2, 3]);
            let e = g.clamp(e, -0.5, 0.5);
            reduce(g, e)
        });
    }

    #[test]
    fn conv_and_spatial_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let v = rand_tensor(&mut rng, &[2, 4]);
        for spec in [Conv2dSpec { stride: 1, pad: 1 }, Conv2dSpec { stride: 2, pad: 1 }] {
            check(vec![x.clone(), w.clone(), b.clone(), v.clone()], move |g, vs| {
                let y = g.conv2d(vs[0], vs[1], Some(vs[2]), spec);
                let y = g.add_channel(y, vs[3]);
                let y = g.upsample2x(y);
                reduce(g, y)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let mut g = Graph::new();
        let (vx, vw) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(vx, vw, None, Conv2dSpec { stride: 1, pad: 1 });
        let y = g.value(y);
        for o in 0..3 {
            for i in 0..4isize {
                for j in 0..4isize {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (yy, xx) = (i + ky - 1, j + kx - 1);
                                if (0..4).contains(&yy) && (0..4).contains(&xx) {
                                    s += x.data()[c * 16 + (yy * 4 + xx) as usize]
                                        * w.data()[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                    }
                    let got = y.data()[o * 16 + (i * 4 + j) as usize];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(c, x);
        g.backward(y);
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }
}
