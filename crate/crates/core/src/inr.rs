//! Implicit neural representations: coordinate grids, the coordinate MLP
//! (sinusoidal or ReLU) and the Gaussian observation likelihood.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::{normal_tensor, substream, uniform_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sine,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Encoding {
    Identity,
    /// Random Fourier features `[sin(2π Bx), cos(2π Bx)]`, `B ~ N(0, scale²)`.
    Fourier {
        num_freqs: usize,
        scale: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Likelihood {
    Gaussian { sigma: f64 },
}

/// Shape and behaviour of the coordinate network.
///
/// `layers` counts weight matrices: layers `1..layers-1` apply the
/// activation, the last layer is affine.
#[derive(Clone, Debug, PartialEq)]
pub struct InrConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub omega: f64,
    pub encoding: Encoding,
    pub likelihood: Likelihood,
}

impl Default for InrConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden_dim: 32,
            in_dim: 2,
            out_dim: 1,
            activation: Activation::Sine,
            omega: 30.0,
            encoding: Encoding::Identity,
            likelihood: Likelihood::Gaussian { sigma: 1.0 },
        }
    }
}

impl InrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::InvalidConfig("inr layers must be >= 1".into()));
        }
        if self.hidden_dim < 1 || self.in_dim < 1 || self.out_dim < 1 {
            return Err(Error::InvalidConfig("inr dimensions must be >= 1".into()));
        }
        if self.activation == Activation::Sine && !(self.omega > 0.0) {
            return Err(Error::InvalidConfig("omega must be > 0 for sine activation".into()));
        }
        if let Encoding::Fourier { num_freqs, scale } = self.encoding {
            if num_freqs == 0 || !(scale > 0.0) {
                return Err(Error::InvalidConfig(
                    "fourier encoding needs num_freqs >= 1 and scale > 0".into(),
                ));
            }
        }
        let Likelihood::Gaussian { sigma } = self.likelihood;
        if !(sigma > 0.0) {
            return Err(Error::InvalidSigma(sigma));
        }
        Ok(())
    }

    /// Dimension of γ(x), the first layer's input.
    pub fn encoded_dim(&self) -> usize {
        match self.encoding {
            Encoding::Identity => self.in_dim,
            Encoding::Fourier { num_freqs, .. } => 2 * num_freqs,
        }
    }

    /// `(d_out, d_in)` of every weight matrix, first to last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let d_in = if l == 0 { self.encoded_dim() } else { self.hidden_dim };
                let d_out = if l + 1 == self.layers {
                    self.out_dim
                } else {
                    self.hidden_dim
                };
                (d_out, d_in)
            })
            .collect()
    }

    /// Number of weight-matrix entries (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, _)| o).sum()
    }
}

/// Weights `W_l (d_out×d_in)` and biases `b_l (d_out)` of one INR.
#[derive(Clone, Debug, PartialEq)]
pub struct InrParams {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl InrParams {
    pub fn check_shapes(&self, cfg: &InrConfig) -> Result<()> {
        let shapes = cfg.layer_shapes();
        if self.weights.len() != shapes.len() || self.biases.len() != shapes.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} layers, got {} weights / {} biases",
                shapes.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (l, ((w, b), (o, i))) in self.weights.iter().zip(&self.biases).zip(&shapes).enumerate() {
            if w.shape() != [*o, *i] || b.shape() != [*o] {
                return Err(Error::ShapeMismatch(format!(
                    "layer {}: weight {:?} bias {:?}, expected [{o}, {i}] / [{o}]",
                    l + 1,
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Named tensors `{prefix}.template.W{l}` and `{prefix}.bias.b{l}`, 1-based.
    pub fn to_store(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            s.insert(weight_name(prefix, l), w.clone());
            s.insert(bias_name(prefix, l), b.clone());
        }
        s
    }

    pub fn from_store(store: &ParamStore, prefix: &str, layers: usize) -> Result<Self> {
        let fetch = |name: String| store.get(&name).cloned().ok_or(Error::IncompleteCheckpoint(name));
        let weights = (0..layers)
            .map(|l| fetch(weight_name(prefix, l)))
            .collect::<Result<_>>()?;
        let biases = (0..layers)
            .map(|l| fetch(bias_name(prefix, l)))
            .collect::<Result<_>>()?;
        Ok(Self { weights, biases })
    }
}

/// 1-based weight tensor name for 0-based layer `l`.
pub fn weight_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.template.W{}", l + 1)
}

pub fn bias_name(prefix: &str, l: usize) -> String {
    format!("{prefix}.bias.b{}", l + 1)
}

/// Pixel-centre coordinates in `[-1, 1]^in_dim`, row-major over `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    pub shape: Vec<usize>,
    /// `(Π shape) × in_dim`.
    pub coords: Tensor,
}

impl CoordinateGrid {
    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn axis_coords(n: usize) -> Vec<f64> {
    (0..n).map(|j| ((2 * j + 1) as f64 - n as f64) / n as f64).collect()
}

pub fn make_coordinate_grid(shape: &[usize], in_dim: usize) -> Result<CoordinateGrid> {
    if shape.len() != in_dim {
        return Err(Error::ShapeMismatch(format!(
            "grid rank {} does not match in_dim {in_dim}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::ZeroLengthAxis);
    }
    let axes: Vec<Vec<f64>> = shape.iter().map(|&n| axis_coords(n)).collect();
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count * in_dim);
    for idx in 0..count {
        let mut rem = idx;
        let mut point = vec![0.0; in_dim];
        for a in (0..in_dim).rev() {
            point[a] = axes[a][rem % shape[a]];
            rem /= shape[a];
        }
        data.extend(point);
    }
    Ok(CoordinateGrid {
        shape: shape.to_vec(),
        coords: Tensor::new(vec![count, in_dim], data),
    })
}

/// Frequency matrix `B (num_freqs × in_dim)` for Fourier encoding, drawn from
/// the `inr.fourier` stream of `seed`.
pub fn fourier_matrix(cfg: &InrConfig, seed: u64) -> Option<Tensor> {
    match cfg.encoding {
        Encoding::Identity => None,
        Encoding::Fourier { num_freqs, scale } => {
            let mut rng = substream(seed, "inr.fourier");
            Some(normal_tensor(&mut rng, &[num_freqs, cfg.in_dim]).map(|v| v * scale))
        }
    }
}

/// Applies γ to raw coordinates `(D × in_dim)`.
pub fn encode_coords(cfg: &InrConfig, coords: &Tensor, fourier: Option<&Tensor>) -> Result<Tensor> {
    if coords.rank() != 2 || coords.shape()[1] != cfg.in_dim {
        return Err(Error::ShapeMismatch(format!(
            "coordinates {:?} do not have in_dim {}",
            coords.shape(),
            cfg.in_dim
        )));
    }
    match cfg.encoding {
        Encoding::Identity => Ok(coords.clone()),
        Encoding::Fourier { num_freqs, .. } => {
            let b = fourier.ok_or_else(|| Error::InvalidConfig("fourier encoding without frequency matrix".into()))?;
            if b.shape() != [num_freqs, cfg.in_dim] {
                return Err(Error::ShapeMismatch(format!("fourier matrix {:?}", b.shape())));
            }
            let d = coords.shape()[0];
            let mut out = vec![0.0; d * 2 * num_freqs];
            for p in 0..d {
                let x = &coords.data()[p * cfg.in_dim..(p + 1) * cfg.in_dim];
                for f in 0..num_freqs {
                    let row = &b.data()[f * cfg.in_dim..(f + 1) * cfg.in_dim];
                    let arg = 2.0 * PI * row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                    out[p * 2 * num_freqs + f] = arg.sin();
                    out[p * 2 * num_freqs + num_freqs + f] = arg.cos();
                }
            }
            Ok(Tensor::new(vec![d, 2 * num_freqs], out))
        }
    }
}

/// Differentiable INR evaluation over encoded coordinates `h0 (D × enc_dim)`.
pub fn inr_forward_graph(g: &mut Graph, cfg: &InrConfig, weights: &[Var], biases: &[Var], h0: Var) -> Var {
    let mut h = h0;
    let last = weights.len() - 1;
    for (l, (&w, &b)) in weights.iter().zip(biases).enumerate() {
        h = g.linear(h, w, Some(b));
        if l < last {
            h = match cfg.activation {
                Activation::Sine => {
                    let s = g.scale(h, cfg.omega);
                    g.sin(s)
                }
                Activation::Relu => g.clamp(h, 0.0, f64::INFINITY),
            };
        }
    }
    h
}

/// Evaluates `f_Φ` at every coordinate; returns `(D × out_dim)`.
pub fn inr_forward(params: &InrParams, coords: &Tensor, cfg: &InrConfig, fourier: Option<&Tensor>) -> Result<Tensor> {
    params.check_shapes(cfg)?;
    let h0 = encode_coords(cfg, coords, fourier)?;
    let mut g = Graph::new();
    let h0 = g.constant(h0);
    let ws: Vec<Var> = params.weights.iter().map(|w| g.constant(w.clone())).collect();
    let bs: Vec<Var> = params.biases.iter().map(|b| g.constant(b.clone())).collect();
    let out = inr_forward_graph(&mut g, cfg, &ws, &bs, h0);
    Ok(g.value(out).clone())
}

/// Uniform bound used for layer `l` (0-based) under sinusoidal init.
pub fn siren_bound(cfg: &InrConfig, l: usize) -> f64 {
    let (_, fan_in) = cfg.layer_shapes()[l];
    if l == 0 {
        1.0 / fan_in as f64
    } else {
        (6.0 / fan_in as f64).sqrt() / cfg.omega
    }
}

pub fn siren_init_with(cfg: &InrConfig, rng: &mut impl Rng) -> InrParams {
    let shapes = cfg.layer_shapes();
    let weights = shapes
        .iter()
        .enumerate()
        .map(|(l, &(o, i))| {
            let b = siren_bound(cfg, l);
            uniform_tensor(rng, &[o, i], -b, b)
        })
        .collect();
    let biases = shapes.iter().map(|&(o, _)| Tensor::zeros(&[o])).collect();
    InrParams { weights, biases }
}

pub fn siren_init(cfg: &InrConfig, seed: u64) -> InrParams {
    siren_init_with(cfg, &mut substream(seed, "inr.init"))
}

/// He-uniform init for ReLU networks.
pub fn relu_init_with(cfg: &InrConfig, rng: &mut impl Rng) -> InrParams {
    let shapes = cfg.layer_shapes();
    let weights = shapes
        .iter()
        .map(|&(o, i)| {
            let b = (6.0 / i as f64).sqrt();
            uniform_tensor(rng, &[o, i], -b, b)
        })
        .collect();
    let biases = shapes.iter().map(|&(o, _)| Tensor::zeros(&[o])).collect();
    InrParams { weights, biases }
}

/// Total Gaussian log-probability `Σ −½((y−ŷ)/σ)² − ln(σ√(2π))` over all entries.
pub fn likelihood_logprob(pred: &Tensor, target: &Tensor, family: Likelihood) -> Result<f64> {
    let Likelihood::Gaussian { sigma } = family;
    if !(sigma > 0.0) {
        return Err(Error::InvalidSigma(sigma));
    }
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let norm = (sigma * (2.0 * PI).sqrt()).ln();
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, y)| -0.5 * ((y - p) / sigma).powi(2) - norm)
        .sum())
}

/// Graph form of [`likelihood_logprob`]; `target` is a constant.
pub fn likelihood_logprob_graph(g: &mut Graph, pred: Var, target: Var, family: Likelihood) -> Var {
    let Likelihood::Gaussian { sigma } = family;
    let n = g.value(pred).numel() as f64;
    let r = g.sub(target, pred);
    let sq = g.square(r);
    let s = g.sum(sq);
    let s = g.scale(s, -0.5 / (sigma * sigma));
    g.offset(s, -n * (sigma * (2.0 * PI).sqrt()).ln())
}

/// The normalising constant `D·ln(σ√(2π))` subtracted by the likelihood.
pub fn likelihood_constant(numel: usize, family: Likelihood) -> f64 {
    let Likelihood::Gaussian { sigma } = family;
    numel as f64 * (sigma * (2.0 * PI).sqrt()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_unit_sine() -> (InrConfig, InrParams) {
        let cfg = InrConfig {
            layers: 2,
            hidden_dim: 1,
            in_dim: 1,
            out_dim: 1,
            ..Default::default()
        };
        let params = InrParams {
            weights: vec![
                Tensor::new(vec![1, 1], vec![1.0 / 30.0]),
                Tensor::new(vec![1, 1], vec![1.0]),
            ],
            biases: vec![Tensor::zeros(&[1]), Tensor::zeros(&[1])],
        };
        (cfg, params)
    }

    #[test]
    fn grid_closed_forms() {
        assert_eq!(make_coordinate_grid(&[1], 1).unwrap().coords.data(), [0.0]);
        assert_eq!(make_coordinate_grid(&[2], 1).unwrap().coords.data(), [-0.5, 0.5]);
        assert_eq!(
            make_coordinate_grid(&[4], 1).unwrap().coords.data(),
            [-0.75, -0.25, 0.25, 0.75]
        );
        let g = make_coordinate_grid(&[2, 3], 2).unwrap();
        assert_eq!(g.coords.shape(), [6, 2]);
        // row-major: second axis fastest
        assert_eq!(&g.coords.data()[..4], [-0.5, -2.0 / 3.0, -0.5, 0.0]);
        assert!(matches!(make_coordinate_grid(&[3, 0], 2), Err(Error::ZeroLengthAxis)));
        assert!(make_coordinate_grid(&[3], 2).is_err());
    }

    #[test]
    fn grid_nesting_is_exact() {
        // x_j = (2j + 1 - n) / n as exact rationals: the n-grid point is the
        // mean of its two children in the 2n-grid.
        let num = |j: i64, n: i64| 2 * j + 1 - n;
        for n in 1i64..=64 {
            for j in 0..n {
                // (a/2n + b/2n)/2 == c/n  <=>  a + b == 4c
                assert_eq!(num(2 * j, 2 * n) + num(2 * j + 1, 2 * n), 4 * num(j, n));
            }
        }
        // Dyadic grids are also exact in floating point.
        for n in [1usize, 2, 4, 8, 16, 32, 64] {
            let coarse = axis_coords(n);
            let fine = axis_coords(2 * n);
            for j in 0..n {
                assert_eq!(coarse[j], (fine[2 * j] + fine[2 * j + 1]) / 2.0);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = InrConfig {
            layers: 3,
            hidden_dim: 4,
            out_dim: 3,
            ..Default::default()
        };
        let params = InrParams {
            weights: cfg
                .layer_shapes()
                .iter()
                .map(|&(o, i)| Tensor::zeros(&[o, i]))
                .collect(),
            biases: cfg.layer_shapes().iter().map(|&(o, _)| Tensor::zeros(&[o])).collect(),
        };
        let grid = make_coordinate_grid(&[3, 3], 2).unwrap();
        let y = inr_forward(&params, &grid.coords, &cfg, None).unwrap();
        assert_eq!(y.shape(), [9, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_sine_closed_form() {
        let (cfg, params) = one_unit_sine();
        let x = Tensor::new(vec![1, 1], vec![PI / 60.0]);
        let y = inr_forward(&params, &x, &cfg, None).unwrap().item();
        assert!((y - (PI / 60.0).sin()).abs() < 1e-15);
        assert!((y - 0.05234).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (cfg, mut params) = one_unit_sine();
        params.weights[1] = Tensor::zeros(&[2, 1]);
        let x = Tensor::new(vec![1, 1], vec![0.0]);
        assert!(matches!(
            inr_forward(&params, &x, &cfg, None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn siren_bounds_and_determinism() {
        let cfg = InrConfig {
            layers: 4,
            hidden_dim: 256,
            in_dim: 2,
            out_dim: 3,
            ..Default::default()
        };
        assert!((siren_bound(&cfg, 1) - 0.005103).abs() < 1e-6);
        let a = siren_init(&cfg, 11);
        let b = siren_init(&cfg, 11);
        assert_eq!(a, b);
        assert!(a.weights[0].data().iter().all(|v| v.abs() <= 0.5));
        for l in 1..4 {
            let bound = siren_bound(&cfg, l);
            assert!(a.weights[l].data().iter().all(|v| v.abs() <= bound));
        }
        assert!(a.biases.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        assert_ne!(a, siren_init(&cfg, 12));
    }

    #[test]
    fn likelihood_closed_forms() {
        let fam = Likelihood::Gaussian { sigma: 1.0 };
        let one = Tensor::new(vec![1, 1], vec![0.3]);
        let lp = likelihood_logprob(&one, &one, fam).unwrap();
        assert!((lp + 0.918_938_533).abs() < 1e-8);
        let lp = likelihood_logprob(&Tensor::new(vec![1, 1], vec![1.3]), &one, fam).unwrap();
        assert!((lp + 1.418_938_533).abs() < 1e-8);
        let two_pred = Tensor::new(vec![2, 1], vec![1.3, 1.3]);
        let two_tgt = Tensor::new(vec![2, 1], vec![0.3, 0.3]);
        let lp2 = likelihood_logprob(&two_pred, &two_tgt, fam).unwrap();
        assert!((lp2 - 2.0 * lp).abs() < 1e-12);
        assert!(matches!(
            likelihood_logprob(&one, &one, Likelihood::Gaussian { sigma: 0.0 }),
            Err(Error::InvalidSigma(_))
        ));
    }

    #[test]
    fn fourier_encoding_shape() {
        let cfg = InrConfig {
            encoding: Encoding::Fourier {
                num_freqs: 8,
                scale: 2.0,
            },
            ..Default::default()
        };
        assert_eq!(cfg.encoded_dim(), 16);
        let b = fourier_matrix(&cfg, 3).unwrap();
        let grid = make_coordinate_grid(&[2, 2], 2).unwrap();
        let enc = encode_coords(&cfg, &grid.coords, Some(&b)).unwrap();
        assert_eq!(enc.shape(), [4, 16]);
        for p in 0..4 {
            for f in 0..8 {
                let s = enc.data()[p * 16 + f];
                let c = enc.data()[p * 16 + 8 + f];
                assert!((s * s + c * c - 1.0).abs() < 1e-12);
            }
        }
    }
}
