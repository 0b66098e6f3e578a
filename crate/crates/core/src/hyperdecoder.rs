//! Hyper-transformer decoder: latent tensor → INR weights.
//!
//! The latent `z` (`[d_z, H, W]`) is cut into `P×P` patches that a shared
//! linear map turns into tokens. A pre-norm transformer encoder mixes the
//! tokens; a transformer decoder then lets `G` learnable query tokens per
//! INR layer cross-attend to them. A per-layer head turns every output
//! token into one `d_out` column, giving grouped matrices `W^o_l (d_out×G)`.
//! Full weights are rebuilt column by column from a learnable template:
//! column `c` (1-based) uses group `⌈c/k⌉`, `k = d_in/G`. Biases are
//! global parameters shared by every latent.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::inr::{self, Activation, InrConfig, InrParams};
use crate::nn::{self, AttentionShape};
use crate::params::ParamStore;
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconMode {
    /// `w_c = (w^o ⊙ w̄_c) / ‖w^o ⊙ w̄_c‖`
    Norm,
    /// `w_c = (1 + w^o) ⊙ w̄_c`
    Scale,
}

impl ReconMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReconMode::Norm => "norm",
            ReconMode::Scale => "scale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(ReconMode::Norm),
            "scale" => Ok(ReconMode::Scale),
            other => Err(Error::InvalidConfig(format!("unknown recon_mode {other:?}"))),
        }
    }
}

/// Column norms below this are rejected in norm mode.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Scale applied to the default init of the output heads, so that freshly
/// initialised decoders emit `W^o ≈ 0` and the INR starts near its template.
const HEAD_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct HdConfig {
    pub latent_channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub patch_size: usize,
    pub token_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub feedforward_dim: usize,
    pub groups: usize,
    pub recon_mode: ReconMode,
}

impl Default for HdConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_h: 4,
            latent_w: 4,
            patch_size: 1,
            token_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            head_dim: 16,
            feedforward_dim: 128,
            groups: 2,
            recon_mode: ReconMode::Scale,
        }
    }
}

impl HdConfig {
    pub fn num_tokens(&self) -> usize {
        (self.latent_h / self.patch_size) * (self.latent_w / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.latent_channels
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_h, self.latent_w]
    }

    fn attn_shape(&self) -> AttentionShape {
        AttentionShape {
            dim: self.token_dim,
            heads: self.heads,
            head_dim: self.head_dim,
        }
    }

    pub fn validate(&self, inr: &InrConfig) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.latent_h.is_multiple_of(p) || !self.latent_w.is_multiple_of(p) {
            return Err(Error::IndivisibleDims {
                h: self.latent_h,
                w: self.latent_w,
                patch: p,
            });
        }
        if self.latent_channels == 0 || self.token_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::InvalidConfig("hd dimensions must be >= 1".into()));
        }
        if self.groups == 0 {
            return Err(Error::InvalidConfig("groups must be >= 1".into()));
        }
        for (l, (_, d_in)) in inr.layer_shapes().into_iter().enumerate() {
            if d_in % self.groups != 0 {
                return Err(Error::InvalidConfig(format!(
                    "INR layer {} has d_in {d_in}, not divisible by groups {}",
                    l + 1,
                    self.groups
                )));
            }
        }
        Ok(())
    }
}

/// Counts reported by `inspect`: decoder parameters vs generated weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamAccounting {
    pub hd_params: usize,
    pub inr_weights: usize,
    pub inr_biases: usize,
}

impl ParamAccounting {
    pub fn ratio(&self) -> f64 {
        self.inr_weights as f64 / self.hd_params as f64
    }
}

/// Closed-form parameter count of a decoder built by [`init_hd`].
pub fn param_accounting(hd: &HdConfig, inr: &InrConfig) -> ParamAccounting {
    let td = hd.token_dim;
    let attn = nn::attention_param_count(hd.attn_shape());
    let ff = td * hd.feedforward_dim + hd.feedforward_dim + hd.feedforward_dim * td + td;
    let tokenizer = hd.patch_dim() * td + td + hd.num_tokens() * td;
    let enc = hd.encoder_layers * (4 * td + attn + ff);
    let dec = hd.decoder_layers * (6 * td + 2 * attn + ff);
    let shapes = inr.layer_shapes();
    let queries = hd.groups * shapes.len() * td;
    let heads: usize = shapes.iter().map(|(o, _)| td * o + o).sum();
    let templates = inr.weight_count();
    let biases = inr.bias_count();
    ParamAccounting {
        hd_params: tokenizer + enc + dec + queries + heads + templates + biases,
        inr_weights: templates,
        inr_biases: biases,
    }
}

pub fn init_hd(store: &mut ParamStore, rng: &mut impl Rng, hd: &HdConfig, inr: &InrConfig) {
    let td = hd.token_dim;
    nn::init_linear(store, rng, "hd.tokenizer.proj", hd.patch_dim(), td);
    store.insert(
        "hd.tokenizer.pos",
        normal_tensor(rng, &[hd.num_tokens(), td]).map(|v| 0.02 * v),
    );
    let attn = hd.attn_shape();
    for i in 0..hd.encoder_layers {
        let p = format!("hd.encoder.{i}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), td);
        nn::init_attention(store, rng, &format!("{p}.attn"), attn);
        nn::init_layer_norm(store, &format!("{p}.ln2"), td);
        nn::init_feedforward(store, rng, &format!("{p}.ff"), td, hd.feedforward_dim);
    }
    for i in 0..hd.decoder_layers {
        let p = format!("hd.decoder.{i}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), td);
        nn::init_attention(store, rng, &format!("{p}.self_attn"), attn);
        nn::init_layer_norm(store, &format!("{p}.ln2"), td);
        nn::init_attention(store, rng, &format!("{p}.cross_attn"), attn);
        nn::init_layer_norm(store, &format!("{p}.ln3"), td);
        nn::init_feedforward(store, rng, &format!("{p}.ff"), td, hd.feedforward_dim);
    }
    let template = match inr.activation {
        Activation::Sine => inr::siren_init_with(inr, rng),
        Activation::Relu => inr::relu_init_with(inr, rng),
    };
    for (l, (d_out, _)) in inr.layer_shapes().into_iter().enumerate() {
        store.insert(query_name(l), normal_tensor(rng, &[hd.groups, td]));
        let head = head_name(l);
        nn::init_linear(store, rng, &head, td, d_out);
        if let Some(w) = store.get_mut(&format!("{head}.weight")) {
            w.scale(HEAD_INIT_GAIN);
        }
    }
    store.extend(template.to_store("hd"));
}

pub fn query_name(l: usize) -> String {
    format!("hd.queries.W{}", l + 1)
}

fn head_name(l: usize) -> String {
    format!("hd.head.W{}", l + 1)
}

/// Flattens `z [d_z, H, W]` into `N × (P²·d_z)` patch rows, patches in
/// row-major order, each flattened as (channel, dy, dx).
pub fn patch_index(hd: &HdConfig) -> Vec<usize> {
    let (c, h, w, p) = (hd.latent_channels, hd.latent_h, hd.latent_w, hd.patch_size);
    let mut idx = Vec::with_capacity(c * h * w);
    for py in 0..h / p {
        for px in 0..w / p {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        idx.push(ch * h * w + (py * p + dy) * w + px * p + dx);
                    }
                }
            }
        }
    }
    idx
}

fn check_latent(hd: &HdConfig, shape: &[usize]) -> Result<()> {
    if shape != hd.latent_shape() {
        return Err(Error::ShapeMismatch(format!(
            "latent {:?}, expected {:?}",
            shape,
            hd.latent_shape()
        )));
    }
    let p = hd.patch_size;
    if p == 0 || !hd.latent_h.is_multiple_of(p) || !hd.latent_w.is_multiple_of(p) {
        return Err(Error::IndivisibleDims {
            h: hd.latent_h,
            w: hd.latent_w,
            patch: p,
        });
    }
    Ok(())
}

pub fn patchify(g: &mut Graph, hd: &HdConfig, z: Var) -> Result<Var> {
    check_latent(hd, g.shape(z))?;
    Ok(g.gather(z, patch_index(hd), &[hd.num_tokens(), hd.patch_dim()]))
}

/// Token projection without positional embeddings.
pub fn project_patches(g: &mut Graph, store: &ParamStore, hd: &HdConfig, z: Var) -> Result<Var> {
    let patches = patchify(g, hd, z)?;
    Ok(nn::linear(g, store, "hd.tokenizer.proj", patches))
}

pub fn tokenize(g: &mut Graph, store: &ParamStore, hd: &HdConfig, z: Var) -> Result<Var> {
    let tokens = project_patches(g, store, hd, z)?;
    let pos = g.param(store, "hd.tokenizer.pos");
    Ok(g.add(tokens, pos))
}

/// Self-attention stack over latent tokens. Attention matrices are appended
/// to `probs` when provided.
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    hd: &HdConfig,
    tokens: Var,
    mut probs: Option<&mut Vec<Tensor>>,
) -> Var {
    let mut x = tokens;
    for i in 0..hd.encoder_layers {
        let p = format!("hd.encoder.{i}");
        let h = nn::layer_norm(g, store, &format!("{p}.ln1"), x);
        let a = nn::attention(
            g,
            store,
            &format!("{p}.attn"),
            hd.attn_shape(),
            h,
            h,
            None,
            probs.as_deref_mut(),
        );
        x = g.add(x, a);
        let h = nn::layer_norm(g, store, &format!("{p}.ln2"), x);
        let f = nn::feedforward(g, store, &format!("{p}.ff"), h);
        x = g.add(x, f);
    }
    x
}

/// All weight queries `W̄^i_{1:L}` stacked into a `(G·L) × token_dim` matrix.
pub fn weight_queries(g: &mut Graph, store: &ParamStore, inr: &InrConfig) -> Var {
    let qs: Vec<Var> = (0..inr.layers).map(|l| g.param(store, &query_name(l))).collect();
    if qs.len() == 1 {
        qs[0]
    } else {
        g.concat_rows(&qs)
    }
}

/// Output of the transformer decoder.
pub struct DecoderOutput {
    /// `(G·L) × token_dim` output tokens.
    pub tokens: Var,
    /// Grouped matrices `W^o_l (d_out × G)`, one per INR layer.
    pub grouped: Vec<Var>,
}

/// Cross-attends the weight queries to `latent (N × token_dim)`.
/// `latent_mask` restricts which latent tokens may be attended.
pub fn decoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    hd: &HdConfig,
    inr: &InrConfig,
    queries: Var,
    latent: Var,
    latent_mask: Option<&[bool]>,
) -> DecoderOutput {
    let mut x = queries;
    for i in 0..hd.decoder_layers {
        let p = format!("hd.decoder.{i}");
        let h = nn::layer_norm(g, store, &format!("{p}.ln1"), x);
        let a = nn::attention(g, store, &format!("{p}.self_attn"), hd.attn_shape(), h, h, None, None);
        x = g.add(x, a);
        let h = nn::layer_norm(g, store, &format!("{p}.ln2"), x);
        let a = nn::attention(
            g,
            store,
            &format!("{p}.cross_attn"),
            hd.attn_shape(),
            h,
            latent,
            latent_mask,
            None,
        );
        x = g.add(x, a);
        let h = nn::layer_norm(g, store, &format!("{p}.ln3"), x);
        let f = nn::feedforward(g, store, &format!("{p}.ff"), h);
        x = g.add(x, f);
    }
    let grouped = (0..inr.layers)
        .map(|l| {
            let rows = g.slice_rows(x, l * hd.groups, hd.groups);
            let cols = nn::linear(g, store, &head_name(l), rows);
            g.transpose(cols)
        })
        .collect();
    DecoderOutput { tokens: x, grouped }
}

/// Graph form of the reconstruction operator for one layer.
pub fn reconstruct_weights_graph(
    g: &mut Graph,
    grouped: Var,
    template: Var,
    mode: ReconMode,
    layer: usize,
) -> Result<Var> {
    let (d_out, groups) = (g.shape(grouped)[0], g.shape(grouped)[1]);
    let (t_out, d_in) = (g.shape(template)[0], g.shape(template)[1]);
    if d_out != t_out || groups == 0 || d_in % groups != 0 {
        return Err(Error::ShapeMismatch(format!(
            "grouped {:?} incompatible with template {:?}",
            g.shape(grouped),
            g.shape(template)
        )));
    }
    let k = d_in / groups;
    let expanded = g.repeat_cols(grouped, k);
    match mode {
        ReconMode::Scale => {
            let s = g.offset(expanded, 1.0);
            Ok(g.mul(s, template))
        }
        ReconMode::Norm => {
            let prod = g.mul(expanded, template);
            let v = g.value(prod);
            for c in 0..d_in {
                let n = (0..d_out).map(|r| v.data()[r * d_in + c].powi(2)).sum::<f64>().sqrt();
                if n < DEGENERATE_NORM {
                    return Err(Error::DegenerateNorm {
                        layer: layer + 1,
                        column: c + 1,
                    });
                }
            }
            Ok(g.normalize_cols(prod))
        }
    }
}

/// Rebuilds a full `d_out × d_in` weight matrix from `W^o (d_out × G)` and
/// the template `W̄^b (d_out × d_in)`.
pub fn reconstruct_weights(grouped: &Tensor, template: &Tensor, mode: ReconMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let wo = g.constant(grouped.clone());
    let wb = g.constant(template.clone());
    let w = reconstruct_weights_graph(&mut g, wo, wb, mode, 0)?;
    Ok(g.value(w).clone())
}

/// Differentiable `Φ = g_φ(z)`: weight and bias nodes for every INR layer.
pub struct GeneratedInr {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

pub fn generate_inr_graph(
    g: &mut Graph,
    store: &ParamStore,
    hd: &HdConfig,
    inr: &InrConfig,
    z: Var,
) -> Result<GeneratedInr> {
    let tokens = tokenize(g, store, hd, z)?;
    let latent = encoder_forward(g, store, hd, tokens, None);
    let queries = weight_queries(g, store, inr);
    let out = decoder_forward(g, store, hd, inr, queries, latent, None);
    let mut weights = Vec::with_capacity(inr.layers);
    let mut biases = Vec::with_capacity(inr.layers);
    for (l, wo) in out.grouped.into_iter().enumerate() {
        let template = g.param(store, &inr::weight_name("hd", l));
        weights.push(reconstruct_weights_graph(g, wo, template, hd.recon_mode, l)?);
        biases.push(g.param(store, &inr::bias_name("hd", l)));
    }
    Ok(GeneratedInr { weights, biases })
}

/// Generates INR parameters for a latent `z [d_z, H, W]`.
pub fn generate_inr_params(z: &Tensor, store: &ParamStore, hd: &HdConfig, inr: &InrConfig) -> Result<InrParams> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let gen = generate_inr_graph(&mut g, store, hd, inr, zv)?;
    Ok(InrParams {
        weights: gen.weights.iter().map(|&w| g.value(w).clone()).collect(),
        biases: gen.biases.iter().map(|&b| g.value(b).clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, substream};

    fn small() -> (HdConfig, InrConfig, ParamStore) {
        let inr = InrConfig {
            layers: 3,
            hidden_dim: 8,
            in_dim: 2,
            out_dim: 1,
            ..Default::default()
        };
        let hd = HdConfig {
            latent_channels: 2,
            latent_h: 4,
            latent_w: 4,
            patch_size: 2,
            token_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            head_dim: 4,
            feedforward_dim: 16,
            groups: 2,
            recon_mode: ReconMode::Scale,
        };
        let mut store = ParamStore::new();
        init_hd(&mut store, &mut substream(1, "init"), &hd, &inr);
        (hd, inr, store)
    }

    #[test]
    fn accounting_matches_initialised_store() {
        let (hd, inr, store) = small();
        assert_eq!(param_accounting(&hd, &inr).hd_params, store.count("hd."));
        assert_eq!(param_accounting(&hd, &inr).inr_weights, inr.weight_count());
    }

    #[test]
    fn token_counts() {
        let hd = HdConfig {
            latent_h: 16,
            latent_w: 16,
            patch_size: 2,
            ..Default::default()
        };
        assert_eq!(hd.num_tokens(), 64);
        let hd = HdConfig {
            latent_h: 4,
            latent_w: 4,
            patch_size: 4,
            ..Default::default()
        };
        assert_eq!(hd.num_tokens(), 1);
    }

    #[test]
    fn indivisible_latent_is_rejected() {
        let (mut hd, inr, store) = small();
        hd.patch_size = 3;
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4, 4]));
        assert!(matches!(
            tokenize(&mut g, &store, &hd, z),
            Err(Error::IndivisibleDims { .. })
        ));
        assert!(hd.validate(&inr).is_err());
    }

    #[test]
    fn patch_permutation_permutes_tokens() {
        let (hd, _, store) = small();
        let mut rng = substream(2, "t");
        let z = normal_tensor(&mut rng, &[2, 4, 4]);
        // swap patch (0,0) with patch (1,1)
        let mut zp = z.clone();
        for c in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let a = c * 16 + dy * 4 + dx;
                    let b = c * 16 + (2 + dy) * 4 + 2 + dx;
                    zp.data_mut().swap(a, b);
                }
            }
        }
        let mut g = Graph::new();
        let (zv, zpv) = (g.constant(z), g.constant(zp));
        let t = project_patches(&mut g, &store, &hd, zv).unwrap();
        let tp = project_patches(&mut g, &store, &hd, zpv).unwrap();
        let (t, tp) = (g.value(t), g.value(tp));
        let row = |x: &Tensor, r: usize| x.data()[r * 8..(r + 1) * 8].to_vec();
        assert_eq!(row(t, 0), row(tp, 3));
        assert_eq!(row(t, 3), row(tp, 0));
        assert_eq!(row(t, 1), row(tp, 1));
    }

    #[test]
    fn encoder_shapes_and_attention_rows() {
        let (hd, _, store) = small();
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut substream(3, "t"), &[4, 8]));
        let mut probs = Vec::new();
        let y = encoder_forward(&mut g, &store, &hd, x, Some(&mut probs));
        assert_eq!(g.shape(y), [4, 8]);
        assert_eq!(probs.len(), hd.encoder_layers * hd.heads);
        for p in &probs {
            for row in p.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let empty = HdConfig {
            encoder_layers: 0,
            ..hd
        };
        let y0 = encoder_forward(&mut g, &store, &empty, x, None);
        assert_eq!(g.value(y0), g.value(x));
    }

    #[test]
    fn decoder_output_counts() {
        let (hd, inr, store) = small();
        let mut g = Graph::new();
        let lat = g.constant(normal_tensor(&mut substream(4, "t"), &[4, 8]));
        let q = weight_queries(&mut g, &store, &inr);
        let out = decoder_forward(&mut g, &store, &hd, &inr, q, lat, None);
        assert_eq!(g.shape(out.tokens), [hd.groups * inr.layers, 8]);
        for (wo, (d_out, _)) in out.grouped.iter().zip(inr.layer_shapes()) {
            assert_eq!(g.shape(*wo), [d_out, hd.groups]);
        }
    }

    #[test]
    fn scale_mode_zero_tokens_returns_template() {
        let t = normal_tensor(&mut substream(5, "t"), &[3, 8]);
        let w = reconstruct_weights(&Tensor::zeros(&[3, 4]), &t, ReconMode::Scale).unwrap();
        assert_eq!(w, t);
    }

    #[test]
    fn norm_mode_rejects_vanishing_tokens() {
        let t = normal_tensor(&mut substream(6, "t"), &[3, 8]);
        let err = reconstruct_weights(&Tensor::zeros(&[3, 4]), &t, ReconMode::Norm).unwrap_err();
        assert!(matches!(err, Error::DegenerateNorm { layer: 1, column: 1 }));
    }

    #[test]
    fn generation_is_deterministic_and_biases_are_global() {
        let (hd, inr, store) = small();
        let mut rng = substream(7, "t");
        let z1 = normal_tensor(&mut rng, &[2, 4, 4]);
        let z2 = normal_tensor(&mut rng, &[2, 4, 4]);
        let a = generate_inr_params(&z1, &store, &hd, &inr).unwrap();
        let b = generate_inr_params(&z1, &store, &hd, &inr).unwrap();
        let c = generate_inr_params(&z2, &store, &hd, &inr).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights, c.weights);
        assert_eq!(a.biases, c.biases);
        for (l, bias) in a.biases.iter().enumerate() {
            assert_eq!(bias, store.get(&inr::bias_name("hd", l)).unwrap());
        }
        a.check_shapes(&inr).unwrap();
    }
}
