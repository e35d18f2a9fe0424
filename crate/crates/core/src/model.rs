//! Toy query-based detector with a Beta maturity head on every decoder layer.
//!
//! Pipeline for a batch of `B` square RGB images of side `S`:
//!
//! 1. patchify into `N = (S/p)²` tokens of `3p²` values (patch-row-major,
//!    then `(dy, dx, channel)` inside a patch);
//! 2. linear embedding to `D`, plus a fixed 2-D sinusoidal position code;
//! 3. one pre-norm encoder block (self-attention, ReLU MLP), then a final
//!    layer norm producing the memory;
//! 4. `Q` learnable queries through `L` pre-norm decoder blocks, each with
//!    query self-attention, cross-attention to the memory, and a ReLU MLP;
//! 5. after every decoder block, a layer norm and three heads:
//!    objectness `sigmoid(linear)`, box `sigmoid(MLP → 4)` in center/size
//!    form, and maturity `softplus(MLP → 2) + 0.5`.
//!
//! Attention is multi-head scaled dot-product with separate query, key,
//! value and output projections. The position code is added again to the
//! encoder's attention queries and keys and to the cross-attention keys, so
//! every attention layer sees token positions (values stay position-free).

use std::collections::HashMap;

use crate::autograd::{softplus, Graph, Parameter, Tensor, Var};
use crate::betax::{BetaParams, SHAPE_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::BoxCXCYWH;
use crate::rng::RngState;
use crate::synthdata::Image;

pub const OBJECTNESS_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { image_size: 64, patch: 8, embed_dim: 64, heads: 4, num_queries: 12, decoder_layers: 2, mlp_ratio: 2 }
    }
}

impl ModelConfig {
    /// The reduced configuration used for end-to-end gradient checks.
    pub fn reduced() -> Self {
        ModelConfig { image_size: 16, patch: 8, embed_dim: 8, heads: 2, num_queries: 4, decoder_layers: 2, mlp_ratio: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self;
        let positive =
            [c.image_size, c.patch, c.embed_dim, c.heads, c.num_queries, c.decoder_layers, c.mlp_ratio];
        if positive.contains(&0) {
            return Err(Error::Domain(format!("model dimensions must be positive: {c:?}")));
        }
        if c.image_size % c.patch != 0 {
            return Err(Error::Domain(format!("image size {} not divisible by patch {}", c.image_size, c.patch)));
        }
        if c.embed_dim % c.heads != 0 {
            return Err(Error::Domain(format!("embed dim {} not divisible by {} heads", c.embed_dim, c.heads)));
        }
        if c.embed_dim % 4 != 0 {
            return Err(Error::Domain(format!("embed dim {} must be a multiple of 4", c.embed_dim)));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Closed-form parameter count. With `D` embed, `P = 3p²`, `H = ratio·D`:
    ///
    /// ```text
    /// embed       P·D + D
    /// encoder     4D + 4(D² + D) + 2DH + H + D, plus 2D final norm
    /// queries     Q·D
    /// per layer   6D + 8(D² + D) + 2DH + H + D              (decoder block)
    ///             2D + (D + 1) + (D² + 5D + 4) + (D² + 3D + 2)  (heads)
    /// ```
    pub fn param_count(&self) -> usize {
        let d = self.embed_dim;
        let p = self.patch_dim();
        let h = self.mlp_ratio * d;
        let mlp = 2 * d * h + h + d;
        let embed = p * d + d;
        let encoder = 4 * d + 4 * (d * d + d) + mlp + 2 * d;
        let queries = self.num_queries * d;
        let block = 6 * d + 8 * (d * d + d) + mlp;
        let heads = 2 * d + (d + 1) + (d * d + 5 * d + 4) + (d * d + 3 * d + 2);
        embed + encoder + queries + self.decoder_layers * (block + heads)
    }
}

/// Unconstrained maturity pre-activations of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadRawOutput {
    pub y_hat_alpha: f64,
    pub y_hat_beta: f64,
}

/// `α = softplus(ŷ_α) + 0.5`, `β = softplus(ŷ_β) + 0.5`.
pub fn head_transform(raw: HeadRawOutput) -> Result<BetaParams> {
    BetaParams::new(softplus(raw.y_hat_alpha) + SHAPE_FLOOR, softplus(raw.y_hat_beta) + SHAPE_FLOOR)
}

/// One query's prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoxCXCYWH,
    pub p_obj: f64,
    pub maturity: BetaParams,
}

/// Head outputs of one decoder layer for a whole batch, rows ordered
/// `(image, query)`.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutputs {
    /// Objectness logits `[B, Q, 1]`.
    pub logits: Var,
    /// Boxes `[B, Q, 4]`, center/size in `(0, 1)`.
    pub boxes: Var,
    /// Beta shapes `[B, Q, 1]` each, already offset by 0.5.
    pub alpha: Var,
    pub beta: Var,
    pub batch: usize,
    pub num_queries: usize,
}

pub struct ForwardPass {
    /// Graph leaves, aligned with [`Model::params`].
    pub param_vars: Vec<Var>,
    pub layers: Vec<LayerOutputs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

enum Init {
    Uniform,
    Zeros,
    Ones,
    Constant(f64),
    Queries,
}

fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = c.embed_dim;
    let h = c.mlp_ratio * d;
    let mut out = Vec::new();
    let linear = |out: &mut Vec<_>, name: &str, fan_in: usize, fan_out: usize, bias: Init| {
        out.push((format!("{name}.w"), vec![fan_in, fan_out], Init::Uniform));
        out.push((format!("{name}.b"), vec![fan_out], bias));
    };
    let norm = |out: &mut Vec<_>, name: &str| {
        out.push((format!("{name}.gamma"), vec![d], Init::Ones));
        out.push((format!("{name}.beta"), vec![d], Init::Zeros));
    };
    linear(&mut out, "embed", c.patch_dim(), d, Init::Zeros);
    norm(&mut out, "enc.ln1");
    for proj in ["q", "k", "v", "o"] {
        linear(&mut out, &format!("enc.attn.{proj}"), d, d, Init::Zeros);
    }
    norm(&mut out, "enc.ln2");
    linear(&mut out, "enc.mlp1", d, h, Init::Zeros);
    linear(&mut out, "enc.mlp2", h, d, Init::Zeros);
    norm(&mut out, "enc.norm");
    out.push(("queries".into(), vec![c.num_queries, d], Init::Queries));
    for l in 0..c.decoder_layers {
        let p = format!("dec{l}");
        norm(&mut out, &format!("{p}.ln_self"));
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.self.{proj}"), d, d, Init::Zeros);
        }
        norm(&mut out, &format!("{p}.ln_cross"));
        for proj in ["q", "k", "v", "o"] {
            linear(&mut out, &format!("{p}.cross.{proj}"), d, d, Init::Zeros);
        }
        norm(&mut out, &format!("{p}.ln_mlp"));
        linear(&mut out, &format!("{p}.mlp1"), d, h, Init::Zeros);
        linear(&mut out, &format!("{p}.mlp2"), h, d, Init::Zeros);
        let hp = format!("head{l}");
        norm(&mut out, &format!("{hp}.norm"));
        linear(&mut out, &format!("{hp}.obj"), d, 1, Init::Constant(OBJECTNESS_BIAS_INIT));
        linear(&mut out, &format!("{hp}.box1"), d, d, Init::Zeros);
        linear(&mut out, &format!("{hp}.box2"), d, 4, Init::Zeros);
        linear(&mut out, &format!("{hp}.mat1"), d, d, Init::Zeros);
        linear(&mut out, &format!("{hp}.mat2"), d, 2, Init::Zeros);
    }
    out
}

/// Fixed 2-D sinusoidal code `[N, D]`: the first half of the channels encode
/// the token column, the second half the row, each as `D/4` sines followed by
/// `D/4` cosines at frequencies `10000^(−i/(D/4))`.
pub fn position_code(c: &ModelConfig) -> Tensor {
    let d = c.embed_dim;
    let grid = c.image_size / c.patch;
    let quarter = d / 4;
    let mut data = vec![0.0; grid * grid * d];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut data[(gy * grid + gx) * d..(gy * grid + gx + 1) * d];
            for i in 0..quarter {
                let freq = 10_000f64.powf(-(i as f64) / quarter as f64);
                row[i] = (gx as f64 * freq).sin();
                row[quarter + i] = (gx as f64 * freq).cos();
                row[2 * quarter + i] = (gy as f64 * freq).sin();
                row[3 * quarter + i] = (gy as f64 * freq).cos();
            }
        }
    }
    Tensor::new(vec![grid * grid, d], data).expect("shape matches data")
}

/// Rearranges images into `[B, N, 3p²]` patch tokens.
pub fn patchify(c: &ModelConfig, images: &[&Image]) -> Result<Tensor> {
    let s = c.image_size;
    let p = c.patch;
    let grid = s / p;
    let pd = c.patch_dim();
    let mut data = Vec::with_capacity(images.len() * grid * grid * pd);
    for img in images {
        if img.size() != s {
            return Err(Error::Input(format!("model expects {s}x{s} images, got {}x{}", img.size(), img.size())));
        }
        let px = img.data();
        for gy in 0..grid {
            for gx in 0..grid {
                for dy in 0..p {
                    let start = ((gy * p + dy) * s + gx * p) * 3;
                    data.extend_from_slice(&px[start..start + 3 * p]);
                }
            }
        }
    }
    Tensor::new(vec![images.len(), grid * grid, pd], data)
}

struct Scope<'a> {
    vars: &'a [Var],
    index: &'a HashMap<String, usize>,
}

impl Scope<'_> {
    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let y = g.matmul(x, self.p(&format!("{name}.w")))?;
        g.add(y, self.p(&format!("{name}.b")))
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        g.layernorm(x, self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")))
    }

    fn mlp(&self, g: &mut Graph, x: Var, first: &str, second: &str) -> Result<Var> {
        let h = self.linear(g, x, first)?;
        let h = g.relu(h)?;
        self.linear(g, h, second)
    }

    /// Multi-head attention from `query` to `key`/`value` inputs.
    fn attention(&self, g: &mut Graph, query: Var, key: Var, value: Var, name: &str, heads: usize) -> Result<Var> {
        let q = self.linear(g, query, &format!("{name}.q"))?;
        let k = self.linear(g, key, &format!("{name}.k"))?;
        let v = self.linear(g, value, &format!("{name}.v"))?;
        let d = *g.shape(q).last().expect("rank 3");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 2, h * dh, dh)?;
            let kh = g.slice(k, 2, h * dh, dh)?;
            let vh = g.slice(v, 2, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.mul_scalar(scores, scale)?;
            let attn = g.softmax(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { g.concat(&outs, 2)? };
        self.linear(g, joined, &format!("{name}.o"))
    }
}

impl Model {
    /// Weights uniform in `±1/√fan_in` drawn in layout order from one stream
    /// seeded with `seed`; queries uniform in `[−1, 1]`; biases zero except the
    /// objectness bias (−2); layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngState::new(seed);
        let params = layout(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Uniform => {
                        let bound = 1.0 / (shape[0] as f64).sqrt();
                        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
                    }
                    Init::Queries => (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Constant(c) => vec![c; n],
                };
                Parameter::new(name, Tensor::new(shape, data).expect("layout shapes are consistent"))
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against the layout of `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        let got: Vec<(String, Vec<usize>)> =
            params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
        if got != expected {
            let diff: Vec<String> = expected
                .iter()
                .zip(got.iter().map(Some).chain(std::iter::repeat(None)))
                .filter(|(e, g)| Some(*e) != *g)
                .map(|(e, g)| format!("expected {} {:?}, found {:?}", e.0, e.1, g))
                .take(5)
                .collect();
            return Err(Error::Input(format!(
                "parameters do not fit the model layout ({} expected, {} given): {}",
                expected.len(),
                got.len(),
                diff.join("; ")
            )));
        }
        Ok(Self::assemble(config, params))
    }

    /// `(name, shape)` of every parameter in layout order.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    fn assemble(config: ModelConfig, params: Vec<Parameter>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Model { config, params, index }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records the forward pass of a batch on `g`.
    pub fn forward_graph(&self, g: &mut Graph, images: &[&Image]) -> Result<ForwardPass> {
        let c = &self.config;
        let batch = images.len();
        if batch == 0 {
            return Err(Error::Input("forward needs at least one image".into()));
        }
        let tokens = patchify(c, images)?;
        let param_vars: Vec<Var> = self.params.iter().map(|p| g.param(p.value.clone())).collect();
        let s = Scope { vars: &param_vars, index: &self.index };

        let x = g.constant(tokens);
        let x = s.linear(g, x, "embed")?;
        let pos = g.constant(position_code(c));
        let x = g.add(x, pos)?;
        let h = s.norm(g, x, "enc.ln1")?;
        let hp = g.add(h, pos)?;
        let a = s.attention(g, hp, hp, h, "enc.attn", c.heads)?;
        let x = g.add(x, a)?;
        let h = s.norm(g, x, "enc.ln2")?;
        let m = s.mlp(g, h, "enc.mlp1", "enc.mlp2")?;
        let x = g.add(x, m)?;
        let memory = s.norm(g, x, "enc.norm")?;
        let memory_keys = g.add(memory, pos)?;

        let zeros = g.constant(Tensor::zeros(&[batch, c.num_queries, c.embed_dim]));
        let mut q = g.add(zeros, s.p("queries"))?;
        let mut layers = Vec::with_capacity(c.decoder_layers);
        for l in 0..c.decoder_layers {
            let p = format!("dec{l}");
            let h = s.norm(g, q, &format!("{p}.ln_self"))?;
            let a = s.attention(g, h, h, h, &format!("{p}.self"), c.heads)?;
            q = g.add(q, a)?;
            let h = s.norm(g, q, &format!("{p}.ln_cross"))?;
            let a = s.attention(g, h, memory_keys, memory, &format!("{p}.cross"), c.heads)?;
            q = g.add(q, a)?;
            let h = s.norm(g, q, &format!("{p}.ln_mlp"))?;
            let m = s.mlp(g, h, &format!("{p}.mlp1"), &format!("{p}.mlp2"))?;
            q = g.add(q, m)?;

            let hp = format!("head{l}");
            let hn = s.norm(g, q, &format!("{hp}.norm"))?;
            let logits = s.linear(g, hn, &format!("{hp}.obj"))?;
            let b = s.mlp(g, hn, &format!("{hp}.box1"), &format!("{hp}.box2"))?;
            let boxes = g.sigmoid(b)?;
            let raw = s.mlp(g, hn, &format!("{hp}.mat1"), &format!("{hp}.mat2"))?;
            let shapes = g.softplus(raw)?;
            let shapes = g.add_scalar(shapes, SHAPE_FLOOR)?;
            let alpha = g.slice(shapes, 2, 0, 1)?;
            let beta = g.slice(shapes, 2, 1, 1)?;
            layers.push(LayerOutputs { logits, boxes, alpha, beta, batch, num_queries: c.num_queries });
        }
        Ok(ForwardPass { param_vars, layers })
    }

    /// Detections of every layer for every image: `[layer][image][query]`.
    pub fn predict(&self, images: &[&Image]) -> Result<Vec<Vec<Vec<Detection>>>> {
        let mut g = Graph::new();
        let pass = self.forward_graph(&mut g, images)?;
        pass.layers.iter().map(|l| detections(&g, l)).collect()
    }

    /// Per-layer detections of a single image; the last layer is final.
    pub fn forward(&self, image: &Image) -> Result<Vec<Vec<Detection>>> {
        Ok(self.predict(&[image])?.into_iter().map(|mut per_image| per_image.remove(0)).collect())
    }
}

/// Reads one layer's head values back as detections, `[image][query]`.
pub fn detections(g: &Graph, out: &LayerOutputs) -> Result<Vec<Vec<Detection>>> {
    let logits = g.value(out.logits).data();
    let boxes = g.value(out.boxes).data();
    let alpha = g.value(out.alpha).data();
    let beta = g.value(out.beta).data();
    (0..out.batch)
        .map(|b| {
            (0..out.num_queries)
                .map(|q| {
                    let r = b * out.num_queries + q;
                    let bx = &boxes[4 * r..4 * r + 4];
                    Ok(Detection {
                        bbox: BoxCXCYWH::new(bx[0], bx[1], bx[2], bx[3])?,
                        p_obj: 1.0 / (1.0 + (-logits[r]).exp()),
                        maturity: BetaParams::new(alpha[r], beta[r])?,
                    })
                })
                .collect()
        })
        .collect()
}
