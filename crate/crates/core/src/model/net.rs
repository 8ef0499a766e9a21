//! The toy detector: patch embedding, pre-LN transformer encoder, decoder
//! over learned queries, and class/box heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autodiff::{Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet};

const LN_EPS: f64 = 1e-5;

/// K predictions for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    /// `[K, C + 1]`, the last column is "no object".
    pub logits: Tensor,
    /// `[K, 4]` normalised cxcywh in (0, 1).
    pub boxes: Tensor,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
}

impl Builder {
    fn linear(&mut self, name: String, fan_in: usize, out: usize, exempt: bool) {
        let b = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform(&mut self.rng, &[fan_in, out], b);
        let bias = uniform(&mut self.rng, &[out], b);
        self.layers.push(Layer {
            name,
            weight,
            bias: Some(bias),
            exempt,
        });
    }

    fn layernorm(&mut self, name: String, d: usize) {
        self.layers.push(Layer {
            name,
            weight: Tensor::ones(&[d]),
            bias: Some(Tensor::zeros(&[d])),
            exempt: true,
        });
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(format!("{prefix}.{p}"), d, d, false);
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) {
        self.linear(format!("{prefix}.0"), d, f, false);
        self.linear(format!("{prefix}.1"), f, d, false);
    }
}

/// Deterministic initialisation; weights and biases uniform in ±1/√fan_in,
/// layernorms at identity.
pub fn init_model(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let f = cfg.ffn_dim;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        layers: Vec::new(),
    };
    b.linear("patch_embed".into(), cfg.patch_dim(), d, false);
    for l in 0..cfg.encoder_layers {
        b.layernorm(format!("enc.{l}.ln1"), d);
        b.attention(&format!("enc.{l}.attn"), d);
        b.layernorm(format!("enc.{l}.ln2"), d);
        b.ffn(&format!("enc.{l}.ffn"), d, f);
    }
    b.layernorm("enc.norm".into(), d);
    let queries = uniform(&mut b.rng, &[cfg.queries, d], 1.0);
    b.layers.push(Layer {
        name: "queries".into(),
        weight: queries,
        bias: None,
        exempt: false,
    });
    for l in 0..cfg.decoder_layers {
        b.layernorm(format!("dec.{l}.ln1"), d);
        b.attention(&format!("dec.{l}.self_attn"), d);
        b.layernorm(format!("dec.{l}.ln2"), d);
        b.attention(&format!("dec.{l}.cross_attn"), d);
        b.layernorm(format!("dec.{l}.ln3"), d);
        b.ffn(&format!("dec.{l}.ffn"), d, f);
    }
    b.layernorm("dec.norm".into(), d);
    b.linear("class_head".into(), d, cfg.num_classes + 1, true);
    b.linear("box_head.0".into(), d, d, true);
    b.linear("box_head.1".into(), d, 4, true);
    ParamSet::new(b.layers)
}

/// Fixed sinusoidal encoding `[tokens, d]`.
pub fn positional_encoding(tokens: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; tokens * d];
    for t in 0..tokens {
        for i in 0..d {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = t as f64 * freq;
            out[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::from_vec(&[tokens, d], out)
}

/// `[size, size, 3]` image to `[tokens, p*p*3]` rows in raster patch order.
pub fn patchify(cfg: &ModelConfig, image: &Tensor) -> Result<Tensor> {
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![s, s, 3],
            rhs: image.shape().to_vec(),
        });
    }
    let p = cfg.patch_size;
    let n = s / p;
    let src = image.data();
    let mut out = Vec::with_capacity(s * s * 3);
    for py in 0..n {
        for px in 0..n {
            for y in 0..p {
                let row = (py * p + y) * s + px * p;
                out.extend_from_slice(&src[row * 3..(row + p) * 3]);
            }
        }
    }
    Ok(Tensor::from_vec(&[n * n, cfg.patch_dim()], out))
}

/// Walks the flat parameter list in creation order.
struct Cursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.at];
        self.at += 1;
        v
    }

    fn pair(&mut self) -> (Var, Var) {
        (self.next(), self.next())
    }
}

fn linear(g: &mut Graph, c: &mut Cursor, x: Var) -> Result<Var> {
    let (w, b) = c.pair();
    g.linear(x, w, Some(b))
}

fn layernorm(g: &mut Graph, c: &mut Cursor, x: Var) -> Result<Var> {
    let (gamma, beta) = c.pair();
    g.layernorm(x, Some(gamma), Some(beta), LN_EPS)
}

fn attention(g: &mut Graph, c: &mut Cursor, cfg: &ModelConfig, x: Var, mem: Var) -> Result<Var> {
    let q = linear(g, c, x)?;
    let k = linear(g, c, mem)?;
    let v = linear(g, c, mem)?;
    let hd = cfg.head_dim();
    let inv = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = g.narrow(q, 1, h * hd, hd)?;
        let kh = g.narrow(k, 1, h * hd, hd)?;
        let vh = g.narrow(v, 1, h * hd, hd)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, inv);
        let a = g.softmax(s, 1)?;
        heads.push(g.matmul(a, vh)?);
    }
    let cat = g.concat(&heads, 1)?;
    linear(g, c, cat)
}

fn ffn(g: &mut Graph, c: &mut Cursor, x: Var) -> Result<Var> {
    let h = linear(g, c, x)?;
    let h = g.gelu(h);
    linear(g, c, h)
}

/// Number of flat tensors `forward_graph` consumes.
pub fn tensor_count(cfg: &ModelConfig) -> usize {
    2 + cfg.encoder_layers * 16 + 2 + 1 + cfg.decoder_layers * 26 + 2 + 6
}

/// Builds the forward pass; `vars` follow [`ParamSet::tensors`] order.
/// Returns `(logits [K, C+1], boxes [K, 4])`.
pub fn forward_graph(g: &mut Graph, cfg: &ModelConfig, vars: &[Var], image: &Tensor) -> Result<(Var, Var)> {
    if vars.len() != tensor_count(cfg) {
        return Err(Error::config(format!(
            "model expects {} tensors, got {}",
            tensor_count(cfg),
            vars.len()
        )));
    }
    let mut c = Cursor { vars, at: 0 };
    let patches = g.constant(patchify(cfg, image)?);
    let x = linear(g, &mut c, patches)?;
    let pe = g.constant(positional_encoding(cfg.tokens(), cfg.embed_dim));
    let mut x = g.add(x, pe)?;
    for _ in 0..cfg.encoder_layers {
        let h = layernorm(g, &mut c, x)?;
        let h = attention(g, &mut c, cfg, h, h)?;
        x = g.add(x, h)?;
        let h = layernorm(g, &mut c, x)?;
        let h = ffn(g, &mut c, h)?;
        x = g.add(x, h)?;
    }
    let memory = layernorm(g, &mut c, x)?;
    let mut y = c.next();
    for _ in 0..cfg.decoder_layers {
        let h = layernorm(g, &mut c, y)?;
        let h = attention(g, &mut c, cfg, h, h)?;
        y = g.add(y, h)?;
        let h = layernorm(g, &mut c, y)?;
        let h = attention(g, &mut c, cfg, h, memory)?;
        y = g.add(y, h)?;
        let h = layernorm(g, &mut c, y)?;
        let h = ffn(g, &mut c, h)?;
        y = g.add(y, h)?;
    }
    let y = layernorm(g, &mut c, y)?;
    let logits = linear(g, &mut c, y)?;
    let h = linear(g, &mut c, y)?;
    let h = g.gelu(h);
    let b = linear(g, &mut c, h)?;
    let boxes = g.sigmoid(b);
    debug_assert_eq!(c.at, vars.len());
    Ok((logits, boxes))
}

/// Binds every tensor of `params` as a constant leaf.
pub fn bind_constants(g: &mut Graph, params: &ParamSet) -> Vec<Var> {
    params.tensors().into_iter().map(|t| g.constant(t)).collect()
}

/// Inference; a pure function of `(params, image)`.
pub fn forward(cfg: &ModelConfig, params: &ParamSet, image: &Tensor) -> Result<DetectionSet> {
    forward_with(cfg, params, image, Precision::F64)
}

pub fn forward_with(cfg: &ModelConfig, params: &ParamSet, image: &Tensor, precision: Precision) -> Result<DetectionSet> {
    let mut g = Graph::with_precision(precision);
    let vars = bind_constants(&mut g, params);
    let (l, b) = forward_graph(&mut g, cfg, &vars, image)?;
    Ok(DetectionSet {
        logits: g.value(l).clone(),
        boxes: g.value(b).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dataset::{gen_dataset, DatasetSpec};

    fn image() -> Tensor {
        let spec = DatasetSpec {
            train_images: 1,
            val_images: 0,
            ..Default::default()
        };
        gen_dataset(&spec).unwrap().0.remove(0).image
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                patch_size: 4,
                encoder_layers: 1,
                decoder_layers: 3,
                ffn_dim: 16,
                ..Default::default()
            },
        ] {
            let p = init_model(&cfg).unwrap();
            assert_eq!(p.num_params(), cfg.param_count());
            assert_eq!(p.tensors().len(), tensor_count(&cfg));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::default();
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let other = ModelConfig { seed: 9, ..cfg };
        assert_ne!(init_model(&ModelConfig::default()).unwrap(), init_model(&other).unwrap());
    }

    #[test]
    fn exempt_flags_are_exactly_norms_and_heads() {
        let p = init_model(&ModelConfig::default()).unwrap();
        for l in p.layers() {
            let expected = l.name.contains("ln") || l.name.ends_with("norm") || l.name.contains("head");
            assert_eq!(l.exempt, expected, "{}", l.name);
        }
    }

    #[test]
    fn invalid_divisibility_is_config_error() {
        let cfg = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let cfg = ModelConfig::default();
        let p = init_model(&cfg).unwrap();
        let det = forward(&cfg, &p, &image()).unwrap();
        assert_eq!(det.logits.shape(), [cfg.queries, cfg.num_classes + 1]);
        assert_eq!(det.boxes.shape(), [cfg.queries, 4]);
        assert!(det.boxes.data().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(det.logits.all_finite());
        for k in 0..cfg.queries {
            let row = det.logits.row(k);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - m).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure() {
        let cfg = ModelConfig::default();
        let p = init_model(&cfg).unwrap();
        let img = image();
        assert_eq!(forward(&cfg, &p, &img).unwrap(), forward(&cfg, &p, &img).unwrap());
    }

    #[test]
    fn patchify_keeps_patch_pixels_together() {
        let cfg = ModelConfig {
            image_size: 16,
            patch_size: 8,
            ..Default::default()
        };
        let img = Tensor::from_vec(&[16, 16, 3], (0..768).map(|i| i as f64).collect());
        let p = patchify(&cfg, &img).unwrap();
        assert_eq!(p.shape(), [4, 192]);
        // Second patch starts at pixel (0, 8).
        assert_eq!(p.at2(1, 0), (8 * 3) as f64);
        // Its second row starts at pixel (1, 8).
        assert_eq!(p.at2(1, 24), ((16 + 8) * 3) as f64);
    }
}
