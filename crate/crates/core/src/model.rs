//! Encoder-only transformer: configuration, weights, JSON persistence and
//! exact reference inference.
//!
//! Tokens are rows: an input is an `n x m` matrix and every projection
//! multiplies on the right (`Q = X·W_Q + b_Q`). Head `h` owns columns
//! `h·d_k .. (h+1)·d_k` of `W_Q`, `W_K` and `W_V`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{relu, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    FirstToken,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub hidden_size: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub use_output_projection: bool,
    #[serde(default)]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Config with `hidden_size = num_heads * head_dim` and defaults for the rest.
    pub fn new(num_layers: usize, seq_len: usize, hidden_size: usize, num_heads: usize) -> Self {
        ModelConfig {
            num_layers,
            num_heads,
            seq_len,
            hidden_size,
            head_dim: hidden_size / num_heads.max(1),
            ffn_hidden: 2 * hidden_size,
            num_classes: 2,
            pooling: Pooling::Mean,
            use_output_projection: false,
            norm_eps: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("seq_len", self.seq_len),
            ("hidden_size", self.hidden_size),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.hidden_size != self.num_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden_size {} != num_heads {} * head_dim {}",
                self.hidden_size, self.num_heads, self.head_dim
            )));
        }
        if !(self.norm_eps >= 0.0) {
            return Err(Error::Config("norm_eps must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub b_q: Vec<T>,
    pub b_k: Vec<T>,
    pub b_v: Vec<T>,
    pub w_o: Matrix<T>,
    pub b_o: Vec<T>,
    pub norm1_gamma: Vec<T>,
    pub norm1_beta: Vec<T>,
    pub w_1: Matrix<T>,
    pub b_1: Vec<T>,
    pub w_2: Matrix<T>,
    pub b_2: Vec<T>,
    pub norm2_gamma: Vec<T>,
    pub norm2_beta: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights<T>>,
    pub pooler: Option<Dense<T>>,
    pub classifier: Dense<T>,
}

impl<T: Scalar> LayerWeights<T> {
    fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        let v = |x: &[T]| x.iter().map(|&a| crate::scalar::cast(a)).collect::<Vec<U>>();
        LayerWeights {
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
            b_q: v(&self.b_q),
            b_k: v(&self.b_k),
            b_v: v(&self.b_v),
            w_o: self.w_o.cast(),
            b_o: v(&self.b_o),
            norm1_gamma: v(&self.norm1_gamma),
            norm1_beta: v(&self.norm1_beta),
            w_1: self.w_1.cast(),
            b_1: v(&self.b_1),
            w_2: self.w_2.cast(),
            b_2: v(&self.b_2),
            norm2_gamma: v(&self.norm2_gamma),
            norm2_beta: v(&self.norm2_beta),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, TensorRef<'_, T>)> {
        use TensorRef::{M, V};
        vec![
            ("W_Q", M(&self.w_q)),
            ("W_K", M(&self.w_k)),
            ("W_V", M(&self.w_v)),
            ("b_Q", V(&self.b_q)),
            ("b_K", V(&self.b_k)),
            ("b_V", V(&self.b_v)),
            ("W_O", M(&self.w_o)),
            ("b_O", V(&self.b_o)),
            ("norm1_gamma", V(&self.norm1_gamma)),
            ("norm1_beta", V(&self.norm1_beta)),
            ("W_1", M(&self.w_1)),
            ("b_1", V(&self.b_1)),
            ("W_2", M(&self.w_2)),
            ("b_2", V(&self.b_2)),
            ("norm2_gamma", V(&self.norm2_gamma)),
            ("norm2_beta", V(&self.norm2_beta)),
        ]
    }
}

enum TensorRef<'a, T> {
    M(&'a Matrix<T>),
    V(&'a [T]),
}

impl<T: Scalar> TensorRef<'_, T> {
    fn shape(&self) -> (usize, usize) {
        match self {
            TensorRef::M(m) => m.shape(),
            TensorRef::V(v) => (v.len(), 1),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        let s = match self {
            TensorRef::M(m) => m.as_slice(),
            TensorRef::V(v) => v,
        };
        s.iter().position(|x| !x.is_finite())
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            layers: self.layers.iter().map(LayerWeights::cast).collect(),
            pooler: self.pooler.as_ref().map(|p| Dense { w: p.w.cast(), b: cast_vec(&p.b) }),
            classifier: Dense { w: self.classifier.w.cast(), b: cast_vec(&self.classifier.b) },
        }
    }

    /// Check every type invariant: config, tensor shapes, finiteness.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.num_layers {
            return Err(Error::shape(format!(
                "layers has {} entries, config.num_layers is {}",
                self.layers.len(),
                cfg.num_layers
            )));
        }
        let m = cfg.hidden_size;
        let f = cfg.ffn_hidden;
        for (li, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                let want = match name {
                    "W_Q" | "W_K" | "W_V" | "W_O" => (m, m),
                    "W_1" => (m, f),
                    "W_2" => (f, m),
                    "b_1" => (f, 1),
                    _ => (m, 1),
                };
                check_shape(&format!("layers[{li}].{name}"), t.shape(), want)?;
            }
        }
        if let Some(p) = &self.pooler {
            check_shape("pooler.W", p.w.shape(), (m, m))?;
            check_shape("pooler.b", (p.b.len(), 1), (m, 1))?;
        }
        check_shape("classifier.W", self.classifier.w.shape(), (m, cfg.num_classes))?;
        check_shape("classifier.b", (self.classifier.b.len(), 1), (cfg.num_classes, 1))?;

        for (li, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                if let Some(pos) = t.first_non_finite() {
                    return Err(Error::Value(format!("non-finite entry in layers[{li}].{name} at flat index {pos}")));
                }
            }
            if !cfg.use_output_projection && layer.w_o != Matrix::identity(m) {
                return Err(Error::Value(format!(
                    "layers[{li}].W_O must be the identity when use_output_projection is false"
                )));
            }
        }
        let extra: Vec<(&str, TensorRef<'_, T>)> = self
            .pooler
            .iter()
            .flat_map(|p| [("pooler.W", TensorRef::M(&p.w)), ("pooler.b", TensorRef::V(&p.b))])
            .chain([
                ("classifier.W", TensorRef::M(&self.classifier.w)),
                ("classifier.b", TensorRef::V(&self.classifier.b)),
            ])
            .collect();
        for (name, t) in extra {
            if let Some(pos) = t.first_non_finite() {
                return Err(Error::Value(format!("non-finite entry in {name} at flat index {pos}")));
            }
        }
        Ok(())
    }
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&a| crate::scalar::cast(a)).collect()
}

fn check_shape(name: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!(
            "{name} has shape {}x{}, expected {}x{}",
            got.0, got.1, want.0, want.1
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON format

/// Number that also accepts the non-standard tokens `NaN`, `Infinity` and
/// `-Infinity` (bare or quoted) so such files fail validation with a value
/// error instead of a parse error.
#[derive(Clone, Copy)]
struct JsonNum(f64);

impl<'de> Deserialize<'de> for JsonNum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(v) => Ok(JsonNum(v)),
            Raw::S(s) => match s.as_str() {
                "NaN" => Ok(JsonNum(f64::NAN)),
                "Infinity" => Ok(JsonNum(f64::INFINITY)),
                "-Infinity" => Ok(JsonNum(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("expected number, got string {other:?}"))),
            },
        }
    }
}

type RawMatrix = Vec<Vec<JsonNum>>;
type RawVector = Vec<JsonNum>;

#[allow(non_snake_case)]
#[derive(Serialize, Deserialize)]
struct RawLayer<M, V> {
    W_Q: M,
    W_K: M,
    W_V: M,
    b_Q: V,
    b_K: V,
    b_V: V,
    W_O: M,
    b_O: V,
    norm1_gamma: V,
    norm1_beta: V,
    W_1: M,
    b_1: V,
    W_2: M,
    b_2: V,
    norm2_gamma: V,
    norm2_beta: V,
}

#[allow(non_snake_case)]
#[derive(Serialize, Deserialize)]
struct RawDense<M, V> {
    W: M,
    b: V,
}

#[derive(Serialize, Deserialize)]
struct RawModel<M, V> {
    config: ModelConfig,
    layers: Vec<RawLayer<M, V>>,
    pooler: Option<RawDense<M, V>>,
    classifier: RawDense<M, V>,
}

fn mat_in(name: &str, raw: RawMatrix) -> Result<Matrix<f64>> {
    let rows: Vec<Vec<f64>> = raw.into_iter().map(|r| r.into_iter().map(|x| x.0).collect()).collect();
    Matrix::from_rows(&rows).map_err(|_| Error::shape(format!("{name} has ragged rows")))
}

fn vec_in(raw: RawVector) -> Vec<f64> {
    raw.into_iter().map(|x| x.0).collect()
}

/// Quote bare `NaN`/`Infinity` tokens outside of strings.
fn quote_special_tokens(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            rest = &rest[ch.len_utf8()..];
            continue;
        }
        if ch == '"' {
            in_string = true;
            out.push(ch);
            rest = &rest[1..];
            continue;
        }
        let token = ["-Infinity", "Infinity", "NaN"].into_iter().find(|t| rest.starts_with(t));
        if let Some(t) = token {
            out.push('"');
            out.push_str(t);
            out.push('"');
            rest = &rest[t.len()..];
        } else {
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

impl Model<f64> {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: RawModel<RawMatrix, RawVector> =
            serde_json::from_str(&quote_special_tokens(text)).map_err(|e| Error::Parse(e.to_string()))?;
        let mut layers = Vec::with_capacity(raw.layers.len());
        for (li, l) in raw.layers.into_iter().enumerate() {
            let p = |n: &str| format!("layers[{li}].{n}");
            layers.push(LayerWeights {
                w_q: mat_in(&p("W_Q"), l.W_Q)?,
                w_k: mat_in(&p("W_K"), l.W_K)?,
                w_v: mat_in(&p("W_V"), l.W_V)?,
                b_q: vec_in(l.b_Q),
                b_k: vec_in(l.b_K),
                b_v: vec_in(l.b_V),
                w_o: mat_in(&p("W_O"), l.W_O)?,
                b_o: vec_in(l.b_O),
                norm1_gamma: vec_in(l.norm1_gamma),
                norm1_beta: vec_in(l.norm1_beta),
                w_1: mat_in(&p("W_1"), l.W_1)?,
                b_1: vec_in(l.b_1),
                w_2: mat_in(&p("W_2"), l.W_2)?,
                b_2: vec_in(l.b_2),
                norm2_gamma: vec_in(l.norm2_gamma),
                norm2_beta: vec_in(l.norm2_beta),
            });
        }
        let pooler = match raw.pooler {
            Some(d) => Some(Dense { w: mat_in("pooler.W", d.W)?, b: vec_in(d.b) }),
            None => None,
        };
        let classifier = Dense { w: mat_in("classifier.W", raw.classifier.W)?, b: vec_in(raw.classifier.b) };
        let model = Model { config: raw.config, layers, pooler, classifier };
        model.validate()?;
        Ok(model)
    }

    pub fn to_json_string(&self) -> String {
        let dense = |d: &Dense<f64>| RawDense { W: d.w.to_rows(), b: d.b.clone() };
        let raw = RawModel {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| RawLayer {
                    W_Q: l.w_q.to_rows(),
                    W_K: l.w_k.to_rows(),
                    W_V: l.w_v.to_rows(),
                    b_Q: l.b_q.clone(),
                    b_K: l.b_k.clone(),
                    b_V: l.b_v.clone(),
                    W_O: l.w_o.to_rows(),
                    b_O: l.b_o.clone(),
                    norm1_gamma: l.norm1_gamma.clone(),
                    norm1_beta: l.norm1_beta.clone(),
                    W_1: l.w_1.to_rows(),
                    b_1: l.b_1.clone(),
                    W_2: l.w_2.to_rows(),
                    b_2: l.b_2.clone(),
                    norm2_gamma: l.norm2_gamma.clone(),
                    norm2_beta: l.norm2_beta.clone(),
                })
                .collect(),
            pooler: self.pooler.as_ref().map(dense),
            classifier: dense(&self.classifier),
        };
        serde_json::to_string(&raw).expect("model serializes")
    }
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Model::from_json_str(&text)
}

pub fn save_model(model: &Model<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_json_string()).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Random model with every matrix and bias entry drawn uniformly from
/// `[-s, s]`, `s = 1/sqrt(hidden_size)`; norm gains are `1 + U[-s, s]`.
/// Reproducible per seed (ChaCha8 stream, draws in field order).
pub fn generate_random_model(config: &ModelConfig, seed: u64) -> Result<Model<f64>> {
    generate_random_model_scaled(config, seed, 1.0)
}

/// As [`generate_random_model`] with every range multiplied by `scale`.
pub fn generate_random_model_scaled(config: &ModelConfig, seed: u64, scale: f64) -> Result<Model<f64>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = scale / (config.hidden_size as f64).sqrt();
    let m = config.hidden_size;
    let f = config.ffn_hidden;
    let mat = |r: usize, c: usize, rng: &mut ChaCha8Rng| Matrix::from_fn(r, c, |_, _| rng.gen_range(-s..=s));
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let uv = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| rng.gen_range(-s..=s)).collect::<Vec<f64>>();
        let gain = |k: usize, rng: &mut ChaCha8Rng| (0..k).map(|_| 1.0 + rng.gen_range(-s..=s)).collect::<Vec<f64>>();
        let w_q = mat(m, m, &mut rng);
        let w_k = mat(m, m, &mut rng);
        let w_v = mat(m, m, &mut rng);
        let b_q = uv(m, &mut rng);
        let b_k = uv(m, &mut rng);
        let b_v = uv(m, &mut rng);
        let (w_o, b_o) = if config.use_output_projection {
            (mat(m, m, &mut rng), uv(m, &mut rng))
        } else {
            (Matrix::identity(m), vec![0.0; m])
        };
        let norm1_gamma = gain(m, &mut rng);
        let norm1_beta = uv(m, &mut rng);
        let w_1 = mat(m, f, &mut rng);
        let b_1 = uv(f, &mut rng);
        let w_2 = mat(f, m, &mut rng);
        let b_2 = uv(m, &mut rng);
        let norm2_gamma = gain(m, &mut rng);
        let norm2_beta = uv(m, &mut rng);
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            b_q,
            b_k,
            b_v,
            w_o,
            b_o,
            norm1_gamma,
            norm1_beta,
            w_1,
            b_1,
            w_2,
            b_2,
            norm2_gamma,
            norm2_beta,
        });
    }
    let w = mat(m, config.num_classes, &mut rng);
    let b = (0..config.num_classes).map(|_| rng.gen_range(-s..=s)).collect();
    let model = Model { config: config.clone(), layers, pooler: None, classifier: Dense { w, b } };
    model.validate()?;
    Ok(model)
}

/// Random `seq_len x hidden_size` input with entries in `[-1, 1]`.
pub fn generate_random_input(config: &ModelConfig, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(config.seq_len, config.hidden_size, |_, _| rng.gen_range(-1.0..=1.0))
}

// ---------------------------------------------------------------------------
// Inference

/// Row-wise mean-subtraction norm: `(v - mean(v)) ⊙ γ + β`.
pub fn norm_rows<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T]) -> Matrix<T> {
    let m = x.cols();
    let inv_m = T::c(1.0 / m as f64);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let mut sum = T::zero();
        for &v in x.row(r) {
            sum = sum + v;
        }
        let mean = sum * inv_m;
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (x[(r, c)] - mean) * gamma[c] + beta[c];
        }
    }
    out
}

/// `x·w + b` with `b` broadcast over rows.
pub fn affine_rows<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Result<Matrix<T>> {
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, &bb) in out.row_mut(r).iter_mut().zip(b) {
            *o = *o + bb;
        }
    }
    Ok(out)
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let e: Vec<T> = row.iter().map(|&v| (v - mx).exp()).collect();
    let mut z = T::zero();
    for &v in &e {
        z = z + v;
    }
    e.into_iter().map(|v| v / z).collect()
}

/// Intermediate values recorded by [`forward_traced`].
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `attention[layer][head]` is the `n x n` row-stochastic matrix.
    pub attention: Vec<Vec<Matrix<T>>>,
    /// Encoder output of every layer.
    pub hidden: Vec<Matrix<T>>,
    pub logits: Vec<T>,
}

pub fn forward<T: Scalar>(model: &Model<T>, x: &Matrix<T>) -> Result<Vec<T>> {
    Ok(forward_traced(model, x)?.logits)
}

pub fn forward_traced<T: Scalar>(model: &Model<T>, x: &Matrix<T>) -> Result<ForwardTrace<T>> {
    let cfg = &model.config;
    if x.shape() != (cfg.seq_len, cfg.hidden_size) {
        return Err(Error::shape(format!(
            "input has shape {}x{}, expected {}x{}",
            x.rows(),
            x.cols(),
            cfg.seq_len,
            cfg.hidden_size
        )));
    }
    let n = cfg.seq_len;
    let dk = cfg.head_dim;
    let scale = T::c(1.0 / (dk as f64).sqrt());
    let mut h = x.clone();
    let mut attention = Vec::with_capacity(cfg.num_layers);
    let mut hidden = Vec::with_capacity(cfg.num_layers);
    for layer in &model.layers {
        let q = affine_rows(&h, &layer.w_q, &layer.b_q)?;
        let k = affine_rows(&h, &layer.w_k, &layer.b_k)?;
        let v = affine_rows(&h, &layer.w_v, &layer.b_v)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut concat = Matrix::zeros(n, cfg.hidden_size);
        for head in 0..cfg.num_heads {
            let off = head * dk;
            let mut probs = Matrix::zeros(n, n);
            for i in 0..n {
                let scores: Vec<T> = (0..n)
                    .map(|j| {
                        let mut s = T::zero();
                        for c in 0..dk {
                            s = s + q[(i, off + c)] * k[(j, off + c)];
                        }
                        s * scale
                    })
                    .collect();
                probs.row_mut(i).copy_from_slice(&softmax(&scores));
            }
            for i in 0..n {
                for c in 0..dk {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc = acc + probs[(i, j)] * v[(j, off + c)];
                    }
                    concat[(i, off + c)] = acc;
                }
            }
            heads.push(probs);
        }
        let attn_out = if cfg.use_output_projection {
            affine_rows(&concat, &layer.w_o, &layer.b_o)?
        } else {
            affine_rows(&concat, &Matrix::identity(cfg.hidden_size), &layer.b_o)?
        };
        let mut res = h.clone();
        for r in 0..n {
            for c in 0..cfg.hidden_size {
                res[(r, c)] = res[(r, c)] + attn_out[(r, c)];
            }
        }
        let h1 = norm_rows(&res, &layer.norm1_gamma, &layer.norm1_beta);
        let mut f = affine_rows(&h1, &layer.w_1, &layer.b_1)?;
        for r in 0..n {
            for o in f.row_mut(r) {
                *o = relu(*o);
            }
        }
        let f2 = affine_rows(&f, &layer.w_2, &layer.b_2)?;
        let mut res2 = h1.clone();
        for r in 0..n {
            for c in 0..cfg.hidden_size {
                res2[(r, c)] = res2[(r, c)] + f2[(r, c)];
            }
        }
        h = norm_rows(&res2, &layer.norm2_gamma, &layer.norm2_beta);
        attention.push(heads);
        hidden.push(h.clone());
    }
    let pooled = pool(&h, cfg.pooling);
    let pooled = match &model.pooler {
        Some(p) => affine_rows(&pooled, &p.w, &p.b)?,
        None => pooled,
    };
    let logits = affine_rows(&pooled, &model.classifier.w, &model.classifier.b)?.row(0).to_vec();
    Ok(ForwardTrace { attention, hidden, logits })
}

fn pool<T: Scalar>(h: &Matrix<T>, pooling: Pooling) -> Matrix<T> {
    match pooling {
        Pooling::FirstToken => Matrix::from_fn(1, h.cols(), |_, c| h[(0, c)]),
        Pooling::Mean => {
            let inv = T::c(1.0 / h.rows() as f64);
            Matrix::from_fn(1, h.cols(), |_, c| {
                let mut s = T::zero();
                for r in 0..h.rows() {
                    s = s + h[(r, c)];
                }
                s * inv
            })
        }
    }
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
