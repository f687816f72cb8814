//! Perceptron encoder with per-class score heads and per-class embeddings.
//!
//! The encoder maps `x` to `h` through `hidden_layers` relu layers. Class `c`
//! is scored as `sigmoid(u_c · h + b_c)`, and its embedding is
//! `normalize(W_p (h ⊙ e_c))` with a learned class vector `e_c`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{sigmoid, AdamWConfig, EmaState, OptimState, ParamSet, ParamTag, Tape, Var};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub hidden_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 64,
            hidden_dim: 64,
            num_classes: 10,
            embedding_dim: 16,
            hidden_layers: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("model.input_dim", self.input_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.num_classes", self.num_classes),
            ("model.embedding_dim", self.embedding_dim),
            ("model.hidden_layers", self.hidden_layers),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        Ok(())
    }
}

const CLASS_EMBED: &str = "embed.class";
const PROJECTION: &str = "embed.proj";
const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

fn layer_names(l: usize) -> (String, String) {
    (format!("enc.w{l}"), format!("enc.b{l}"))
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-a..=a))
}

/// Parameters, optimizer moments, and EMA shadow of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub optim: OptimState,
    pub ema: EmaState,
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `n x C`, strictly inside `(0, 1)` for finite logits.
    pub scores: Matrix,
    /// `(n * C) x embedding_dim`; row `i * C + c` is `z_{ic}`.
    pub embeddings: Matrix,
}

impl ForwardOutput {
    pub fn embedding(&self, sample: usize, class: usize) -> &[f64] {
        self.embeddings.row(sample * self.scores.cols() + class)
    }
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapeForward {
    pub scores: Var,
    pub embeddings: Option<Var>,
}

impl ModelState {
    pub fn new(config: ModelConfig, optim: AdamWConfig, ema_decay: f64, ema_warmup: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut fan_in = config.input_dim;
        for l in 0..config.hidden_layers {
            let (w, b) = layer_names(l);
            params.insert(w, ParamTag::Backbone, xavier(&mut rng, fan_in, config.hidden_dim))?;
            params.insert(b, ParamTag::Backbone, Matrix::zeros(1, config.hidden_dim))?;
            fan_in = config.hidden_dim;
        }
        params.insert(
            CLASS_EMBED,
            ParamTag::Backbone,
            xavier(&mut rng, config.num_classes, config.hidden_dim),
        )?;
        params.insert(
            PROJECTION,
            ParamTag::Backbone,
            xavier(&mut rng, config.hidden_dim, config.embedding_dim),
        )?;
        params.insert(
            HEAD_W,
            ParamTag::Head,
            xavier(&mut rng, config.hidden_dim, config.num_classes),
        )?;
        params.insert(HEAD_B, ParamTag::Head, Matrix::zeros(1, config.num_classes))?;

        let optim = OptimState::new(&params, optim);
        let ema = EmaState::new(&params, ema_decay, ema_warmup)?;
        Ok(ModelState {
            config,
            params,
            optim,
            ema,
        })
    }

    /// Parameters used for evaluation: the EMA shadow or the raw weights.
    pub fn weights(&self, use_ema: bool) -> &ParamSet {
        if use_ema {
            &self.ema.shadow
        } else {
            &self.params
        }
    }

    pub fn forward(&self, features: &Matrix, use_ema: bool) -> Result<ForwardOutput> {
        let params = self.weights(use_ema);
        let mut tape = Tape::new();
        let vars = crate::grad::bind_params(&mut tape, params);
        let out = forward_on_tape(&mut tape, &vars, &self.config, features, true)?;
        let embeddings = out.embeddings.expect("requested");
        Ok(ForwardOutput {
            scores: tape.value(out.scores).clone(),
            embeddings: tape.value(embeddings).clone(),
        })
    }

    /// Scores only, evaluated in fixed-size chunks.
    pub fn predict(&self, features: &Matrix, use_ema: bool) -> Result<Matrix> {
        check_input(&self.config, features)?;
        let params = self.weights(use_ema);
        let (n, classes) = (features.rows(), self.config.num_classes);
        let mut out = Matrix::zeros(n, classes);
        const CHUNK: usize = 2048;
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = features.select_rows(&idx);
            let mut h = chunk;
            for l in 0..self.config.hidden_layers {
                let (w, b) = layer_names(l);
                h = h.matmul(&params.by_name(&w).expect("layer").value)?;
                add_row_relu(&mut h, params.by_name(&b).expect("bias").value.data(), true);
            }
            let mut logits = h.matmul(&params.by_name(HEAD_W).expect("head").value)?;
            add_row_relu(&mut logits, params.by_name(HEAD_B).expect("bias").value.data(), false);
            for (r, i) in (start..end).enumerate() {
                for (o, &z) in out.row_mut(i).iter_mut().zip(logits.row(r)) {
                    *o = sigmoid(z);
                }
            }
            start = end;
        }
        Ok(out)
    }

    /// Per-parameter trainable flags: only head parameters when `head_only`.
    pub fn trainable_mask(&self, head_only: bool) -> Vec<bool> {
        self.params
            .iter()
            .map(|p| !head_only || p.tag == ParamTag::Head)
            .collect()
    }

    pub fn set_head_only(&mut self, head_only: bool) {
        let mask = self.trainable_mask(head_only);
        self.params.set_trainable_flags(&mask).expect("mask matches parameters");
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            params: self.params.clone(),
            ema: self.ema.clone(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Restores a checkpoint; optimizer moments start fresh with `optim`.
    pub fn load(path: impl AsRef<Path>, optim: AdamWConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                what: "checkpoint".into(),
                reason: format!("unsupported format {} v{}", ckpt.format, ckpt.version),
            });
        }
        ckpt.config.validate()?;
        let reference = ModelState::new(ckpt.config, optim, ckpt.ema.decay, ckpt.ema.warmup, 0)?;
        if !reference.params.same_layout(&ckpt.params) || !reference.params.same_layout(&ckpt.ema.shadow) {
            return Err(Error::Format {
                what: "checkpoint".into(),
                reason: "parameter layout does not match the model configuration".into(),
            });
        }
        Ok(ModelState {
            config: ckpt.config,
            optim: OptimState::new(&ckpt.params, optim),
            params: ckpt.params,
            ema: ckpt.ema,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "dicap-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ParamSet,
    ema: EmaState,
}

fn add_row_relu(m: &mut Matrix, bias: &[f64], relu: bool) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
            if relu {
                *v = v.max(0.0);
            }
        }
    }
}

fn check_input(config: &ModelConfig, features: &Matrix) -> Result<()> {
    if features.cols() != config.input_dim {
        return Err(Error::shape("forward", config.input_dim, features.cols()));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("input features".into()));
    }
    Ok(())
}

/// Records a forward pass on `tape` with parameters bound at `vars`
/// (same order as the model's [`ParamSet`]).
pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &[Var],
    config: &ModelConfig,
    features: &Matrix,
    with_embeddings: bool,
) -> Result<TapeForward> {
    check_input(config, features)?;
    let layers = config.hidden_layers;
    let mut h = tape.leaf(features.clone());
    for l in 0..layers {
        let z = tape.matmul(h, vars[2 * l])?;
        let z = tape.add_row(z, vars[2 * l + 1])?;
        h = tape.relu(z);
    }
    let base = 2 * layers;
    let (class_embed, proj, head_w, head_b) = (vars[base], vars[base + 1], vars[base + 2], vars[base + 3]);

    let logits = tape.matmul(h, head_w)?;
    let logits = tape.add_row(logits, head_b)?;
    let scores = tape.sigmoid(logits);

    let embeddings = if with_embeddings {
        let gated = tape.class_product(h, class_embed)?;
        let projected = tape.matmul(gated, proj)?;
        Some(tape.normalize_rows(projected))
    } else {
        None
    };
    Ok(TapeForward { scores, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{adamw_step, ema_update};

    fn small() -> ModelState {
        let cfg = ModelConfig {
            input_dim: 5,
            hidden_dim: 6,
            num_classes: 3,
            embedding_dim: 4,
            hidden_layers: 2,
        };
        ModelState::new(cfg, AdamWConfig::default(), 0.9, false, 11).unwrap()
    }

    fn inputs(n: usize) -> Matrix {
        Matrix::from_fn(n, 5, |i, j| ((i * 3 + j * 7) % 11) as f64 * 0.2 - 1.0)
    }

    #[test]
    fn shapes_ranges_and_norms() {
        let m = small();
        let out = m.forward(&inputs(7), false).unwrap();
        assert_eq!(out.scores.shape(), (7, 3));
        assert_eq!(out.embeddings.shape(), (21, 4));
        assert!(out.scores.data().iter().all(|&s| s > 0.0 && s < 1.0));
        for r in 0..21 {
            let n: f64 = out.embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-9);
        }
        assert_eq!(out.embedding(2, 1), out.embeddings.row(7));
    }

    #[test]
    fn empty_batch() {
        let out = small().forward(&Matrix::zeros(0, 5), true).unwrap();
        assert_eq!(out.scores.shape(), (0, 3));
        assert_eq!(out.embeddings.shape(), (0, 4));
    }

    #[test]
    fn deterministic_and_predict_agrees() {
        let m = small();
        let x = inputs(9);
        let a = m.forward(&x, false).unwrap();
        let b = m.forward(&x, false).unwrap();
        assert_eq!(a, b);
        let p = m.predict(&x, false).unwrap();
        assert!(p.max_abs_diff(&a.scores) < 1e-15);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(small().forward(&Matrix::zeros(2, 4), false).is_err());
        assert!(small().predict(&Matrix::zeros(2, 6), false).is_err());
    }

    #[test]
    fn ema_forward_equals_raw_when_shadow_matches() {
        let mut m = small();
        m.ema.decay = 0.0;
        m.params.get_mut(0).value.data_mut()[0] += 0.5;
        let params = m.params.clone();
        ema_update(&mut m.ema, &params).unwrap();
        let x = inputs(4);
        assert_eq!(m.forward(&x, true).unwrap(), m.forward(&x, false).unwrap());
    }

    #[test]
    fn trainable_mask_flags() {
        let m = small();
        assert!(m.trainable_mask(false).iter().all(|&f| f));
        let head = m.trainable_mask(true);
        for (p, f) in m.params.iter().zip(head) {
            assert_eq!(f, p.tag == ParamTag::Head);
        }
    }

    #[test]
    fn head_only_training_freezes_backbone() {
        let mut m = small();
        m.set_head_only(true);
        let before = m.params.clone();
        let grads: Vec<Matrix> = m
            .params
            .iter()
            .map(|p| Matrix::filled(p.value.rows(), p.value.cols(), 0.3))
            .collect();
        for _ in 0..25 {
            adamw_step(&mut m.params, &grads, &mut m.optim).unwrap();
        }
        for (a, b) in before.iter().zip(m.params.iter()) {
            if a.tag == ParamTag::Backbone {
                assert_eq!(a.value, b.value, "{}", a.name);
            } else {
                assert_ne!(a.value, b.value, "{}", a.name);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut m = small();
        m.params.get_mut(1).value.data_mut()[2] = 0.1 + 0.2;
        m.ema.shadow.get_mut(0).value.data_mut()[0] = std::f64::consts::PI / 3.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let loaded = ModelState::load(&path, AdamWConfig::default()).unwrap();
        assert_eq!(loaded.params, m.params);
        assert_eq!(loaded.ema, m.ema);
        assert_eq!(loaded.config, m.config);
    }

    #[test]
    fn checkpoint_rejects_wrong_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"format\":\"other\"}").unwrap();
        assert!(ModelState::load(&path, AdamWConfig::default()).is_err());
    }
}
