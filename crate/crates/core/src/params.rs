//! Named parameter store, initialization schema, optimizer, and the typed
//! weight bundle used by the inference path.
//!
//! Every learned tensor has a stable name. The schema below is the single
//! source of truth: initialization, the tape binding, the checkpoint format,
//! and the typed `ModelWeights` all iterate it, so the training and
//! inference paths cannot drift apart silently.

use ndarray::Array2;
use std::collections::BTreeMap;

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::numeric::{cast_matrix, Real};
use crate::posenc::{IntensityTable, PositionTable};
use crate::rng;

/// Layers of the bidirectional spatial generator.
pub const MAR_LAYERS: usize = 2;

/// Epsilon used by every normalization in the model.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    /// N(0, 1/sqrt(fan_in)).
    Linear { fan_in: usize },
    Zero,
    One,
    Normal { std: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: InitKind,
}

fn block_specs(prefix: &str, dim: usize, hidden: usize, out: &mut Vec<ParamSpec>) {
    let spec = |name: String, rows, cols, init| ParamSpec {
        name,
        rows,
        cols,
        init,
    };
    let lin = |fan_in| InitKind::Linear { fan_in };
    out.push(spec(format!("{prefix}.ln1.g"), 1, dim, InitKind::One));
    out.push(spec(format!("{prefix}.ln1.b"), 1, dim, InitKind::Zero));
    for proj in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.attn.{proj}"), dim, dim, lin(dim)));
    }
    for bias in ["bq", "bk", "bv", "bo"] {
        out.push(spec(format!("{prefix}.attn.{bias}"), 1, dim, InitKind::Zero));
    }
    out.push(spec(format!("{prefix}.ln2.g"), 1, dim, InitKind::One));
    out.push(spec(format!("{prefix}.ln2.b"), 1, dim, InitKind::Zero));
    out.push(spec(format!("{prefix}.mlp.w1"), dim, hidden, lin(dim)));
    out.push(spec(format!("{prefix}.mlp.b1"), 1, hidden, InitKind::Zero));
    out.push(spec(format!("{prefix}.mlp.w2"), hidden, dim, lin(hidden)));
    out.push(spec(format!("{prefix}.mlp.b2"), 1, dim, InitKind::Zero));
}

/// Full parameter inventory for a config, in deterministic order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.token_dim;
    let a = cfg.audio_dim;
    let hidden = cfg.mlp_hidden();
    let head_hidden = cfg.head_hidden();
    let (grid_rows, grid_cols) = cfg.slot_grid();
    let mut out = Vec::new();
    let spec = |name: &str, rows, cols, init| ParamSpec {
        name: name.to_string(),
        rows,
        cols,
        init,
    };
    let lin = |fan_in| InitKind::Linear { fan_in };

    out.push(spec("fca.vis_in.w", d, d, lin(d)));
    out.push(spec("fca.vis_in.b", 1, d, InitKind::Zero));
    out.push(spec("fca.audio_in.w", a, d, lin(a)));
    out.push(spec("fca.audio_in.b", 1, d, InitKind::Zero));
    out.push(spec("fca.null_audio", 1, d, InitKind::Normal { std: 0.5 }));
    for layer in 0..cfg.layers {
        block_specs(&format!("fca.l{layer}"), d, hidden, &mut out);
    }
    out.push(spec("fca.lnf.g", 1, d, InitKind::One));
    out.push(spec("fca.lnf.b", 1, d, InitKind::Zero));

    // Anchor modulation starts as the identity: scale one, shift zero.
    out.push(spec("sink.scale.w", d, d, InitKind::Zero));
    out.push(spec("sink.scale.b", 1, d, InitKind::One));
    out.push(spec("sink.shift.w", d, d, InitKind::Zero));
    out.push(spec("sink.shift.b", 1, d, InitKind::Zero));

    out.push(spec("mar.val_in.w", d, d, lin(d)));
    out.push(spec("mar.val_in.b", 1, d, InitKind::Zero));
    out.push(spec("mar.mask_token", 1, d, InitKind::Normal { std: 0.5 }));
    out.push(spec("mar.row_emb", grid_rows, d, InitKind::Normal { std: 0.5 }));
    out.push(spec("mar.col_emb", grid_cols, d, InitKind::Normal { std: 0.5 }));
    for layer in 0..MAR_LAYERS {
        block_specs(&format!("mar.l{layer}"), d, hidden, &mut out);
    }
    out.push(spec("mar.lnf.g", 1, d, InitKind::One));
    out.push(spec("mar.lnf.b", 1, d, InitKind::Zero));

    out.push(spec("head.w1", 2 * d, head_hidden, lin(2 * d)));
    out.push(spec("head.b1", 1, head_hidden, InitKind::Zero));
    out.push(spec("head.wt", head_hidden, head_hidden, lin(head_hidden)));
    out.push(spec("head.w2", head_hidden, head_hidden, lin(head_hidden)));
    out.push(spec("head.b2", 1, head_hidden, InitKind::Zero));
    out.push(spec("head.w3", head_hidden, d, lin(head_hidden)));
    out.push(spec("head.b3", 1, d, InitKind::Zero));
    out
}

/// Ordered name -> tensor map of every learned parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Array2<f64>>,
}

impl Params {
    pub fn from_map(map: BTreeMap<String, Array2<f64>>) -> Self {
        Params { map }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|m| m.len()).sum()
    }

    /// First non-finite entry, if any, as (param, flat index).
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        for (name, m) in &self.map {
            if let Some(i) = m.iter().position(|v| !v.is_finite()) {
                return Some((name.clone(), i));
            }
        }
        None
    }
}

/// Training initialization: calm start with identity anchor modulation.
pub fn init_params(cfg: &ModelConfig) -> Params {
    params_from_specs(cfg, cfg.seed, "init", false)
}

/// Fully random weights for property tests and weight-free verify suites:
/// no tensor is left at zero, so perturbation-based checks see real
/// sensitivity along every path.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> Params {
    params_from_specs(cfg, seed, "random-weights", true)
}

fn params_from_specs(cfg: &ModelConfig, seed: u64, label: &str, force_random: bool) -> Params {
    let mut stream = rng::stream(seed, label);
    let mut map = BTreeMap::new();
    for spec in param_specs(cfg) {
        let draw = rng::normal_matrix(&mut stream, spec.rows, spec.cols);
        let value = match (spec.init, force_random) {
            (InitKind::Linear { fan_in }, _) => draw.mapv(|v| v / (fan_in as f64).sqrt()),
            (InitKind::Normal { std }, _) => draw.mapv(|v| v * std),
            (InitKind::Zero, false) => Array2::zeros((spec.rows, spec.cols)),
            (InitKind::Zero, true) => draw.mapv(|v| v * 0.3),
            (InitKind::One, false) => Array2::ones((spec.rows, spec.cols)),
            (InitKind::One, true) => draw.mapv(|v| 1.0 + v * 0.2),
        };
        map.insert(spec.name, value);
    }
    Params { map }
}

/// All-zero learned tensors with layer norms pinned to the identity affine;
/// used by the pass-through tests.
pub fn zeroed_params(cfg: &ModelConfig) -> Params {
    let mut map = BTreeMap::new();
    for spec in param_specs(cfg) {
        let value = match spec.init {
            InitKind::One => Array2::ones((spec.rows, spec.cols)),
            _ => Array2::zeros((spec.rows, spec.cols)),
        };
        map.insert(spec.name, value);
    }
    Params { map }
}

/// Momentum-free adaptive optimizer: per-entry RMS-normalized steps.
#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    state: BTreeMap<String, Array2<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &BTreeMap<String, Array2<f64>>) {
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let s = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            for ((pv, gv), sv) in p.iter_mut().zip(grad.iter()).zip(s.iter_mut()) {
                *sv = self.decay * *sv + (1.0 - self.decay) * gv * gv;
                *pv -= self.lr * gv / (sv.sqrt() + self.eps);
            }
        }
    }
}

/// One transformer block's weights in the inference dtype.
#[derive(Debug, Clone)]
pub struct BlockWeights<F> {
    pub ln1_g: Array2<F>,
    pub ln1_b: Array2<F>,
    pub wq: Array2<F>,
    pub bq: Array2<F>,
    pub wk: Array2<F>,
    pub bk: Array2<F>,
    pub wv: Array2<F>,
    pub bv: Array2<F>,
    pub wo: Array2<F>,
    pub bo: Array2<F>,
    pub ln2_g: Array2<F>,
    pub ln2_b: Array2<F>,
    pub w1: Array2<F>,
    pub b1: Array2<F>,
    pub w2: Array2<F>,
    pub b2: Array2<F>,
}

fn block_from<F: Real>(params: &Params, prefix: &str) -> BlockWeights<F> {
    let g = |suffix: &str| cast_matrix::<F>(params.get(&format!("{prefix}.{suffix}")));
    BlockWeights {
        ln1_g: g("ln1.g"),
        ln1_b: g("ln1.b"),
        wq: g("attn.wq"),
        bq: g("attn.bq"),
        wk: g("attn.wk"),
        bk: g("attn.bk"),
        wv: g("attn.wv"),
        bv: g("attn.bv"),
        wo: g("attn.wo"),
        bo: g("attn.bo"),
        ln2_g: g("ln2.g"),
        ln2_b: g("ln2.b"),
        w1: g("mlp.w1"),
        b1: g("mlp.b1"),
        w2: g("mlp.w2"),
        b2: g("mlp.b2"),
    }
}

/// Typed weight bundle for the inference path, plus the fixed tables.
#[derive(Debug, Clone)]
pub struct ModelWeights<F> {
    pub cfg: ModelConfig,
    pub config_hash: [u8; 32],

    pub vis_in_w: Array2<F>,
    pub vis_in_b: Array2<F>,
    pub audio_in_w: Array2<F>,
    pub audio_in_b: Array2<F>,
    pub null_audio: Array2<F>,
    pub fca: Vec<BlockWeights<F>>,
    pub fca_lnf_g: Array2<F>,
    pub fca_lnf_b: Array2<F>,

    pub scale_w: Array2<F>,
    pub scale_b: Array2<F>,
    pub shift_w: Array2<F>,
    pub shift_b: Array2<F>,

    pub mar_val_w: Array2<F>,
    pub mar_val_b: Array2<F>,
    pub mask_token: Array2<F>,
    pub row_emb: Array2<F>,
    pub col_emb: Array2<F>,
    pub mar: Vec<BlockWeights<F>>,
    pub mar_lnf_g: Array2<F>,
    pub mar_lnf_b: Array2<F>,

    pub head_w1: Array2<F>,
    pub head_b1: Array2<F>,
    pub head_wt: Array2<F>,
    pub head_w2: Array2<F>,
    pub head_b2: Array2<F>,
    pub head_w3: Array2<F>,
    pub head_b3: Array2<F>,

    /// Fixed sinusoidal temporal table, (2N-1) x D, row 0 = table index 1.
    pub pos_table: Array2<F>,
    /// Fixed sinusoidal intensity table, bins x D.
    pub intensity_table: Array2<F>,
    pub intensity_bin_width: f64,
    /// Fixed sinusoidal timestep embeddings, (diff_train_steps + 1) x head_hidden.
    pub timestep_table: Array2<F>,
}

impl<F: Real> ModelWeights<F> {
    pub fn from_params(cfg: &ModelConfig, params: &Params) -> Result<Self> {
        cfg.validate()?;
        for spec in param_specs(cfg) {
            let p = params.try_get(&spec.name).ok_or_else(|| {
                ModelError::Checkpoint(format!("missing parameter {}", spec.name))
            })?;
            if p.dim() != (spec.rows, spec.cols) {
                return Err(ModelError::shape(
                    spec.name.clone(),
                    format!("({}, {})", spec.rows, spec.cols),
                    format!("{:?}", p.dim()),
                ));
            }
        }
        let pos = PositionTable::sinusoidal(cfg.window_frames, cfg.token_dim)?;
        let intensity = IntensityTable::sinusoidal(
            cfg.intensity_bins,
            cfg.token_dim,
            cfg.intensity_bin_width,
        )?;
        let timestep_table = timestep_embeddings(cfg.diff_train_steps, cfg.head_hidden());
        let g = |name: &str| cast_matrix::<F>(params.get(name));
        Ok(ModelWeights {
            cfg: cfg.clone(),
            config_hash: cfg.content_hash(),
            vis_in_w: g("fca.vis_in.w"),
            vis_in_b: g("fca.vis_in.b"),
            audio_in_w: g("fca.audio_in.w"),
            audio_in_b: g("fca.audio_in.b"),
            null_audio: g("fca.null_audio"),
            fca: (0..cfg.layers)
                .map(|l| block_from(params, &format!("fca.l{l}")))
                .collect(),
            fca_lnf_g: g("fca.lnf.g"),
            fca_lnf_b: g("fca.lnf.b"),
            scale_w: g("sink.scale.w"),
            scale_b: g("sink.scale.b"),
            shift_w: g("sink.shift.w"),
            shift_b: g("sink.shift.b"),
            mar_val_w: g("mar.val_in.w"),
            mar_val_b: g("mar.val_in.b"),
            mask_token: g("mar.mask_token"),
            row_emb: g("mar.row_emb"),
            col_emb: g("mar.col_emb"),
            mar: (0..MAR_LAYERS)
                .map(|l| block_from(params, &format!("mar.l{l}")))
                .collect(),
            mar_lnf_g: g("mar.lnf.g"),
            mar_lnf_b: g("mar.lnf.b"),
            head_w1: g("head.w1"),
            head_b1: g("head.b1"),
            head_wt: g("head.wt"),
            head_w2: g("head.w2"),
            head_b2: g("head.b2"),
            head_w3: g("head.w3"),
            head_b3: g("head.b3"),
            pos_table: cast_matrix(pos.entries()),
            intensity_table: cast_matrix(intensity.entries()),
            intensity_bin_width: cfg.intensity_bin_width,
            timestep_table: cast_matrix(&timestep_table),
        })
    }

    /// Learned slot embedding for spatial slot `s`: row + column table rows.
    pub fn slot_embedding(&self, slot: usize) -> ndarray::Array1<F> {
        let (_, cols) = self.cfg.slot_grid();
        let r = slot / cols;
        let c = slot % cols;
        &self.row_emb.row(r) + &self.col_emb.row(c)
    }

    /// Intensity bin for a value (clamped to the top bin).
    pub fn intensity_bin(&self, value: f64) -> Result<usize> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(ModelError::precondition(format!(
                "intensity must be finite and >= 0, got {value}"
            )));
        }
        let raw = (value / self.intensity_bin_width).floor() as usize;
        Ok(raw.min(self.cfg.intensity_bins - 1))
    }
}

/// Sinusoidal embeddings for diffusion timesteps 0..=t_max.
pub fn timestep_embeddings(t_max: usize, dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((t_max + 1, dim));
    for t in 0..=t_max {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = t as f64 / 10000f64.powf(exponent);
            out[[t, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_complete() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg);
        let b = init_params(&cfg);
        assert_eq!(a, b);
        assert_eq!(a.len(), param_specs(&cfg).len());
        assert!(a.first_non_finite().is_none());
    }

    #[test]
    fn anchor_modulation_starts_at_identity() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg);
        assert!(p.get("sink.scale.w").iter().all(|v| *v == 0.0));
        assert!(p.get("sink.scale.b").iter().all(|v| *v == 1.0));
        assert!(p.get("sink.shift.w").iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_params_leave_nothing_at_zero() {
        let cfg = ModelConfig::default();
        let p = random_params(&cfg, 3);
        for (name, m) in p.iter() {
            assert!(
                m.iter().any(|v| *v != 0.0),
                "{name} is all zero in random init"
            );
        }
    }

    #[test]
    fn typed_weights_reject_missing_or_misshapen_params() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg);
        assert!(ModelWeights::<f64>::from_params(&cfg, &p).is_ok());
        let mut map: BTreeMap<String, Array2<f64>> =
            p.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        map.remove("head.w1");
        let partial = Params::from_map(map);
        assert!(ModelWeights::<f64>::from_params(&cfg, &partial).is_err());
    }

    #[test]
    fn rmsprop_moves_against_gradient() {
        let cfg = ModelConfig::default();
        let mut p = init_params(&cfg);
        let before = p.get("fca.vis_in.w").clone();
        let mut grads = BTreeMap::new();
        grads.insert("fca.vis_in.w".to_string(), Array2::ones(before.dim()));
        let mut opt = RmsProp::new(1e-2);
        opt.update(&mut p, &grads);
        let after = p.get("fca.vis_in.w");
        assert!(after.iter().zip(before.iter()).all(|(a, b)| a < b));
    }

    #[test]
    fn slot_embedding_covers_grid() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg);
        let w = ModelWeights::<f64>::from_params(&cfg, &p).unwrap();
        let e0 = w.slot_embedding(0);
        let e5 = w.slot_embedding(5);
        assert_ne!(e0, e5);
        assert_eq!(e0.len(), cfg.token_dim);
    }
}
