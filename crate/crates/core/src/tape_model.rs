//! The model forward on the autodiff tape: teacher-forced fixed-length
//! windows for training and gradient checking.
//!
//! This mirrors the inference path in `attn`/`mar`/`diffhead` op for op;
//! the agreement is enforced by tests that run both on the same inputs.
//! All randomness is drawn ahead of time into `MarDraws`/`WindowInputs`, so
//! the loss is a deterministic function of the parameters, which is what
//! central-difference checking requires.

use ndarray::{Array1, Array2};
use std::collections::BTreeMap;

use crate::attn::{build_mask, Ablation, FrameLayout, MaskPolicy};
use crate::autodiff::{Graph, VarId};
use crate::config::{ModelConfig, COND_TOKENS};
use crate::diffhead::{q_sample_with, NoiseSchedule};
use crate::error::{ModelError, Result};
use crate::params::{param_specs, timestep_embeddings, Params, MAR_LAYERS, NORM_EPS};
use crate::posenc::{IntensityTable, PositionTable};
use crate::types::ConditionFrame;

/// Name -> tape leaf for every parameter.
pub struct BoundParams {
    map: BTreeMap<String, VarId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> VarId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Array2<f64>> {
        self.map
            .iter()
            .map(|(name, id)| (name.clone(), g.grad(*id)))
            .collect()
    }
}

pub fn bind_params(g: &mut Graph, params: &Params) -> BoundParams {
    let map = params
        .iter()
        .map(|(name, value)| (name.clone(), g.leaf(value.clone())))
        .collect();
    BoundParams { map }
}

/// Fixed tables the tape path shares with the inference weights.
pub struct FixedTables {
    pub pos: PositionTable,
    pub intensity: IntensityTable,
    pub timestep: Array2<f64>,
}

impl FixedTables {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(FixedTables {
            pos: PositionTable::sinusoidal(cfg.window_frames, cfg.token_dim)?,
            intensity: IntensityTable::sinusoidal(
                cfg.intensity_bins,
                cfg.token_dim,
                cfg.intensity_bin_width,
            )?,
            timestep: timestep_embeddings(cfg.diff_train_steps, cfg.head_hidden()),
        })
    }
}

/// One teacher-forced window: clean frames, per-frame conditions, frozen
/// input perturbations, and the position assignment.
pub struct WindowInputs<'a> {
    /// Ground-truth frames 1..=T_w; frame 1 is the reference.
    pub frames: &'a [Array2<f64>],
    pub conds: &'a [ConditionFrame],
    /// Additive noise applied to the visual input of each slot (slot 1
    /// receives the clean reference; pass zero matrices there).
    pub input_noise: &'a [Array2<f64>],
    /// 1-based position-table indices per slot.
    pub positions: &'a [usize],
    /// When false the intensity token is pinned to bin 0 (phase-one recipe).
    pub use_intensity: bool,
}

/// Frozen randomness of the masked-generation loss, one entry per loss
/// frame (frames 2..=T_w in order).
pub struct MarDraws {
    pub masked_slots: Vec<Vec<usize>>,
    pub timesteps: Vec<Vec<usize>>,
    pub eps: Vec<Array2<f64>>,
}

/// Head behaviour inside the composed loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Learned,
    /// Test stub: the head predicts the drawn noise exactly, making the
    /// loss identically zero with no parameter dependence.
    Oracle,
}

fn block_tape(
    g: &mut Graph,
    bp: &BoundParams,
    prefix: &str,
    x: VarId,
    mask: &Array2<bool>,
    heads: usize,
    dim: usize,
) -> VarId {
    let p = |suffix: &str| format!("{prefix}.{suffix}");
    let ln1g = bp.id(&p("ln1.g"));
    let ln1b = bp.id(&p("ln1.b"));
    let xn = g.layer_norm(x, ln1g, ln1b, NORM_EPS);
    let q0 = g.matmul(xn, bp.id(&p("attn.wq")));
    let q = g.add_row(q0, bp.id(&p("attn.bq")));
    let k0 = g.matmul(xn, bp.id(&p("attn.wk")));
    let k = g.add_row(k0, bp.id(&p("attn.bk")));
    let v0 = g.matmul(xn, bp.id(&p("attn.wv")));
    let v = g.add_row(v0, bp.id(&p("attn.bv")));

    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh);
        let kh = g.slice_cols(k, h * dh, dh);
        let vh = g.slice_cols(v, h * dh, dh);
        let raw = g.matmul_bt(qh, kh);
        let scores = g.scale(raw, scale);
        let weights = g.softmax_rows(scores, Some(mask.clone()));
        head_outs.push(g.matmul(weights, vh));
    }
    let mixed = g.concat_cols(head_outs);
    let attn0 = g.matmul(mixed, bp.id(&p("attn.wo")));
    let attn = g.add_row(attn0, bp.id(&p("attn.bo")));
    let x = g.add(x, attn);

    let ln2g = bp.id(&p("ln2.g"));
    let ln2b = bp.id(&p("ln2.b"));
    let x2 = g.layer_norm(x, ln2g, ln2b, NORM_EPS);
    let h0 = g.matmul(x2, bp.id(&p("mlp.w1")));
    let h1 = g.add_row(h0, bp.id(&p("mlp.b1")));
    let h = g.silu(h1);
    let m0 = g.matmul(h, bp.id(&p("mlp.w2")));
    let mlp = g.add_row(m0, bp.id(&p("mlp.b2")));
    g.add(x, mlp)
}

fn embed_window(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    tables: &FixedTables,
    inputs: &WindowInputs<'_>,
) -> Result<VarId> {
    let mut frame_blocks = Vec::with_capacity(inputs.frames.len());
    for (slot, cond) in inputs.conds.iter().enumerate() {
        let audio_tok = if slot == 0 {
            bp.id("fca.null_audio")
        } else {
            let a = g.leaf_row(cond.audio.clone());
            let proj = g.matmul(a, bp.id("fca.audio_in.w"));
            g.add(proj, bp.id("fca.audio_in.b"))
        };
        let bin = if inputs.use_intensity {
            tables.intensity.bin(cond.intensity)?
        } else {
            0
        };
        let intensity_tok = g.leaf_row(tables.intensity.entries().row(bin).to_owned());
        // input visual tokens: the previous frame (reference at slot 1),
        // plus the frozen perturbation
        let vis_source = if slot == 0 {
            inputs.frames[0].clone()
        } else {
            &inputs.frames[slot - 1] + &inputs.input_noise[slot]
        };
        let vis_c = g.leaf(vis_source);
        let vis0 = g.matmul(vis_c, bp.id("fca.vis_in.w"));
        let vis = g.add_row(vis0, bp.id("fca.vis_in.b"));
        let block = g.concat_rows(vec![audio_tok, intensity_tok, vis]);
        let pos_row = tables.pos.row(inputs.positions[slot]).to_owned();
        let mut pos_mat = Array2::zeros((cfg.frame_tokens(), cfg.token_dim));
        for mut r in pos_mat.rows_mut() {
            r.assign(&pos_row);
        }
        let pos_c = g.leaf(pos_mat);
        frame_blocks.push(g.add(block, pos_c));
    }
    Ok(g.concat_rows(frame_blocks))
}

/// Teacher-forced window forward of the frame-causal backbone. Returns
/// `(h_cond, h)` node ids per slot.
pub fn window_forward_tape(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    tables: &FixedTables,
    abl: Ablation,
    inputs: &WindowInputs<'_>,
) -> Result<Vec<(VarId, VarId)>> {
    let t_w = inputs.frames.len();
    if t_w < 1 || inputs.conds.len() != t_w || inputs.positions.len() != t_w {
        return Err(ModelError::precondition(
            "window inputs must have equal frame/cond/position counts",
        ));
    }
    if t_w > cfg.window_frames {
        return Err(ModelError::precondition(format!(
            "training window of {t_w} frames exceeds the attention window {}",
            cfg.window_frames
        )));
    }
    let layout = FrameLayout::from_config(cfg);
    let mask = build_mask(
        t_w,
        layout,
        abl.variant,
        MaskPolicy {
            window: None,
            cache_audio: abl.cache_audio,
        },
    );
    let mut x = embed_window(g, bp, cfg, tables, inputs)?;
    for layer in 0..cfg.layers {
        x = block_tape(
            g,
            bp,
            &format!("fca.l{layer}"),
            x,
            &mask.allowed,
            cfg.heads,
            cfg.token_dim,
        );
    }
    let lnf_g = bp.id("fca.lnf.g");
    let lnf_b = bp.id("fca.lnf.b");
    let hfin = g.layer_norm(x, lnf_g, lnf_b, NORM_EPS);
    let per = layout.frame_len();
    Ok((0..t_w)
        .map(|i| {
            let h_cond = g.slice_rows(hfin, i * per, COND_TOKENS);
            let h = g.slice_rows(hfin, i * per + COND_TOKENS, cfg.spatial_tokens);
            (h_cond, h)
        })
        .collect())
}

/// Anchor-modulated features per slot: the anchor is the normalized frame-1
/// features; slot 1 uses the anchor itself, later slots modulate it. With
/// the adaLN ablation the raw features pass through.
pub fn anchored_features_tape(
    g: &mut Graph,
    bp: &BoundParams,
    abl: Ablation,
    hidden: &[(VarId, VarId)],
) -> Vec<VarId> {
    if !abl.adaln {
        return hidden.iter().map(|(_, h)| *h).collect();
    }
    let anchor = g.row_norm(hidden[0].1, NORM_EPS);
    hidden
        .iter()
        .enumerate()
        .map(|(i, (_, h))| {
            if i == 0 {
                anchor
            } else {
                let s0 = g.matmul(*h, bp.id("sink.scale.w"));
                let scale = g.add_row(s0, bp.id("sink.scale.b"));
                let sh0 = g.matmul(*h, bp.id("sink.shift.w"));
                let shift = g.add_row(sh0, bp.id("sink.shift.b"));
                let modulated = g.mul(anchor, scale);
                g.add(modulated, shift)
            }
        })
        .collect()
}

/// Spatial-generator forward for one frame on the tape. `context` holds the
/// clean current-frame tokens at unmasked slots (zero rows elsewhere).
/// Returns the generator outputs at the masked slots, in `masked` order.
pub fn mar_outputs_tape(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    h_cond: VarId,
    h_prime: VarId,
    context: &Array2<f64>,
    masked: &[usize],
) -> VarId {
    let s = cfg.spatial_tokens;
    let d = cfg.token_dim;
    let masked_set: Vec<bool> = {
        let mut v = vec![false; s];
        for &m in masked {
            v[m] = true;
        }
        v
    };
    // value path: context rows through the value projection (masked rows
    // are zero in `context` and get no bias), mask rows take the mask token
    let ctx_c = g.leaf(context.clone());
    let value = g.matmul(ctx_c, bp.id("mar.val_in.w"));
    let mut ctx_ind = Array2::zeros((s, d));
    let mut mask_ind = Array2::zeros((s, d));
    for slot in 0..s {
        let target = if masked_set[slot] {
            &mut mask_ind
        } else {
            &mut ctx_ind
        };
        target.row_mut(slot).fill(1.0);
    }
    let ctx_ind_c = g.leaf(ctx_ind);
    let mask_ind_c = g.leaf(mask_ind);
    let val_bias_tile = g.tile_rows(bp.id("mar.val_in.b"), s);
    let val_bias = g.mul(ctx_ind_c, val_bias_tile);
    let mask_tile = g.tile_rows(bp.id("mar.mask_token"), s);
    let mask_part = g.mul(mask_ind_c, mask_tile);
    let base0 = g.add(value, val_bias);
    let base = g.add(base0, mask_part);

    // learned 2-D slot embeddings
    let (_, grid_cols) = cfg.slot_grid();
    let row_idx: Vec<usize> = (0..s).map(|slot| slot / grid_cols).collect();
    let col_idx: Vec<usize> = (0..s).map(|slot| slot % grid_cols).collect();
    let row_part = g.gather_rows(bp.id("mar.row_emb"), row_idx);
    let col_part = g.gather_rows(bp.id("mar.col_emb"), col_idx);
    let emb = g.add(row_part, col_part);

    let with_anchor = g.add(base, h_prime);
    let slots_in = g.add(with_anchor, emb);
    let x = g.concat_rows(vec![h_cond, slots_in]);

    // prefix rows are read-only context: slots attend everywhere, the
    // prefix attends only to itself
    let total = COND_TOKENS + s;
    let mut allowed = Array2::from_elem((total, total), true);
    for q in 0..COND_TOKENS {
        for k in COND_TOKENS..total {
            allowed[[q, k]] = false;
        }
    }
    let mut x = x;
    for layer in 0..MAR_LAYERS {
        x = block_tape(
            g,
            bp,
            &format!("mar.l{layer}"),
            x,
            &allowed,
            cfg.heads,
            cfg.token_dim,
        );
    }
    let lnf_g = bp.id("mar.lnf.g");
    let lnf_b = bp.id("mar.lnf.b");
    let out = g.layer_norm(x, lnf_g, lnf_b, NORM_EPS);
    let slots_out = g.slice_rows(out, COND_TOKENS, s);
    g.gather_rows(slots_out, masked.to_vec())
}

/// Denoiser head on the tape for a batch of masked tokens of one frame.
fn head_loss_tape(
    g: &mut Graph,
    bp: &BoundParams,
    tables: &FixedTables,
    schedule: &NoiseSchedule,
    z: VarId,
    targets: &Array2<f64>,
    timesteps: &[usize],
    eps: &Array2<f64>,
    mode: HeadMode,
) -> VarId {
    let n = targets.nrows();
    let eps_c = g.leaf(eps.clone());
    let pred = match mode {
        HeadMode::Oracle => eps_c,
        HeadMode::Learned => {
            let mut x_noisy = Array2::zeros(targets.dim());
            let mut temb = Array2::zeros((n, tables.timestep.ncols()));
            for i in 0..n {
                let t = timesteps[i];
                let row = q_sample_with(
                    &targets.row(i),
                    &eps.row(i),
                    schedule.alpha_bar(t),
                );
                x_noisy.row_mut(i).assign(&row);
                temb.row_mut(i).assign(&tables.timestep.row(t));
            }
            let xn_c = g.leaf(x_noisy);
            let input = g.concat_cols(vec![xn_c, z]);
            let pre0 = g.matmul(input, bp.id("head.w1"));
            let pre1 = g.add_row(pre0, bp.id("head.b1"));
            let temb_c = g.leaf(temb);
            let tproj = g.matmul(temb_c, bp.id("head.wt"));
            let pre = g.add(pre1, tproj);
            let h1 = g.silu(pre);
            let h20 = g.matmul(h1, bp.id("head.w2"));
            let h21 = g.add_row(h20, bp.id("head.b2"));
            let h2 = g.silu(h21);
            let out0 = g.matmul(h2, bp.id("head.w3"));
            g.add_row(out0, bp.id("head.b3"))
        }
    };
    let diff = g.sub(eps_c, pred);
    g.sq_norm(diff)
}

/// The full composed training loss for one window: backbone forward, anchor
/// modulation, masked spatial generation, and the per-token diffusion loss
/// averaged over all masked slots of frames 2..=T_w.
#[allow(clippy::too_many_arguments)]
pub fn composed_loss_tape(
    g: &mut Graph,
    bp: &BoundParams,
    cfg: &ModelConfig,
    tables: &FixedTables,
    schedule: &NoiseSchedule,
    abl: Ablation,
    inputs: &WindowInputs<'_>,
    draws: &MarDraws,
    mode: HeadMode,
) -> Result<VarId> {
    let t_w = inputs.frames.len();
    if t_w < 2 {
        return Err(ModelError::precondition(
            "training window needs at least two frames",
        ));
    }
    if draws.masked_slots.len() != t_w - 1 {
        return Err(ModelError::precondition(
            "draws must cover frames 2..=T_w",
        ));
    }
    let hidden = window_forward_tape(g, bp, cfg, tables, abl, inputs)?;
    let anchored = anchored_features_tape(g, bp, abl, &hidden);

    let mut frame_losses = Vec::with_capacity(t_w - 1);
    let mut token_count = 0usize;
    for frame in 1..t_w {
        let masked = &draws.masked_slots[frame - 1];
        let target = &inputs.frames[frame];
        let mut context = Array2::zeros(target.dim());
        let masked_set: Vec<bool> = {
            let mut v = vec![false; cfg.spatial_tokens];
            for &m in masked {
                v[m] = true;
            }
            v
        };
        for slot in 0..cfg.spatial_tokens {
            if !masked_set[slot] {
                context.row_mut(slot).assign(&target.row(slot));
            }
        }
        let z = mar_outputs_tape(
            g,
            bp,
            cfg,
            hidden[frame].0,
            anchored[frame],
            &context,
            masked,
        );
        let mut masked_targets = Array2::zeros((masked.len(), cfg.token_dim));
        for (i, &slot) in masked.iter().enumerate() {
            masked_targets.row_mut(i).assign(&target.row(slot));
        }
        let loss = head_loss_tape(
            g,
            bp,
            tables,
            schedule,
            z,
            &masked_targets,
            &draws.timesteps[frame - 1],
            &draws.eps[frame - 1],
            mode,
        );
        frame_losses.push(loss);
        token_count += masked.len();
    }
    let mut total = frame_losses[0];
    for l in &frame_losses[1..] {
        total = g.add(total, *l);
    }
    Ok(g.scale(total, 1.0 / token_count.max(1) as f64))
}

/// Every parameter name that should receive gradient under an ablation.
pub fn active_param_names(cfg: &ModelConfig, abl: Ablation) -> Vec<String> {
    param_specs(cfg)
        .into_iter()
        .map(|s| s.name)
        .filter(|n| abl.adaln || !n.starts_with("sink."))
        .collect()
}
