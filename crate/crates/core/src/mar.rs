//! Spatial masked autoregression: a random balanced partition of the slot
//! set into generation groups, and the bidirectional conditioning network
//! that turns (condition features, anchored features, already-generated
//! tokens) into a per-slot conditioning vector for the token head.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::COND_TOKENS;
use crate::error::{ModelError, Result};
use crate::numeric::{layer_norm_rows, linear, silu, softmax_masked, Real};
use crate::params::{ModelWeights, NORM_EPS};

/// Ordered list of disjoint slot groups covering `0..S`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPlan {
    groups: Vec<Vec<usize>>,
}

impl GroupPlan {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Slots of group `k` (1-based), in generation order.
    pub fn group(&self, k: usize) -> &[usize] {
        &self.groups[k - 1]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Check the partition laws against a slot count: pairwise disjoint,
    /// covering, and balanced (sizes differ by at most one).
    pub fn validate(&self, slots: usize) -> Result<()> {
        let mut seen = vec![false; slots];
        for g in &self.groups {
            for &s in g {
                if s >= slots {
                    return Err(ModelError::precondition(format!(
                        "slot {s} outside 0..{slots}"
                    )));
                }
                if seen[s] {
                    return Err(ModelError::precondition(format!("slot {s} appears twice")));
                }
                seen[s] = true;
            }
        }
        if !seen.iter().all(|&b| b) {
            return Err(ModelError::precondition("plan does not cover every slot"));
        }
        let lo = self.groups.iter().map(Vec::len).min().unwrap_or(0);
        let hi = self.groups.iter().map(Vec::len).max().unwrap_or(0);
        if hi > lo + 1 {
            return Err(ModelError::precondition(format!(
                "plan is unbalanced: sizes range {lo}..{hi}"
            )));
        }
        Ok(())
    }
}

/// Uniformly random balanced partition of `0..slots` into `group_count`
/// groups, in random generation order.
pub fn make_group_plan(
    slots: usize,
    group_count: usize,
    rng: &mut impl Rng,
) -> Result<GroupPlan> {
    if group_count == 0 || group_count > slots {
        return Err(ModelError::precondition(format!(
            "group count must lie in 1..={slots}, got {group_count}"
        )));
    }
    let mut order: Vec<usize> = (0..slots).collect();
    order.shuffle(rng);
    let base = slots / group_count;
    let extra = slots % group_count;
    let mut sizes = vec![base + 1; extra];
    sizes.extend(std::iter::repeat(base).take(group_count - extra));
    sizes.shuffle(rng);
    let mut groups = Vec::with_capacity(group_count);
    let mut at = 0;
    for size in sizes {
        groups.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(GroupPlan { groups })
}

/// Slot values generated so far, indexed by slot id.
pub type GeneratedSlots<F> = Vec<Option<Array1<F>>>;

/// Assemble the generator's input rows for all slots: generated slots carry
/// their projected token values, the rest carry the shared mask token; the
/// anchored frame features and the learned slot embedding are added to
/// every row.
pub fn assemble_slot_inputs<F: Real>(
    w: &ModelWeights<F>,
    h_prime: &Array2<F>,
    generated: &GeneratedSlots<F>,
) -> Array2<F> {
    let s = w.cfg.spatial_tokens;
    let d = w.cfg.token_dim;
    let mut x = Array2::zeros((s, d));
    for slot in 0..s {
        let mut row = match &generated[slot] {
            Some(v) => v.dot(&w.mar_val_w) + &w.mar_val_b.row(0),
            None => w.mask_token.row(0).to_owned(),
        };
        row += &h_prime.row(slot);
        row += &w.slot_embedding(slot);
        x.row_mut(slot).assign(&row);
    }
    x
}

/// Bidirectional generator forward: condition rows are a read-only prefix
/// (slots attend to them, not vice versa). Returns per-slot outputs.
fn generator_forward<F: Real>(
    w: &ModelWeights<F>,
    h_cond: &Array2<F>,
    slot_inputs: &Array2<F>,
) -> Array2<F> {
    let s = w.cfg.spatial_tokens;
    let total = COND_TOKENS + s;
    let mut x = Array2::zeros((total, w.cfg.token_dim));
    x.slice_mut(ndarray::s![..COND_TOKENS, ..]).assign(h_cond);
    x.slice_mut(ndarray::s![COND_TOKENS.., ..]).assign(slot_inputs);

    let allowed: Vec<Vec<bool>> = (0..total)
        .map(|q| {
            (0..total)
                .map(|k| q >= COND_TOKENS || k < COND_TOKENS)
                .collect()
        })
        .collect();

    let eps = F::from_f64(NORM_EPS);
    let heads = w.cfg.heads;
    let dh = w.cfg.token_dim / heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    for block in &w.mar {
        let xn = layer_norm_rows(&x.view(), &block.ln1_g, &block.ln1_b, eps);
        let q = linear(&xn.view(), &block.wq, &block.bq);
        let k = linear(&xn.view(), &block.wk, &block.bk);
        let v = linear(&xn.view(), &block.wv, &block.bv);
        let mut mixed = Array2::zeros((total, w.cfg.token_dim));
        for h in 0..heads {
            let cols = ndarray::s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let scores = qh.dot(&kh.t()).mapv(|v| v * scale);
            for (i, srow) in scores.rows().into_iter().enumerate() {
                let weights = softmax_masked(&srow, &allowed[i]);
                let out = weights.dot(&vh);
                mixed
                    .slice_mut(ndarray::s![i..i + 1, h * dh..(h + 1) * dh])
                    .assign(&out.view().insert_axis(ndarray::Axis(0)));
            }
        }
        let attn_out = linear(&mixed.view(), &block.wo, &block.bo);
        x += &attn_out;
        let x2 = layer_norm_rows(&x.view(), &block.ln2_g, &block.ln2_b, eps);
        let h = linear(&x2.view(), &block.w1, &block.b1).mapv(silu);
        let mlp_out = linear(&h.view(), &block.w2, &block.b2);
        x += &mlp_out;
    }
    let out = layer_norm_rows(&x.view(), &w.mar_lnf_g, &w.mar_lnf_b, eps);
    out.slice(ndarray::s![COND_TOKENS.., ..]).to_owned()
}

/// Conditioning vectors for the slots of group `k`, given that every group
/// before `k` is populated in `generated`. Rows follow the group's slot
/// order.
pub fn mar_condition<F: Real>(
    w: &ModelWeights<F>,
    h_cond: &Array2<F>,
    h_prime: &Array2<F>,
    generated: &GeneratedSlots<F>,
    plan: &GroupPlan,
    k: usize,
) -> Result<Array2<F>> {
    if k < 1 || k > plan.group_count() {
        return Err(ModelError::precondition(format!(
            "group index {k} outside 1..={}",
            plan.group_count()
        )));
    }
    for prior in 1..k {
        for &slot in plan.group(prior) {
            if generated[slot].is_none() {
                return Err(ModelError::MissingPriorGroup {
                    group: prior,
                    slot,
                });
            }
        }
    }
    let slot_inputs = assemble_slot_inputs(w, h_prime, generated);
    let all = generator_forward(w, h_cond, &slot_inputs);
    let group = plan.group(k);
    let mut z = Array2::zeros((group.len(), w.cfg.token_dim));
    for (i, &slot) in group.iter().enumerate() {
        z.row_mut(i).assign(&all.row(slot));
    }
    Ok(z)
}

/// Samples one token from its conditioning vector.
pub trait TokenSampler<F> {
    fn sample(&mut self, z: ArrayView1<'_, F>) -> Result<Array1<F>>;
}

/// Generate a full frame: iterate the plan's groups, conditioning each on
/// everything generated so far and sampling its tokens.
pub fn mar_generate<F: Real>(
    w: &ModelWeights<F>,
    h_cond: &Array2<F>,
    h_prime: &Array2<F>,
    plan: &GroupPlan,
    sampler: &mut dyn TokenSampler<F>,
) -> Result<Array2<F>> {
    let s = w.cfg.spatial_tokens;
    plan.validate(s)?;
    let mut generated: GeneratedSlots<F> = vec![None; s];
    for k in 1..=plan.group_count() {
        let z = mar_condition(w, h_cond, h_prime, &generated, plan, k)?;
        for (i, &slot) in plan.group(k).iter().enumerate() {
            let token = sampler.sample(z.row(i))?;
            generated[slot] = Some(token);
        }
    }
    let mut frame = Array2::zeros((s, w.cfg.token_dim));
    for (slot, value) in generated.into_iter().enumerate() {
        frame.row_mut(slot).assign(&value.expect("plan covers every slot"));
    }
    Ok(frame)
}
