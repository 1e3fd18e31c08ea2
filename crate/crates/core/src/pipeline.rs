//! Streaming generation sessions: one frame in, one latent frame out.
//!
//! A session owns the sink-window cache, the anchor, and its random
//! streams. Conditions are pulled one frame at a time, so upstream
//! producers may be live; editing the condition at frame t can never touch
//! frames before t.

use ndarray::{Array1, Array2};

use crate::attn::{fca_step, Ablation, AdaLnSink, FrameLayout, FrameStepInput, SinkWindowCache};
use crate::config::ModelConfig;
use crate::diffhead::{DdpmTokenSampler, NoiseSchedule};
use crate::error::{ModelError, Result};
use crate::mar::{make_group_plan, mar_generate, GroupPlan};
use crate::params::ModelWeights;
use crate::posenc::temporal_index;
use crate::rng;
use crate::types::{ConditionFrame, FrameHidden, LatentFrame};

/// Cache and attention statistics of the most recent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStats {
    pub frame_idx: usize,
    pub pos_index: usize,
    /// Frames held by the cache after the step.
    pub cached_frames: usize,
    /// Cached token rows per layer after the step.
    pub cached_tokens: usize,
    /// Key rows each query of this frame attended to.
    pub attended_tokens: usize,
}

/// A single generation run over shared read-only weights.
pub struct Session<'w> {
    weights: &'w ModelWeights<f64>,
    schedule: NoiseSchedule,
    ablation: Ablation,
    cache: SinkWindowCache<f64>,
    sink: AdaLnSink<f64>,
    t: usize,
    last_visual: Array2<f64>,
    plan_rng: rng::Stream,
    noise_rng: rng::Stream,
    fixed_plan: Option<GroupPlan>,
    last_stats: StepStats,
}

impl<'w> Session<'w> {
    pub fn config(&self) -> &ModelConfig {
        &self.weights.cfg
    }

    /// Frames generated so far (the frame counter t).
    pub fn frames_generated(&self) -> usize {
        self.t
    }

    pub fn last_stats(&self) -> StepStats {
        self.last_stats
    }

    pub fn cache(&self) -> &SinkWindowCache<f64> {
        &self.cache
    }

    pub fn anchor(&self) -> Result<&Array2<f64>> {
        self.sink.anchor()
    }

    fn frame_hidden(
        &self,
        h_cond: Array2<f64>,
        h: Array2<f64>,
        is_first: bool,
    ) -> Result<FrameHidden> {
        let h_anchor = if !self.ablation.adaln {
            h.clone()
        } else if is_first {
            self.sink.anchor()?.clone()
        } else {
            self.sink.apply(self.weights, &h)?
        };
        Ok(FrameHidden { h, h_cond, h_anchor })
    }

    fn draw_plan(&mut self) -> Result<GroupPlan> {
        let cfg = &self.weights.cfg;
        match &self.fixed_plan {
            Some(p) => Ok(p.clone()),
            None => make_group_plan(cfg.spatial_tokens, cfg.mar_groups, &mut self.plan_rng),
        }
    }

    /// Generate the next frame from its condition. On error the session is
    /// left exactly as it was, so the step can be retried.
    pub fn step(&mut self, cond: &ConditionFrame) -> Result<LatentFrame> {
        let cfg = &self.weights.cfg;
        cond.validate(cfg)?;
        let t = self.t + 1;
        let pos_index = temporal_index(t, cfg.window_frames)?;

        // run on scratch state; commit only on success
        let mut cache = self.cache.clone();
        let mut plan_rng = self.plan_rng.clone();
        let mut noise_rng = self.noise_rng.clone();
        let attended = cache.total_tokens() + FrameLayout::from_config(cfg).frame_len();

        let input = FrameStepInput {
            audio: Some(cond.audio.view()),
            intensity: cond.intensity,
            visual: self.last_visual.view(),
            frame_idx: t,
            pos_index,
        };
        let (h_cond, h) = fca_step(self.weights, self.ablation.variant, &input, &mut cache)?;
        let hidden = self.frame_hidden(h_cond, h, false)?;
        let plan = match &self.fixed_plan {
            Some(p) => p.clone(),
            None => make_group_plan(cfg.spatial_tokens, cfg.mar_groups, &mut plan_rng)?,
        };
        let mut sampler = DdpmTokenSampler {
            weights: self.weights,
            schedule: &self.schedule,
            steps: cfg.diff_sample_steps,
            rng: &mut noise_rng,
        };
        let tokens = mar_generate(
            self.weights,
            &hidden.h_cond,
            &hidden.h_anchor,
            &plan,
            &mut sampler,
        )?;

        self.cache = cache;
        self.plan_rng = plan_rng;
        self.noise_rng = noise_rng;
        self.t = t;
        self.last_visual = tokens.clone();
        self.last_stats = StepStats {
            frame_idx: t,
            pos_index,
            cached_frames: self.cache.cached_frames(),
            cached_tokens: self.cache.total_tokens(),
            attended_tokens: attended,
        };
        Ok(LatentFrame::new(tokens))
    }
}

/// Open a session: process the reference frame, set the anchor, and
/// generate frame 1. The audio of `c1` is replaced by the learned null
/// token; its intensity drives the frame-1 intensity token.
pub fn start_session<'w>(
    x_ref: &LatentFrame,
    weights: &'w ModelWeights<f64>,
    c1: &ConditionFrame,
    session_seed: u64,
    ablation: Ablation,
) -> Result<(Session<'w>, LatentFrame)> {
    let cfg = &weights.cfg;
    cfg.validate()?;
    x_ref.validate(cfg)?;
    c1.validate(cfg)?;

    let mut session = Session {
        weights,
        schedule: NoiseSchedule::linear(cfg.diff_train_steps),
        ablation,
        cache: SinkWindowCache::new(cfg, ablation.cache_audio),
        sink: AdaLnSink::new(),
        t: 0,
        last_visual: x_ref.tokens.clone(),
        plan_rng: rng::stream(session_seed, "session-plan"),
        noise_rng: rng::stream(session_seed, "session-noise"),
        fixed_plan: None,
        last_stats: StepStats {
            frame_idx: 0,
            pos_index: 0,
            cached_frames: 0,
            cached_tokens: 0,
            attended_tokens: 0,
        },
    };
    if !cfg.resample_plan_per_frame {
        let mut plan_rng = rng::stream(session_seed, "session-plan");
        session.fixed_plan = Some(make_group_plan(
            cfg.spatial_tokens,
            cfg.mar_groups,
            &mut plan_rng,
        )?);
    }

    let input = FrameStepInput {
        audio: None,
        intensity: c1.intensity,
        visual: x_ref.tokens.view(),
        frame_idx: 1,
        pos_index: 1,
    };
    let (h_cond, h) = fca_step(weights, ablation.variant, &input, &mut session.cache)?;
    session.sink.init_from(&h)?;
    let hidden = session.frame_hidden(h_cond, h, true)?;

    let plan = session.draw_plan()?;
    let mut sampler = DdpmTokenSampler {
        weights,
        schedule: &session.schedule,
        steps: cfg.diff_sample_steps,
        rng: &mut session.noise_rng,
    };
    let tokens = mar_generate(weights, &hidden.h_cond, &hidden.h_anchor, &plan, &mut sampler)?;
    session.t = 1;
    session.last_visual = tokens.clone();
    session.last_stats = StepStats {
        frame_idx: 1,
        pos_index: 1,
        cached_frames: session.cache.cached_frames(),
        cached_tokens: session.cache.total_tokens(),
        attended_tokens: FrameLayout::from_config(cfg).frame_len(),
    };
    Ok((session, LatentFrame::new(tokens)))
}

/// Generate `frames` latent frames from a condition stream. The stream must
/// cover frames 1..=frames; the error names the first missing frame.
pub fn generate_sequence(
    weights: &ModelWeights<f64>,
    ablation: Ablation,
    x_ref: &LatentFrame,
    conds: &[ConditionFrame],
    frames: usize,
    session_seed: u64,
) -> Result<Vec<LatentFrame>> {
    if frames < 1 {
        return Err(ModelError::precondition("frame count must be >= 1"));
    }
    if conds.len() < frames {
        return Err(ModelError::precondition(format!(
            "condition stream ends early: frame {} is missing",
            conds.len() + 1
        )));
    }
    let (mut session, first) = start_session(x_ref, weights, &conds[0], session_seed, ablation)?;
    let mut out = Vec::with_capacity(frames);
    out.push(first);
    for cond in conds.iter().take(frames).skip(1) {
        out.push(session.step(cond)?);
    }
    Ok(out)
}

/// Edit of one frame's condition.
#[derive(Debug, Clone, Default)]
pub struct ConditionPatch {
    pub audio: Option<Array1<f64>>,
    pub intensity: Option<f64>,
}

impl ConditionPatch {
    pub fn is_empty(&self) -> bool {
        self.audio.is_none() && self.intensity.is_none()
    }
}

/// Return the stream with the patch applied at frame `at` (1-based). Frames
/// before `at` are untouched, so generation with the edited stream matches
/// the original bitwise up to frame `at - 1`.
pub fn override_condition(
    stream: &[ConditionFrame],
    at: usize,
    patch: &ConditionPatch,
) -> Result<Vec<ConditionFrame>> {
    if at < 1 || at > stream.len() {
        return Err(ModelError::precondition(format!(
            "patch frame {at} outside 1..={}",
            stream.len()
        )));
    }
    let mut out = stream.to_vec();
    let target = &mut out[at - 1];
    if let Some(a) = &patch.audio {
        target.audio = a.clone();
    }
    if let Some(i) = patch.intensity {
        target.intensity = i;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn::normalize_anchor;
    use crate::numeric::max_abs_diff;
    use crate::params::random_params;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            token_dim: 8,
            spatial_tokens: 4,
            audio_dim: 4,
            window_frames: 4,
            mar_groups: 2,
            layers: 2,
            heads: 2,
            diff_train_steps: 50,
            diff_sample_steps: 4,
            ..ModelConfig::default()
        }
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> (ModelWeights<f64>, LatentFrame, Vec<ConditionFrame>) {
        let w = ModelWeights::from_params(cfg, &random_params(cfg, seed)).unwrap();
        let mut r = rng::stream(seed, "pipe-data");
        let x_ref = LatentFrame::new(rng::normal_matrix(
            &mut r,
            cfg.spatial_tokens,
            cfg.token_dim,
        ));
        let conds: Vec<ConditionFrame> = (0..3 * cfg.window_frames + 2)
            .map(|i| ConditionFrame {
                audio: rng::normal_vector(&mut r, cfg.audio_dim),
                intensity: 0.005 * i as f64,
            })
            .collect();
        (w, x_ref, conds)
    }

    #[test]
    fn session_start_is_deterministic_and_sets_the_anchor() {
        let cfg = small_cfg();
        let (w, x_ref, conds) = setup(&cfg, 31);
        let (sa, fa) = start_session(&x_ref, &w, &conds[0], 7, Ablation::default()).unwrap();
        let (sb, fb) = start_session(&x_ref, &w, &conds[0], 7, Ablation::default()).unwrap();
        assert_eq!(sa.anchor().unwrap(), sb.anchor().unwrap());
        assert_eq!(fa.tokens, fb.tokens);
        assert_eq!(sa.cache().cached_frames(), 1);

        // the anchor is the normalized frame-1 features; recompute them
        let mut cache = SinkWindowCache::new(&cfg, true);
        let input = FrameStepInput {
            audio: None,
            intensity: conds[0].intensity,
            visual: x_ref.tokens.view(),
            frame_idx: 1,
            pos_index: 1,
        };
        let (_, h1) = fca_step(&w, crate::attn::MaskVariant::Full, &input, &mut cache).unwrap();
        assert!(max_abs_diff(sa.anchor().unwrap(), &normalize_anchor(&h1)) < 1e-12);
    }

    #[test]
    fn long_run_pins_cache_size_and_position_indices() {
        let cfg = small_cfg();
        let (w, x_ref, conds) = setup(&cfg, 32);
        let (mut s, _) = start_session(&x_ref, &w, &conds[0], 3, Ablation::default()).unwrap();
        let t_total = 3 * cfg.window_frames;
        for t in 2..=t_total {
            s.step(&conds[t - 1]).unwrap();
            let stats = s.last_stats();
            assert_eq!(stats.frame_idx, t);
            assert_eq!(
                stats.pos_index,
                temporal_index(t, cfg.window_frames).unwrap()
            );
            assert_eq!(stats.cached_frames, t.min(cfg.window_frames));
        }
        assert_eq!(s.frames_generated(), t_total);
        assert!(s.cache().sink_present_at_every_layer());
    }

    #[test]
    fn editing_a_condition_changes_only_that_frame_onward() {
        let cfg = small_cfg();
        let (w, x_ref, conds) = setup(&cfg, 33);
        let frames = 8usize;
        let base = generate_sequence(&w, Ablation::default(), &x_ref, &conds, frames, 5).unwrap();

        let at = 5usize;
        let patch = ConditionPatch {
            audio: Some(Array1::from_elem(cfg.audio_dim, 2.5)),
            intensity: Some(0.9),
        };
        let edited_stream = override_condition(&conds, at, &patch).unwrap();
        let edited =
            generate_sequence(&w, Ablation::default(), &x_ref, &edited_stream, frames, 5).unwrap();

        for t in 1..at {
            assert_eq!(base[t - 1].tokens, edited[t - 1].tokens, "frame {t} changed");
        }
        assert!(max_abs_diff(&base[at - 1].tokens, &edited[at - 1].tokens) > 0.0);
    }

    #[test]
    fn empty_patch_reproduces_the_run_bitwise() {
        let cfg = small_cfg();
        let (w, x_ref, conds) = setup(&cfg, 34);
        let base = generate_sequence(&w, Ablation::default(), &x_ref, &conds, 6, 9).unwrap();
        let same = override_condition(&conds, 3, &ConditionPatch::default()).unwrap();
        let replay = generate_sequence(&w, Ablation::default(), &x_ref, &same, 6, 9).unwrap();
        for (a, b) in base.iter().zip(replay.iter()) {
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn failed_step_leaves_the_session_untouched() {
        let cfg = small_cfg();
        let (w, x_ref, conds) = setup(&cfg, 35);
        let reference =
            generate_sequence(&w, Ablation::default(), &x_ref, &conds, 4, 11).unwrap();

        let (mut s, _) = start_session(&x_ref, &w, &conds[0], 11, Ablation::default()).unwrap();
        s.step(&conds[1]).unwrap();
        let bad = ConditionFrame {
            audio: Array1::zeros(cfg.audio_dim + 1),
            intensity: 0.0,
        };
        assert!(s.step(&bad).is_err());
        assert_eq!(s.frames_generated(), 2);
        // retrying with the proper condition must replay the reference run
        let f3 = s.step(&conds[2]).unwrap();
        let f4 = s.step(&conds[3]).unwrap();
        assert_eq!(f3.tokens, reference[2].tokens);
        assert_eq!(f4.tokens, reference[3].tokens);
    }

    #[test]
    fn condition_stream_bounds_are_checked() {
        let cfg = small_cfg();
        let (w, x_ref, conds) = setup(&cfg, 36);
        let err = generate_sequence(&w, Ablation::default(), &x_ref, &conds[..3], 5, 1)
            .unwrap_err();
        assert!(err.to_string().contains("frame 4"));
        assert!(override_condition(&conds, 0, &ConditionPatch::default()).is_err());
        assert!(override_condition(&conds, conds.len() + 1, &ConditionPatch::default()).is_err());
    }

    #[test]
    fn fixed_plan_mode_reuses_one_partition() {
        let cfg = ModelConfig {
            resample_plan_per_frame: false,
            ..small_cfg()
        };
        let (w, x_ref, conds) = setup(&cfg, 37);
        // runs deterministically and fills every slot each frame
        let frames = generate_sequence(&w, Ablation::default(), &x_ref, &conds, 5, 13).unwrap();
        for f in &frames {
            f.validate(&cfg).unwrap();
        }
    }
}
