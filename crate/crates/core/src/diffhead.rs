//! Per-token diffusion loss and the ancestral DDPM sampler.
//!
//! Tokens are continuous vectors; instead of a discrete cross-entropy the
//! model trains a small noise-prediction head per token and samples from it
//! at inference with a strided sub-schedule.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ModelError, Result};
use crate::mar::TokenSampler;
use crate::numeric::{silu, Real};
use crate::params::ModelWeights;
use crate::rng;

const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 2e-2;

/// Linear beta schedule with cumulative products; `alpha_bar(0) == 1`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(train_steps: usize) -> Self {
        assert!(train_steps >= 1);
        let betas: Vec<f64> = (0..train_steps)
            .map(|i| {
                if train_steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (train_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        NoiseSchedule { betas, alpha_bar }
    }

    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative signal fraction at timestep `t`, `t` in `0..=train_steps`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Strided inference timesteps, ascending, sharing both endpoints with
    /// the training schedule (first step 1, last step `train_steps`).
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.train_steps();
        if steps < 1 {
            return Err(ModelError::precondition("sampler steps must be >= 1"));
        }
        if steps > t_max {
            return Err(ModelError::precondition(format!(
                "sampler steps {steps} exceed training steps {t_max}"
            )));
        }
        if steps == 1 {
            return Ok(vec![t_max]);
        }
        let ts: Vec<usize> = (0..steps)
            .map(|i| {
                let raw = 1.0 + (t_max - 1) as f64 * i as f64 / (steps - 1) as f64;
                raw.round() as usize
            })
            .collect();
        debug_assert!(ts.windows(2).all(|w| w[0] < w[1]));
        Ok(ts)
    }
}

/// Forward noising: sqrt(a)x + sqrt(1-a)eps for `a = alpha_bar(t)`.
pub fn q_sample_with(x: &ArrayView1<f64>, eps: &ArrayView1<f64>, alpha_bar_t: f64) -> Array1<f64> {
    let sa = alpha_bar_t.sqrt();
    let sn = (1.0 - alpha_bar_t).sqrt();
    x.mapv(|v| v * sa) + &eps.mapv(|v| v * sn)
}

/// Forward noising at a schedule timestep, `1 <= t <= train_steps`.
pub fn q_sample(
    schedule: &NoiseSchedule,
    x: &ArrayView1<f64>,
    t: usize,
    eps: &ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if t < 1 || t > schedule.train_steps() {
        return Err(ModelError::precondition(format!(
            "timestep {t} outside 1..={}",
            schedule.train_steps()
        )));
    }
    Ok(q_sample_with(x, eps, schedule.alpha_bar(t)))
}

/// Evaluate the noise-prediction head on one token.
pub fn head_eval<F: Real>(
    w: &ModelWeights<F>,
    x_noisy: ArrayView1<'_, F>,
    t: usize,
    z: ArrayView1<'_, F>,
) -> Array1<F> {
    let mut input = Array1::zeros(x_noisy.len() + z.len());
    input.slice_mut(ndarray::s![..x_noisy.len()]).assign(&x_noisy);
    input.slice_mut(ndarray::s![x_noisy.len()..]).assign(&z);
    let temb = w.timestep_table.row(t).dot(&w.head_wt);
    let mut h1 = input.dot(&w.head_w1) + &w.head_b1.row(0) + &temb;
    h1.mapv_inplace(silu);
    let mut h2 = h1.dot(&w.head_w2) + &w.head_b2.row(0);
    h2.mapv_inplace(silu);
    h2.dot(&w.head_w3) + &w.head_b3.row(0)
}

/// Deterministic core of the diffusion loss with all draws supplied:
/// `||eps - head(q_sample(x, t, eps) | t, z)||^2`.
pub fn diffusion_loss_with_draws<H>(
    head: H,
    schedule: &NoiseSchedule,
    z: &ArrayView1<f64>,
    x: &ArrayView1<f64>,
    t: usize,
    eps: &ArrayView1<f64>,
) -> Result<f64>
where
    H: Fn(&Array1<f64>, usize, &ArrayView1<f64>) -> Array1<f64>,
{
    let x_t = q_sample(schedule, x, t, eps)?;
    let pred = head(&x_t, t, z);
    Ok(eps
        .iter()
        .zip(pred.iter())
        .map(|(e, p)| (e - p) * (e - p))
        .sum())
}

/// Diffusion loss with a uniform timestep and standard normal noise drawn
/// from `rng`.
pub fn diffusion_loss(
    w: &ModelWeights<f64>,
    schedule: &NoiseSchedule,
    z: &ArrayView1<f64>,
    x: &ArrayView1<f64>,
    rng: &mut impl Rng,
) -> Result<f64> {
    let t = rng.gen_range(1..=schedule.train_steps());
    let eps = Array1::from_shape_fn(x.len(), |_| rng.sample::<f64, _>(StandardNormal));
    diffusion_loss_with_draws(
        |x_t, t, z| head_eval(w, x_t.view(), t, z.view()),
        schedule,
        z,
        x,
        t,
        &eps.view(),
    )
}

/// Ancestral DDPM sampling of one token conditioned on `z`, walking the
/// strided sub-schedule from pure noise down to the sample.
pub fn ddpm_sample(
    w: &ModelWeights<f64>,
    schedule: &NoiseSchedule,
    z: &ArrayView1<f64>,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Array1<f64>> {
    let ts = schedule.sub_schedule(steps)?;
    let d = w.cfg.token_dim;
    let mut x = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
    for j in (0..ts.len()).rev() {
        let t = ts[j];
        let t_prev = if j > 0 { ts[j - 1] } else { 0 };
        let ab_t = schedule.alpha_bar(t);
        let ab_p = schedule.alpha_bar(t_prev);
        let eps_hat = head_eval(w, x.view(), t, *z);
        let x0 = (&x - &eps_hat.mapv(|v| v * (1.0 - ab_t).sqrt())).mapv(|v| v / ab_t.sqrt());
        let alpha_eff = ab_t / ab_p;
        let beta_eff = 1.0 - alpha_eff;
        let mean = (x.mapv(|v| v * alpha_eff.sqrt() * (1.0 - ab_p))
            + x0.mapv(|v| v * ab_p.sqrt() * beta_eff))
        .mapv(|v| v / (1.0 - ab_t));
        if j > 0 {
            let var = beta_eff * (1.0 - ab_p) / (1.0 - ab_t);
            let noise = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            x = mean + noise.mapv(|v| v * var.sqrt());
        } else {
            x = mean;
        }
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFinite {
            context: "ddpm_sample".into(),
            detail: "sampler produced a non-finite token".into(),
        });
    }
    Ok(x)
}

/// `TokenSampler` backed by the diffusion head, for the spatial generator.
pub struct DdpmTokenSampler<'a> {
    pub weights: &'a ModelWeights<f64>,
    pub schedule: &'a NoiseSchedule,
    pub steps: usize,
    pub rng: &'a mut rng::Stream,
}

impl TokenSampler<f64> for DdpmTokenSampler<'_> {
    fn sample(&mut self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        ddpm_sample(self.weights, self.schedule, &z, self.steps, self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::config::ModelConfig;
    use crate::params::{random_params, RmsProp};
    use ndarray::Array2;
    use std::collections::BTreeMap;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn schedule_sanity() {
        let s = NoiseSchedule::linear(1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar not strictly decreasing");
            let b = s.beta(t);
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn sub_schedule_endpoints_match_training_schedule() {
        let s = NoiseSchedule::linear(1000);
        for steps in [2usize, 4, 8, 25, 64] {
            let ts = s.sub_schedule(steps).unwrap();
            assert_eq!(ts.len(), steps);
            assert_eq!(*ts.first().unwrap(), 1);
            assert_eq!(*ts.last().unwrap(), 1000);
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(s.sub_schedule(1).unwrap(), vec![1000]);
        assert!(s.sub_schedule(0).is_err());
        assert!(s.sub_schedule(1001).is_err());
    }

    #[test]
    fn q_sample_limits_and_closed_form() {
        let x = Array1::from_vec(vec![1.0, -2.0, 3.0]);
        let eps = Array1::from_vec(vec![0.5, 0.5, 0.5]);
        let clean = q_sample_with(&x.view(), &eps.view(), 1.0);
        assert_eq!(clean, x);
        let pure = q_sample_with(&x.view(), &eps.view(), 0.0);
        assert_eq!(pure, eps);
        let zeros = Array1::zeros(4);
        let ones = Array1::ones(4);
        let mixed = q_sample_with(&zeros.view(), &ones.view(), 0.25);
        for v in mixed.iter() {
            assert!((v - 0.75f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_timestep_bounds() {
        let s = NoiseSchedule::linear(10);
        let x = Array1::zeros(2);
        let eps = Array1::zeros(2);
        assert!(q_sample(&s, &x.view(), 0, &eps.view()).is_err());
        assert!(q_sample(&s, &x.view(), 11, &eps.view()).is_err());
        assert!(q_sample(&s, &x.view(), 10, &eps.view()).is_ok());
    }

    #[test]
    fn oracle_head_gives_exactly_zero_loss() {
        let s = NoiseSchedule::linear(100);
        let mut r = rng::stream(1, "diff-oracle");
        let z = rng::normal_vector(&mut r, 16);
        let x = rng::normal_vector(&mut r, 16);
        let eps = rng::normal_vector(&mut r, 16);
        let loss = diffusion_loss_with_draws(
            |_, _, _| eps.clone(),
            &s,
            &z.view(),
            &x.view(),
            37,
            &eps.view(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn zero_head_expected_loss_is_the_dimension() {
        let s = NoiseSchedule::linear(100);
        let d = 16usize;
        let mut r = rng::stream(2, "diff-zero-head");
        let z = Array1::zeros(d);
        let x = Array1::zeros(d);
        let draws = 10_000usize;
        let mut total = 0.0;
        for _ in 0..draws {
            let t = r.gen_range(1..=s.train_steps());
            let eps = rng::normal_vector(&mut r, d);
            total += diffusion_loss_with_draws(
                |_, _, _| Array1::zeros(d),
                &s,
                &z.view(),
                &x.view(),
                t,
                &eps.view(),
            )
            .unwrap();
        }
        let mean = total / draws as f64;
        assert!(
            (mean - d as f64).abs() / d as f64 <= 0.05,
            "zero-head mean loss {mean} should be within 5% of {d}"
        );
    }

    #[test]
    fn loss_is_invariant_under_joint_coordinate_permutation() {
        let cfg = cfg();
        let d = cfg.token_dim;
        let s = NoiseSchedule::linear(cfg.diff_train_steps);
        let params = random_params(&cfg, 5);
        let w = ModelWeights::<f64>::from_params(&cfg, &params).unwrap();

        // permutation of the token coordinates
        let perm: Vec<usize> = (0..d).map(|i| (i * 7 + 3) % d).collect();
        let mut permuted = params.clone();
        {
            let w1 = permuted.get_mut("head.w1");
            let orig = w1.clone();
            for i in 0..d {
                for c in 0..orig.ncols() {
                    w1[[i, c]] = orig[[perm[i], c]]; // x half
                    w1[[d + i, c]] = orig[[d + perm[i], c]]; // z half
                }
            }
        }
        {
            let w3 = permuted.get_mut("head.w3");
            let orig = w3.clone();
            for r in 0..orig.nrows() {
                for i in 0..d {
                    w3[[r, i]] = orig[[r, perm[i]]];
                }
            }
            let b3 = permuted.get_mut("head.b3");
            let orig = b3.clone();
            for i in 0..d {
                b3[[0, i]] = orig[[0, perm[i]]];
            }
        }
        let wp = ModelWeights::<f64>::from_params(&cfg, &permuted).unwrap();

        let mut r = rng::stream(6, "diff-perm");
        let z = rng::normal_vector(&mut r, d);
        let x = rng::normal_vector(&mut r, d);
        let eps = rng::normal_vector(&mut r, d);
        let pick = |v: &Array1<f64>| Array1::from_shape_fn(d, |i| v[perm[i]]);
        let (zp, xp, epsp) = (pick(&z), pick(&x), pick(&eps));

        let base = diffusion_loss_with_draws(
            |xt, t, zz| head_eval(&w, xt.view(), t, zz.view()),
            &s,
            &z.view(),
            &x.view(),
            11,
            &eps.view(),
        )
        .unwrap();
        let permuted_loss = diffusion_loss_with_draws(
            |xt, t, zz| head_eval(&wp, xt.view(), t, zz.view()),
            &s,
            &zp.view(),
            &xp.view(),
            11,
            &epsp.view(),
        )
        .unwrap();
        assert!((base - permuted_loss).abs() < 1e-10);
    }

    #[test]
    fn single_step_with_zero_head_recovers_scaled_noise() {
        let cfg = cfg();
        let mut params = random_params(&cfg, 7);
        for name in ["head.w1", "head.b1", "head.wt", "head.w2", "head.b2", "head.w3", "head.b3"] {
            params.get_mut(name).fill(0.0);
        }
        let w = ModelWeights::<f64>::from_params(&cfg, &params).unwrap();
        let s = NoiseSchedule::linear(cfg.diff_train_steps);
        let z = Array1::zeros(cfg.token_dim);

        let mut r1 = rng::stream(8, "ddpm-one");
        let x = ddpm_sample(&w, &s, &z.view(), 1, &mut r1).unwrap();

        // replay the initial draw to recover x_T
        let mut r2 = rng::stream(8, "ddpm-one");
        let x_t = rng::normal_vector(&mut r2, cfg.token_dim);
        let expect = x_t.mapv(|v| v / s.alpha_bar(s.train_steps()).sqrt());
        for (a, b) in x.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_the_stream() {
        let cfg = cfg();
        let w = ModelWeights::<f64>::from_params(&cfg, &random_params(&cfg, 9)).unwrap();
        let s = NoiseSchedule::linear(cfg.diff_train_steps);
        let mut r = rng::stream(10, "ddpm-det");
        let z = rng::normal_vector(&mut r, cfg.token_dim);
        let mut ra = rng::stream(11, "ddpm-draws");
        let mut rb = rng::stream(11, "ddpm-draws");
        let a = ddpm_sample(&w, &s, &z.view(), 8, &mut ra).unwrap();
        let b = ddpm_sample(&w, &s, &z.view(), 8, &mut rb).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bulk_sampling_stays_finite() {
        let cfg = cfg();
        let w = ModelWeights::<f64>::from_params(&cfg, &random_params(&cfg, 12)).unwrap();
        let s = NoiseSchedule::linear(cfg.diff_train_steps);
        let mut zr = rng::stream(13, "ddpm-bulk-z");
        let mut dr = rng::stream(13, "ddpm-bulk-noise");
        for _ in 0..1000 {
            let z = rng::normal_vector(&mut zr, cfg.token_dim);
            let x = ddpm_sample(&w, &s, &z.view(), 4, &mut dr).unwrap();
            assert!(x.iter().all(|v| v.is_finite()));
            assert!(x.dot(&x).is_finite());
        }
    }

    /// Train just the head on a deterministic z -> x map, then check that
    /// finer sub-schedules land closer to the 64-step reference.
    #[test]
    fn finer_sub_schedules_approach_the_dense_sampler() {
        let cfg = ModelConfig {
            diff_train_steps: 64,
            ..cfg()
        };
        let d = cfg.token_dim;
        let hidden = cfg.head_hidden();
        let schedule = NoiseSchedule::linear(cfg.diff_train_steps);
        let mut params = random_params(&cfg, 14);
        let ttable = crate::params::timestep_embeddings(cfg.diff_train_steps, hidden);

        // target map: x = 0.6 * M z with fixed random M
        let mut mr = rng::stream(15, "head-map");
        let m = rng::normal_matrix(&mut mr, d, d).mapv(|v| 0.6 * v / (d as f64).sqrt());

        let head_names = ["head.w1", "head.b1", "head.wt", "head.w2", "head.b2", "head.w3", "head.b3"];
        let mut opt = RmsProp::new(5e-3);
        let mut tr = rng::stream(16, "head-train");
        let batch = 64usize;
        for _ in 0..600 {
            let z_batch = rng::normal_matrix(&mut tr, batch, d);
            let x_batch = z_batch.dot(&m);
            let eps = rng::normal_matrix(&mut tr, batch, d);
            let mut xt = Array2::zeros((batch, d));
            let mut temb = Array2::zeros((batch, hidden));
            for i in 0..batch {
                let t = tr.gen_range(1..=cfg.diff_train_steps);
                let ab = schedule.alpha_bar(t);
                for c in 0..d {
                    xt[[i, c]] = ab.sqrt() * x_batch[[i, c]] + (1.0 - ab).sqrt() * eps[[i, c]];
                }
                temb.row_mut(i).assign(&ttable.row(t));
            }
            let mut g = Graph::new();
            let ids: BTreeMap<&str, _> = head_names
                .iter()
                .map(|n| (*n, g.leaf(params.get(n).clone())))
                .collect();
            let xt_c = g.leaf(xt);
            let z_c = g.leaf(z_batch);
            let temb_c = g.leaf(temb);
            let input = g.concat_cols(vec![xt_c, z_c]);
            let pre = g.matmul(input, ids["head.w1"]);
            let pre = g.add_row(pre, ids["head.b1"]);
            let tproj = g.matmul(temb_c, ids["head.wt"]);
            let pre = g.add(pre, tproj);
            let h1 = g.silu(pre);
            let h2pre = g.matmul(h1, ids["head.w2"]);
            let h2pre = g.add_row(h2pre, ids["head.b2"]);
            let h2 = g.silu(h2pre);
            let out = g.matmul(h2, ids["head.w3"]);
            let out = g.add_row(out, ids["head.b3"]);
            let eps_c = g.leaf(eps);
            let diff = g.sub(eps_c, out);
            let sq = g.sq_norm(diff);
            let loss = g.scale(sq, 1.0 / batch as f64);
            g.backward(loss);
            let grads: BTreeMap<String, Array2<f64>> = head_names
                .iter()
                .map(|n| (n.to_string(), g.grad(ids[*n])))
                .collect();
            opt.update(&mut params, &grads);
        }

        let w = ModelWeights::<f64>::from_params(&cfg, &params).unwrap();
        let tokens = 256usize;
        let mut zr = rng::stream(17, "head-eval-z");
        let mut sr = rng::stream(18, "head-eval-noise");
        let mut mse = BTreeMap::new();
        for steps in [4usize, 8, 16] {
            let mut total = 0.0;
            let mut zr_ref = rng::stream(17, "head-eval-z");
            for _ in 0..tokens {
                let z = rng::normal_vector(&mut zr_ref, d);
                let dense = ddpm_sample(&w, &schedule, &z.view(), 64, &mut sr).unwrap();
                let coarse = ddpm_sample(&w, &schedule, &z.view(), steps, &mut sr).unwrap();
                let diff = &dense - &coarse;
                total += diff.dot(&diff);
            }
            mse.insert(steps, total / tokens as f64);
        }
        let _ = &mut zr;
        assert!(
            mse[&4] > mse[&8] && mse[&8] > mse[&16],
            "sub-schedule consistency violated: {mse:?}"
        );
    }
}
