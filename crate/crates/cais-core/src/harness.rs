//! Synthetic-stereo training harness: scene generation, fixed feature
//! extraction, cost-volume construction, soft-argmin disparity regression,
//! metrics, Adam, finite-difference gradient checking and the toy training
//! loop with its ablations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{
    cais_backward, cais_upsample, upsample_baseline, AggregationConfig, BaselineMethod,
    CostVolume,
};
use crate::guidance::{
    guidance_backward, guidance_forward, guidance_forward_signed, guidance_forward_unencoded,
    GuidanceField, GuidanceParams,
};
use crate::tensor::{avg_pool2, FeatureMap};
use crate::{Error, Real, Result};

/// A stereo pair with dense integer ground-truth disparity. The right view
/// is a warp of the left (`right(y, x) = left(y, x + gt(y, x))` wherever the
/// source column exists); `mask` marks the pixels whose match is
/// well-defined, which is what the loss and the metrics average over.
#[derive(Debug, Clone)]
pub struct SyntheticScene<T: Real> {
    pub left: FeatureMap<T>,
    pub right: FeatureMap<T>,
    pub gt: Vec<T>,
    pub mask: Vec<bool>,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub d_max: usize,
}

/// Band-limited noise texture in [0, 1]: white noise smoothed by two 3x3 box
/// passes, so matching costs have usable local structure.
fn noise_texture<T: Real>(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<T> {
    let mut img: Vec<f64> = (0..height * width).map(|_| rng.gen::<f64>()).collect();
    for _ in 0..2 {
        let mut next = vec![0.0f64; height * width];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                        acc += img[yy * width + xx];
                    }
                }
                next[y * width + x] = acc / 9.0;
            }
        }
        img = next;
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    img.iter().map(|&v| T::from_f64((v - lo) / span)).collect()
}

/// Builds a scene: a zero-disparity background plane plus axis-aligned
/// rectangles at distinct integer disparities, drawn far-to-near.
pub fn gen_scene<T: Real>(
    seed: u64,
    height: usize,
    width: usize,
    rect_count: usize,
    d_max: usize,
) -> Result<SyntheticScene<T>> {
    if d_max >= width / 2 {
        return Err(Error::Config(format!(
            "d_max {d_max} must stay below half the width {width}"
        )));
    }
    if rect_count == 0 && d_max > 0 {
        return Err(Error::Config(
            "rect_count 0 with d_max > 0 leaves the disparity range unused".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gt_i = vec![0usize; height * width];
    if d_max > 0 {
        // distinct disparities in 1..d_max, nearer rectangles drawn last
        let mut values: Vec<usize> = (1..d_max).collect();
        for i in (1..values.len()).rev() {
            values.swap(i, rng.gen_range(0..=i));
        }
        let mut chosen: Vec<usize> = values.into_iter().take(rect_count).collect();
        chosen.sort_unstable();
        for d in chosen {
            let rw = rng.gen_range(width / 5..=width / 2);
            let rh = rng.gen_range(height / 5..=height / 2);
            let x0 = rng.gen_range(0..width - rw);
            let y0 = rng.gen_range(0..height - rh);
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    gt_i[y * width + x] = d;
                }
            }
        }
    }
    // image appearance follows the geometry: each disparity level gets its
    // own brightness band over a shared noise texture, so region boundaries
    // are visible in the views the guidance reads
    let noise = noise_texture::<T>(&mut rng, height, width);
    let base = |g: usize| 0.15 + 0.7 * (g as f64 + 0.5) / d_max.max(1) as f64;
    let left_data: Vec<T> = noise
        .iter()
        .zip(&gt_i)
        .map(|(&n, &g)| {
            T::from_f64(base(g) + 0.16 * (n.to_f64().unwrap() - 0.5))
        })
        .collect();
    let mut right_data = vec![T::zero(); height * width];
    for y in 0..height {
        for x in 0..width {
            let g = gt_i[y * width + x];
            right_data[y * width + x] = if x + g < width {
                left_data[y * width + x + g]
            } else {
                // disoccluded at the image edge: fresh texture, masked out
                T::from_f64(rng.gen::<f64>())
            };
        }
    }
    // a left pixel x with disparity g is well-matched iff the right pixel
    // x - g was built from it, i.e. carries the same stored disparity
    let mut mask = vec![false; height * width];
    for y in 0..height {
        for x in 0..width {
            let g = gt_i[y * width + x];
            mask[y * width + x] = x >= g && gt_i[y * width + x - g] == g;
        }
    }
    Ok(SyntheticScene {
        left: FeatureMap::from_data(1, height, width, left_data)?,
        right: FeatureMap::from_data(1, height, width, right_data)?,
        gt: gt_i.iter().map(|&g| T::from_usize_(g)).collect(),
        mask,
        height,
        width,
        seed,
        d_max,
    })
}

/// Fixed 4-channel features from a 1-channel image: intensity, horizontal
/// and vertical central gradients, and 3x3 local variance, with replicated
/// borders.
pub fn extract_features<T: Real>(image: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if image.channels != 1 {
        return Err(Error::Shape(format!(
            "feature extraction wants a 1-channel image, got {}",
            image.channels
        )));
    }
    let (h, w) = (image.height, image.width);
    let mut out = FeatureMap::zeros(4, h, w);
    let half = T::from_f64(0.5);
    let inv9 = T::one() / T::from_usize_(9);
    let px = |y: i64, x: i64| {
        image.at(
            0,
            y.clamp(0, h as i64 - 1) as usize,
            x.clamp(0, w as i64 - 1) as usize,
        )
    };
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as i64, x as i64);
            *out.at_mut(0, y, x) = image.at(0, y, x);
            *out.at_mut(1, y, x) = (px(yi, xi + 1) - px(yi, xi - 1)) * half;
            *out.at_mut(2, y, x) = (px(yi + 1, xi) - px(yi - 1, xi)) * half;
            let mut sum = T::zero();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    sum += px(yi + dy, xi + dx);
                }
            }
            let mean = sum * inv9;
            let mut var = T::zero();
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let dev = px(yi + dy, xi + dx) - mean;
                    var += dev * dev;
                }
            }
            *out.at_mut(3, y, x) = var * inv9;
        }
    }
    Ok(out)
}

/// Absolute-difference matching cost: mean over channels of
/// |F_L(c,y,x) - F_R(c,y,x-d)|. Warped columns left of the image get the
/// per-volume maximum in-bounds cost.
pub fn build_cost_volume<T: Real>(
    f_l: &FeatureMap<T>,
    f_r: &FeatureMap<T>,
    disparities: usize,
) -> Result<CostVolume<T>> {
    if f_l.channels != f_r.channels || f_l.height != f_r.height || f_l.width != f_r.width {
        return Err(Error::Shape("feature maps must share a shape".into()));
    }
    if disparities > f_l.width {
        return Err(Error::Config(format!(
            "disparity count {disparities} exceeds image width {}",
            f_l.width
        )));
    }
    let (h, w, c) = (f_l.height, f_l.width, f_l.channels);
    let inv_c = T::one() / T::from_usize_(c);
    let mut cv = CostVolume::zeros(h, w, disparities);
    let mut max_cost = T::zero();
    for y in 0..h {
        for x in 0..w {
            for d in 0..disparities.min(x + 1) {
                let mut acc = T::zero();
                for ch in 0..c {
                    acc += (f_l.at(ch, y, x) - f_r.at(ch, y, x - d)).abs();
                }
                let cost = acc * inv_c;
                max_cost = max_cost.max(cost);
                *cv.at_mut(y, x, d) = cost;
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for d in x + 1..disparities {
                *cv.at_mut(y, x, d) = max_cost;
            }
        }
    }
    Ok(cv)
}

/// Differentiable disparity regression: the expectation of d under the
/// softmax of negated costs, per pixel.
pub fn soft_argmin<T: Real>(cv: &CostVolume<T>) -> Vec<T> {
    let (h, w, d) = (cv.height, cv.width, cv.disparities);
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut m = T::infinity();
            for dd in 0..d {
                m = m.min(cv.at(y, x, dd));
            }
            let mut sum = T::zero();
            let mut expect = T::zero();
            for dd in 0..d {
                let p = (m - cv.at(y, x, dd)).exp();
                sum += p;
                expect += T::from_usize_(dd) * p;
            }
            out[y * w + x] = expect / sum;
        }
    }
    out
}

/// Gradient of [`soft_argmin`] with respect to the costs:
/// d(d_hat)/d(cost_k) = -p_k (k - d_hat).
pub fn soft_argmin_backward<T: Real>(cv: &CostVolume<T>, upstream: &[T]) -> CostVolume<T> {
    let (h, w, d) = (cv.height, cv.width, cv.disparities);
    assert_eq!(upstream.len(), h * w);
    let mut grad = CostVolume::zeros(h, w, d);
    for y in 0..h {
        for x in 0..w {
            let mut m = T::infinity();
            for dd in 0..d {
                m = m.min(cv.at(y, x, dd));
            }
            let mut sum = T::zero();
            let mut probs = vec![T::zero(); d];
            for dd in 0..d {
                probs[dd] = (m - cv.at(y, x, dd)).exp();
                sum += probs[dd];
            }
            let mut d_hat = T::zero();
            for dd in 0..d {
                probs[dd] /= sum;
                d_hat += T::from_usize_(dd) * probs[dd];
            }
            let u = upstream[y * w + x];
            for dd in 0..d {
                *grad.at_mut(y, x, dd) = -u * probs[dd] * (T::from_usize_(dd) - d_hat);
            }
        }
    }
    grad
}

/// Masked smooth-L1: 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise, averaged
/// over the mask. Returns the loss and its exact gradient w.r.t. `pred`.
pub fn smooth_l1<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<(T, Vec<T>)> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape("loss inputs must share a shape".into()));
    }
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Config("empty mask".into()));
    }
    let inv_n = T::one() / T::from_usize_(n);
    let half = T::from_f64(0.5);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); pred.len()];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let e = pred[i] - gt[i];
        if e.abs() < T::one() {
            loss += half * e * e;
            grad[i] = e * inv_n;
        } else {
            loss += e.abs() - half;
            grad[i] = e.signum() * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Mean absolute disparity error over the mask.
pub fn epe<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<T> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape("metric inputs must share a shape".into()));
    }
    let mut n = 0usize;
    let mut acc = T::zero();
    for i in 0..pred.len() {
        if mask[i] {
            acc += (pred[i] - gt[i]).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config("empty mask".into()));
    }
    Ok(acc / T::from_usize_(n))
}

/// Fraction of masked pixels with absolute error above `delta`.
pub fn bad_ratio<T: Real>(pred: &[T], gt: &[T], mask: &[bool], delta: T) -> Result<T> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::Shape("metric inputs must share a shape".into()));
    }
    let mut n = 0usize;
    let mut bad = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            n += 1;
            if (pred[i] - gt[i]).abs() > delta {
                bad += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Config("empty mask".into()));
    }
    Ok(T::from_usize_(bad) / T::from_usize_(n))
}

/// Bias-corrected Adam with elementwise moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }
}

pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut [T], grads: &[T]) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::one() - state.beta1.powi(t);
    let bc2 = T::one() - state.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (T::one() - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (T::one() - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Which guidance fields the training / evaluation pipeline builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Separate left and right guidance from their own views.
    None,
    /// The left guidance is reused for both roles.
    LeftOnlyViews,
    /// Center-direction logits reused for every direction before the
    /// softmax (drops the explicit spatial-relationship encoding).
    NoEncoding,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub s: usize,
    pub height: usize,
    pub width: usize,
    pub d_max: usize,
    pub rects: usize,
    pub w_s: usize,
    pub w_d: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Fixed gain on the matching costs so the soft-argmin softmax works at
    /// a usable temperature; shared by the guided pipeline and the
    /// baselines.
    pub cost_gain: f64,
    pub ablation: Ablation,
    pub eval_scenes: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            iterations: 500,
            s: 2,
            height: 32,
            width: 32,
            d_max: 8,
            rects: 5,
            w_s: 3,
            w_d: 3,
            hidden: 16,
            lr: 0.03,
            cost_gain: 800.0,
            ablation: Ablation::None,
            eval_scenes: 4,
        }
    }

    /// Coarse disparity count; kept >= 2 so the coarse volume stays
    /// non-degenerate even when s reaches d_max.
    pub fn coarse_disparities(&self) -> usize {
        self.d_max.div_ceil(self.s).max(2)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub seed: u64,
    pub iterations: usize,
    pub losses: Vec<f64>,
    pub initial_epe: f64,
    pub final_epe: f64,
    pub trilinear_epe: f64,
    pub nearest_epe: f64,
}

impl TrainReport {
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("iterations = {}\n", self.iterations));
        if let Some(first) = self.losses.first() {
            out.push_str(&format!("loss_first = {first:.6}\n"));
        }
        if let Some(last) = self.losses.last() {
            out.push_str(&format!("loss_last = {last:.6}\n"));
        }
        out.push_str(&format!("epe_initial = {:.6}\n", self.initial_epe));
        out.push_str(&format!("epe_final = {:.6}\n", self.final_epe));
        out.push_str(&format!("epe_trilinear = {:.6}\n", self.trilinear_epe));
        out.push_str(&format!("epe_nearest = {:.6}\n", self.nearest_epe));
        out
    }
}

struct PreparedScene<T: Real> {
    scene: SyntheticScene<T>,
    feat_l_fine: FeatureMap<T>,
    feat_r_fine: FeatureMap<T>,
    feat_l_coarse: FeatureMap<T>,
    feat_r_coarse: FeatureMap<T>,
    cv_coarse: CostVolume<T>,
}

fn downscale<T: Real>(image: &FeatureMap<T>, s: usize) -> Result<FeatureMap<T>> {
    let mut out = image.clone();
    let mut factor = s;
    while factor > 1 {
        out = avg_pool2(&out)?;
        factor /= 2;
    }
    Ok(out)
}

fn prepare_scene<T: Real>(cfg: &TrainConfig, seed: u64) -> Result<PreparedScene<T>> {
    let scene = gen_scene::<T>(seed, cfg.height, cfg.width, cfg.rects, cfg.d_max)?;
    let feat_l_fine = extract_features(&scene.left)?;
    let feat_r_fine = extract_features(&scene.right)?;
    let feat_l_coarse = extract_features(&downscale(&scene.left, cfg.s)?)?;
    let feat_r_coarse = extract_features(&downscale(&scene.right, cfg.s)?)?;
    let mut cv_coarse =
        build_cost_volume(&feat_l_coarse, &feat_r_coarse, cfg.coarse_disparities())?;
    let gain = T::from_f64(cfg.cost_gain);
    for v in cv_coarse.data_mut() {
        *v *= gain;
    }
    Ok(PreparedScene {
        scene,
        feat_l_fine,
        feat_r_fine,
        feat_l_coarse,
        feat_r_coarse,
        cv_coarse,
    })
}

fn guidance_pair<T: Real>(
    params: &GuidanceParams<T>,
    p: &PreparedScene<T>,
    cfg: &TrainConfig,
) -> Result<(GuidanceField<T>, GuidanceField<T>)> {
    match cfg.ablation {
        Ablation::None => {
            let g_l =
                guidance_forward(params, &p.feat_l_fine, &p.feat_l_coarse, cfg.s, cfg.w_s, None)?;
            let g_r =
                guidance_forward(params, &p.feat_r_fine, &p.feat_r_coarse, cfg.s, cfg.w_s, None)?;
            Ok((g_l, g_r))
        }
        Ablation::LeftOnlyViews => {
            let g_l =
                guidance_forward(params, &p.feat_l_fine, &p.feat_l_coarse, cfg.s, cfg.w_s, None)?;
            Ok((g_l.clone(), g_l))
        }
        Ablation::NoEncoding => {
            let g_l = guidance_forward_unencoded(
                params,
                &p.feat_l_fine,
                &p.feat_l_coarse,
                cfg.s,
                cfg.w_s,
            )?;
            let g_r = guidance_forward_unencoded(
                params,
                &p.feat_r_fine,
                &p.feat_r_coarse,
                cfg.s,
                cfg.w_s,
            )?;
            Ok((g_l, g_r))
        }
    }
}

fn agg_config(cfg: &TrainConfig) -> AggregationConfig {
    let mut a = AggregationConfig::new(cfg.s);
    a.w_s = cfg.w_s;
    a.w_d = cfg.w_d;
    // keep the pipeline a convex combination of coarse costs: the center
    // rescaling would shrink every cost by roughly the center weight and
    // flatten the downstream soft-argmin relative to the fixed baselines
    a.left_center_scale = false;
    a
}

/// Disparity prediction from a fine-resolution volume whose d axis is in
/// coarse steps scaled by s: soft-argmin yields coarse units, so results
/// are compared to gt after multiplying by the step the fine axis encodes.
fn predict<T: Real>(fine: &CostVolume<T>) -> Vec<T> {
    soft_argmin(fine)
}

/// Held-out evaluation of one upsampling pipeline: mean EPE over the eval
/// scenes.
fn eval_epe<T: Real>(
    params: &GuidanceParams<T>,
    cfg: &TrainConfig,
    scenes: &[PreparedScene<T>],
    baseline: Option<BaselineMethod>,
) -> Result<f64> {
    let a = agg_config(cfg);
    let mut acc = 0.0f64;
    for p in scenes {
        let fine = match baseline {
            Some(m) => upsample_baseline(&p.cv_coarse, cfg.s, m)?,
            None => {
                let (g_l, g_r) = guidance_pair(params, p, cfg)?;
                cais_upsample(&p.cv_coarse, &g_l, &g_r, &a, None)?
            }
        };
        let pred = predict(&fine);
        acc += epe(&pred, &p.scene.gt, &p.scene.mask)?.to_f64().unwrap();
    }
    Ok(acc / scenes.len() as f64)
}

/// The toy training loop: fresh scene per iteration, full manual backward
/// chain from the smooth-L1 loss to the guidance parameters, Adam updates,
/// held-out EPE before and after, and fixed-weight baseline EPEs.
pub fn train_toy(cfg: &TrainConfig) -> Result<(GuidanceParams<f32>, TrainReport)> {
    let mut params = GuidanceParams::<f32>::seeded(4, cfg.hidden, cfg.seed ^ 0x5eed);
    let mut flat = params.flatten();
    let mut adam = AdamState::<f32>::new(flat.len(), cfg.lr);
    let a = agg_config(cfg);

    let eval_scenes: Vec<PreparedScene<f32>> = (0..cfg.eval_scenes)
        .map(|i| prepare_scene(cfg, cfg.seed.wrapping_mul(1000) + 900 + i as u64))
        .collect::<Result<_>>()?;

    let initial_epe = eval_epe(&params, cfg, &eval_scenes, None)?;
    let trilinear_epe = eval_epe(&params, cfg, &eval_scenes, Some(BaselineMethod::Trilinear))?;
    let nearest_epe = eval_epe(&params, cfg, &eval_scenes, Some(BaselineMethod::Nearest))?;

    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let p = prepare_scene::<f32>(cfg, cfg.seed.wrapping_mul(1000) + it as u64)?;
        let (g_l, g_r) = guidance_pair(&params, &p, cfg)?;
        let fine = cais_upsample(&p.cv_coarse, &g_l, &g_r, &a, None)?;
        let pred = predict(&fine);
        let (loss, d_pred) = smooth_l1(&pred, &p.scene.gt, &p.scene.mask)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss diverged at iteration {it}: {loss}"
            )));
        }
        losses.push(loss as f64);

        let d_fine = soft_argmin_backward(&fine, &d_pred);
        let grads = cais_backward(&p.cv_coarse, &g_l, &g_r, &a, &d_fine)?;
        let mut d_params = params.zeros_like();
        match cfg.ablation {
            Ablation::None => {
                let gl_grads = guidance_backward(
                    &params,
                    &p.feat_l_fine,
                    &p.feat_l_coarse,
                    cfg.s,
                    cfg.w_s,
                    &grads.d_gl,
                )?;
                let gr_grads = guidance_backward(
                    &params,
                    &p.feat_r_fine,
                    &p.feat_r_coarse,
                    cfg.s,
                    cfg.w_s,
                    &grads.d_gr,
                )?;
                accumulate_params(&mut d_params, &gl_grads.params);
                accumulate_params(&mut d_params, &gr_grads.params);
            }
            Ablation::LeftOnlyViews => {
                let mut upstream = grads.d_gl;
                for (u, &g) in upstream.data_mut().iter_mut().zip(grads.d_gr.data()) {
                    *u += g;
                }
                let gl_grads = guidance_backward(
                    &params,
                    &p.feat_l_fine,
                    &p.feat_l_coarse,
                    cfg.s,
                    cfg.w_s,
                    &upstream,
                )?;
                accumulate_params(&mut d_params, &gl_grads.params);
            }
            Ablation::NoEncoding => {
                // identical logits across directions make the softmax
                // exactly uniform independent of the parameters: zero grads
            }
        }
        let g_flat = d_params.flatten();
        adam_step(&mut adam, &mut flat, &g_flat);
        params = params.from_flat(&flat);
    }

    let final_epe = if cfg.iterations == 0 {
        initial_epe
    } else {
        eval_epe(&params, cfg, &eval_scenes, None)?
    };
    Ok((
        params,
        TrainReport {
            seed: cfg.seed,
            iterations: cfg.iterations,
            losses,
            initial_epe,
            final_epe,
            trilinear_epe,
            nearest_epe,
        },
    ))
}

fn accumulate_params<T: Real>(into: &mut GuidanceParams<T>, from: &GuidanceParams<T>) {
    let sum: Vec<T> = into
        .flatten()
        .iter()
        .zip(from.flatten())
        .map(|(&a, b)| a + b)
        .collect();
    *into = into.from_flat(&sum);
}

/// What [`gradcheck`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckTarget {
    Guidance,
    Cais,
    SoftArgmin,
    Loss,
    EndToEnd,
}

impl std::str::FromStr for GradcheckTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guidance" => Ok(Self::Guidance),
            "cais" => Ok(Self::Cais),
            "soft_argmin" => Ok(Self::SoftArgmin),
            "loss" => Ok(Self::Loss),
            "end_to_end" => Ok(Self::EndToEnd),
            other => Err(Error::Config(format!("unknown gradcheck target {other:?}"))),
        }
    }
}

const FD_STEP: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    (f(x0 + FD_STEP) - f(x0 - FD_STEP)) / (2.0 * FD_STEP)
}

/// Relative error of an analytic derivative against a central difference of
/// a piecewise-smooth function, or None when the step straddles a kink. Each
/// evaluation returns the value plus a hash of its active smoothness region
/// (ReLU sign patterns, loss-seam sides); if either perturbed evaluation
/// leaves the base point's region the finite difference estimates neither
/// one-sided derivative and the coordinate is skipped. Detection is exact,
/// so a wrong backward pass at a smooth coordinate is never masked.
fn fd_error_signed(
    mut f: impl FnMut(f64) -> (f64, u64),
    x0: f64,
    analytic: f64,
) -> Option<f64> {
    let (_, sig0) = f(x0);
    let (f_plus, sig_plus) = f(x0 + FD_STEP);
    let (f_minus, sig_minus) = f(x0 - FD_STEP);
    if sig_plus != sig0 || sig_minus != sig0 {
        return None;
    }
    let central = (f_plus - f_minus) / (2.0 * FD_STEP);
    Some(rel_err(analytic, central))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
}

/// Double-precision central-difference check of a manual backward pass.
/// Returns the maximum relative error over every input coordinate.
pub fn gradcheck(target: GradcheckTarget, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        GradcheckTarget::Cais => gradcheck_cais(&mut rng, 2),
        GradcheckTarget::Guidance => gradcheck_guidance(&mut rng, 2),
        GradcheckTarget::SoftArgmin => gradcheck_soft_argmin(&mut rng),
        GradcheckTarget::Loss => gradcheck_loss(&mut rng),
        GradcheckTarget::EndToEnd => gradcheck_end_to_end(&mut rng, 2),
    }
}

/// Same checks with the scale ratio pinned (used by the s=8 suite).
pub fn gradcheck_at_scale(target: GradcheckTarget, seed: u64, s: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match target {
        GradcheckTarget::Cais => gradcheck_cais(&mut rng, s),
        GradcheckTarget::Guidance => gradcheck_guidance(&mut rng, s),
        GradcheckTarget::SoftArgmin => gradcheck_soft_argmin(&mut rng),
        GradcheckTarget::Loss => gradcheck_loss(&mut rng),
        GradcheckTarget::EndToEnd => gradcheck_end_to_end(&mut rng, s),
    }
}

fn gradcheck_cais(rng: &mut ChaCha8Rng, s: usize) -> Result<f64> {
    let (h, w, d) = (2usize, 2usize, 2usize);
    let cfg = AggregationConfig::new(s);
    let cv = CostVolume::from_data(h, w, d, random_vec(rng, h * w * d))?;
    let k = cfg.w_s * cfg.w_s;
    let mut g_l = GuidanceField::<f64>::zeros(cfg.w_s, h * s, w * s);
    let mut g_r = GuidanceField::<f64>::zeros(cfg.w_s, h * s, w * s);
    // positive fields keep the stage-1 renormalization away from its
    // uniform fallback, where the function is only piecewise smooth
    for v in g_l.data_mut() {
        *v = 0.2 + rng.gen::<f64>();
    }
    for v in g_r.data_mut() {
        *v = 0.2 + rng.gen::<f64>();
    }
    let _ = k;
    let u = random_vec(rng, h * s * w * s * d * s);
    let upstream = CostVolume::from_data(h * s, w * s, d * s, u)?;
    let loss = |cv: &CostVolume<f64>, gl: &GuidanceField<f64>, gr: &GuidanceField<f64>| -> f64 {
        let out = cais_upsample(cv, gl, gr, &cfg, None).unwrap();
        out.data()
            .iter()
            .zip(upstream.data())
            .map(|(&a, &b)| a * b)
            .sum()
    };
    let grads = cais_backward(&cv, &g_l, &g_r, &cfg, &upstream)?;
    let mut max_err: f64 = 0.0;
    for i in 0..cv.data().len() {
        let num = central_diff(
            |v| {
                let mut c = cv.clone();
                c.data_mut()[i] = v;
                loss(&c, &g_l, &g_r)
            },
            cv.data()[i],
        );
        max_err = max_err.max(rel_err(grads.d_cv.data()[i], num));
    }
    for i in 0..g_l.data().len() {
        let num = central_diff(
            |v| {
                let mut g = g_l.clone();
                g.data_mut()[i] = v;
                loss(&cv, &g, &g_r)
            },
            g_l.data()[i],
        );
        max_err = max_err.max(rel_err(grads.d_gl.data()[i], num));
    }
    for i in 0..g_r.data().len() {
        let num = central_diff(
            |v| {
                let mut g = g_r.clone();
                g.data_mut()[i] = v;
                loss(&cv, &g_l, &g)
            },
            g_r.data()[i],
        );
        max_err = max_err.max(rel_err(grads.d_gr.data()[i], num));
    }
    Ok(max_err)
}

fn gradcheck_guidance(rng: &mut ChaCha8Rng, s: usize) -> Result<f64> {
    let (ch, hc, wc) = (3usize, 2usize, 2usize);
    let (hf, wf) = (hc * s, wc * s);
    let w_s = 3usize;
    let params = GuidanceParams::<f64>::seeded(ch, 5, rng.gen()).cast::<f64>();
    let f_f = FeatureMap::from_data(ch, hf, wf, random_vec(rng, ch * hf * wf))?;
    let f_c = FeatureMap::from_data(ch, hc, wc, random_vec(rng, ch * hc * wc))?;
    let mut upstream = GuidanceField::<f64>::zeros(w_s, hf, wf);
    for v in upstream.data_mut() {
        *v = rng.gen::<f64>() * 2.0 - 1.0;
    }
    // value plus ReLU sign-pattern hash, so kink crossings are skipped exactly
    let loss = |p: &GuidanceParams<f64>, ff: &FeatureMap<f64>, fc: &FeatureMap<f64>| -> (f64, u64) {
        let (g, sig) = guidance_forward_signed(p, ff, fc, s, w_s).unwrap();
        let v = g
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&a, &b)| a * b)
            .sum();
        (v, sig)
    };
    let grads = guidance_backward(&params, &f_f, &f_c, s, w_s, &upstream)?;
    let flat = params.flatten();
    let gflat = grads.params.flatten();
    let mut max_err: f64 = 0.0;
    for i in 0..flat.len() {
        if let Some(err) = fd_error_signed(
            |v| {
                let mut f = flat.clone();
                f[i] = v;
                loss(&params.from_flat(&f), &f_f, &f_c)
            },
            flat[i],
            gflat[i],
        ) {
            max_err = max_err.max(err);
        }
    }
    for i in 0..f_f.data().len() {
        if let Some(err) = fd_error_signed(
            |v| {
                let mut f = f_f.clone();
                f.data_mut()[i] = v;
                loss(&params, &f, &f_c)
            },
            f_f.data()[i],
            grads.d_fine.data()[i],
        ) {
            max_err = max_err.max(err);
        }
    }
    for i in 0..f_c.data().len() {
        if let Some(err) = fd_error_signed(
            |v| {
                let mut f = f_c.clone();
                f.data_mut()[i] = v;
                loss(&params, &f_f, &f)
            },
            f_c.data()[i],
            grads.d_coarse.data()[i],
        ) {
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

fn gradcheck_soft_argmin(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, d) = (3usize, 3usize, 4usize);
    let cv = CostVolume::from_data(h, w, d, random_vec(rng, h * w * d))?;
    let upstream = random_vec(rng, h * w);
    let loss = |cv: &CostVolume<f64>| -> f64 {
        soft_argmin(cv)
            .iter()
            .zip(&upstream)
            .map(|(&a, &b)| a * b)
            .sum()
    };
    let grad = soft_argmin_backward(&cv, &upstream);
    let mut max_err: f64 = 0.0;
    for i in 0..cv.data().len() {
        let num = central_diff(
            |v| {
                let mut c = cv.clone();
                c.data_mut()[i] = v;
                loss(&c)
            },
            cv.data()[i],
        );
        max_err = max_err.max(rel_err(grad.data()[i], num));
    }
    Ok(max_err)
}

fn gradcheck_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = 12usize;
    let pred = random_vec(rng, n).iter().map(|v| v * 2.0).collect::<Vec<_>>();
    let gt = random_vec(rng, n);
    let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
    let (_, grad) = smooth_l1(&pred, &gt, &mask)?;
    let mut max_err: f64 = 0.0;
    for i in 0..n {
        // the loss has kinks at |e| = 1; skip coordinates within the
        // finite-difference step of one
        if ((pred[i] - gt[i]).abs() - 1.0).abs() < 10.0 * FD_STEP {
            continue;
        }
        let num = central_diff(
            |v| {
                let mut p = pred.clone();
                p[i] = v;
                smooth_l1(&p, &gt, &mask).unwrap().0
            },
            pred[i],
        );
        max_err = max_err.max(rel_err(grad[i], num));
    }
    Ok(max_err)
}

fn gradcheck_end_to_end(rng: &mut ChaCha8Rng, s: usize) -> Result<f64> {
    let (ch, hc, wc, dc) = (4usize, 2usize, 2usize, 2usize);
    let (hf, wf) = (hc * s, wc * s);
    let w_s = 3usize;
    let cfg = AggregationConfig::new(s);
    let params = GuidanceParams::<f64>::seeded(ch, 5, rng.gen()).cast::<f64>();
    let f_lf = FeatureMap::from_data(ch, hf, wf, random_vec(rng, ch * hf * wf))?;
    let f_lc = FeatureMap::from_data(ch, hc, wc, random_vec(rng, ch * hc * wc))?;
    let f_rf = FeatureMap::from_data(ch, hf, wf, random_vec(rng, ch * hf * wf))?;
    let f_rc = FeatureMap::from_data(ch, hc, wc, random_vec(rng, ch * hc * wc))?;
    let cv = CostVolume::from_data(hc, wc, dc, random_vec(rng, hc * wc * dc))?;
    let gt = random_vec(rng, hf * wf);
    let mask = vec![true; hf * wf];
    // loss plus a hash of the active smoothness region: the two MLPs' ReLU
    // sign patterns and which side of the |e| = 1 loss seam each pixel is on
    let forward = |p: &GuidanceParams<f64>| -> (f64, u64) {
        let (g_l, sig_l) = guidance_forward_signed(p, &f_lf, &f_lc, s, w_s).unwrap();
        let (g_r, sig_r) = guidance_forward_signed(p, &f_rf, &f_rc, s, w_s).unwrap();
        let fine = cais_upsample(&cv, &g_l, &g_r, &cfg, None).unwrap();
        let pred = soft_argmin(&fine);
        let mut sig = sig_l.wrapping_mul(0x100000001b3) ^ sig_r;
        for (p, g) in pred.iter().zip(&gt) {
            sig = (sig ^ ((p - g).abs() < 1.0) as u64).wrapping_mul(0x100000001b3);
        }
        (smooth_l1(&pred, &gt, &mask).unwrap().0, sig)
    };
    // manual chain
    let g_l = guidance_forward(&params, &f_lf, &f_lc, s, w_s, None)?;
    let g_r = guidance_forward(&params, &f_rf, &f_rc, s, w_s, None)?;
    let fine = cais_upsample(&cv, &g_l, &g_r, &cfg, None)?;
    let pred = soft_argmin(&fine);
    let (_, d_pred) = smooth_l1(&pred, &gt, &mask)?;
    let d_fine = soft_argmin_backward(&fine, &d_pred);
    let grads = cais_backward(&cv, &g_l, &g_r, &cfg, &d_fine)?;
    let gl_grads = guidance_backward(&params, &f_lf, &f_lc, s, w_s, &grads.d_gl)?;
    let gr_grads = guidance_backward(&params, &f_rf, &f_rc, s, w_s, &grads.d_gr)?;
    let gflat: Vec<f64> = gl_grads
        .params
        .flatten()
        .iter()
        .zip(gr_grads.params.flatten())
        .map(|(&a, b)| a + b)
        .collect();
    let flat = params.flatten();
    let mut max_err: f64 = 0.0;
    for i in 0..flat.len() {
        if let Some(err) = fd_error_signed(
            |v| {
                let mut f = flat.clone();
                f[i] = v;
                forward(&params.from_flat(&f))
            },
            flat[i],
            gflat[i],
        ) {
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
