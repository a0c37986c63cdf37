//! Guidance generation: a fine/coarse feature pair is turned into per-pixel,
//! per-direction aggregation weights via explicit spatial-relationship
//! encoding (relative shifting plus integer location maps), a shared
//! three-layer 1x1 mapping and a softmax across directions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::instrument::FlopCounter;
use crate::tensor::{FeatureMap, Tensor};
use crate::{Error, Real, Result};

/// Integer-valued relative-displacement channels concatenated to the paired
/// features. `ps_x`/`ps_y` give the fine pixel's horizontal/vertical offset
/// to the targeted coarse cell, in fine pixels; the block pattern skips 0 and
/// is antisymmetric about the block center, with `ps_y` positive at the top.
#[derive(Debug, Clone)]
pub struct LocationMap<T: Real> {
    pub height: usize,
    pub width: usize,
    pub ps_x: Vec<T>,
    pub ps_y: Vec<T>,
}

/// Weights of the shared three-layer 1x1 mapping producing guidance logits.
/// One parameter set serves every direction and both views.
#[derive(Debug, Clone)]
pub struct GuidanceParams<T: Real> {
    pub in_dim: usize,
    pub hidden: usize,
    pub w1: Vec<T>, // hidden x in_dim
    pub b1: Vec<T>,
    pub w2: Vec<T>, // hidden x hidden
    pub b2: Vec<T>,
    pub w3: Vec<T>, // 1 x hidden
    pub b3: T,
}

impl<T: Real> GuidanceParams<T> {
    /// Seeded uniform init in +-sqrt(1/fan_in).
    pub fn seeded(channels: usize, hidden: usize, seed: u64) -> Self {
        let in_dim = 2 * channels + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, n: usize| -> Vec<T> {
            let bound = (1.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| T::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                .collect()
        };
        Self {
            in_dim,
            hidden,
            w1: uniform(in_dim, hidden * in_dim),
            b1: uniform(in_dim, hidden),
            w2: uniform(hidden, hidden * hidden),
            b2: uniform(hidden, hidden),
            w3: uniform(hidden, hidden),
            b3: uniform(hidden, 1)[0],
        }
    }

    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let in_dim = 2 * channels + 2;
        Self {
            in_dim,
            hidden,
            w1: vec![T::zero(); hidden * in_dim],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden * hidden],
            b2: vec![T::zero(); hidden],
            w3: vec![T::zero(); hidden],
            b3: T::zero(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            hidden: self.hidden,
            w1: vec![T::zero(); self.w1.len()],
            b1: vec![T::zero(); self.b1.len()],
            w2: vec![T::zero(); self.w2.len()],
            b2: vec![T::zero(); self.b2.len()],
            w3: vec![T::zero(); self.w3.len()],
            b3: T::zero(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(&self.w3);
        v.push(self.b3);
        v
    }

    pub fn from_flat(&self, flat: &[T]) -> Self {
        assert_eq!(flat.len(), self.num_params());
        let mut p = self.clone();
        let mut at = 0;
        for dst in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2, &mut p.w3] {
            let n = dst.len();
            dst.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        p.b3 = flat[at];
        p
    }

    pub fn cast<U: Real>(&self) -> GuidanceParams<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter().map(|&x| U::from_f64(x.to_f64().unwrap())).collect()
        };
        GuidanceParams {
            in_dim: self.in_dim,
            hidden: self.hidden,
            w1: conv(&self.w1),
            b1: conv(&self.b1),
            w2: conv(&self.w2),
            b2: conv(&self.b2),
            w3: conv(&self.w3),
            b3: U::from_f64(self.b3.to_f64().unwrap()),
        }
    }
}

impl GuidanceParams<f32> {
    /// One CVT1 tensor per layer: w1/b1/w2/b2/w3/b3 under `dir`.
    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let t = |shape: Vec<usize>, data: Vec<f32>| Tensor::new(shape, data);
        crate::tensor::write_tensor(
            dir.join("w1.cvt1"),
            &t(vec![self.hidden, self.in_dim], self.w1.clone())?,
        )?;
        crate::tensor::write_tensor(dir.join("b1.cvt1"), &t(vec![self.hidden], self.b1.clone())?)?;
        crate::tensor::write_tensor(
            dir.join("w2.cvt1"),
            &t(vec![self.hidden, self.hidden], self.w2.clone())?,
        )?;
        crate::tensor::write_tensor(dir.join("b2.cvt1"), &t(vec![self.hidden], self.b2.clone())?)?;
        crate::tensor::write_tensor(
            dir.join("w3.cvt1"),
            &t(vec![1, self.hidden], self.w3.clone())?,
        )?;
        crate::tensor::write_tensor(dir.join("b3.cvt1"), &t(vec![1], vec![self.b3])?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let w1 = crate::tensor::read_tensor(dir.join("w1.cvt1"))?;
        let [hidden, in_dim] = *w1.shape() else {
            return Err(Error::Shape(format!("w1 wants 2 dims, got {:?}", w1.shape())));
        };
        let b1 = crate::tensor::read_tensor(dir.join("b1.cvt1"))?;
        let w2 = crate::tensor::read_tensor(dir.join("w2.cvt1"))?;
        let b2 = crate::tensor::read_tensor(dir.join("b2.cvt1"))?;
        let w3 = crate::tensor::read_tensor(dir.join("w3.cvt1"))?;
        let b3 = crate::tensor::read_tensor(dir.join("b3.cvt1"))?;
        Ok(Self {
            in_dim,
            hidden,
            w1: w1.data().to_vec(),
            b1: b1.data().to_vec(),
            w2: w2.data().to_vec(),
            b2: b2.data().to_vec(),
            w3: w3.data().to_vec(),
            b3: b3.data()[0],
        })
    }
}

/// Per-direction nonnegative weight maps at fine resolution, softmax
/// normalized across the K = w_s^2 directions at every pixel.
#[derive(Debug, Clone)]
pub struct GuidanceField<T: Real> {
    pub window: usize,
    pub height: usize,
    pub width: usize,
    data: Vec<T>,
}

impl<T: Real> GuidanceField<T> {
    pub fn zeros(window: usize, height: usize, width: usize) -> Self {
        Self {
            window,
            height,
            width,
            data: vec![T::zero(); window * window * height * width],
        }
    }

    pub fn directions(&self) -> usize {
        self.window * self.window
    }

    pub fn radius(&self) -> i64 {
        (self.window as i64 - 1) / 2
    }

    /// Direction channel for offset (dir_x, dir_y); the center is K/2.
    #[inline]
    pub fn dir_index(&self, dir_x: i64, dir_y: i64) -> usize {
        let r = self.radius();
        ((dir_y + r) as usize) * self.window + (dir_x + r) as usize
    }

    #[inline]
    pub fn at(&self, k: usize, y: usize, x: usize) -> T {
        self.data[(k * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize, y: usize, x: usize) -> &mut T {
        &mut self.data[(k * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// All weight on the center direction: the degenerate field that turns
    /// every aggregation path into nearest-neighbor upsampling.
    pub fn one_hot_center(window: usize, height: usize, width: usize) -> Self {
        let mut g = Self::zeros(window, height, width);
        let k = (window * window - 1) / 2;
        for y in 0..height {
            for x in 0..width {
                *g.at_mut(k, y, x) = T::one();
            }
        }
        g
    }

    pub fn uniform(window: usize, height: usize, width: usize) -> Self {
        let k = window * window;
        let v = T::one() / T::from_usize_(k);
        let mut g = Self::zeros(window, height, width);
        g.data.iter_mut().for_each(|e| *e = v);
        g
    }

    pub fn cast<U: Real>(&self) -> GuidanceField<U> {
        GuidanceField {
            window: self.window,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

impl GuidanceField<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.directions(), self.height, self.width],
            self.data.clone(),
        )
        .expect("guidance field is always a valid tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [k, h, w] = *t.shape() else {
            return Err(Error::Shape(format!(
                "guidance field wants a 3D tensor, got {:?}",
                t.shape()
            )));
        };
        let window = (k as f64).sqrt().round() as usize;
        if window * window != k || window % 2 == 0 {
            return Err(Error::Shape(format!(
                "direction count {k} is not an odd square"
            )));
        }
        Ok(Self {
            window,
            height: h,
            width: w,
            data: t.data().to_vec(),
        })
    }
}

pub fn check_scale(s: usize) -> Result<()> {
    if ![2, 4, 8].contains(&s) {
        return Err(Error::Config(format!("unsupported scale ratio {s}")));
    }
    Ok(())
}

/// Blockwise copy of the coarse map to fine resolution.
pub fn nearest_expand<T: Real>(f_c: &FeatureMap<T>, s: usize) -> Result<FeatureMap<T>> {
    check_scale(s)?;
    let mut out = FeatureMap::zeros(f_c.channels, f_c.height * s, f_c.width * s);
    for c in 0..f_c.channels {
        for y in 0..out.height {
            for x in 0..out.width {
                *out.at_mut(c, y, x) = f_c.at(c, y / s, x / s);
            }
        }
    }
    Ok(out)
}

/// In-block signed offset pattern that skips zero: for o in [0, s) the value
/// is o - s/2 below the center and o - s/2 + 1 at or above it.
#[inline]
fn block_offset(s: usize, o: usize) -> i64 {
    let half = (s / 2) as i64;
    let o = o as i64;
    if o < half {
        o - half
    } else {
        o - half + 1
    }
}

pub fn make_location_map<T: Real>(
    s: usize,
    dir: (i64, i64),
    w_s: usize,
    fine_height: usize,
    fine_width: usize,
) -> Result<LocationMap<T>> {
    check_scale(s)?;
    let r = (w_s as i64 - 1) / 2;
    if dir.0.abs() > r || dir.1.abs() > r {
        return Err(Error::Config(format!(
            "direction {dir:?} outside window {w_s}"
        )));
    }
    let (dx, dy) = dir;
    let mut ps_x = Vec::with_capacity(fine_height * fine_width);
    let mut ps_y = Vec::with_capacity(fine_height * fine_width);
    for y in 0..fine_height {
        let vy = -block_offset(s, y % s) + s as i64 * dy;
        for x in 0..fine_width {
            let vx = block_offset(s, x % s) - s as i64 * dx;
            ps_x.push(T::from_f64(vx as f64));
            ps_y.push(T::from_f64(vy as f64));
        }
    }
    Ok(LocationMap {
        height: fine_height,
        width: fine_width,
        ps_x,
        ps_y,
    })
}

fn check_pair<T: Real>(
    params: &GuidanceParams<T>,
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    s: usize,
) -> Result<()> {
    if f_f.channels != f_c.channels {
        return Err(Error::Shape(format!(
            "channel mismatch: fine {} vs coarse {}",
            f_f.channels, f_c.channels
        )));
    }
    if f_f.height != f_c.height * s || f_f.width != f_c.width * s {
        return Err(Error::Shape(format!(
            "fine {}x{} is not {s}x the coarse {}x{}",
            f_f.height, f_f.width, f_c.height, f_c.width
        )));
    }
    if params.in_dim != 2 * f_f.channels + 2 {
        return Err(Error::Shape(format!(
            "params want input width {}, feature pair provides {}",
            params.in_dim,
            2 * f_f.channels + 2
        )));
    }
    Ok(())
}

struct MlpScratch<T> {
    input: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
}

impl<T: Real> MlpScratch<T> {
    fn new(in_dim: usize, hidden: usize) -> Self {
        Self {
            input: vec![T::zero(); in_dim],
            z1: vec![T::zero(); hidden],
            a1: vec![T::zero(); hidden],
            z2: vec![T::zero(); hidden],
            a2: vec![T::zero(); hidden],
        }
    }
}

/// Fills `scratch.input` with [fine features ; coarse lookup or zeros ; ps].
fn fill_input<T: Real>(
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    ps: &LocationMap<T>,
    s: usize,
    dir: (i64, i64),
    y: usize,
    x: usize,
    input: &mut [T],
) {
    let c = f_f.channels;
    for ch in 0..c {
        input[ch] = f_f.at(ch, y, x);
    }
    let cy = (y / s) as i64 + dir.1;
    let cx = (x / s) as i64 + dir.0;
    if cy >= 0 && cy < f_c.height as i64 && cx >= 0 && cx < f_c.width as i64 {
        for ch in 0..c {
            input[c + ch] = f_c.at(ch, cy as usize, cx as usize);
        }
    } else {
        // the zero-padded shift of Fig-style construction
        for slot in input.iter_mut().skip(c).take(c) {
            *slot = T::zero();
        }
    }
    input[2 * c] = ps.ps_x[y * ps.width + x];
    input[2 * c + 1] = ps.ps_y[y * ps.width + x];
}

fn mlp_forward<T: Real>(params: &GuidanceParams<T>, sc: &mut MlpScratch<T>) -> T {
    let (h, n) = (params.hidden, params.in_dim);
    for i in 0..h {
        let mut z = params.b1[i];
        for j in 0..n {
            z += params.w1[i * n + j] * sc.input[j];
        }
        sc.z1[i] = z;
        sc.a1[i] = z.max(T::zero());
    }
    for i in 0..h {
        let mut z = params.b2[i];
        for j in 0..h {
            z += params.w2[i * h + j] * sc.a1[j];
        }
        sc.z2[i] = z;
        sc.a2[i] = z.max(T::zero());
    }
    let mut out = params.b3;
    for j in 0..h {
        out += params.w3[j] * sc.a2[j];
    }
    out
}

/// Logit map for one direction: the shared MLP applied per fine pixel to the
/// paired features and location channels. Coarse lookups falling outside the
/// coarse grid contribute a zero feature vector.
pub fn guidance_logit_map<T: Real>(
    params: &GuidanceParams<T>,
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    dir: (i64, i64),
    s: usize,
    w_s: usize,
) -> Result<Vec<T>> {
    check_pair(params, f_f, f_c, s)?;
    let ps = make_location_map::<T>(s, dir, w_s, f_f.height, f_f.width)?;
    let mut sc = MlpScratch::new(params.in_dim, params.hidden);
    let mut out = Vec::with_capacity(f_f.height * f_f.width);
    for y in 0..f_f.height {
        for x in 0..f_f.width {
            fill_input(f_f, f_c, &ps, s, dir, y, x, &mut sc.input);
            out.push(mlp_forward(params, &mut sc));
        }
    }
    Ok(out)
}

fn softmax_rows<T: Real>(logits: &[Vec<T>], field: &mut GuidanceField<T>) {
    let k = logits.len();
    let n = field.height * field.width;
    for p in 0..n {
        let mut m = logits[0][p];
        for l in logits.iter().skip(1) {
            m = m.max(l[p]);
        }
        let mut sum = T::zero();
        for (ki, l) in logits.iter().enumerate() {
            let e = (l[p] - m).exp();
            field.data_mut()[ki * n + p] = e;
            sum += e;
        }
        for ki in 0..k {
            field.data_mut()[ki * n + p] /= sum;
        }
    }
}

fn mlp_flops(params: &GuidanceParams<impl Real>) -> (u64, u64) {
    let (h, n) = (params.hidden as u64, params.in_dim as u64);
    let muls = h * n + h * h + h;
    let adds = h * n + h * h + h + (2 * h + 1); // MAC adds plus bias adds
    (muls, adds)
}

/// Tally of the shared-MLP and softmax cost of one guidance evaluation,
/// mirrored by the analytic model.
pub fn count_guidance_flops(
    params: &GuidanceParams<impl Real>,
    w_s: usize,
    height: usize,
    width: usize,
    counter: &mut FlopCounter,
) {
    let k = (w_s * w_s) as u64;
    let pixels = (height * width) as u64;
    let (muls, adds) = mlp_flops(params);
    counter.muls(pixels * k * muls);
    counter.adds(pixels * k * adds);
    // stable softmax: K max-subtractions and K sum-adds, K exps, K divides
    counter.adds(pixels * 2 * k);
    counter.exps(pixels * k);
    counter.divs(pixels * k);
}

/// Computes logit maps for all K = w_s^2 directions with the shared
/// parameters, then a softmax across the direction axis per fine pixel. All
/// directions participate in the softmax, in-bounds or not.
pub fn guidance_forward<T: Real>(
    params: &GuidanceParams<T>,
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    s: usize,
    w_s: usize,
    mut counter: Option<&mut FlopCounter>,
) -> Result<GuidanceField<T>> {
    if w_s % 2 == 0 || w_s == 0 {
        return Err(Error::Config(format!("window {w_s} must be odd and >= 1")));
    }
    check_pair(params, f_f, f_c, s)?;
    let r = (w_s as i64 - 1) / 2;
    let mut logits = Vec::with_capacity(w_s * w_s);
    for dy in -r..=r {
        for dx in -r..=r {
            logits.push(guidance_logit_map(params, f_f, f_c, (dx, dy), s, w_s)?);
        }
    }
    let mut field = GuidanceField::zeros(w_s, f_f.height, f_f.width);
    softmax_rows(&logits, &mut field);
    if let Some(c) = counter.as_deref_mut() {
        count_guidance_flops(params, w_s, f_f.height, f_f.width, c);
    }
    Ok(field)
}

/// [`guidance_forward`] plus an FNV hash of the ReLU activation-sign pattern
/// across all directions and pixels. Finite-difference checks compare the
/// hash between perturbed evaluations to detect kink crossings exactly,
/// without thresholds.
pub fn guidance_forward_signed<T: Real>(
    params: &GuidanceParams<T>,
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    s: usize,
    w_s: usize,
) -> Result<(GuidanceField<T>, u64)> {
    if w_s % 2 == 0 || w_s == 0 {
        return Err(Error::Config(format!("window {w_s} must be odd and >= 1")));
    }
    check_pair(params, f_f, f_c, s)?;
    let r = (w_s as i64 - 1) / 2;
    let mut sc = MlpScratch::new(params.in_dim, params.hidden);
    let mut sig = 0xcbf29ce484222325u64;
    let mut hash_bit = |b: bool| {
        sig = (sig ^ b as u64).wrapping_mul(0x100000001b3);
    };
    let mut logits = Vec::with_capacity(w_s * w_s);
    for dy in -r..=r {
        for dx in -r..=r {
            let ps = make_location_map::<T>(s, (dx, dy), w_s, f_f.height, f_f.width)?;
            let mut map = Vec::with_capacity(f_f.height * f_f.width);
            for y in 0..f_f.height {
                for x in 0..f_f.width {
                    fill_input(f_f, f_c, &ps, s, (dx, dy), y, x, &mut sc.input);
                    map.push(mlp_forward(params, &mut sc));
                    for z in sc.z1.iter().chain(&sc.z2) {
                        hash_bit(*z > T::zero());
                    }
                }
            }
            logits.push(map);
        }
    }
    let mut field = GuidanceField::zeros(w_s, f_f.height, f_f.width);
    softmax_rows(&logits, &mut field);
    Ok((field, sig))
}

/// Ablated forward for the no-explicit-encoding study: the center-direction
/// logit map is computed once and reused for every direction before the
/// softmax, so the field degenerates to the uniform 1/K weighting.
pub fn guidance_forward_unencoded<T: Real>(
    params: &GuidanceParams<T>,
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    s: usize,
    w_s: usize,
) -> Result<GuidanceField<T>> {
    if w_s % 2 == 0 || w_s == 0 {
        return Err(Error::Config(format!("window {w_s} must be odd and >= 1")));
    }
    let center = guidance_logit_map(params, f_f, f_c, (0, 0), s, w_s)?;
    let logits = vec![center; w_s * w_s];
    let mut field = GuidanceField::zeros(w_s, f_f.height, f_f.width);
    softmax_rows(&logits, &mut field);
    Ok(field)
}

/// Gradients produced by [`guidance_backward`].
#[derive(Debug, Clone)]
pub struct GuidanceGrads<T: Real> {
    pub params: GuidanceParams<T>,
    pub d_fine: FeatureMap<T>,
    pub d_coarse: FeatureMap<T>,
}

/// Exact vector-Jacobian product of [`guidance_forward`] with respect to the
/// parameters and both feature maps. ReLU uses subgradient 0 at exactly 0.
pub fn guidance_backward<T: Real>(
    params: &GuidanceParams<T>,
    f_f: &FeatureMap<T>,
    f_c: &FeatureMap<T>,
    s: usize,
    w_s: usize,
    upstream: &GuidanceField<T>,
) -> Result<GuidanceGrads<T>> {
    if upstream.window != w_s || upstream.height != f_f.height || upstream.width != f_f.width {
        return Err(Error::Shape(format!(
            "upstream {}x{}x{} does not match guidance {}x{}x{}",
            upstream.directions(),
            upstream.height,
            upstream.width,
            w_s * w_s,
            f_f.height,
            f_f.width
        )));
    }
    check_pair(params, f_f, f_c, s)?;
    let r = (w_s as i64 - 1) / 2;
    let k = w_s * w_s;
    let (h, n) = (params.hidden, params.in_dim);

    let mut dirs = Vec::with_capacity(k);
    let mut maps = Vec::with_capacity(k);
    for dy in -r..=r {
        for dx in -r..=r {
            dirs.push((dx, dy));
            maps.push(make_location_map::<T>(s, (dx, dy), w_s, f_f.height, f_f.width)?);
        }
    }

    let mut grads = GuidanceGrads {
        params: params.zeros_like(),
        d_fine: FeatureMap::zeros(f_f.channels, f_f.height, f_f.width),
        d_coarse: FeatureMap::zeros(f_c.channels, f_c.height, f_c.width),
    };
    let c = f_f.channels;
    let mut scratch: Vec<MlpScratch<T>> = (0..k).map(|_| MlpScratch::new(n, h)).collect();
    let mut logits = vec![T::zero(); k];
    let mut probs = vec![T::zero(); k];
    let mut da1 = vec![T::zero(); h];
    let mut da2 = vec![T::zero(); h];
    let mut dz1 = vec![T::zero(); h];
    let mut dz2 = vec![T::zero(); h];
    let mut dinput = vec![T::zero(); n];

    for y in 0..f_f.height {
        for x in 0..f_f.width {
            for ki in 0..k {
                fill_input(f_f, f_c, &maps[ki], s, dirs[ki], y, x, &mut scratch[ki].input);
                logits[ki] = mlp_forward(params, &mut scratch[ki]);
            }
            // softmax and its VJP: dl_k = p_k * (u_k - sum_j u_j p_j)
            let m = logits.iter().cloned().fold(logits[0], |a, b| a.max(b));
            let mut sum = T::zero();
            for ki in 0..k {
                probs[ki] = (logits[ki] - m).exp();
                sum += probs[ki];
            }
            let mut dot = T::zero();
            for ki in 0..k {
                probs[ki] /= sum;
                dot += upstream.at(ki, y, x) * probs[ki];
            }
            for ki in 0..k {
                let dl = probs[ki] * (upstream.at(ki, y, x) - dot);
                if dl == T::zero() {
                    continue;
                }
                let sc = &scratch[ki];
                // layer 3
                grads.params.b3 += dl;
                for j in 0..h {
                    grads.params.w3[j] += dl * sc.a2[j];
                    da2[j] = dl * params.w3[j];
                }
                // layer 2
                for i in 0..h {
                    dz2[i] = if sc.z2[i] > T::zero() { da2[i] } else { T::zero() };
                    grads.params.b2[i] += dz2[i];
                }
                da1.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..h {
                    if dz2[i] == T::zero() {
                        continue;
                    }
                    for j in 0..h {
                        grads.params.w2[i * h + j] += dz2[i] * sc.a1[j];
                        da1[j] += dz2[i] * params.w2[i * h + j];
                    }
                }
                // layer 1
                dinput.iter_mut().for_each(|v| *v = T::zero());
                for i in 0..h {
                    dz1[i] = if sc.z1[i] > T::zero() { da1[i] } else { T::zero() };
                    grads.params.b1[i] += dz1[i];
                    if dz1[i] == T::zero() {
                        continue;
                    }
                    for j in 0..n {
                        grads.params.w1[i * n + j] += dz1[i] * sc.input[j];
                        dinput[j] += dz1[i] * params.w1[i * n + j];
                    }
                }
                for ch in 0..c {
                    *grads.d_fine.at_mut(ch, y, x) += dinput[ch];
                }
                let cy = (y / s) as i64 + dirs[ki].1;
                let cx = (x / s) as i64 + dirs[ki].0;
                if cy >= 0 && cy < f_c.height as i64 && cx >= 0 && cx < f_c.width as i64 {
                    for ch in 0..c {
                        *grads.d_coarse.at_mut(ch, cy as usize, cx as usize) += dinput[c + ch];
                    }
                }
                // location channels are constants; no gradient flows to them
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_feature_pair(seed: u64, c: usize, ch: usize, cw: usize, s: usize) -> (FeatureMap<f64>, FeatureMap<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |n: usize| (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect::<Vec<_>>();
        let f_c = FeatureMap::from_data(c, ch, cw, fill(c * ch * cw)).unwrap();
        let f_f = FeatureMap::from_data(c, ch * s, cw * s, fill(c * ch * cw * s * s)).unwrap();
        (f_f, f_c)
    }

    #[test]
    fn nearest_expand_blockwise() {
        let f = FeatureMap::from_data(1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let e = nearest_expand(&f, 2).unwrap();
        assert_eq!(
            e.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let one = FeatureMap::from_data(1, 1, 1, vec![5.0f32]).unwrap();
        assert_eq!(nearest_expand(&one, 4).unwrap().data(), &[5.0f32; 16]);
        assert!(matches!(nearest_expand(&one, 3), Err(Error::Config(_))));
    }

    #[test]
    fn location_map_matches_center_pattern_s4() {
        let ps = make_location_map::<f32>(4, (0, 0), 3, 4, 4).unwrap();
        for y in 0..4 {
            assert_eq!(&ps.ps_x[y * 4..y * 4 + 4], &[-2.0, -1.0, 1.0, 2.0]);
        }
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(ps.ps_y[y * 4 + x], [2.0, 1.0, -1.0, -2.0][y]);
            }
        }
    }

    #[test]
    fn location_map_s2_and_shifted() {
        let ps = make_location_map::<f32>(2, (0, 0), 3, 2, 2).unwrap();
        assert_eq!(&ps.ps_x[0..2], &[-1.0, 1.0]);
        assert_eq!(ps.ps_y[0], 1.0);
        assert_eq!(ps.ps_y[2], -1.0);

        let ps = make_location_map::<f32>(4, (1, 0), 3, 4, 4).unwrap();
        assert_eq!(&ps.ps_x[0..4], &[-6.0, -5.0, -3.0, -2.0]);

        assert!(matches!(
            make_location_map::<f32>(4, (2, 0), 3, 4, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn location_map_is_periodic_antisymmetric_nonzero() {
        for s in [2usize, 4, 8] {
            let ps = make_location_map::<f32>(s, (0, 0), 3, 2 * s, 2 * s).unwrap();
            for y in 0..2 * s {
                for x in 0..2 * s {
                    let vx = ps.ps_x[y * 2 * s + x];
                    let vy = ps.ps_y[y * 2 * s + x];
                    assert_eq!(vx, ps.ps_x[(y % s) * 2 * s + (x % s)]);
                    assert_eq!(vy, ps.ps_y[(y % s) * 2 * s + (x % s)]);
                    assert!(vx != 0.0 && vy != 0.0);
                    assert_eq!(vx.fract(), 0.0);
                    // antisymmetry about the block center
                    let mirror_x = ps.ps_x[y * 2 * s + (s - 1 - (x % s))];
                    assert_eq!(vx, -mirror_x);
                }
            }
        }
    }

    #[test]
    fn zero_params_give_zero_logits_and_uniform_field() {
        let (f_f, f_c) = random_feature_pair(1, 3, 2, 2, 2);
        let params = GuidanceParams::<f64>::zeros(3, 8);
        let l = guidance_logit_map(&params, &f_f, &f_c, (0, 0), 2, 3).unwrap();
        assert!(l.iter().all(|&v| v == 0.0));
        let g = guidance_forward(&params, &f_f, &f_c, 2, 3, None).unwrap();
        for &v in g.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_only_params_give_constant_map() {
        let (f_f, f_c) = random_feature_pair(2, 2, 2, 2, 2);
        let mut params = GuidanceParams::<f64>::zeros(2, 4);
        params.b3 = 2.5;
        let l = guidance_logit_map(&params, &f_f, &f_c, (1, -1), 2, 3).unwrap();
        assert!(l.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn logit_map_matches_scalar_oracle_with_oob_zero_fill() {
        // 4x4/2x2 pair, s=2, dir=(1,1): corner lookups run out of bounds
        let (f_f, f_c) = random_feature_pair(3, 2, 2, 2, 2);
        let params = GuidanceParams::<f64>::seeded(2, 5, 7);
        let dir = (1i64, 1i64);
        let got = guidance_logit_map(&params, &f_f, &f_c, dir, 2, 3).unwrap();
        let ps = make_location_map::<f64>(2, dir, 3, 4, 4).unwrap();
        for y in 0..4usize {
            for x in 0..4usize {
                // hand-rolled scalar evaluation
                let mut input = vec![0.0f64; 6];
                input[0] = f_f.at(0, y, x);
                input[1] = f_f.at(1, y, x);
                let (cy, cx) = (y / 2 + 1, x / 2 + 1);
                if cy < 2 && cx < 2 {
                    input[2] = f_c.at(0, cy, cx);
                    input[3] = f_c.at(1, cy, cx);
                }
                input[4] = ps.ps_x[y * 4 + x];
                input[5] = ps.ps_y[y * 4 + x];
                let mut a1 = vec![0.0f64; 5];
                for i in 0..5 {
                    let mut z = params.b1[i];
                    for j in 0..6 {
                        z += params.w1[i * 6 + j] * input[j];
                    }
                    a1[i] = z.max(0.0);
                }
                let mut a2 = vec![0.0f64; 5];
                for i in 0..5 {
                    let mut z = params.b2[i];
                    for j in 0..5 {
                        z += params.w2[i * 5 + j] * a1[j];
                    }
                    a2[i] = z.max(0.0);
                }
                let mut o = params.b3;
                for j in 0..5 {
                    o += params.w3[j] * a2[j];
                }
                assert_eq!(got[y * 4 + x], o);
            }
        }
    }

    #[test]
    fn field_sums_to_one_and_is_nonnegative() {
        let (f_f, f_c) = random_feature_pair(4, 4, 3, 3, 2);
        let params = GuidanceParams::<f64>::seeded(4, 16, 11);
        let g = guidance_forward(&params, &f_f, &f_c, 2, 3, None).unwrap();
        let n = g.height * g.width;
        for p in 0..n {
            let mut sum = 0.0;
            for ki in 0..g.directions() {
                let v = g.data()[ki * n + p];
                assert!(v >= 0.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn field_is_invariant_to_logit_bias() {
        let (f_f, f_c) = random_feature_pair(5, 3, 2, 3, 2);
        let mut params = GuidanceParams::<f64>::seeded(3, 8, 13);
        let g0 = guidance_forward(&params, &f_f, &f_c, 2, 3, None).unwrap();
        params.b3 += 10.0;
        let g1 = guidance_forward(&params, &f_f, &f_c, 2, 3, None).unwrap();
        for (a, b) in g0.data().iter().zip(g1.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn closed_form_lookup_matches_pad_and_shift() {
        let (f_f, f_c) = random_feature_pair(6, 2, 3, 4, 2);
        let s = 2usize;
        let expanded = nearest_expand(&f_c, s).unwrap();
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                for y in 0..f_f.height {
                    for x in 0..f_f.width {
                        // explicit shift of the expanded map by s*dir with zero fill
                        let sy = y as i64 + s as i64 * dy;
                        let sx = x as i64 + s as i64 * dx;
                        let shifted = if sy >= 0
                            && sy < expanded.height as i64
                            && sx >= 0
                            && sx < expanded.width as i64
                        {
                            expanded.at(0, sy as usize, sx as usize)
                        } else {
                            0.0
                        };
                        let cy = (y / s) as i64 + dy;
                        let cx = (x / s) as i64 + dx;
                        let closed = if cy >= 0
                            && cy < f_c.height as i64
                            && cx >= 0
                            && cx < f_c.width as i64
                        {
                            f_c.at(0, cy as usize, cx as usize)
                        } else {
                            0.0
                        };
                        assert_eq!(shifted, closed);
                    }
                }
            }
        }
    }

    #[test]
    fn swapping_direction_location_maps_changes_logits() {
        let (f_f, f_c) = random_feature_pair(7, 2, 2, 2, 2);
        let params = GuidanceParams::<f64>::seeded(2, 8, 17);
        // direction (1,0) evaluated with its own map vs with (0,1)'s map
        let own = guidance_logit_map(&params, &f_f, &f_c, (1, 0), 2, 3).unwrap();
        // rebuild with the wrong location map by evaluating manually
        let wrong_ps = make_location_map::<f64>(2, (0, 1), 3, 4, 4).unwrap();
        let mut sc = MlpScratch::new(params.in_dim, params.hidden);
        let mut changed = false;
        for y in 0..4usize {
            for x in 0..4usize {
                fill_input(&f_f, &f_c, &wrong_ps, 2, (1, 0), y, x, &mut sc.input);
                let v = mlp_forward(&params, &mut sc);
                if v != own[y * 4 + x] {
                    changed = true;
                }
            }
        }
        assert!(changed);
    }

    #[test]
    fn backward_zero_upstream_and_constant_upstream() {
        let (f_f, f_c) = random_feature_pair(8, 2, 2, 2, 2);
        let params = GuidanceParams::<f64>::seeded(2, 6, 19);
        let zero = GuidanceField::<f64>::zeros(3, 4, 4);
        let g = guidance_backward(&params, &f_f, &f_c, 2, 3, &zero).unwrap();
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
        assert!(g.d_fine.data().iter().all(|&v| v == 0.0));

        // constant across directions per pixel: softmax annihilates it
        let mut constant = GuidanceField::<f64>::zeros(3, 4, 4);
        constant.data_mut().iter_mut().for_each(|v| *v = 0.37);
        let g = guidance_backward(&params, &f_f, &f_c, 2, 3, &constant).unwrap();
        for v in g.params.flatten() {
            assert!(v.abs() < 1e-6, "param grad {v} should vanish");
        }
    }

    #[test]
    fn unencoded_forward_is_uniform() {
        let (f_f, f_c) = random_feature_pair(9, 3, 2, 2, 2);
        let params = GuidanceParams::<f64>::seeded(3, 8, 23);
        let g = guidance_forward_unencoded(&params, &f_f, &f_c, 2, 3).unwrap();
        for &v in g.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let p = GuidanceParams::<f32>::seeded(4, 16, 3);
        p.save(dir.path()).unwrap();
        let q = GuidanceParams::<f32>::load(dir.path()).unwrap();
        assert_eq!(p.flatten(), q.flatten());
    }
}
