//! Inter-scale cost aggregation: the decomposed 1D-disparity + 2D-spatial
//! upsampling pipeline, the full 3D spatial-disparity reference path, the
//! fixed-weight baselines and the exact backward passes.
//!
//! The coarse-to-fine weights are built on the fly from the two 2D guidance
//! fields: the left field is read at the fine pixel itself and the right
//! field at the disparity-warped column, with the direction channel picked
//! by the offset between the targeted coarse cell and the warped fine
//! pixel's own cell.

use rayon::prelude::*;

use crate::guidance::GuidanceField;
use crate::instrument::FlopCounter;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// 3D matching-cost grid over (row, column, disparity); lower cost means a
/// better match. Row-major with disparity fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume<T: Real> {
    pub height: usize,
    pub width: usize,
    pub disparities: usize,
    data: Vec<T>,
}

impl<T: Real> CostVolume<T> {
    pub fn zeros(height: usize, width: usize, disparities: usize) -> Self {
        Self {
            height,
            width,
            disparities,
            data: vec![T::zero(); height * width * disparities],
        }
    }

    pub fn from_data(height: usize, width: usize, disparities: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * disparities {
            return Err(Error::Shape(format!(
                "cost volume {height}x{width}x{disparities} wants {} values, got {}",
                height * width * disparities,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            disparities,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, d: usize) -> T {
        self.data[(y * self.width + x) * self.disparities + d]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, d: usize) -> &mut T {
        &mut self.data[(y * self.width + x) * self.disparities + d]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn cast<U: Real>(&self) -> CostVolume<U> {
        CostVolume {
            height: self.height,
            width: self.width,
            disparities: self.disparities,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

impl CostVolume<f32> {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, self.disparities],
            self.data.clone(),
        )
        .expect("cost volume is always a valid tensor")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w, d] = *t.shape() else {
            return Err(Error::Shape(format!(
                "cost volume wants a 3D tensor, got {:?}",
                t.shape()
            )));
        };
        Self::from_data(h, w, d, t.data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockReduce {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Nearest,
    Trilinear,
    DeconvBilinear,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "trilinear" => Ok(Self::Trilinear),
            "deconv_bilinear" => Ok(Self::DeconvBilinear),
            other => Err(Error::Config(format!("unsupported method {other:?}"))),
        }
    }
}

/// Scale ratio, window sizes and the reduction/normalization toggles.
#[derive(Debug, Clone)]
pub struct AggregationConfig {
    pub s: usize,
    pub w_s: usize,
    pub w_d: usize,
    pub block_reduce: BlockReduce,
    pub stage1_renormalize: bool,
    pub left_center_scale: bool,
    pub border_renormalize_spatial: bool,
}

impl AggregationConfig {
    pub fn new(s: usize) -> Self {
        Self {
            s,
            w_s: 3,
            w_d: 3,
            block_reduce: BlockReduce::Mean,
            stage1_renormalize: true,
            left_center_scale: true,
            border_renormalize_spatial: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::guidance::check_scale(self.s)?;
        if self.w_s % 2 == 0 || self.w_s == 0 || self.w_d % 2 == 0 || self.w_d == 0 {
            return Err(Error::Config(format!(
                "windows must be odd and >= 1, got w_s={} w_d={}",
                self.w_s, self.w_d
            )));
        }
        Ok(())
    }
}

const RENORM_EPS: f64 = 1e-12;

fn check_guidance<T: Real>(
    g: &GuidanceField<T>,
    fine_h: usize,
    fine_w: usize,
    cfg: &AggregationConfig,
    what: &str,
) -> Result<()> {
    if g.height != fine_h || g.width != fine_w {
        return Err(Error::Shape(format!(
            "{what} guidance {}x{} does not match fine resolution {}x{}",
            g.height, g.width, fine_h, fine_w
        )));
    }
    if g.window != cfg.w_s {
        return Err(Error::Shape(format!(
            "{what} guidance window {} does not match configured w_s {}",
            g.window, cfg.w_s
        )));
    }
    Ok(())
}

/// Warped right-guidance lookup: the right field is read at the warped fine
/// column x' - d' (clamped into the image), with the direction taken between
/// the targeted coarse cell (x - d) and the warped pixel's own cell.
/// Out-of-window directions weigh 0.
#[inline]
fn right_lookup<T: Real>(
    g_r: &GuidanceField<T>,
    s: usize,
    x_f: usize,
    y_f: usize,
    d_f: usize,
    x_c: i64,
    y_c: i64,
    d_c: i64,
) -> T {
    let xr = (x_f as i64 - d_f as i64).clamp(0, g_r.width as i64 - 1);
    let dir_x = (x_c - d_c) - ((x_f / s) as i64 - (d_f / s) as i64);
    let dir_y = y_c - (y_f / s) as i64;
    let r = g_r.radius();
    if dir_x.abs() > r || dir_y.abs() > r {
        return T::zero();
    }
    g_r.at(g_r.dir_index(dir_x, dir_y), y_f, xr as usize)
}

struct Stage1Weights<T> {
    weights: Vec<T>, // per candidate, 0 for invalid candidates
    d_lo: i64,
    sum_raw: T,
    fallback_uniform: bool,
    scale_m: T, // left-center block factor (1 when disabled)
}

/// Raw per-candidate weights plus normalization state for one (x, y, d')
/// site; shared by the forward pass and the backward recomputation.
fn stage1_weights<T: Real>(
    g_r: &GuidanceField<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    coarse_d: usize,
    y: usize,
    x: usize,
    d_f: usize,
) -> Stage1Weights<T> {
    let s = cfg.s;
    let r_d = (cfg.w_d as i64 - 1) / 2;
    let d0 = (d_f / s) as i64;
    let d_lo = d0 - r_d;
    let inv_s2 = T::one() / T::from_usize_(s * s);
    let mut weights = Vec::with_capacity(cfg.w_d);
    let mut sum_raw = T::zero();
    let mut valid = 0usize;
    for cand in d_lo..=d0 + r_d {
        if cand < 0 || cand >= coarse_d as i64 {
            weights.push(T::zero());
            continue;
        }
        valid += 1;
        let mut acc = T::zero();
        for y_f in y * s..(y + 1) * s {
            for x_f in x * s..(x + 1) * s {
                acc += right_lookup(g_r, s, x_f, y_f, d_f, x as i64, y as i64, cand);
            }
        }
        if cfg.block_reduce == BlockReduce::Mean {
            acc *= inv_s2;
        }
        sum_raw += acc;
        weights.push(acc);
    }
    let mut fallback_uniform = false;
    if cfg.stage1_renormalize {
        if sum_raw.to_f64().unwrap() > RENORM_EPS {
            for w in &mut weights {
                *w /= sum_raw;
            }
        } else {
            fallback_uniform = true;
            let u = T::one() / T::from_usize_(valid);
            for (i, w) in weights.iter_mut().enumerate() {
                let cand = d_lo + i as i64;
                *w = if cand >= 0 && cand < coarse_d as i64 {
                    u
                } else {
                    T::zero()
                };
            }
        }
    }
    let mut scale_m = T::one();
    if cfg.left_center_scale {
        let center = (g_l.window * g_l.window - 1) / 2;
        let mut m = T::zero();
        for y_f in y * s..(y + 1) * s {
            for x_f in x * s..(x + 1) * s {
                m += g_l.at(center, y_f, x_f);
            }
        }
        if cfg.block_reduce == BlockReduce::Mean {
            m *= inv_s2;
        }
        scale_m = m;
    }
    Stage1Weights {
        weights,
        d_lo,
        sum_raw,
        fallback_uniform,
        scale_m,
    }
}

fn stage1_site<T: Real>(
    cv_c: &CostVolume<T>,
    g_r: &GuidanceField<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    y: usize,
    x: usize,
    d_f: usize,
) -> T {
    let st = stage1_weights(g_r, g_l, cfg, cv_c.disparities, y, x, d_f);
    let mut out = T::zero();
    for (i, &w) in st.weights.iter().enumerate() {
        let cand = st.d_lo + i as i64;
        if cand >= 0 && cand < cv_c.disparities as i64 {
            out += w * cv_c.at(y, x, cand as usize);
        }
    }
    out * st.scale_m
}

fn tally_stage1(cfg: &AggregationConfig, outputs: u64, counter: &mut FlopCounter) {
    let wd = cfg.w_d as u64;
    let s2 = (cfg.s * cfg.s) as u64;
    let mut adds = wd * s2 + wd;
    let mut muls = wd;
    if cfg.block_reduce == BlockReduce::Mean {
        muls += wd;
    }
    if cfg.stage1_renormalize {
        counter.divs(outputs * wd);
    }
    if cfg.left_center_scale {
        adds += s2;
        muls += 1;
    }
    counter.adds(outputs * adds);
    counter.muls(outputs * muls);
}

/// 1D disparity inter-scale aggregation: maps (H, W, D) to (H, W, D*s). The
/// per-candidate weight is the block reduction of the warped right-guidance
/// lookups over the s x s fine block, optionally renormalized per site, and
/// the result is optionally scaled by the block-reduced left center weight.
pub fn disparity_upsample<T: Real>(
    cv_c: &CostVolume<T>,
    g_r: &GuidanceField<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    counter: Option<&mut FlopCounter>,
) -> Result<CostVolume<T>> {
    cfg.validate()?;
    let (h, w) = (cv_c.height, cv_c.width);
    check_guidance(g_r, h * cfg.s, w * cfg.s, cfg, "right")?;
    check_guidance(g_l, h * cfg.s, w * cfg.s, cfg, "left")?;
    let d_fine = cv_c.disparities * cfg.s;
    if d_fine < cfg.w_d {
        return Err(Error::Config(format!(
            "fine disparity count {d_fine} below window {}",
            cfg.w_d
        )));
    }
    let mut out = CostVolume::zeros(h, w, d_fine);
    let compute_row = |y: usize, row: &mut [T]| {
        for x in 0..w {
            for d_f in 0..d_fine {
                row[x * d_fine + d_f] = stage1_site(cv_c, g_r, g_l, cfg, y, x, d_f);
            }
        }
    };
    match counter {
        Some(c) => {
            for y in 0..h {
                let start = y * w * d_fine;
                compute_row(y, &mut out.data_mut()[start..start + w * d_fine]);
            }
            tally_stage1(cfg, (h * w * d_fine) as u64, c);
        }
        None => {
            out.data_mut()
                .par_chunks_mut(w * d_fine)
                .enumerate()
                .for_each(|(y, row)| compute_row(y, row));
        }
    }
    Ok(out)
}

fn stage2_site<T: Real>(
    cv1: &CostVolume<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    y_f: usize,
    x_f: usize,
    out: &mut [T],
) {
    let s = cfg.s;
    let r = (cfg.w_s as i64 - 1) / 2;
    let (y0, x0) = ((y_f / s) as i64, (x_f / s) as i64);
    let d = cv1.disparities;
    out.iter_mut().for_each(|v| *v = T::zero());
    let mut wsum = T::zero();
    for dy in -r..=r {
        for dx in -r..=r {
            let (y, x) = (y0 + dy, x0 + dx);
            if y < 0 || y >= cv1.height as i64 || x < 0 || x >= cv1.width as i64 {
                continue;
            }
            let g = g_l.at(g_l.dir_index(dx, dy), y_f, x_f);
            wsum += g;
            for dd in 0..d {
                out[dd] += g * cv1.at(y as usize, x as usize, dd);
            }
        }
    }
    if cfg.border_renormalize_spatial && wsum.to_f64().unwrap() > RENORM_EPS {
        for v in out.iter_mut() {
            *v /= wsum;
        }
    }
}

/// 2D spatial inter-scale aggregation: maps (H, W, D*s) to (Hs, Ws, D*s) by
/// mixing the w_s x w_s coarse neighborhood under the left guidance.
pub fn spatial_upsample<T: Real>(
    cv1: &CostVolume<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    counter: Option<&mut FlopCounter>,
) -> Result<CostVolume<T>> {
    cfg.validate()?;
    let (h, w, d) = (cv1.height, cv1.width, cv1.disparities);
    check_guidance(g_l, h * cfg.s, w * cfg.s, cfg, "left")?;
    let (hf, wf) = (h * cfg.s, w * cfg.s);
    let mut out = CostVolume::zeros(hf, wf, d);
    let compute_row = |y_f: usize, row: &mut [T]| {
        for x_f in 0..wf {
            stage2_site(cv1, g_l, cfg, y_f, x_f, &mut row[x_f * d..(x_f + 1) * d]);
        }
    };
    match counter {
        Some(c) => {
            for y_f in 0..hf {
                let start = y_f * wf * d;
                compute_row(y_f, &mut out.data_mut()[start..start + wf * d]);
            }
            let outputs = (hf * wf * d) as u64;
            let ws2 = (cfg.w_s * cfg.w_s) as u64;
            c.muls(outputs * ws2);
            c.adds(outputs * ws2);
            if cfg.border_renormalize_spatial {
                c.divs(outputs);
            }
        }
        None => {
            out.data_mut()
                .par_chunks_mut(wf * d)
                .enumerate()
                .for_each(|(y_f, row)| compute_row(y_f, row));
        }
    }
    Ok(out)
}

/// The decomposed pipeline: disparity stage then spatial stage.
pub fn cais_upsample<T: Real>(
    cv_c: &CostVolume<T>,
    g_l: &GuidanceField<T>,
    g_r: &GuidanceField<T>,
    cfg: &AggregationConfig,
    mut counter: Option<&mut FlopCounter>,
) -> Result<CostVolume<T>> {
    let cv1 = disparity_upsample(cv_c, g_r, g_l, cfg, counter.as_deref_mut())?;
    spatial_upsample(&cv1, g_l, cfg, counter)
}

/// Reference path: one weighted sum over the full w_s x w_s x w_d coarse
/// neighborhood per fine site, with the 3D weight built as the product of
/// the left lookup and the warped right lookup. Summation order is fixed
/// (disparity outer, then rows, then columns).
pub fn full3d_upsample<T: Real>(
    cv_c: &CostVolume<T>,
    g_l: &GuidanceField<T>,
    g_r: &GuidanceField<T>,
    cfg: &AggregationConfig,
    counter: Option<&mut FlopCounter>,
) -> Result<CostVolume<T>> {
    cfg.validate()?;
    let (h, w, d) = (cv_c.height, cv_c.width, cv_c.disparities);
    let s = cfg.s;
    let (hf, wf, df) = (h * s, w * s, d * s);
    check_guidance(g_l, hf, wf, cfg, "left")?;
    check_guidance(g_r, hf, wf, cfg, "right")?;
    let r_s = (cfg.w_s as i64 - 1) / 2;
    let r_d = (cfg.w_d as i64 - 1) / 2;
    let mut out = CostVolume::zeros(hf, wf, df);
    let compute_row = |y_f: usize, row: &mut [T]| {
        let y0 = (y_f / s) as i64;
        for x_f in 0..wf {
            let x0 = (x_f / s) as i64;
            for d_f in 0..df {
                let d0 = (d_f / s) as i64;
                let mut acc = T::zero();
                for bd in -r_d..=r_d {
                    let dc = d0 + bd;
                    if dc < 0 || dc >= d as i64 {
                        continue;
                    }
                    for by in -r_s..=r_s {
                        let yc = y0 + by;
                        if yc < 0 || yc >= h as i64 {
                            continue;
                        }
                        for bx in -r_s..=r_s {
                            let xc = x0 + bx;
                            if xc < 0 || xc >= w as i64 {
                                continue;
                            }
                            let gl = g_l.at(g_l.dir_index(bx, by), y_f, x_f);
                            let rr = right_lookup(g_r, s, x_f, y_f, d_f, xc, yc, dc);
                            acc += gl * rr * cv_c.at(yc as usize, xc as usize, dc as usize);
                        }
                    }
                }
                row[x_f * df + d_f] = acc;
            }
        }
    };
    match counter {
        Some(c) => {
            for y_f in 0..hf {
                let start = y_f * wf * df;
                compute_row(y_f, &mut out.data_mut()[start..start + wf * df]);
            }
            let outputs = (hf * wf * df) as u64;
            let terms = (cfg.w_s * cfg.w_s * cfg.w_d) as u64;
            c.muls(outputs * terms * 2);
            c.adds(outputs * terms);
        }
        None => {
            out.data_mut()
                .par_chunks_mut(wf * df)
                .enumerate()
                .for_each(|(y_f, row)| compute_row(y_f, row));
        }
    }
    Ok(out)
}

/// Gradients of [`cais_upsample`] with respect to its three inputs.
#[derive(Debug, Clone)]
pub struct CaisGrads<T: Real> {
    pub d_cv: CostVolume<T>,
    pub d_gl: GuidanceField<T>,
    pub d_gr: GuidanceField<T>,
}

fn spatial_backward<T: Real>(
    cv1: &CostVolume<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    upstream: &CostVolume<T>,
) -> (CostVolume<T>, GuidanceField<T>) {
    let s = cfg.s;
    let r = (cfg.w_s as i64 - 1) / 2;
    let d = cv1.disparities;
    let mut d_cv1 = CostVolume::zeros(cv1.height, cv1.width, d);
    let mut d_gl = GuidanceField::zeros(g_l.window, g_l.height, g_l.width);
    let mut site = vec![T::zero(); d];
    for y_f in 0..upstream.height {
        let y0 = (y_f / s) as i64;
        for x_f in 0..upstream.width {
            let x0 = (x_f / s) as i64;
            let mut wsum = T::zero();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (y0 + dy, x0 + dx);
                    if y >= 0 && y < cv1.height as i64 && x >= 0 && x < cv1.width as i64 {
                        wsum += g_l.at(g_l.dir_index(dx, dy), y_f, x_f);
                    }
                }
            }
            let renorm =
                cfg.border_renormalize_spatial && wsum.to_f64().unwrap() > RENORM_EPS;
            if renorm {
                stage2_site(cv1, g_l, cfg, y_f, x_f, &mut site);
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (y, x) = (y0 + dy, x0 + dx);
                    if y < 0 || y >= cv1.height as i64 || x < 0 || x >= cv1.width as i64 {
                        continue;
                    }
                    let (y, x) = (y as usize, x as usize);
                    let k = g_l.dir_index(dx, dy);
                    let g = g_l.at(k, y_f, x_f);
                    let mut dg = T::zero();
                    for dd in 0..d {
                        let u = upstream.at(y_f, x_f, dd);
                        if renorm {
                            *d_cv1.at_mut(y, x, dd) += u * g / wsum;
                            dg += u * (cv1.at(y, x, dd) - site[dd]) / wsum;
                        } else {
                            *d_cv1.at_mut(y, x, dd) += u * g;
                            dg += u * cv1.at(y, x, dd);
                        }
                    }
                    *d_gl.at_mut(k, y_f, x_f) += dg;
                }
            }
        }
    }
    (d_cv1, d_gl)
}

fn disparity_backward<T: Real>(
    cv_c: &CostVolume<T>,
    g_r: &GuidanceField<T>,
    g_l: &GuidanceField<T>,
    cfg: &AggregationConfig,
    upstream: &CostVolume<T>,
) -> (CostVolume<T>, GuidanceField<T>, GuidanceField<T>) {
    let s = cfg.s;
    let inv_s2 = T::one() / T::from_usize_(s * s);
    let coarse_d = cv_c.disparities;
    let d_fine = upstream.disparities;
    let mut d_cv = CostVolume::zeros(cv_c.height, cv_c.width, coarse_d);
    let mut d_gr = GuidanceField::zeros(g_r.window, g_r.height, g_r.width);
    let mut d_gl = GuidanceField::zeros(g_l.window, g_l.height, g_l.width);
    let center = (g_l.window * g_l.window - 1) / 2;
    for y in 0..cv_c.height {
        for x in 0..cv_c.width {
            for d_f in 0..d_fine {
                let u = upstream.at(y, x, d_f);
                if u == T::zero() {
                    continue;
                }
                let st = stage1_weights(g_r, g_l, cfg, coarse_d, y, x, d_f);
                let mut out0 = T::zero();
                for (i, &wi) in st.weights.iter().enumerate() {
                    let cand = st.d_lo + i as i64;
                    if cand >= 0 && cand < coarse_d as i64 {
                        out0 += wi * cv_c.at(y, x, cand as usize);
                    }
                }
                let du_out0 = if cfg.left_center_scale { u * st.scale_m } else { u };
                if cfg.left_center_scale {
                    let dm = u * out0;
                    let per = if cfg.block_reduce == BlockReduce::Mean {
                        dm * inv_s2
                    } else {
                        dm
                    };
                    for y_f in y * s..(y + 1) * s {
                        for x_f in x * s..(x + 1) * s {
                            *d_gl.at_mut(center, y_f, x_f) += per;
                        }
                    }
                }
                // gradient on the normalized weights
                let mut dw = vec![T::zero(); st.weights.len()];
                for (i, dwi) in dw.iter_mut().enumerate() {
                    let cand = st.d_lo + i as i64;
                    if cand >= 0 && cand < coarse_d as i64 {
                        *d_cv.at_mut(y, x, cand as usize) += du_out0 * st.weights[i];
                        *dwi = du_out0 * cv_c.at(y, x, cand as usize);
                    }
                }
                // through the renormalization back to the raw block sums
                let draw: Vec<T> = if cfg.stage1_renormalize {
                    if st.fallback_uniform {
                        vec![T::zero(); dw.len()]
                    } else {
                        let dot: T = dw
                            .iter()
                            .zip(&st.weights)
                            .map(|(&a, &b)| a * b)
                            .sum();
                        dw.iter().map(|&v| (v - dot) / st.sum_raw).collect()
                    }
                } else {
                    dw
                };
                let per_lookup = if cfg.block_reduce == BlockReduce::Mean {
                    inv_s2
                } else {
                    T::one()
                };
                for (i, &dr) in draw.iter().enumerate() {
                    let cand = st.d_lo + i as i64;
                    if cand < 0 || cand >= coarse_d as i64 || dr == T::zero() {
                        continue;
                    }
                    let contrib = dr * per_lookup;
                    for y_f in y * s..(y + 1) * s {
                        for x_f in x * s..(x + 1) * s {
                            // scatter into the same warped lookup as the forward
                            let xr =
                                (x_f as i64 - d_f as i64).clamp(0, g_r.width as i64 - 1);
                            let dir_x =
                                (x as i64 - cand) - ((x_f / s) as i64 - (d_f / s) as i64);
                            let dir_y = y as i64 - (y_f / s) as i64;
                            let r = g_r.radius();
                            if dir_x.abs() > r || dir_y.abs() > r {
                                continue;
                            }
                            *d_gr.at_mut(g_r.dir_index(dir_x, dir_y), y_f, xr as usize) +=
                                contrib;
                        }
                    }
                }
            }
        }
    }
    (d_cv, d_gr, d_gl)
}

/// Exact vector-Jacobian product of the decomposed pipeline.
pub fn cais_backward<T: Real>(
    cv_c: &CostVolume<T>,
    g_l: &GuidanceField<T>,
    g_r: &GuidanceField<T>,
    cfg: &AggregationConfig,
    upstream: &CostVolume<T>,
) -> Result<CaisGrads<T>> {
    cfg.validate()?;
    let s = cfg.s;
    if upstream.height != cv_c.height * s
        || upstream.width != cv_c.width * s
        || upstream.disparities != cv_c.disparities * s
    {
        return Err(Error::Shape(format!(
            "upstream {}x{}x{} does not match fine volume {}x{}x{}",
            upstream.height,
            upstream.width,
            upstream.disparities,
            cv_c.height * s,
            cv_c.width * s,
            cv_c.disparities * s
        )));
    }
    let cv1 = disparity_upsample(cv_c, g_r, g_l, cfg, None)?;
    let (d_cv1, d_gl_spatial) = spatial_backward(&cv1, g_l, cfg, upstream);
    let (d_cv, d_gr, mut d_gl) = disparity_backward(cv_c, g_r, g_l, cfg, &d_cv1);
    for (a, &b) in d_gl.data_mut().iter_mut().zip(d_gl_spatial.data()) {
        *a += b;
    }
    Ok(CaisGrads { d_cv, d_gl, d_gr })
}

fn bilinear_kernel<T: Real>(s: usize) -> Vec<T> {
    // fixed separable bilinear kernel of support 2s - s%2
    let len = 2 * s - s % 2;
    let center = (len as f64 - 1.0) / 2.0;
    (0..len)
        .map(|i| T::from_f64(1.0 - (i as f64 - center).abs() / s as f64))
        .collect()
}

/// 1D transposed convolution with stride `s` and padding `(len - s) / 2`,
/// applied along the given axis of the volume.
fn deconv_axis<T: Real>(cv: &CostVolume<T>, s: usize, axis: usize) -> CostVolume<T> {
    let kernel = bilinear_kernel::<T>(s);
    let pad = (kernel.len() - s) / 2;
    let (h, w, d) = (cv.height, cv.width, cv.disparities);
    let (oh, ow, od) = match axis {
        0 => (h * s, w, d),
        1 => (h, w * s, d),
        _ => (h, w, d * s),
    };
    let n_in = [h, w, d][axis];
    let mut out = CostVolume::zeros(oh, ow, od);
    for y in 0..oh {
        for x in 0..ow {
            for dd in 0..od {
                let o = [y, x, dd][axis];
                let mut acc = T::zero();
                for i in 0..n_in {
                    let kidx = o as i64 + pad as i64 - (i * s) as i64;
                    if kidx < 0 || kidx >= kernel.len() as i64 {
                        continue;
                    }
                    let src = match axis {
                        0 => cv.at(i, x, dd),
                        1 => cv.at(y, i, dd),
                        _ => cv.at(y, x, i),
                    };
                    acc += kernel[kidx as usize] * src;
                }
                *out.at_mut(y, x, dd) = acc;
            }
        }
    }
    out
}

fn lerp_axis<T: Real>(cv: &CostVolume<T>, s: usize, axis: usize) -> CostVolume<T> {
    let (h, w, d) = (cv.height, cv.width, cv.disparities);
    let (oh, ow, od) = match axis {
        0 => (h * s, w, d),
        1 => (h, w * s, d),
        _ => (h, w, d * s),
    };
    let n_in = [h, w, d][axis];
    let mut out = CostVolume::zeros(oh, ow, od);
    for y in 0..oh {
        for x in 0..ow {
            for dd in 0..od {
                let o = [y, x, dd][axis];
                // half-pixel alignment, clamped at the borders
                let src = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                let t = T::from_f64(src - i0 as f64);
                let fetch = |i: usize| match axis {
                    0 => cv.at(i, x, dd),
                    1 => cv.at(y, i, dd),
                    _ => cv.at(y, x, i),
                };
                let (v0, v1) = (fetch(i0), fetch(i1));
                *out.at_mut(y, x, dd) = v0 + t * (v1 - v0);
            }
        }
    }
    out
}

/// Fixed-weight comparison baselines.
pub fn upsample_baseline<T: Real>(
    cv_c: &CostVolume<T>,
    s: usize,
    method: BaselineMethod,
) -> Result<CostVolume<T>> {
    crate::guidance::check_scale(s)?;
    match method {
        BaselineMethod::Nearest => {
            let (h, w, d) = (cv_c.height * s, cv_c.width * s, cv_c.disparities * s);
            let mut out = CostVolume::zeros(h, w, d);
            for y in 0..h {
                for x in 0..w {
                    for dd in 0..d {
                        *out.at_mut(y, x, dd) = cv_c.at(y / s, x / s, dd / s);
                    }
                }
            }
            Ok(out)
        }
        BaselineMethod::Trilinear => {
            let a = lerp_axis(cv_c, s, 2);
            let b = lerp_axis(&a, s, 0);
            Ok(lerp_axis(&b, s, 1))
        }
        BaselineMethod::DeconvBilinear => {
            let a = deconv_axis(cv_c, s, 2);
            let b = deconv_axis(&a, s, 0);
            Ok(deconv_axis(&b, s, 1))
        }
    }
}

/// Seeded random cost volume with values in [0, 1); test and bench input.
pub fn seeded_volume<T: Real>(height: usize, width: usize, disparities: usize, seed: u64) -> CostVolume<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * disparities)
        .map(|_| T::from_f64(rng.gen::<f64>()))
        .collect();
    CostVolume::from_data(height, width, disparities, data).unwrap()
}

/// Seeded random guidance: softmax of random logits per pixel, so the field
/// satisfies the normalization invariant.
pub fn seeded_guidance<T: Real>(window: usize, height: usize, width: usize, seed: u64) -> GuidanceField<T> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = window * window;
    let mut g = GuidanceField::zeros(window, height, width);
    for y in 0..height {
        for x in 0..width {
            let logits: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (ki, e) in exps.iter().enumerate() {
                *g.at_mut(ki, y, x) = T::from_f64(e / sum);
            }
        }
    }
    g
}
