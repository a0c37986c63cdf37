//! Independent scalar-loop reference implementations of the aggregation
//! contracts, written directly from the per-element formulas against the
//! public accessors only. The library must match these exactly (same
//! summation order), so they are deliberately naive.

use cais_core::aggregate::{AggregationConfig, BlockReduce, CostVolume};
use cais_core::guidance::GuidanceField;

/// Warped right-guidance lookup: direction between the targeted coarse cell
/// (x - d) and the warped fine pixel's cell, value read at the clamped
/// warped column; out-of-window directions weigh zero.
fn r_lookup(
    g_r: &GuidanceField<f32>,
    s: usize,
    x_f: usize,
    y_f: usize,
    d_f: usize,
    x: i64,
    y: i64,
    d: i64,
) -> f32 {
    let xr = (x_f as i64 - d_f as i64).clamp(0, g_r.width as i64 - 1) as usize;
    let dir_x = (x - d) - ((x_f / s) as i64 - (d_f / s) as i64);
    let dir_y = y - (y_f / s) as i64;
    let r = (g_r.window as i64 - 1) / 2;
    if dir_x.abs() > r || dir_y.abs() > r {
        return 0.0;
    }
    let k = ((dir_y + r) * g_r.window as i64 + (dir_x + r)) as usize;
    g_r.at(k, y_f, xr)
}

pub fn oracle_disparity(
    cv: &CostVolume<f32>,
    g_r: &GuidanceField<f32>,
    g_l: &GuidanceField<f32>,
    cfg: &AggregationConfig,
) -> CostVolume<f32> {
    let (hc, wc, dc) = (cv.height, cv.width, cv.disparities);
    let s = cfg.s;
    let d_fine = dc * s;
    let r_d = (cfg.w_d as i64 - 1) / 2;
    let inv_s2 = 1.0f32 / (s * s) as f32;
    let mut out = CostVolume::zeros(hc, wc, d_fine);
    for y in 0..hc {
        for x in 0..wc {
            for d_f in 0..d_fine {
                let d0 = (d_f / s) as i64;
                let mut weights = Vec::new();
                let mut sum = 0.0f32;
                let mut valid = 0usize;
                for cand in d0 - r_d..=d0 + r_d {
                    if cand < 0 || cand >= dc as i64 {
                        weights.push(0.0);
                        continue;
                    }
                    valid += 1;
                    let mut acc = 0.0f32;
                    for y_f in y * s..(y + 1) * s {
                        for x_f in x * s..(x + 1) * s {
                            acc += r_lookup(g_r, s, x_f, y_f, d_f, x as i64, y as i64, cand);
                        }
                    }
                    if cfg.block_reduce == BlockReduce::Mean {
                        acc *= inv_s2;
                    }
                    sum += acc;
                    weights.push(acc);
                }
                if cfg.stage1_renormalize {
                    if sum as f64 > 1e-12 {
                        for w in &mut weights {
                            *w /= sum;
                        }
                    } else {
                        for (i, w) in weights.iter_mut().enumerate() {
                            let cand = d0 - r_d + i as i64;
                            *w = if cand >= 0 && cand < dc as i64 {
                                1.0 / valid as f32
                            } else {
                                0.0
                            };
                        }
                    }
                }
                let mut v = 0.0f32;
                for (i, &w) in weights.iter().enumerate() {
                    let cand = d0 - r_d + i as i64;
                    if cand >= 0 && cand < dc as i64 {
                        v += w * cv.at(y, x, cand as usize);
                    }
                }
                if cfg.left_center_scale {
                    let center = (cfg.w_s * cfg.w_s - 1) / 2;
                    let mut m = 0.0f32;
                    for y_f in y * s..(y + 1) * s {
                        for x_f in x * s..(x + 1) * s {
                            m += g_l.at(center, y_f, x_f);
                        }
                    }
                    if cfg.block_reduce == BlockReduce::Mean {
                        m *= inv_s2;
                    }
                    v *= m;
                }
                *out.at_mut(y, x, d_f) = v;
            }
        }
    }
    out
}

pub fn oracle_spatial(
    cv1: &CostVolume<f32>,
    g_l: &GuidanceField<f32>,
    cfg: &AggregationConfig,
) -> CostVolume<f32> {
    let s = cfg.s;
    let r = (cfg.w_s as i64 - 1) / 2;
    let (hf, wf) = (cv1.height * s, cv1.width * s);
    let dn = cv1.disparities;
    let mut out = CostVolume::zeros(hf, wf, dn);
    for y_f in 0..hf {
        for x_f in 0..wf {
            let mut acc = vec![0.0f32; dn];
            let mut wsum = 0.0f32;
            for dy in -r..=r {
                for dx in -r..=r {
                    let y = (y_f / s) as i64 + dy;
                    let x = (x_f / s) as i64 + dx;
                    if y < 0 || y >= cv1.height as i64 || x < 0 || x >= cv1.width as i64 {
                        continue;
                    }
                    let k = ((dy + r) * cfg.w_s as i64 + (dx + r)) as usize;
                    let g = g_l.at(k, y_f, x_f);
                    wsum += g;
                    for dd in 0..dn {
                        acc[dd] += g * cv1.at(y as usize, x as usize, dd);
                    }
                }
            }
            if cfg.border_renormalize_spatial && wsum as f64 > 1e-12 {
                for v in &mut acc {
                    *v /= wsum;
                }
            }
            for dd in 0..dn {
                *out.at_mut(y_f, x_f, dd) = acc[dd];
            }
        }
    }
    out
}

pub fn oracle_cais(
    cv: &CostVolume<f32>,
    g_l: &GuidanceField<f32>,
    g_r: &GuidanceField<f32>,
    cfg: &AggregationConfig,
) -> CostVolume<f32> {
    oracle_spatial(&oracle_disparity(cv, g_r, g_l, cfg), g_l, cfg)
}

pub fn oracle_full3d(
    cv: &CostVolume<f32>,
    g_l: &GuidanceField<f32>,
    g_r: &GuidanceField<f32>,
    cfg: &AggregationConfig,
) -> CostVolume<f32> {
    let (hc, wc, dc) = (cv.height, cv.width, cv.disparities);
    let s = cfg.s;
    let (hf, wf, df) = (hc * s, wc * s, dc * s);
    let r_s = (cfg.w_s as i64 - 1) / 2;
    let r_d = (cfg.w_d as i64 - 1) / 2;
    let mut out = CostVolume::zeros(hf, wf, df);
    for y_f in 0..hf {
        for x_f in 0..wf {
            for d_f in 0..df {
                let mut acc = 0.0f32;
                for bd in -r_d..=r_d {
                    let d = (d_f / s) as i64 + bd;
                    if d < 0 || d >= dc as i64 {
                        continue;
                    }
                    for by in -r_s..=r_s {
                        let y = (y_f / s) as i64 + by;
                        if y < 0 || y >= hc as i64 {
                            continue;
                        }
                        for bx in -r_s..=r_s {
                            let x = (x_f / s) as i64 + bx;
                            if x < 0 || x >= wc as i64 {
                                continue;
                            }
                            let k = ((by + r_s) * cfg.w_s as i64 + (bx + r_s)) as usize;
                            let gl = g_l.at(k, y_f, x_f);
                            let rr = r_lookup(g_r, s, x_f, y_f, d_f, x, y, d);
                            acc += gl * rr * cv.at(y as usize, x as usize, d as usize);
                        }
                    }
                }
                *out.at_mut(y_f, x_f, d_f) = acc;
            }
        }
    }
    out
}
