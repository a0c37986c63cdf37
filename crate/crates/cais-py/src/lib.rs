//! Python bindings. Volumes travel as flat `list[float]` plus an explicit
//! shape so the module has no array-library dependency; see
//! `python/smoke_test.py` for usage.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cais_core::aggregate::{self, AggregationConfig, BaselineMethod, CostVolume};
use cais_core::guidance::GuidanceField;
use cais_core::harness;

fn err(e: cais_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn volume(data: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<CostVolume<f32>> {
    CostVolume::from_data(shape.0, shape.1, shape.2, data).map_err(err)
}

fn guidance(data: Vec<f32>, window: usize, h: usize, w: usize) -> PyResult<GuidanceField<f32>> {
    if data.len() != window * window * h * w {
        return Err(PyValueError::new_err(format!(
            "guidance {window}x{window} over {h}x{w} wants {} values, got {}",
            window * window * h * w,
            data.len()
        )));
    }
    let mut g = GuidanceField::zeros(window, h, w);
    g.data_mut().copy_from_slice(&data);
    Ok(g)
}

fn unpack(cv: CostVolume<f32>) -> (Vec<f32>, (usize, usize, usize)) {
    let shape = (cv.height, cv.width, cv.disparities);
    (cv.data().to_vec(), shape)
}

fn config(scale: usize, window: usize, wd: usize) -> AggregationConfig {
    let mut cfg = AggregationConfig::new(scale);
    cfg.w_s = window;
    cfg.w_d = wd;
    cfg
}

/// Two-stage guided upsampling of a coarse cost volume.
#[pyfunction]
#[pyo3(signature = (cv, shape, guidance_left, guidance_right, window, scale, wd = 3))]
#[allow(clippy::too_many_arguments)]
fn cais_upsample(
    cv: Vec<f32>,
    shape: (usize, usize, usize),
    guidance_left: Vec<f32>,
    guidance_right: Vec<f32>,
    window: usize,
    scale: usize,
    wd: usize,
) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
    let cv = volume(cv, shape)?;
    let (hf, wf) = (shape.0 * scale, shape.1 * scale);
    let g_l = guidance(guidance_left, window, hf, wf)?;
    let g_r = guidance(guidance_right, window, hf, wf)?;
    let out = aggregate::cais_upsample(&cv, &g_l, &g_r, &config(scale, window, wd), None)
        .map_err(err)?;
    Ok(unpack(out))
}

/// Single weighted sum over the full 3D neighborhood (reference path).
#[pyfunction]
#[pyo3(signature = (cv, shape, guidance_left, guidance_right, window, scale, wd = 3))]
#[allow(clippy::too_many_arguments)]
fn full3d_upsample(
    cv: Vec<f32>,
    shape: (usize, usize, usize),
    guidance_left: Vec<f32>,
    guidance_right: Vec<f32>,
    window: usize,
    scale: usize,
    wd: usize,
) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
    let cv = volume(cv, shape)?;
    let (hf, wf) = (shape.0 * scale, shape.1 * scale);
    let g_l = guidance(guidance_left, window, hf, wf)?;
    let g_r = guidance(guidance_right, window, hf, wf)?;
    let out = aggregate::full3d_upsample(&cv, &g_l, &g_r, &config(scale, window, wd), None)
        .map_err(err)?;
    Ok(unpack(out))
}

/// Fixed (guidance-free) upsampling: nearest | trilinear | deconv_bilinear.
#[pyfunction]
fn upsample_baseline(
    cv: Vec<f32>,
    shape: (usize, usize, usize),
    scale: usize,
    method: &str,
) -> PyResult<(Vec<f32>, (usize, usize, usize))> {
    let cv = volume(cv, shape)?;
    let m: BaselineMethod = method.parse().map_err(err)?;
    let out = aggregate::upsample_baseline(&cv, scale, m).map_err(err)?;
    Ok(unpack(out))
}

/// Degenerate guidance with all weight on the center direction.
#[pyfunction]
fn one_hot_guidance(window: usize, height: usize, width: usize) -> Vec<f32> {
    GuidanceField::<f32>::one_hot_center(window, height, width)
        .data()
        .to_vec()
}

/// Random normalized guidance (softmax of seeded logits).
#[pyfunction]
fn seeded_guidance(window: usize, height: usize, width: usize, seed: u64) -> Vec<f32> {
    aggregate::seeded_guidance::<f32>(window, height, width, seed)
        .data()
        .to_vec()
}

/// Uniform random cost volume.
#[pyfunction]
fn seeded_volume(height: usize, width: usize, disparities: usize, seed: u64) -> Vec<f32> {
    aggregate::seeded_volume::<f32>(height, width, disparities, seed)
        .data()
        .to_vec()
}

/// Softmax-weighted disparity expectation per pixel, row-major H*W.
#[pyfunction]
fn soft_argmin(cv: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<Vec<f32>> {
    Ok(harness::soft_argmin(&volume(cv, shape)?))
}

/// Mean absolute disparity error over the mask.
#[pyfunction]
fn epe(pred: Vec<f32>, gt: Vec<f32>, mask: Vec<bool>) -> PyResult<f32> {
    harness::epe(&pred, &gt, &mask).map_err(err)
}

/// Max relative error of a manual backward pass against central differences.
/// Targets: guidance | cais | soft_argmin | loss | end_to_end.
#[pyfunction]
#[pyo3(signature = (target, seed = 0))]
fn gradcheck(target: &str, seed: u64) -> PyResult<f64> {
    let t: harness::GradcheckTarget = target.parse().map_err(err)?;
    harness::gradcheck(t, seed).map_err(err)
}

/// Synthetic stereo pair with dense ground truth; images and maps are flat
/// row-major H*W lists.
#[pyfunction]
#[pyo3(signature = (seed, height, width, rects = 3, dmax = 8))]
fn gen_scene(
    py: Python<'_>,
    seed: u64,
    height: usize,
    width: usize,
    rects: usize,
    dmax: usize,
) -> PyResult<Py<PyDict>> {
    let scene = harness::gen_scene::<f32>(seed, height, width, rects, dmax).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("left", scene.left.data().to_vec())?;
    d.set_item("right", scene.right.data().to_vec())?;
    d.set_item("gt", scene.gt)?;
    d.set_item("mask", scene.mask)?;
    d.set_item("height", height)?;
    d.set_item("width", width)?;
    Ok(d.into())
}

/// Short training run of the guidance parameters on synthetic scenes;
/// returns the evaluation report as a dict.
#[pyfunction]
#[pyo3(signature = (seed, iterations = 50, scale = 2, size = 16, dmax = 4))]
fn train_toy(
    py: Python<'_>,
    seed: u64,
    iterations: usize,
    scale: usize,
    size: usize,
    dmax: usize,
) -> PyResult<Py<PyDict>> {
    let mut cfg = harness::TrainConfig::new(seed);
    cfg.iterations = iterations;
    cfg.s = scale;
    cfg.height = size;
    cfg.width = size;
    cfg.d_max = dmax;
    let (_, report) = harness::train_toy(&cfg).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("seed", report.seed)?;
    d.set_item("iterations", report.iterations)?;
    d.set_item("losses", report.losses)?;
    d.set_item("epe_initial", report.initial_epe)?;
    d.set_item("epe_final", report.final_epe)?;
    d.set_item("epe_trilinear", report.trilinear_epe)?;
    d.set_item("epe_nearest", report.nearest_epe)?;
    Ok(d.into())
}

#[pymodule]
fn cais_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cais_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(full3d_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(one_hot_guidance, m)?)?;
    m.add_function(wrap_pyfunction!(seeded_guidance, m)?)?;
    m.add_function(wrap_pyfunction!(seeded_volume, m)?)?;
    m.add_function(wrap_pyfunction!(soft_argmin, m)?)?;
    m.add_function(wrap_pyfunction!(epe, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scene, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
