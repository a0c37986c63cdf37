//! FLOP accounting for the aggregation paths. Counts are defined by a fixed
//! model (1 FLOP per add/multiply/divide, exponentials tallied separately)
//! and are produced two ways: closed-form via [`flops_analytic`] and tallied
//! at run time by passing a [`FlopCounter`] into the operators. The two must
//! agree exactly; counting never changes numerical outputs.

use crate::aggregate::{AggregationConfig, BaselineMethod, BlockReduce};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    pub muls: u64,
    pub adds: u64,
    pub divs: u64,
    pub exps: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.muls + self.adds + self.divs + self.exps
    }

    /// Arithmetic total excluding exponentials; the quantity the
    /// decomposed-vs-full3d ratio is taken over.
    pub fn arithmetic(&self) -> u64 {
        self.muls + self.adds + self.divs
    }
}

impl std::ops::Add for FlopCount {
    type Output = FlopCount;
    fn add(self, o: FlopCount) -> FlopCount {
        FlopCount {
            muls: self.muls + o.muls,
            adds: self.adds + o.adds,
            divs: self.divs + o.divs,
            exps: self.exps + o.exps,
        }
    }
}

/// Per-invocation accumulator threaded through the operators.
#[derive(Debug, Default, Clone)]
pub struct FlopCounter {
    count: FlopCount,
    saturated: bool,
}

impl FlopCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn muls(&mut self, n: u64) {
        Self::bump(&mut self.count.muls, n, &mut self.saturated);
    }

    #[inline]
    pub fn adds(&mut self, n: u64) {
        Self::bump(&mut self.count.adds, n, &mut self.saturated);
    }

    #[inline]
    pub fn divs(&mut self, n: u64) {
        Self::bump(&mut self.count.divs, n, &mut self.saturated);
    }

    #[inline]
    pub fn exps(&mut self, n: u64) {
        Self::bump(&mut self.count.exps, n, &mut self.saturated);
    }

    #[inline]
    fn bump(slot: &mut u64, n: u64, saturated: &mut bool) {
        match slot.checked_add(n) {
            Some(v) => *slot = v,
            None => {
                *slot = u64::MAX;
                *saturated = true;
            }
        }
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        self.muls(other.count.muls);
        self.adds(other.count.adds);
        self.divs(other.count.divs);
        self.exps(other.count.exps);
        self.saturated |= other.saturated;
    }

    pub fn finish(&self) -> Result<FlopCount> {
        if self.saturated {
            return Err(Error::Numeric("FLOP counter overflowed 64 bits".into()));
        }
        Ok(self.count)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopMode {
    Full3d,
    Decomposed,
    DeconvBilinear,
    Trilinear,
    Nearest,
}

impl std::fmt::Display for FlopMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FlopMode::Full3d => "full3d",
            FlopMode::Decomposed => "decomposed",
            FlopMode::DeconvBilinear => "deconv_bilinear",
            FlopMode::Trilinear => "trilinear",
            FlopMode::Nearest => "nearest",
        };
        f.write_str(s)
    }
}

impl From<BaselineMethod> for FlopMode {
    fn from(m: BaselineMethod) -> Self {
        match m {
            BaselineMethod::Nearest => FlopMode::Nearest,
            BaselineMethod::Trilinear => FlopMode::Trilinear,
            BaselineMethod::DeconvBilinear => FlopMode::DeconvBilinear,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlopStage {
    pub name: String,
    pub count: FlopCount,
}

/// Per-stage counts plus the dims and config they were derived for.
#[derive(Debug, Clone)]
pub struct FlopReport {
    pub mode: FlopMode,
    pub dims: (usize, usize, usize),
    pub scale: usize,
    pub w_s: usize,
    pub w_d: usize,
    pub stages: Vec<FlopStage>,
}

impl FlopReport {
    pub fn total(&self) -> FlopCount {
        self.stages
            .iter()
            .fold(FlopCount::default(), |acc, s| acc + s.count)
    }

    /// Aggregation-only arithmetic, excluding the shared guidance stage.
    pub fn aggregation_arithmetic(&self) -> u64 {
        self.stages
            .iter()
            .filter(|s| s.name != "guidance")
            .map(|s| s.count.arithmetic())
            .sum()
    }

    pub fn to_key_values(&self) -> String {
        let (h, w, d) = self.dims;
        let mut out = String::new();
        out.push_str(&format!("mode = {}\n", self.mode));
        out.push_str(&format!("dims = {h}x{w}x{d}\n"));
        out.push_str(&format!("scale = {}\n", self.scale));
        out.push_str(&format!("window_spatial = {}\n", self.w_s));
        out.push_str(&format!("window_disparity = {}\n", self.w_d));
        for s in &self.stages {
            out.push_str(&format!(
                "{}.muls = {}\n{}.adds = {}\n{}.divs = {}\n{}.exps = {}\n",
                s.name, s.count.muls, s.name, s.count.adds, s.name, s.count.divs, s.name,
                s.count.exps
            ));
        }
        let t = self.total();
        out.push_str(&format!(
            "total.muls = {}\ntotal.adds = {}\ntotal.divs = {}\ntotal.exps = {}\n",
            t.muls, t.adds, t.divs, t.exps
        ));
        out.push_str(&format!("total.flops = {}\n", t.total()));
        out.push_str(&format!(
            "aggregation.flops = {}\n",
            self.aggregation_arithmetic()
        ));
        out
    }
}

/// Closed-form count of one guidance evaluation (shared by both aggregation
/// modes, reported separately).
pub fn guidance_flops_analytic(
    channels: usize,
    hidden: usize,
    w_s: usize,
    fine_height: usize,
    fine_width: usize,
) -> FlopCount {
    let (h, n) = (hidden as u64, (2 * channels + 2) as u64);
    let k = (w_s * w_s) as u64;
    let pixels = (fine_height * fine_width) as u64;
    let mac = h * n + h * h + h;
    FlopCount {
        muls: pixels * k * mac,
        adds: pixels * k * (mac + 2 * h + 1) + pixels * 2 * k,
        divs: pixels * k,
        exps: pixels * k,
    }
}

fn stage1_count(dims: (usize, usize, usize), cfg: &AggregationConfig) -> FlopCount {
    let (h, w, d) = dims;
    let outputs = (h * w * d * cfg.s) as u64;
    let wd = cfg.w_d as u64;
    let s2 = (cfg.s * cfg.s) as u64;
    let mut adds = wd * s2 + wd; // block reduce + MAC adds
    let mut muls = wd; // MAC muls
    if cfg.block_reduce == BlockReduce::Mean {
        muls += wd;
    }
    let divs = if cfg.stage1_renormalize { wd } else { 0 };
    if cfg.left_center_scale {
        adds += s2;
        muls += 1;
    }
    FlopCount {
        muls: outputs * muls,
        adds: outputs * adds,
        divs: outputs * divs,
        exps: 0,
    }
}

fn stage2_count(dims: (usize, usize, usize), cfg: &AggregationConfig) -> FlopCount {
    let (h, w, d) = dims;
    let outputs = (h * w * d * cfg.s * cfg.s * cfg.s) as u64;
    let ws2 = (cfg.w_s * cfg.w_s) as u64;
    FlopCount {
        muls: outputs * ws2,
        adds: outputs * ws2,
        divs: if cfg.border_renormalize_spatial {
            outputs
        } else {
            0
        },
        exps: 0,
    }
}

fn full3d_count(dims: (usize, usize, usize), cfg: &AggregationConfig) -> FlopCount {
    let (h, w, d) = dims;
    let outputs = (h * w * d * cfg.s * cfg.s * cfg.s) as u64;
    let terms = (cfg.w_s * cfg.w_s * cfg.w_d) as u64;
    FlopCount {
        muls: outputs * terms * 2, // weight product + MAC mul
        adds: outputs * terms,
        divs: 0,
        exps: 0,
    }
}

fn separable_pass_outputs(dims: (usize, usize, usize), s: usize) -> [u64; 3] {
    let (h, w, d) = dims;
    [
        (h * w * d * s) as u64,         // disparity axis first
        (h * s * w * d * s) as u64,     // then rows
        (h * s * w * s * d * s) as u64, // then columns
    ]
}

/// Closed-form FLOP counts under the pinned model. `full3d` charges one
/// weight-product multiply plus a two-FLOP multiply-accumulate per window
/// term per fine output; the decomposed path charges the disparity stage per
/// (H, W, D*s) output and the spatial stage per fine output.
pub fn flops_analytic(
    dims: (usize, usize, usize),
    cfg: &AggregationConfig,
    mode: FlopMode,
) -> FlopReport {
    let mut stages = Vec::new();
    match mode {
        FlopMode::Full3d => {
            stages.push(FlopStage {
                name: "full3d".into(),
                count: full3d_count(dims, cfg),
            });
        }
        FlopMode::Decomposed => {
            stages.push(FlopStage {
                name: "stage1_disparity".into(),
                count: stage1_count(dims, cfg),
            });
            stages.push(FlopStage {
                name: "stage2_spatial".into(),
                count: stage2_count(dims, cfg),
            });
        }
        FlopMode::Trilinear => {
            // one lerp per output per pass: 1 mul + 2 adds
            for (i, outputs) in separable_pass_outputs(dims, cfg.s).into_iter().enumerate() {
                stages.push(FlopStage {
                    name: format!("pass{}", i + 1),
                    count: FlopCount {
                        muls: outputs,
                        adds: outputs * 2,
                        divs: 0,
                        exps: 0,
                    },
                });
            }
        }
        FlopMode::DeconvBilinear => {
            // kernel support 2s, stride s: 2 taps per output per pass
            for (i, outputs) in separable_pass_outputs(dims, cfg.s).into_iter().enumerate() {
                stages.push(FlopStage {
                    name: format!("pass{}", i + 1),
                    count: FlopCount {
                        muls: outputs * 2,
                        adds: outputs * 2,
                        divs: 0,
                        exps: 0,
                    },
                });
            }
        }
        FlopMode::Nearest => {
            stages.push(FlopStage {
                name: "copy".into(),
                count: FlopCount::default(),
            });
        }
    }
    FlopReport {
        mode,
        dims,
        scale: cfg.s,
        w_s: cfg.w_s,
        w_d: cfg.w_d,
        stages,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(s: usize) -> AggregationConfig {
        AggregationConfig::new(s)
    }

    #[test]
    fn full3d_pinned_example() {
        // H=W=8, D=4, s=2, windows 3: 2048 fine outputs, 27 weight
        // products plus 27 two-FLOP MACs each
        let r = flops_analytic((8, 8, 4), &cfg(2), FlopMode::Full3d);
        assert_eq!(r.total().total(), 2048 * (27 + 54));
    }

    #[test]
    fn decomposed_pinned_example() {
        let r = flops_analytic((8, 8, 4), &cfg(2), FlopMode::Decomposed);
        let stage2 = r
            .stages
            .iter()
            .find(|s| s.name == "stage2_spatial")
            .unwrap();
        assert_eq!(stage2.count.total(), 2048 * 18);
        assert!(r.total().total() < 60_000);
        let full = flops_analytic((8, 8, 4), &cfg(2), FlopMode::Full3d);
        let ratio = full.aggregation_arithmetic() as f64 / r.aggregation_arithmetic() as f64;
        assert!(ratio > 2.5, "ratio {ratio}");
    }

    #[test]
    fn decomposed_beats_full3d_across_scales_and_dims() {
        for s in [2usize, 4, 8] {
            for dims in [(2, 2, 2), (4, 6, 3), (8, 8, 4)] {
                let full = flops_analytic(dims, &cfg(s), FlopMode::Full3d);
                let dec = flops_analytic(dims, &cfg(s), FlopMode::Decomposed);
                assert!(
                    dec.aggregation_arithmetic() < full.aggregation_arithmetic(),
                    "s={s} dims={dims:?}"
                );
            }
        }
    }

    #[test]
    fn single_tap_windows_coincide_up_to_lower_order() {
        // paper-literal config (plain sums, no renormalization, no
        // left-center stage): at w_s = w_d = 1 both paths reduce to one
        // multiply-accumulate chain per fine output and differ only in
        // lower-order disparity-stage terms
        for s in [2usize, 4, 8] {
            let mut c = cfg(s);
            c.w_s = 1;
            c.w_d = 1;
            c.block_reduce = BlockReduce::Sum;
            c.stage1_renormalize = false;
            c.left_center_scale = false;
            let (h, w, d) = (6usize, 6, 4);
            let full = flops_analytic((h, w, d), &c, FlopMode::Full3d).aggregation_arithmetic();
            let dec =
                flops_analytic((h, w, d), &c, FlopMode::Decomposed).aggregation_arithmetic();
            let leading = (h * w * d * s * s * s) as u64;
            // both carry the same leading term; the difference is the
            // disparity-stage remainder, an order 1/s^2 fraction
            assert!(full >= 2 * leading && dec >= 2 * leading);
            let diff = full.abs_diff(dec);
            assert!(
                diff * (s * s) as u64 <= 4 * leading,
                "s={s} full={full} dec={dec}"
            );
        }
    }

    #[test]
    fn counter_overflow_is_reported() {
        let mut c = FlopCounter::new();
        c.adds(u64::MAX);
        c.adds(1);
        assert!(matches!(c.finish(), Err(Error::Numeric(_))));
    }

    #[test]
    fn nearest_baseline_costs_nothing() {
        let r = flops_analytic((8, 8, 4), &cfg(2), FlopMode::Nearest);
        assert_eq!(r.total().total(), 0);
    }
}
