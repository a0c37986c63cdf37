//! Command-line surface: synthetic scene generation, cost-volume
//! upsampling, gradient checking, FLOP benchmarking, toy training and
//! metric evaluation. All reports are diff-able key = value text.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cais_core::aggregate::{
    cais_upsample, disparity_upsample, full3d_upsample, seeded_guidance, seeded_volume,
    spatial_upsample, upsample_baseline, AggregationConfig, BaselineMethod, CostVolume,
};
use cais_core::guidance::GuidanceField;
use cais_core::harness::{
    bad_ratio, epe, gradcheck, train_toy, Ablation, GradcheckTarget, TrainConfig,
};
use cais_core::instrument::{flops_analytic, FlopCounter, FlopMode, FlopReport, FlopStage};
use cais_core::tensor::{read_pfm, read_tensor, write_pfm, write_tensor, Tensor};
use cais_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cais",
    about = "Content-aware inter-scale cost aggregation for stereo cost volumes",
    version
)]
struct Cli {
    /// Worker thread cap for the parallel operators (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic stereo pair with dense ground-truth disparity
    GenSynthetic(GenArgs),
    /// Upsample a cost volume with guided aggregation or a fixed baseline
    Upsample(UpsampleArgs),
    /// Finite-difference check of a manual backward pass
    Gradcheck(GradcheckArgs),
    /// FLOP and wall-time comparison of full-3D vs decomposed aggregation
    Bench(BenchArgs),
    /// Train guidance parameters on synthetic scenes
    TrainToy(TrainArgs),
    /// Compare a predicted disparity map against ground truth
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image size as HxW
    #[arg(long, default_value = "32x32")]
    size: String,
    /// Maximum disparity (exclusive upper bound of ground truth)
    #[arg(long, default_value_t = 8)]
    dmax: usize,
    /// Number of foreground rectangles
    #[arg(long, default_value_t = 3)]
    rects: usize,
    /// Output directory for left.cvt1, right.cvt1, gt.pfm, mask.cvt1
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UpsampleArgs {
    /// Input coarse cost volume (CVT1, H x W x D)
    #[arg(long)]
    cv: PathBuf,
    /// Left guidance field (CVT1, K x Hs x Ws)
    #[arg(long)]
    guidance_left: Option<PathBuf>,
    /// Right guidance field (CVT1, K x Hs x Ws)
    #[arg(long)]
    guidance_right: Option<PathBuf>,
    /// Scale ratio (2, 4 or 8)
    #[arg(long)]
    scale: usize,
    /// Guided mode: decomposed | full3d (requires both guidance fields)
    #[arg(long, conflicts_with = "method")]
    mode: Option<String>,
    /// Fixed baseline: nearest | trilinear | deconv_bilinear
    #[arg(long)]
    method: Option<String>,
    /// Disparity window for the guided modes
    #[arg(long, default_value_t = 3)]
    wd: usize,
    /// Output cost volume (CVT1)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Target: guidance | cais | soft_argmin | loss | end_to_end
    #[arg(long)]
    target: String,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// Coarse volume size as HxWxD
    #[arg(long, default_value = "8x8x4")]
    size: String,
    /// Scale ratio (2, 4 or 8)
    #[arg(long, default_value_t = 2)]
    scale: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Training iterations
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale ratio (2, 4 or 8)
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Fine scene size as HxW
    #[arg(long, default_value = "32x32")]
    size: String,
    /// Maximum disparity
    #[arg(long, default_value_t = 8)]
    dmax: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.03)]
    lr: f64,
    /// Fixed gain on matching costs before aggregation
    #[arg(long, default_value_t = 800.0)]
    gain: f64,
    /// Reuse the left guidance for both views
    #[arg(long, conflicts_with = "ablate_encoding")]
    ablate_stereo: bool,
    /// Drop the explicit spatial-relationship encoding
    #[arg(long)]
    ablate_encoding: bool,
    /// Directory for the trained parameters and the report
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted disparity map (PFM)
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth disparity map (PFM)
    #[arg(long)]
    gt: PathBuf,
    /// Optional validity mask (CVT1, nonzero = counted)
    #[arg(long)]
    mask: Option<PathBuf>,
}

fn parse_dims2(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<_> = s.split('x').collect();
    if let [h, w] = parts[..] {
        if let (Ok(h), Ok(w)) = (h.parse(), w.parse()) {
            return Ok((h, w));
        }
    }
    Err(Error::Config(format!("expected HxW, got {s:?}")))
}

fn parse_dims3(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<_> = s.split('x').collect();
    if let [h, w, d] = parts[..] {
        if let (Ok(h), Ok(w), Ok(d)) = (h.parse(), w.parse(), d.parse()) {
            return Ok((h, w, d));
        }
    }
    Err(Error::Config(format!("expected HxWxD, got {s:?}")))
}

fn cmd_gen(args: &GenArgs) -> Result<()> {
    let (h, w) = parse_dims2(&args.size)?;
    let scene = cais_core::harness::gen_scene::<f32>(args.seed, h, w, args.rects, args.dmax)?;
    std::fs::create_dir_all(&args.out)?;
    write_tensor(args.out.join("left.cvt1"), &scene.left.to_tensor())?;
    write_tensor(args.out.join("right.cvt1"), &scene.right.to_tensor())?;
    write_pfm(
        args.out.join("gt.pfm"),
        &Tensor::new(vec![h, w], scene.gt.clone())?,
    )?;
    let mask: Vec<f32> = scene.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_tensor(args.out.join("mask.cvt1"), &Tensor::new(vec![h, w], mask)?)?;
    println!("seed = {}", args.seed);
    println!("size = {h}x{w}");
    println!("dmax = {}", args.dmax);
    println!("out = {}", args.out.display());
    Ok(())
}

fn cmd_upsample(args: &UpsampleArgs) -> Result<()> {
    let cv = CostVolume::from_tensor(&read_tensor(&args.cv)?)?;
    let out = match (&args.mode, &args.method) {
        (Some(mode), None) => {
            let (gl_path, gr_path) = match (&args.guidance_left, &args.guidance_right) {
                (Some(l), Some(r)) => (l, r),
                _ => {
                    return Err(Error::Config(
                        "guided modes need --guidance-left and --guidance-right".into(),
                    ))
                }
            };
            let g_l = GuidanceField::from_tensor(&read_tensor(gl_path)?)?;
            let g_r = GuidanceField::from_tensor(&read_tensor(gr_path)?)?;
            let mut cfg = AggregationConfig::new(args.scale);
            cfg.w_s = g_l.window;
            cfg.w_d = args.wd;
            match mode.as_str() {
                "decomposed" => cais_upsample(&cv, &g_l, &g_r, &cfg, None)?,
                "full3d" => full3d_upsample(&cv, &g_l, &g_r, &cfg, None)?,
                other => return Err(Error::Config(format!("unknown mode {other:?}"))),
            }
        }
        (None, Some(method)) => {
            let m: BaselineMethod = method.parse()?;
            upsample_baseline(&cv, args.scale, m)?
        }
        _ => {
            return Err(Error::Config(
                "exactly one of --mode or --method is required".into(),
            ))
        }
    };
    write_tensor(&args.out, &out.to_tensor())?;
    println!(
        "out_shape = {}x{}x{}",
        out.height, out.width, out.disparities
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let target: GradcheckTarget = args.target.parse()?;
    let tolerance = match target {
        GradcheckTarget::EndToEnd => 1e-4,
        _ => 1e-5,
    };
    let err = gradcheck(target, args.seed)?;
    println!("target = {}", args.target);
    println!("max_relative_error = {err:.3e}");
    println!("tolerance = {tolerance:.1e}");
    if err >= tolerance {
        return Err(Error::Numeric(format!(
            "gradcheck {} failed: {err:.3e} >= {tolerance:.1e}",
            args.target
        )));
    }
    Ok(())
}

fn runtime_report(
    dims: (usize, usize, usize),
    cfg: &AggregationConfig,
    mode: FlopMode,
) -> Result<(FlopReport, f64)> {
    let (h, w, d) = dims;
    let cv = seeded_volume::<f32>(h, w, d, 7);
    let g_l = seeded_guidance::<f32>(cfg.w_s, h * cfg.s, w * cfg.s, 8);
    let g_r = seeded_guidance::<f32>(cfg.w_s, h * cfg.s, w * cfg.s, 9);
    let start = Instant::now();
    let stages = match mode {
        FlopMode::Full3d => {
            let mut c = FlopCounter::new();
            full3d_upsample(&cv, &g_l, &g_r, cfg, Some(&mut c))?;
            vec![FlopStage {
                name: "full3d".into(),
                count: c.finish()?,
            }]
        }
        FlopMode::Decomposed => {
            let mut c1 = FlopCounter::new();
            let cv1 = disparity_upsample(&cv, &g_r, &g_l, cfg, Some(&mut c1))?;
            let mut c2 = FlopCounter::new();
            spatial_upsample(&cv1, &g_l, cfg, Some(&mut c2))?;
            vec![
                FlopStage {
                    name: "stage1_disparity".into(),
                    count: c1.finish()?,
                },
                FlopStage {
                    name: "stage2_spatial".into(),
                    count: c2.finish()?,
                },
            ]
        }
        _ => return Err(Error::Config("bench covers the guided modes only".into())),
    };
    let elapsed = start.elapsed().as_secs_f64();
    Ok((
        FlopReport {
            mode,
            dims,
            scale: cfg.s,
            w_s: cfg.w_s,
            w_d: cfg.w_d,
            stages,
        },
        elapsed,
    ))
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let dims = parse_dims3(&args.size)?;
    let cfg = AggregationConfig::new(args.scale);
    cfg.validate()?;
    for mode in [FlopMode::Full3d, FlopMode::Decomposed] {
        let analytic = flops_analytic(dims, &cfg, mode);
        let (runtime, secs) = runtime_report(dims, &cfg, mode)?;
        println!("[{mode}.analytic]");
        print!("{}", analytic.to_key_values());
        println!("[{mode}.runtime]");
        print!("{}", runtime.to_key_values());
        println!("{mode}.wall_seconds = {secs:.6}");
        let (a, r) = (analytic.total(), runtime.total());
        if a != r {
            return Err(Error::Numeric(format!(
                "analytic and runtime counts disagree for {mode}: {a:?} vs {r:?}"
            )));
        }
        println!("{mode}.counters_agree = true");
    }
    let full = flops_analytic(dims, &cfg, FlopMode::Full3d).aggregation_arithmetic();
    let dec = flops_analytic(dims, &cfg, FlopMode::Decomposed).aggregation_arithmetic();
    println!(
        "aggregation_flop_ratio = {:.6}",
        full as f64 / dec as f64
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (h, w) = parse_dims2(&args.size)?;
    let mut cfg = TrainConfig::new(args.seed);
    cfg.iterations = args.iters;
    cfg.s = args.scale;
    cfg.height = h;
    cfg.width = w;
    cfg.d_max = args.dmax;
    cfg.lr = args.lr;
    cfg.cost_gain = args.gain;
    cfg.ablation = if args.ablate_stereo {
        Ablation::LeftOnlyViews
    } else if args.ablate_encoding {
        Ablation::NoEncoding
    } else {
        Ablation::None
    };
    let (params, report) = train_toy(&cfg)?;
    print!("{}", report.to_key_values());
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        params.save(dir)?;
        std::fs::write(dir.join("report.txt"), report.to_key_values())?;
        println!("out = {}", dir.display());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let pred = read_pfm(&args.pred)?;
    let gt = read_pfm(&args.gt)?;
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} and gt {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    let mask: Vec<bool> = match &args.mask {
        Some(path) => read_tensor(path)?.data().iter().map(|&v| v != 0.0).collect(),
        None => vec![true; pred.len()],
    };
    let e = epe(pred.data(), gt.data(), &mask)?;
    println!("epe = {e:.6}");
    for delta in [0.5f32, 1.0, 4.0] {
        let b = bad_ratio(pred.data(), gt.data(), &mask, delta)?;
        println!("bad_{delta} = {b:.6}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::Upsample(a) => cmd_upsample(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::TrainToy(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.threads {
        Some(n) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            pool.install(|| run(&cli))
        }
        None => run(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::Shape(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
