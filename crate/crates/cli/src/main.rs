use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqmix::inference::{draw_sigma2, moi_ellipsoid, TraceEntry};
use sqmix::io::{
    export_meshes, load_point_cloud, load_result, load_scene, save_labels, save_point_cloud, save_result, synth_scene,
    PointFormat,
};
use sqmix::metrics::{evaluate, segmentation_labels};
use sqmix::{
    fit_superquadric, run_abstraction, AbstractionResult, GstmComponent, InferenceError, IoError, MetricsError,
    SamplerConfig,
};

const MESH_RESOLUTION: usize = 32;

#[derive(Parser)]
#[command(name = "sqmix", version, about = "Abstract a point cloud into tapered superquadrics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler and merging pass on a point cloud.
    Abstract(AbstractArgs),
    /// Fit one superquadric to the whole cloud.
    FitOne {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "result.json")]
        out: PathBuf,
    },
    /// Sample a point cloud from a scene description.
    Synth {
        scene: PathBuf,
        /// Overrides the seed stored in the scene file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "cloud.ply")]
        out: PathBuf,
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Print Chamfer-L1 and IoU of a result against a ground-truth cloud as JSON.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 32)]
        iou_res: usize,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct AbstractArgs {
    input: PathBuf,
    /// JSON file with sampler settings; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_init: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    merge_lambda: Option<f64>,
    #[arg(long)]
    no_split: bool,
    #[arg(long, default_value = "result.json")]
    out: PathBuf,
    #[arg(long)]
    mesh_out: Option<PathBuf>,
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Input(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Input(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<InferenceError> for Failure {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            InferenceError::DegenerateInput(_) => Failure::Input(e.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::EmptyGroundTruth => Failure::Input(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Abstract(args) => abstract_cmd(args),
        Command::FitOne { input, seed, out } => fit_one(&input, seed, &out),
        Command::Synth {
            scene,
            seed,
            out,
            labels_out,
        } => {
            let scene = load_scene(&scene)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(scene.seed));
            let (cloud, labels) = synth_scene(&scene, &mut rng);
            save_point_cloud(&cloud.points, &out)?;
            if let Some(path) = labels_out {
                save_labels(&labels, &path)?;
            }
            Ok(())
        }
        Command::Eval {
            result,
            gt,
            iou_res,
            samples,
            seed,
        } => {
            if iou_res == 0 || samples == 0 {
                return Err(Failure::Usage("--iou-res and --samples must be positive".into()));
            }
            let result = load_result(&result)?;
            let gt = load_point_cloud(&gt, PointFormat::Auto)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let report = evaluate(&result, &gt.points, iou_res, samples, &mut rng)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("metrics serialize"));
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<SamplerConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn abstract_cmd(args: AbstractArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => load_config(path)?,
        None => SamplerConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.k_init {
        config.k_init = v;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.p0 {
        config.p0 = v;
    }
    if let Some(v) = args.iters {
        config.iterations = v;
    }
    if let Some(v) = args.merge_lambda {
        config.merge_lambda = v;
    }
    if args.no_split {
        config.split_enabled = false;
    }
    config.validate()?;

    let cloud = load_point_cloud(&args.input, PointFormat::Auto)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let result = run_abstraction(&cloud.points, &config, &mut rng)?;
    check_finite(&result)?;
    save_result(&result, &args.out)?;
    if let Some(path) = &args.labels_out {
        save_labels(&segmentation_labels(&result), path)?;
    }
    if let Some(prefix) = &args.mesh_out {
        export_meshes(&result, prefix, MESH_RESOLUTION)?;
    }
    eprintln!("{} components from {} points", result.k(), cloud.points.len());
    Ok(())
}

// the fit is deterministic; the seed only drives the noise-variance draw
fn fit_one(input: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let cloud = load_point_cloud(input, PointFormat::Auto)?;
    if cloud.points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Failure::Input(format!("{}: non-finite coordinates", input.display())));
    }
    let config = SamplerConfig::default();
    let init = moi_ellipsoid(&cloud.points);
    let report = fit_superquadric(&cloud.points, &init, &config.fit_options());
    let n = cloud.points.len();
    let result = AbstractionResult {
        components: vec![GstmComponent {
            theta: report.theta,
            sigma2: draw_sigma2(n, report.final_ssd, &mut ChaCha8Rng::seed_from_u64(seed)),
        }],
        labels: vec![0; n],
        trace: vec![TraceEntry {
            k: 1,
            d_total: report.final_ssd,
        }],
    };
    check_finite(&result)?;
    save_result(&result, out)?;
    eprintln!("rms radial distance {:.6}", report.rms(n));
    Ok(())
}

fn check_finite(result: &AbstractionResult) -> Result<(), Failure> {
    let ok = result.components.iter().all(|c| {
        let t = &c.theta;
        let scalars = [t.eps1, t.eps2, t.ax, t.ay, t.az, t.kx, t.ky, c.sigma2];
        scalars.iter().all(|v| v.is_finite()) && t.translation.iter().all(|v| v.is_finite())
    });
    if ok {
        Ok(())
    } else {
        Err(Failure::Numerical("non-finite parameters in the fitted result".into()))
    }
}
