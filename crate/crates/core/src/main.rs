use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use diffcom::checkpoint::{Checkpoint, TrainingState};
use diffcom::codec::{compress, decompress, CompressOptions};
use diffcom::config::{DataConfig, TrainConfig};
use diffcom::geom::io::{load_any, write_point_cloud, PointFormat};
use diffcom::model::{Model, Variant};
use diffcom::report::{
    bd_report, load_rd_csv, rd_csv, rd_svg, CompressionReport, DecompressReport, EvalReport, RdRow,
};
use diffcom::train::{
    pretrain_autoencoder, prepare_items, train_diffusion, train_one_stage, AeTrainer, DiffusionTrainer,
    OneStageTrainer,
};
use diffcom::{Error, PointCloud};

#[derive(Parser)]
#[command(name = "diffcom", version, about = "Point cloud geometry codec with a sparse prior and diffusion decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain the autoencoder (or train a one-stage model end to end).
    TrainAe {
        #[arg(long)]
        config: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        /// JSON-lines training log.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the state stored in `--checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Train the sparse prior and denoiser on top of a pretrained autoencoder.
    TrainDiffusion {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained autoencoder, or a stage-two checkpoint to resume.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress a point cloud file into a .dcp stream.
    Compress {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Sampler seed stored in the header.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// DDIM steps stored in the header.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruct a point cloud from a .dcp stream.
    Decompress {
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short)]
        output: PathBuf,
        /// Override the DDIM step count from the header.
        #[arg(long)]
        steps: Option<usize>,
        /// ply, ply-ascii or xyz.
        #[arg(long, default_value = "ply")]
        format: String,
    },
    /// Distortion between a reference and a reconstruction.
    Eval {
        reference: PathBuf,
        reconstruction: PathBuf,
        #[arg(long)]
        bpp: Option<f64>,
        /// PSNR peak; defaults to the reference bounding-box diagonal.
        #[arg(long)]
        peak: Option<f64>,
    },
    /// Rate-distortion points of several checkpoints over a dataset.
    RdSweep {
        /// Directory of point files, or `synthetic` for the 8-shape set.
        #[arg(long)]
        dataset: String,
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        peak: Option<f64>,
        /// Also write an SVG plot.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// BD-PSNR and BD-rate of `test` against `anchor` (RD CSV files).
    BdReport { anchor: PathBuf, test: PathBuf },
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("DIFFCOM_CACHE").filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    load_any(path).with_context(|| format!("reading {}", path.display()))
}

struct Log(Option<BufWriter<File>>);

impl Log {
    fn open(path: Option<&Path>, append: bool) -> Result<Self> {
        Ok(Log(match path {
            Some(p) => Some(BufWriter::new(
                fs::OpenOptions::new()
                    .create(true)
                    .append(append)
                    .write(true)
                    .truncate(!append)
                    .open(p)
                    .with_context(|| format!("opening log {}", p.display()))?,
            )),
            None => None,
        }))
    }

    fn line<T: Serialize>(&mut self, v: &T) {
        if let Some(w) = self.0.as_mut() {
            if let Ok(s) = serde_json::to_string(v) {
                let _ = writeln!(w, "{s}");
            }
        }
    }
}

/// Training log line shared by all stages.
#[derive(Serialize)]
struct LogLine {
    stage: &'static str,
    step: usize,
    loss_recon: f64,
    loss_comp: f64,
    bpp_est: Option<f64>,
    cd_val: Option<f64>,
    loss_gmm: f64,
    loss_total: f64,
}

fn config_with_overrides(path: &Path, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train_ae(cfg_path: &Path, out: &Path, seed: Option<u64>, steps: Option<usize>, log: Option<&Path>, resume: bool) -> Result<()> {
    let cfg = config_with_overrides(cfg_path, seed)?;
    let data = cfg.data.load(cfg.points_per_cloud, cache_dir().as_deref())?;
    let mut sched = cfg.ae.clone();
    if let Some(s) = steps {
        sched.steps = s;
    }
    let (mut model, prev) = if resume {
        let ck = load_checkpoint(out)?;
        (ck.to_model()?, Some(ck.training))
    } else {
        (Model::new(&cfg.model_config()?, cfg.seed)?, None)
    };
    let mut log = Log::open(log, resume)?;
    let start = Instant::now();
    let training = if cfg.variant == Variant::OneStage {
        let mut tr = prev.and_then(|t| t.one_stage).unwrap_or_else(|| OneStageTrainer::new(sched.clone(), cfg.lambda_comp, cfg.seed));
        tr.sched.steps = sched.steps;
        let pts: Vec<_> = data.iter().map(|p| p.points().clone()).collect();
        train_one_stage(&mut model, &pts, &mut tr, |r| {
            log.line(&LogLine {
                stage: "one_stage",
                step: r.step,
                loss_recon: r.cd,
                loss_comp: r.bpp_est,
                bpp_est: Some(r.bpp_est),
                cd_val: Some(r.cd),
                loss_gmm: 0.0,
                loss_total: r.loss_total,
            })
        })?;
        TrainingState { one_stage: Some(tr), ..Default::default() }
    } else {
        let mut tr = prev.and_then(|t| t.ae).unwrap_or_else(|| AeTrainer::new(sched.clone(), cfg.seed));
        tr.sched.steps = sched.steps;
        let ae = model.ae.clone();
        pretrain_autoencoder(&ae, &mut model.store, &data, &mut tr, |r| {
            log.line(&LogLine {
                stage: "autoencoder",
                step: r.step,
                loss_recon: r.loss,
                loss_comp: 0.0,
                bpp_est: None,
                cd_val: Some(r.loss),
                loss_gmm: 0.0,
                loss_total: r.loss,
            })
        })?;
        TrainingState { ae: Some(tr), ..Default::default() }
    };
    let step = training.ae.as_ref().map(|t| t.step).or(training.one_stage.as_ref().map(|t| t.step)).unwrap_or(0);
    Checkpoint::from_model(&model, step as u64, training).save(out)?;
    eprintln!("trained {} steps in {:.1}s -> {}", step, start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn train_stage_two(cfg_path: &Path, ckpt: &Path, out: &Path, seed: Option<u64>, steps: Option<usize>, log: Option<&Path>) -> Result<()> {
    let cfg = config_with_overrides(cfg_path, seed)?;
    if !cfg.variant.two_stage() {
        return Err(Error::ConfigMismatch("one-stage models are trained with train-ae".into()).into());
    }
    let src = load_checkpoint(ckpt)?;
    let resume = src.training.diffusion.is_some();
    let (mut model, mut trainer) = if resume {
        if src.config != cfg.model_config()? {
            return Err(Error::ConfigMismatch("checkpoint model differs from the config".into()).into());
        }
        (src.to_model()?, src.training.diffusion.clone().unwrap())
    } else {
        let mut m = Model::new(&cfg.model_config()?, cfg.seed)?;
        if src.config.autoencoder != m.cfg.autoencoder || src.config.points != m.cfg.points {
            return Err(Error::ConfigMismatch("autoencoder checkpoint does not match the configured autoencoder".into()).into());
        }
        src.load_params_into(&mut m, "ae.")?;
        let mut t = DiffusionTrainer::new(cfg.diffusion.clone(), cfg.weights(), cfg.seed);
        t.finetune_ae = cfg.finetune_ae;
        t.ema = (cfg.ema_decay > 0.0).then(|| diffcom::nn::Ema::new(cfg.ema_decay));
        (m, t)
    };
    if let Some(s) = steps {
        trainer.sched.steps = s;
    }
    let data = cfg.data.load(cfg.points_per_cloud, cache_dir().as_deref())?;
    let pts: Vec<_> = data.iter().map(|p| p.points().clone()).collect();
    let items = prepare_items(&mut model, &pts)?;
    let mut log = Log::open(log, resume)?;
    let start = Instant::now();
    let eval_steps = cfg.eval_ddim_steps;
    let eval_set = data.clone();
    train_diffusion(
        &mut model,
        &items,
        &mut trainer,
        cfg.eval_every,
        |m| {
            let mut tot = 0.0;
            for pc in &eval_set {
                let enc = compress(m, pc, &CompressOptions { steps: Some(eval_steps), seed: 0 })?;
                tot += diffcom::geom::chamfer_distance(pc, &decompress(m, &enc.bytes, None)?.cloud)?;
            }
            Ok(tot / eval_set.len() as f64)
        },
        |r| {
            log.line(&LogLine {
                stage: "diffusion",
                step: r.step,
                loss_recon: r.loss_recon,
                loss_comp: r.loss_comp,
                bpp_est: Some(r.bpp_est),
                cd_val: r.cd_val,
                loss_gmm: r.loss_gmm,
                loss_total: r.loss_total,
            })
        },
    )?;
    let step = trainer.step;
    Checkpoint::from_model(&model, step as u64, TrainingState { diffusion: Some(trainer), ..Default::default() }).save(out)?;
    eprintln!("trained {} steps in {:.1}s -> {}", step, start.elapsed().as_secs_f64(), out.display());
    Ok(())
}

fn cmd_compress(input: &Path, ckpt: &Path, out: &Path, seed: u64, steps: Option<usize>) -> Result<()> {
    let cloud = load_cloud(input)?;
    let model = load_checkpoint(ckpt)?.to_model()?;
    let start = Instant::now();
    let enc = compress(&model, &cloud, &CompressOptions { steps, seed })?;
    let enc_time_s = start.elapsed().as_secs_f64();
    diffcom::checkpoint::write_atomic(out, &enc.bytes).with_context(|| format!("writing {}", out.display()))?;
    print_json(&CompressionReport {
        input: input.display().to_string(),
        output: out.display().to_string(),
        input_points: enc.input_points,
        bpp: enc.bpp(),
        header_bytes: enc.header_bytes,
        payload_bytes: enc.payload_bytes,
        z_bytes: enc.z_bytes,
        coord_bytes: enc.coord_bytes,
        y_bytes: enc.y_bytes,
        n_sparse: enc.num_sparse,
        ddim_steps: steps.unwrap_or(model.cfg.ddim_steps),
        seed,
        enc_time_s,
    })
}

fn cmd_decompress(input: &Path, ckpt: &Path, out: &Path, steps: Option<usize>, format: &str) -> Result<()> {
    let format: PointFormat = format.parse()?;
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    let model = load_checkpoint(ckpt)?.to_model()?;
    let dec = decompress(&model, &bytes, steps)?;
    write_point_cloud(out, &dec.cloud, format).with_context(|| format!("writing {}", out.display()))?;
    print_json(&DecompressReport {
        input: input.display().to_string(),
        output: out.display().to_string(),
        points: dec.cloud.len(),
        ddim_steps: dec.steps,
        dec_time_s: dec.seconds,
    })
}

fn cmd_eval(reference: &Path, rec: &Path, bpp: Option<f64>, peak: Option<f64>) -> Result<()> {
    let a = load_cloud(reference)?;
    let b = load_cloud(rec)?;
    let mut r = EvalReport::compute(&a, &b, peak)?;
    r.bpp = bpp;
    print_json(&r)
}

fn dataset_clouds(spec: &str, points: usize) -> Result<Vec<PointCloud>> {
    let data = if spec == "synthetic" {
        DataConfig::overfit_set()
    } else {
        DataConfig { synthetic: None, root: Some(PathBuf::from(spec)) }
    };
    Ok(data.load(points, cache_dir().as_deref())?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_rd_sweep(
    dataset: &str,
    ckpts: &[PathBuf],
    out: &Path,
    steps: Option<usize>,
    seed: u64,
    peak: Option<f64>,
    plot: Option<&Path>,
) -> Result<()> {
    let mut rows = Vec::new();
    for ck in ckpts {
        let model = load_checkpoint(ck)?.to_model()?;
        let clouds = dataset_clouds(dataset, model.cfg.points)?;
        let (mut bpp, mut psnr, mut cd) = (0.0, 0.0, 0.0);
        for pc in &clouds {
            let enc = compress(&model, pc, &CompressOptions { steps, seed })?;
            let dec = decompress(&model, &enc.bytes, None)?;
            let e = EvalReport::compute(pc, &dec.cloud, peak)?;
            bpp += enc.bpp();
            psnr += e.d1_psnr;
            cd += e.cd;
        }
        let n = clouds.len() as f64;
        let id = ck.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| ck.display().to_string());
        rows.push(RdRow { model_id: id, bpp: bpp / n, d1_psnr: psnr / n, cd: cd / n });
    }
    if rows.len() < 4 {
        eprintln!("warning: {} operating points; BD metrics need at least 4", rows.len());
    }
    let csv = rd_csv(&rows)?;
    diffcom::checkpoint::write_atomic(out, csv.as_bytes())?;
    if let Some(p) = plot {
        fs::write(p, rd_svg(&rows)).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_bd(anchor: &Path, test: &Path) -> Result<()> {
    let a = load_rd_csv(anchor).with_context(|| format!("reading {}", anchor.display()))?;
    let b = load_rd_csv(test).with_context(|| format!("reading {}", test.display()))?;
    print_json(&bd_report(&a, &b, &anchor.display().to_string(), &test.display().to_string())?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainAe { config, checkpoint, seed, steps, log, resume } => {
            train_ae(&config, &checkpoint, seed, steps, log.as_deref(), resume)
        }
        Cmd::TrainDiffusion { config, checkpoint, output, seed, steps, log } => {
            train_stage_two(&config, &checkpoint, &output, seed, steps, log.as_deref())
        }
        Cmd::Compress { input, checkpoint, output, seed, steps } => cmd_compress(&input, &checkpoint, &output, seed, steps),
        Cmd::Decompress { input, checkpoint, output, steps, format } => {
            cmd_decompress(&input, &checkpoint, &output, steps, &format)
        }
        Cmd::Eval { reference, reconstruction, bpp, peak } => cmd_eval(&reference, &reconstruction, bpp, peak),
        Cmd::RdSweep { dataset, checkpoints, output, steps, seed, peak, plot } => {
            cmd_rd_sweep(&dataset, &checkpoints, &output, steps, seed, peak, plot.as_deref())
        }
        Cmd::BdReport { anchor, test } => cmd_bd(&anchor, &test),
    }
}

/// 3 for configuration/model mismatches, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::ConfigMismatch(_) | Error::Shape(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::Diverged { .. }) = e.downcast_ref::<Error>() {
                eprintln!("hint: lower the learning rate or check the data for degenerate clouds");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let mismatch = anyhow::Error::from(Error::ConfigMismatch("x".into())).context("outer");
        assert_eq!(exit_code(&mismatch), 3);
        let io = anyhow::Error::from(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "gone")));
        assert_eq!(exit_code(&io), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
