//! `swm`: data generation, preprocessing, training, rollout, evaluation and
//! benchmarking for the scale-wise world model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use swm_core::bench::{bench_both, bench_layout, BenchConfig};
use swm_core::checkpoint::{load_checkpoint, save_tokenizer, save_world_model};
use swm_core::data::sprites::generate_episode;
use swm_core::data::{list_episodes, preprocess_session, read_episode, read_session, write_dataset, EpisodeRecord, PreprocessConfig};
use swm_core::image::{read_png, Frame};
use swm_core::layout::{dump_layout, LayoutKind};
use swm_core::metrics::{psnr, ssim, Metric};
use swm_core::model::WorldModel;
use swm_core::motion::build_prompt;
use swm_core::rollout::{best_of_n, rollout, write_rollout, RolloutInput, RolloutOptions, SamplingConfig};
use swm_core::tokenizer::{Tokenizer, TokenizerSpec};
use swm_core::train::{fit_tokenizer, fit_world_model, MetricsLog};
use swm_core::{load_config, write_config, Config, Error, Result};

#[derive(Parser)]
#[command(name = "swm", version, about = "Scale-wise autoregressive video world model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sprites episodes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Split raw sessions into training clips.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Directory of session containers.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 15)]
        fps: usize,
        #[arg(long, default_value_t = 51)]
        tmin: usize,
        #[arg(long, default_value_t = 30)]
        tclip: usize,
        #[arg(long = "min-clip", default_value_t = 15)]
        min_clip: usize,
        /// Sliding-window stride; defaults to `--tclip`.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train the multi-scale tokenizer.
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        /// Directory of episode containers.
        #[arg(long)]
        data: PathBuf,
        /// Overrides `run.tokenizer_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the world model on top of a frozen tokenizer.
    TrainWm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Overrides `run.total_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Predict future frames from an episode's context.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// World-model checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Episode container providing context frames and actions.
        #[arg(long)]
        context: PathBuf,
        /// Number of future frames.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        greedy: bool,
        /// Sample N futures and keep the best by PSNR against the episode.
        #[arg(long = "best-of")]
        best_of: Option<usize>,
        #[arg(long = "no-prompt")]
        no_prompt: bool,
    },
    /// Score predicted videos against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Scale-wise versus raster decoding benchmark.
    Bench {
        #[command(flatten)]
        common: Common,
        /// World-model checkpoint; random weights when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long = "future-frames", default_value_t = 1)]
        future_frames: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 2)]
        warmups: usize,
        #[arg(long = "dump-layout")]
        dump_layout: bool,
    },
}

fn load(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn make_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

fn read_dataset(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let paths = list_episodes(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no episodes under {}", dir.display())));
    }
    paths.iter().map(|p| read_episode(p)).collect()
}

fn gen_data(common: &Common, episodes: Option<usize>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(n) = episodes {
        cfg.data.episodes = n;
    }
    let recs: Vec<EpisodeRecord> =
        (0..cfg.data.episodes as u64).map(|i| generate_episode(&cfg.data, cfg.run.seed, i)).collect::<Result<_>>()?;
    make_dir(&common.out)?;
    write_dataset(&recs, &common.out)?;
    write_config(&cfg, &common.out.join("config.json"))?;
    println!("wrote {} episodes to {}", recs.len(), common.out.display());
    Ok(())
}

fn preprocess(common: &Common, input: &Path, pc: PreprocessConfig) -> Result<()> {
    load(common)?;
    let sessions = list_episodes(input)?;
    let mut out = Vec::new();
    for p in &sessions {
        let s = read_session(p)?;
        out.extend(preprocess_session(&s, &pc)?);
    }
    make_dir(&common.out)?;
    write_dataset(&out, &common.out)?;
    println!("{} sessions -> {} clips", sessions.len(), out.len());
    Ok(())
}

fn train_tokenizer(common: &Common, data: &Path, steps: Option<usize>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(s) = steps {
        cfg.run.tokenizer_steps = s;
    }
    let clips = read_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut tok = Tokenizer::<f32>::new(TokenizerSpec::from_config(&cfg), &mut rng)?;
    make_dir(&common.out)?;
    let log_path = common.out.join("tokenizer_metrics.csv");
    let mut log = String::from("step,loss,recon_obs,recon_fut,commit,grad_norm,dead_resets\n");
    let ckpt = common.out.join("tokenizer");
    fit_tokenizer(&mut tok, &clips, &cfg.run, cfg.run.tokenizer_steps, &mut rng, |m| {
        let step = log.lines().count();
        log.push_str(&format!(
            "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
            m.loss, m.recon_obs, m.recon_fut, m.commit, m.grad_norm, m.dead_resets
        ));
        Ok(false)
    })?;
    write_text(&log_path, &log)?;
    save_tokenizer(&ckpt, &tok, &cfg)?;
    println!("tokenizer trained for {} steps -> {}", tok.steps, ckpt.display());
    Ok(())
}

fn train_wm(common: &Common, data: &Path, tokenizer: &Path, steps: Option<usize>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(s) = steps {
        cfg.run.total_steps = s;
    }
    let tok: Tokenizer<f32> = load_checkpoint(tokenizer)?.tokenizer()?;
    if tok.spec != TokenizerSpec::from_config(&cfg) {
        return Err(Error::invalid("tokenizer checkpoint does not match the configuration"));
    }
    let clips = read_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut model = WorldModel::<f32>::new(cfg.model.clone(), cfg.schedule.clone(), &mut rng)?;
    make_dir(&common.out)?;
    let mut log = MetricsLog::open(&common.out.join("metrics.csv"))?;
    let ckpt = common.out.join("world_model");
    let every = cfg.run.checkpoint_every.max(1);
    let last = fit_world_model(&mut model, &tok, &clips, &cfg.run, cfg.data.step_size, cfg.run.total_steps, &mut rng, |m, s| {
        log.append(s)?;
        if (s.step + 1) % every == 0 {
            save_world_model(&ckpt, m, s.step as u64 + 1, &cfg)?;
        }
        Ok(false)
    })?;
    save_world_model(&ckpt, &model, cfg.run.total_steps as u64, &cfg)?;
    println!("world model trained for {} steps (ce {:.4}) -> {}", cfg.run.total_steps, last.ce_loss, ckpt.display());
    Ok(())
}

struct RolloutArgs<'a> {
    checkpoint: &'a Path,
    tokenizer: &'a Path,
    context: &'a Path,
    steps: usize,
    greedy: bool,
    best_of: Option<usize>,
    no_prompt: bool,
}

fn run_rollout(common: &Common, a: RolloutArgs<'_>) -> Result<()> {
    let mut cfg = load(common)?;
    let ck = load_checkpoint(a.checkpoint)?;
    let model: WorldModel<f32> = ck.world_model()?;
    let tok: Tokenizer<f32> = load_checkpoint(a.tokenizer)?.tokenizer()?;
    cfg.run.context_frames = cfg.run.context_frames.max(1);
    let ep = read_episode(a.context)?;
    let t0 = cfg.run.context_frames;
    let horizon = t0 + a.steps;
    if ep.len() < t0 {
        return Err(Error::invalid(format!("episode has {} frames, fewer than {t0} context frames", ep.len())));
    }
    let actions = ep.actions_f64();
    let prompt = match (&ep.trajectories, cfg.run.use_motion_prompt && !a.no_prompt) {
        (Some(tr), true) => Some(build_prompt(&ep.frames[0], tr, cfg.run.confidence_threshold)?),
        _ => None,
    };
    let input = RolloutInput { context: &ep.frames[..t0], actions: &actions, horizon, prompt: prompt.as_ref() };
    let sampling = if a.greedy { SamplingConfig::greedy() } else { SamplingConfig::from_run(&cfg.run) };
    let opts = RolloutOptions { sampling, use_cache: true, seed: cfg.run.seed };
    make_dir(&common.out)?;
    match a.best_of {
        None => {
            let out = rollout(&model, &tok, &input, &opts)?;
            write_rollout(&out, t0 + 1, &common.out)?;
            println!("{} frames, {} forward passes -> {}", out.frames.len(), out.forward_passes, common.out.display());
        }
        Some(n) => {
            if ep.len() < horizon {
                return Err(Error::invalid(format!("best-of-N needs {horizon} ground-truth frames, episode has {}", ep.len())));
            }
            let res = best_of_n(&model, &tok, &input, &ep.frames[t0..horizon], n, Metric::Psnr, &opts)?;
            write_rollout(res.best_sample(), t0 + 1, &common.out)?;
            let mut csv = String::from("n,sample_psnr,best_of_n_psnr\n");
            for (i, s) in res.scores.iter().enumerate() {
                csv.push_str(&format!("{},{s:.6},{:.6}\n", i + 1, res.best_of_first(i + 1)));
            }
            write_text(&common.out.join("best_of_n.csv"), &csv)?;
            println!("best of {n}: sample {} with PSNR {:.3} dB", res.best, res.scores[res.best]);
        }
    }
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    v.sort();
    Ok(v)
}

/// 1-based frame number of `frame_XXX.png`.
fn frame_number(p: &Path) -> Option<usize> {
    p.file_stem()?.to_str()?.strip_prefix("frame_")?.parse().ok()
}

fn ground_truth(gt: &Path, pred: &[PathBuf]) -> Result<Vec<Frame>> {
    if gt.join("manifest.json").is_file() {
        let ep = read_episode(gt)?;
        pred.iter()
            .map(|p| {
                let t = frame_number(p).ok_or_else(|| Error::invalid(format!("{} is not named frame_<t>.png", p.display())))?;
                ep.frames.get(t.wrapping_sub(1)).cloned().ok_or_else(|| Error::invalid(format!("ground truth has no frame {t}")))
            })
            .collect()
    } else {
        pred.iter().map(|p| read_png(&gt.join(p.file_name().expect("file")))).collect()
    }
}

fn videos(pred: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !png_files(pred)?.is_empty() {
        let name = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "video".into());
        return Ok(vec![(name, pred.to_path_buf())]);
    }
    let mut v = Vec::new();
    for e in fs::read_dir(pred).map_err(|e| Error::io(pred, e))? {
        let p = e.map_err(|e| Error::io(pred, e))?.path();
        if p.is_dir() && !png_files(&p)?.is_empty() {
            v.push((p.file_name().expect("dir").to_string_lossy().into_owned(), p));
        }
    }
    v.sort();
    if v.is_empty() {
        return Err(Error::invalid(format!("no predicted frames under {}", pred.display())));
    }
    Ok(v)
}

fn eval(common: &Common, pred: &Path, gt: &Path) -> Result<()> {
    load(common)?;
    let vids = videos(pred)?;
    let single = vids.len() == 1 && vids[0].1 == pred;
    let mut csv = String::from("video,frames,psnr,ssim,fvd,lpips\n");
    let (mut sp, mut ss, mut nf) = (0.0, 0.0, 0);
    for (name, dir) in &vids {
        let files = png_files(dir)?;
        let frames: Vec<Frame> = files.iter().map(|p| read_png(p)).collect::<Result<_>>()?;
        let gt_dir = if single { gt.to_path_buf() } else { gt.join(name) };
        let truth = ground_truth(&gt_dir, &files)?;
        let mut p = 0.0;
        let mut s = 0.0;
        for (a, b) in frames.iter().zip(&truth) {
            p += psnr(a, b)?;
            s += ssim(a, b)?;
        }
        let n = frames.len() as f64;
        csv.push_str(&format!("{name},{},{:.6},{:.6},unavailable,unavailable\n", frames.len(), p / n, s / n));
        sp += p / n;
        ss += s / n;
        nf += frames.len();
    }
    let k = vids.len() as f64;
    csv.push_str(&format!("mean,{nf},{:.6},{:.6},unavailable,unavailable\n", sp / k, ss / k));
    make_dir(&common.out)?;
    let path = common.out.join("metrics.csv");
    write_text(&path, &csv)?;
    print!("{csv}");
    Ok(())
}

fn bench(common: &Common, checkpoint: Option<&Path>, bc: BenchConfig, dump: bool) -> Result<()> {
    let mut cfg = load(common)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let model: WorldModel<f32> = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            cfg = ck.config.clone();
            ck.world_model()?
        }
        None => WorldModel::new(cfg.model.clone(), cfg.schedule.clone(), &mut rng)?,
    };
    let tok = Tokenizer::<f32>::new(TokenizerSpec::from_config(&cfg), &mut rng)?;
    make_dir(&common.out)?;
    if dump {
        for kind in [LayoutKind::ScaleWise, LayoutKind::Raster] {
            let l = bench_layout(&model.schedule, kind, &bc)?;
            let name = swm_core::bench::layout_name(kind);
            write_text(&common.out.join(format!("layout_{name}.txt")), &dump_layout(&l))?;
        }
    }
    let t = Instant::now();
    let report = bench_both(&model, &tok, &bc)?;
    let csv = report.to_csv();
    write_text(&common.out.join("bench.csv"), &csv)?;
    print!("{csv}");
    eprintln!("benchmark finished in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, episodes } => gen_data(&common, episodes),
        Command::Preprocess { common, input, fps, tmin, tclip, min_clip, stride } => {
            let pc = PreprocessConfig { target_fps: fps, t_min: tmin, t_clip: tclip, min_clip, stride: stride.unwrap_or(tclip) };
            preprocess(&common, &input, pc)
        }
        Command::TrainTokenizer { common, data, steps } => train_tokenizer(&common, &data, steps),
        Command::TrainWm { common, data, tokenizer, steps } => train_wm(&common, &data, &tokenizer, steps),
        Command::Rollout { common, checkpoint, tokenizer, context, steps, greedy, best_of, no_prompt } => run_rollout(
            &common,
            RolloutArgs { checkpoint: &checkpoint, tokenizer: &tokenizer, context: &context, steps, greedy, best_of, no_prompt },
        ),
        Command::Eval { common, pred, gt } => eval(&common, &pred, &gt),
        Command::Bench { common, checkpoint, batch, future_frames, repetitions, warmups, dump_layout } => {
            let cfg = load(&common)?;
            let bc = BenchConfig { batch, context_frames: cfg.run.context_frames, future_frames, warmups, repetitions };
            bench(&common, checkpoint.as_deref(), bc, dump_layout)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
