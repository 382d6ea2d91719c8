use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use camctx::diffusion::{write_loss_trace, VideoModel};
use camctx::encoder::Streams;
use camctx::geometry::posefile::{write_pose_file, PoseRecord};
use camctx::harness::{
    checkpoint_meta, eval_clips, evaluate, parse_checkpoint_meta, run_experiment, train_model, write_clips, ContextStrategy,
    Corpus, ExperimentConfig,
};
use camctx::image::bitmatrix_to_pgm;
use camctx::metrics::MetricReport;
use camctx::nn::PatchCodec;
use camctx::{Error, Result};

const CONFIG_HELP: &str = "\
Experiment config (TOML, every key optional):
  seed
  [data]    image_size patch latent_channels frames video_len fov_deg kinds
            train_scenes clips_per_scene max_stride eval_scenes eval_stride
            scene_seed_base
  [model]   dim heads semantic_layers semantic_heads semantic_queries blocks
            ffn_mult temporal_dim gate_kernel diffusion_steps beta_start beta_end
  [train]   steps batch lr clip_norm loss(uniform|log_weighted) cond_dropout
            freeze_backbone init_checkpoint
  [sample]  ddim_steps cfg_scale clip_x0
  [context] enabled strategy(range_after_end|end_plus_1|furthest) n
            epipolar_mask mask_threshold temporal_embedding
            streams(both|semantic|visual)
Command-line flags override the file.";

#[derive(Parser)]
#[command(name = "camctx", version, about = "Context-conditioned camera-controlled toy video diffusion", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic corpus: frames (PPM), pose files and captions.
    Synth {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Train a model and write `model.ckpt` and `loss.csv`.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
        /// Start from this checkpoint (required to freeze a trained backbone).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Sample evaluation clips from a checkpoint and write their frames.
    Sample {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample evaluation clips from a checkpoint and write `metrics.csv`.
    Eval {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train, sample and evaluate in one go.
    Run {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Write the epipolar mask of an evaluation clip as one PGM per
    /// (frame, context view).
    MaskViz {
        #[command(flatten)]
        exp: ExpArgs,
        /// Evaluation clip index.
        #[arg(long, default_value_t = 0)]
        clip: usize,
    },
    /// Merge metric CSVs into one summary table.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Frames counted as late for the `mse_late` column.
        #[arg(long, default_value_t = 9)]
        late_from: usize,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct ExpArgs {
    /// TOML experiment config; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ctx_strategy: Option<ContextStrategy>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4))]
    ctx_n: Option<u64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    ddim_steps: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    /// Context-free baseline.
    #[arg(long)]
    no_context: bool,
    /// Replace epipolar masks with all-ones.
    #[arg(long)]
    no_epipolar_mask: bool,
    /// Zero the temporal embeddings of context frames.
    #[arg(long)]
    no_temporal_embedding: bool,
    #[arg(long)]
    stream: Option<Streams>,
    /// Train only the context modules.
    #[arg(long)]
    freeze_backbone: bool,
}

impl ExpArgs {
    fn resolve(&self, base: Option<ExperimentConfig>) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, base) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.ctx_strategy {
            cfg.context.strategy = s;
        }
        if let Some(n) = self.ctx_n {
            cfg.context.n = n as usize;
        }
        if let Some(s) = self.cfg_scale {
            cfg.sample.cfg_scale = s;
        }
        if let Some(s) = self.ddim_steps {
            cfg.sample.ddim_steps = s;
        }
        if let Some(s) = self.train_steps {
            cfg.train.steps = s;
        }
        if let Some(s) = self.stream {
            cfg.context.streams = s;
        }
        cfg.context.enabled &= !self.no_context;
        cfg.context.epipolar_mask &= !self.no_epipolar_mask;
        cfg.context.temporal_embedding &= !self.no_temporal_embedding;
        cfg.train.freeze_backbone |= self.freeze_backbone;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn synth(exp: &ExpArgs) -> Result<()> {
    let cfg = exp.resolve(None)?;
    let corpus = Corpus::generate(&cfg).map_err(|e| e.in_stage("synth"))?;
    create_dir(&exp.out)?;
    write_text(&exp.out.join("config.toml"), &cfg.to_toml())?;
    let codec = serde_json::to_string_pretty(&*corpus.codec).expect("codec serializes");
    write_text(&exp.out.join("codec.json"), &codec)?;
    for (split, videos) in [("train", &corpus.train), ("eval", &corpus.eval)] {
        for v in videos.iter() {
            let dir = exp.out.join(split).join(format!("scene_{:07}", v.scene.seed));
            create_dir(&dir)?;
            for (i, f) in v.frames.iter().enumerate() {
                f.write_ppm(&dir.join(format!("frame_{i:03}.ppm")))?;
            }
            let recs: Vec<PoseRecord> = v
                .poses
                .iter()
                .enumerate()
                .map(|(i, p)| PoseRecord::new(i as u64, &v.intrinsics, *p))
                .collect();
            write_pose_file(&dir.join("poses.txt"), &recs)?;
            write_text(&dir.join("caption.txt"), &format!("{}\n", camctx::harness::caption(&v.scene)))?;
        }
    }
    println!(
        "wrote {} training and {} evaluation videos to {}",
        corpus.train.len(),
        corpus.eval.len(),
        exp.out.display()
    );
    Ok(())
}

fn train(exp: &ExpArgs, init: Option<&Path>) -> Result<()> {
    let mut cfg = exp.resolve(None)?;
    if let Some(p) = init {
        cfg.train.init_checkpoint = Some(p.display().to_string());
    }
    let corpus = Corpus::generate(&cfg).map_err(|e| e.in_stage("synth"))?;
    let (model, trace) = train_model(&cfg, &corpus).map_err(|e| e.in_stage("train"))?;
    create_dir(&exp.out)?;
    write_text(&exp.out.join("config.toml"), &cfg.to_toml())?;
    write_loss_trace(&exp.out.join("loss.csv"), &trace)?;
    model.save(&exp.out.join("model.ckpt"), checkpoint_meta(&cfg, &corpus))?;
    if let Some(last) = trace.last() {
        println!("trained {} steps, final loss {:.5}", trace.len(), last.loss);
    }
    Ok(())
}

/// Loads a checkpoint and the config it was trained with, applying flags.
fn load_for_eval(exp: &ExpArgs, checkpoint: &Path) -> Result<(VideoModel, ExperimentConfig, Arc<PatchCodec>)> {
    let (model, meta) = VideoModel::load(checkpoint)?;
    let (codec, trained) = parse_checkpoint_meta(&meta)?;
    Ok((model, exp.resolve(Some(trained))?, codec))
}

fn sample(exp: &ExpArgs, checkpoint: &Path, metrics: bool) -> Result<()> {
    let (model, cfg, codec) = load_for_eval(exp, checkpoint)?;
    let corpus = Corpus::generate_with_codec(&cfg, Some(codec)).map_err(|e| e.in_stage("synth"))?;
    let eval = evaluate(&model, &cfg, &corpus).map_err(|e| e.in_stage("sample"))?;
    create_dir(&exp.out)?;
    if metrics {
        eval.report.write(&exp.out.join("metrics.csv"))?;
        let r = &eval.report;
        println!(
            "mse {:.2}  ssim {:.4}  rot_err {:.4}  trans_err {:.4}  cam_mc {:.4}",
            r.mean_mse(0..r.frames()),
            r.mean_ssim(),
            r.rot_err,
            r.trans_err,
            r.cam_mc
        );
    } else {
        write_clips(&eval, &corpus.image_k, &exp.out.join("clips"))?;
        println!("wrote {} clips to {}", eval.clips.len(), exp.out.join("clips").display());
    }
    Ok(())
}

fn run(exp: &ExpArgs) -> Result<()> {
    let cfg = exp.resolve(None)?;
    let out = run_experiment(&cfg, &exp.out)?;
    let r = &out.report;
    println!(
        "mse {:.2}  ssim {:.4}  artifacts in {}",
        r.mean_mse(0..r.frames()),
        r.mean_ssim(),
        out.dir.display()
    );
    Ok(())
}

fn mask_viz(exp: &ExpArgs, index: usize) -> Result<()> {
    let cfg = exp.resolve(None)?;
    let corpus = Corpus::generate(&cfg).map_err(|e| e.in_stage("synth"))?;
    let clips = eval_clips(&cfg, &corpus)?;
    let clip = clips
        .get(index)
        .ok_or_else(|| Error::OutOfRange(format!("clip {index} of {}", clips.len())))?;
    let mask = corpus.condition_options(&cfg).mask(clip)?;
    create_dir(&exp.out)?;
    let views = clip.context_ids.len();
    for t in 0..clip.frame_ids.len() {
        for j in 0..views {
            let path = exp.out.join(format!("mask_t{t:02}_v{j}.pgm"));
            std::fs::write(&path, bitmatrix_to_pgm(&mask.slice(t, j))).map_err(|e| Error::io(&path, e))?;
        }
    }
    let density = mask.bits.count_ones() as f64 / (mask.rows() * mask.cols()).max(1) as f64;
    println!(
        "wrote {} masks to {} (density {density:.3})",
        clip.frame_ids.len() * views,
        exp.out.display()
    );
    Ok(())
}

fn report(inputs: &[PathBuf], late_from: usize, out: Option<&Path>) -> Result<()> {
    let reports: Vec<(String, MetricReport)> = inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), MetricReport::read(p)?)))
        .collect::<Result<_>>()?;
    let text = summary_table(&reports, late_from);
    match out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

const SUMMARY_KEYS: [&str; 6] = ["context", "strategy", "ctx_n", "epipolar_mask", "temporal_embedding", "streams"];

fn summary_table(reports: &[(String, MetricReport)], late_from: usize) -> String {
    let mut s = String::from("source");
    for k in SUMMARY_KEYS {
        s.push(',');
        s.push_str(k);
    }
    s.push_str(",mse,mse_late,psnr,ssim,rot_err,trans_err,cam_mc\n");
    for (name, r) in reports {
        s.push_str(name);
        for k in SUMMARY_KEYS {
            s.push(',');
            s.push_str(r.header_value(k).unwrap_or("-"));
        }
        let mse = r.mean_mse(0..r.frames());
        let late = r.mean_mse(late_from.min(r.frames())..r.frames());
        let psnr = 10.0 * (255.0f64 * 255.0 / mse).log10();
        s.push_str(&format!(
            ",{mse:.4},{late:.4},{psnr:.4},{:.6},{:.6},{:.6},{:.6}\n",
            r.mean_ssim(),
            r.rot_err,
            r.trans_err,
            r.cam_mc
        ));
    }
    s
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { exp } => synth(exp),
        Command::Train { exp, init } => train(exp, init.as_deref()),
        Command::Sample { exp, checkpoint } => sample(exp, checkpoint, false),
        Command::Eval { exp, checkpoint } => sample(exp, checkpoint, true),
        Command::Run { exp } => run(exp),
        Command::MaskViz { exp, clip } => mask_viz(exp, *clip),
        Command::Report { inputs, late_from, out } => report(inputs, *late_from, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_config() {
        let args = ExpArgs {
            seed: Some(9),
            ctx_n: Some(3),
            no_epipolar_mask: true,
            no_temporal_embedding: true,
            stream: Some(Streams::Visual),
            ..ExpArgs::default()
        };
        let cfg = args.resolve(None).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.context.n, 3);
        assert!(!cfg.context.epipolar_mask);
        assert!(!cfg.context.temporal_embedding);
        assert_eq!(cfg.context.streams, Streams::Visual);
        assert!(cfg.context.enabled);
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from(["camctx", "run", "--ctx-strategy", "furthest", "--ctx-n", "2"]).unwrap();
        assert!(matches!(cli.command, Command::Run { .. }));
        assert!(Cli::try_parse_from(["camctx", "run", "--ctx-n", "5"]).is_err());
        assert!(Cli::try_parse_from(["camctx", "run", "--ctx-strategy", "nearest"]).is_err());
        assert!(Cli::try_parse_from(["camctx", "report"]).is_err());
    }

    #[test]
    fn summary_has_one_row_per_report() {
        let r = MetricReport::new(vec![100.0; 4], vec![0.5; 4], 0.0, 0.0, 0.0)
            .unwrap()
            .with_header("strategy", "furthest");
        let t = summary_table(&[("a".into(), r.clone()), ("b".into(), r)], 2);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("a,-,furthest,"));
        assert!(lines[1].contains(",100.0000,100.0000,"));
    }
}
