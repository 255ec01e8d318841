use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use affectsynth::container::load_morphable_model;
use affectsynth_cli::augment::augment;
use affectsynth_cli::config::Config;
use affectsynth_cli::error::{AtStage, CliError, Result, Stage};
use affectsynth_cli::evaluate::evaluate;
use affectsynth_cli::gallery::{build_gallery, Gallery};
use affectsynth_cli::generate::generate_workspace;
use affectsynth_cli::manifest::{Dataset, GalleryManifest};
use affectsynth_cli::pipeline::{process_image, render_request};
use affectsynth_cli::service::{serve, AppState};
use affectsynth_cli::synth::{parse_weights, render_preview, synthesize_weights, SynthRequest};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "affectsynth", version, about = "Valence-arousal facial affect synthesis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized step; overrides the file's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Target {
    #[arg(long, allow_hyphen_values = true)]
    valence: f64,
    #[arg(long, allow_hyphen_values = true)]
    arousal: f64,
    /// Defaults to `synthesis.intensity`.
    #[arg(long)]
    intensity: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-cell models for a gallery manifest (cached by content).
    BuildGallery {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Expressive template mesh (OBJ) plus a shaded preview PNG.
    Synthesize {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        target: Target,
        /// Comma-separated weights on the cell's localized components,
        /// used instead of the cell mean.
        #[arg(long, allow_hyphen_values = true)]
        weights: Option<String>,
    },
    /// Put the target expression on a neutral photo.
    ProcessImage {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Synthesize labeled images from the neutral frames of a dataset.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// CSV `image,landmarks,subject_id,valence,arousal`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Correlation study between blendshape weights and affect labels.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic gallery, morphable model, manifest and fixtures.
    GenGallery,
    /// HTTP JSON API over a built gallery.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides `serve.bind`.
        #[arg(long)]
        bind: Option<String>,
        /// Preload a session from this photo (requires --landmarks).
        #[arg(long, requires = "landmarks")]
        image: Option<PathBuf>,
        #[arg(long, requires = "image")]
        landmarks: Option<PathBuf>,
    },
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn request(t: &Target, cfg: &Config) -> SynthRequest {
    SynthRequest {
        valence: t.valence,
        arousal: t.arousal,
        intensity: t.intensity.unwrap_or(cfg.synthesis.intensity),
    }
}

fn load_gallery(manifest: &GalleryManifest, cfg: &Config) -> Result<Gallery> {
    Gallery::for_manifest(manifest, &cfg.gallery)
}

fn load_model(manifest: &GalleryManifest) -> Result<affectsynth::mmfit::MorphableModel> {
    load_morphable_model(manifest.morphable_model_path()?).at(Stage::LoadModel)
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = Config::resolve(cli.common.config.as_deref(), cli.common.seed)?;
    match &cli.command {
        Command::BuildGallery { manifest } => {
            let m = GalleryManifest::load(manifest)?;
            let outcome = build_gallery(&m, &cfg.gallery)?;
            let g = Gallery::load(&outcome.dir)?;
            println!(
                "{} gallery {} ({} cells)",
                if outcome.cache_hit { "cached" } else { "built" },
                outcome.dir.display(),
                g.cells.len()
            );
        }
        Command::Synthesize {
            manifest,
            target,
            weights,
        } => {
            let m = GalleryManifest::load(manifest)?;
            let gallery = load_gallery(&m, &cfg)?;
            let req = request(target, &cfg);
            let (synth, image) = match weights {
                Some(w) => {
                    let s = synthesize_weights(&gallery, &req, &parse_weights(w)?)?;
                    let image = render_preview(&s.mesh, cfg.synthesis.preview_size)?;
                    (s, image)
                }
                None => render_request(&gallery, None, &req, cfg.synthesis.preview_size)?,
            };
            let out = out_or(&cli.common, "synth");
            mkdir(&out)?;
            synth.mesh.save(out.join("mesh.obj")).at(Stage::WriteOutput)?;
            image.save_png(out.join("preview.png")).at(Stage::WriteOutput)?;
            println!(
                "cell ({}, {}) median ({:.4}, {:.4}) -> {}",
                synth.cell.row,
                synth.cell.col,
                synth.median_va.0,
                synth.median_va.1,
                out.display()
            );
        }
        Command::ProcessImage {
            manifest,
            image,
            landmarks,
            target,
        } => {
            let m = GalleryManifest::load(manifest)?;
            let gallery = load_gallery(&m, &cfg)?;
            let model = load_model(&m)?;
            let out = out_or(&cli.common, "output.png");
            let result = process_image(image, landmarks, &model, &gallery, &cfg.fit, &request(target, &cfg), &out)?;
            println!(
                "cell ({}, {}), {} pixels blended -> {}",
                result.synthesized.cell.row,
                result.synthesized.cell.col,
                result.mask.count(),
                out.display()
            );
        }
        Command::Augment { manifest, dataset } => {
            let m = GalleryManifest::load(manifest)?;
            let gallery = load_gallery(&m, &cfg)?;
            let model = load_model(&m)?;
            let data = Dataset::load(dataset)?;
            let out = out_or(&cli.common, "augmented");
            let summary = augment(&data, &gallery, &model, &cfg, &out)?;
            println!(
                "{} neutral frames x {} cells = {} images -> {}",
                summary.neutral_frames,
                summary.cells.len(),
                summary.output.rows.len(),
                out.display()
            );
        }
        Command::Evaluate { manifest } => {
            let m = GalleryManifest::load(manifest)?;
            let out = out_or(&cli.common, "report");
            let report = evaluate(&m, &cfg.experiment, &out)?;
            print!("{}", report.to_table());
        }
        Command::GenGallery => {
            let out = out_or(&cli.common, "workspace");
            let ws = generate_workspace(cfg.seed, &cfg.generator, &out)?;
            println!(
                "{} frames; manifest {}",
                ws.gallery.frames.len(),
                ws.manifest_path.display()
            );
        }
        Command::Serve {
            manifest,
            bind,
            image,
            landmarks,
        } => {
            let m = GalleryManifest::load(manifest)?;
            let gallery = load_gallery(&m, &cfg)?;
            let model = m.morphable_model.as_ref().map(|_| load_model(&m)).transpose()?;
            let state = Arc::new(AppState::new(
                gallery,
                model,
                cfg.fit,
                cfg.synthesis.intensity,
                cfg.synthesis.preview_size,
            ));
            if let (Some(image), Some(landmarks)) = (image, landmarks) {
                let png = std::fs::read(image).map_err(|e| CliError::io(image, e))?;
                let csv = std::fs::read(landmarks).map_err(|e| CliError::io(landmarks, e))?;
                let id = state.create_session(&png, &csv)?;
                println!("preloaded session {id}");
            }
            let addr = bind.clone().unwrap_or_else(|| cfg.serve.bind.clone());
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Bind {
                addr: addr.clone(),
                source: e,
            })?;
            rt.block_on(serve(state, &addr))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
