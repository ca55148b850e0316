use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::PriorChoice;

#[derive(Parser)]
#[command(name = "refsplat", version, about = "Reference-guided inpainting of Gaussian-splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DepthOracleChoice {
    /// Depth rendered from the ground-truth scene named in the config.
    Gt,
    /// The prior service's monocular depth endpoint.
    Remote,
}

#[derive(Subcommand)]
enum Command {
    /// Label particles from per-view masks and write consistent masks.
    Label {
        /// Input scene (PLY).
        #[arg(long)]
        scene: PathBuf,
        /// Camera records (JSON); image paths are relative to this file.
        #[arg(long)]
        cameras: PathBuf,
        /// Directory the records' mask paths are relative to.
        #[arg(long)]
        masks: PathBuf,
        /// A particle is Masked iff its masked count ≥ tau · unmasked count.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Threshold on the re-rendered label channel.
        #[arg(long = "tau-prime", default_value_t = 0.3)]
        tau_prime: f64,
        /// Output directory: labeled.ply, labels.txt, cameras.json, masks/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the Masked particles with ones unprojected from a reference view.
    Init {
        #[arg(long)]
        scene: PathBuf,
        /// One label per line, 0 (unmasked) or 1 (masked).
        #[arg(long)]
        labels: PathBuf,
        /// Camera records holding the reference image and mask.
        #[arg(long)]
        reference: PathBuf,
        /// Relative depth of the reference image (PFM).
        #[arg(long = "ref-depth")]
        ref_depth: PathBuf,
        /// Record id of the reference view.
        #[arg(long = "camera-id")]
        camera_id: usize,
        /// Output scene (PLY).
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a scene.
    Train {
        /// TOML with a [data] table plus training settings.
        #[arg(long)]
        config: PathBuf,
        /// analytic, mixture, remote or remote=<url>.
        #[arg(long, default_value = "analytic")]
        prior: PriorChoice,
        #[arg(long = "depth-oracle", value_enum, default_value_t = DepthOracleChoice::Gt)]
        depth_oracle: DepthOracleChoice,
        /// Output directory: scene.ply and log.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render color (PNG) and depth (PFM) for every camera.
    Render {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Masked-region metrics of predicted images against ground truth.
    Eval {
        /// Directory of predicted PNGs.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth PNGs with the same names.
        #[arg(long)]
        gt: PathBuf,
        /// Directory of masks with the same names.
        #[arg(long)]
        masks: PathBuf,
        /// Relative growth of the mask bounding box.
        #[arg(long, default_value_t = 0.10)]
        dilate: f64,
    },
    /// Masks of the pixels whose rays miss a sphere on the optical axis.
    OutpaintMask {
        #[arg(long)]
        cameras: PathBuf,
        /// Sphere center distance along the optical axis.
        #[arg(long, default_value_t = 4.0)]
        distance: f64,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        /// Output directory, one `<id>.png` per camera.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the procedural toy dataset with a ready-to-run training config.
    Toy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Label {
            scene,
            cameras,
            masks,
            tau,
            tau_prime,
            out,
        } => commands::label(&scene, &cameras, &masks, tau, tau_prime, &out),
        Command::Init {
            scene,
            labels,
            reference,
            ref_depth,
            camera_id,
            out,
        } => commands::init(&scene, &labels, &reference, &ref_depth, camera_id, &out),
        Command::Train {
            config,
            prior,
            depth_oracle,
            out,
        } => commands::train(&config, &prior, depth_oracle, &out),
        Command::Render { scene, cameras, out_dir } => commands::render(&scene, &cameras, &out_dir),
        Command::Eval { pred, gt, masks, dilate } => commands::eval(&pred, &gt, &masks, dilate),
        Command::OutpaintMask {
            cameras,
            distance,
            radius,
            out,
        } => commands::outpaint_mask(&cameras, distance, radius, &out),
        Command::Toy { seed, out } => commands::toy(seed, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
