//! The five subcommands. Each validates its flag combination before touching
//! any input, never mutates inputs, and writes outputs atomically.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use voca_core::anim::{
    edit_identity, edit_pose, export_sequence, interpolate_styles, lip_distance, MeshFormat,
};
use voca_core::audio;
use voca_core::data::{
    generate_synthetic, load_dataset, save_dataset, split_dataset, subject_table, SplitSpec,
    SynthSpec,
};
use voca_core::head::load_head_model;
use voca_core::io_util::atomic_write;
use voca_core::mesh::{import_obj, import_ply, load_mesh_sequence, MeshSequence};
use voca_core::net::{load_checkpoint, save_checkpoint, NetConfig};
use voca_core::rng::derive_seed;
use voca_core::train::{train, TrainConfig};
use voca_core::{
    DatasetF, FeatureSequenceF, HeadModelF, MeshF, MeshSequenceF, NetworkParamsF, PCABasisF, PoseF,
    StyleWeightsF,
};

use crate::config::{parse_list, FileConfig};

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeatureKindArg {
    /// Log Mel filterbank energies from a waveform.
    Fbank,
    /// DCT coefficients of the filterbank energies.
    Mfcc,
    /// Pass through an existing feature container.
    Import,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MeshFormatArg {
    Obj,
    Ply,
}

impl From<MeshFormatArg> for MeshFormat {
    fn from(f: MeshFormatArg) -> MeshFormat {
        match f {
            MeshFormatArg::Obj => MeshFormat::Obj,
            MeshFormatArg::Ply => MeshFormat::Ply,
        }
    }
}

#[derive(Args)]
pub struct FeaturesArgs {
    /// Input waveform for fbank or mfcc extraction.
    #[arg(long)]
    pub in_wav: Option<PathBuf>,
    /// Existing feature container to import.
    #[arg(long)]
    pub in_features: Option<PathBuf>,
    /// Output feature container path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fbank")]
    pub kind: FeatureKindArg,
    /// Resample the features to this frame rate before writing.
    #[arg(long)]
    pub resample_to: Option<f32>,
    /// Mel filter count for fbank/mfcc.
    #[arg(long)]
    pub n_filters: Option<usize>,
    /// Coefficient count for mfcc.
    #[arg(long)]
    pub n_coeffs: Option<usize>,
    /// Waveform mixed into the input at the given gain.
    #[arg(long)]
    pub noise_wav: Option<PathBuf>,
    /// Noise gain in dB relative to the clean signal (negative attenuates).
    #[arg(long, allow_negative_numbers = true)]
    pub noise_gain_db: Option<f64>,
}

pub fn features(args: &FeaturesArgs, cfg: &FileConfig) -> Result<()> {
    match args.kind {
        FeatureKindArg::Import => {
            if args.in_features.is_none() {
                bail!("--kind import needs --in-features");
            }
            if args.in_wav.is_some() {
                bail!("--in-wav conflicts with --kind import");
            }
            if args.noise_wav.is_some() || args.noise_gain_db.is_some() {
                bail!("noise mixing applies to waveform input only");
            }
        }
        FeatureKindArg::Fbank | FeatureKindArg::Mfcc => {
            if args.in_wav.is_none() {
                bail!("fbank and mfcc extraction need --in-wav");
            }
            if args.in_features.is_some() {
                bail!("--in-features is only valid with --kind import");
            }
        }
    }
    if args.noise_gain_db.is_some() && args.noise_wav.is_none() {
        bail!("--noise-gain-db needs --noise-wav");
    }

    let seq: FeatureSequenceF = match args.kind {
        FeatureKindArg::Import => audio::import_features(args.in_features.as_ref().unwrap())?,
        kind => {
            let mut clip = audio::load_wav(args.in_wav.as_ref().unwrap())?;
            if let Some(noise_path) = &args.noise_wav {
                let gain = args
                    .noise_gain_db
                    .or(cfg.noise_gain_db)
                    .context("--noise-wav needs a gain (--noise-gain-db or config)")?;
                let noise = audio::load_wav(noise_path)?;
                clip = audio::mix_noise(&clip, &noise, gain)?;
            }
            let n_filters = args.n_filters.or(cfg.n_filters).unwrap_or(audio::DEFAULT_N_FILTERS);
            match kind {
                FeatureKindArg::Fbank => audio::compute_fbank(
                    &clip,
                    n_filters,
                    audio::DEFAULT_FRAME_LEN,
                    audio::DEFAULT_FRAME_STEP,
                )?,
                FeatureKindArg::Mfcc => {
                    let n_coeffs = args.n_coeffs.or(cfg.n_coeffs).unwrap_or(13);
                    audio::compute_mfcc(
                        &clip,
                        n_coeffs,
                        n_filters,
                        audio::DEFAULT_FRAME_LEN,
                        audio::DEFAULT_FRAME_STEP,
                    )?
                }
                FeatureKindArg::Import => unreachable!(),
            }
        }
    };
    let seq = match args.resample_to {
        Some(fps) if (seq.fps - fps).abs() > 1e-6 => audio::resample_features(&seq, fps)?,
        _ => seq,
    };
    audio::export_features(&seq, &args.out)?;
    println!("frames={} dim={} fps={}", seq.n_frames(), seq.dim(), seq.fps);
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2)]
    pub subjects: usize,
    #[arg(long, default_value_t = 2)]
    pub sentences: usize,
    /// Frames per sequence at the video rate.
    #[arg(long, default_value_t = 120)]
    pub frames: usize,
    #[arg(long, default_value_t = 100)]
    pub vertices: usize,
    #[arg(long, default_value_t = 29)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SynthSpec {
        n_subjects: args.subjects,
        n_sentences: args.sentences,
        frames_per_seq: args.frames,
        n_vertices: args.vertices,
        feature_dim: args.feature_dim,
        window: args.window,
    };
    let (dataset, _oracle) = generate_synthetic::<f32>(&spec, derive_seed(seed, "synth"))?;
    save_dataset(&dataset, &args.out_dir)?;

    let split = SplitSpec { train_subjects: dataset.subjects(), ..SplitSpec::default() };
    atomic_write(&args.out_dir.join("split.txt"), |w| {
        w.write_all(split.to_text().as_bytes())?;
        Ok(())
    })?;

    let manifest = format!(
        "subjects: {}\nsentences: {}\nframes_per_seq: {}\nn_vertices: {}\nfeature_dim: {}\nwindow: {}\none_hot_dim: {}\nseed: {}\n",
        args.subjects,
        args.sentences,
        args.frames,
        args.vertices,
        args.feature_dim,
        args.window,
        args.subjects,
        seed,
    );
    atomic_write(&args.out_dir.join("manifest.txt"), |w| {
        w.write_all(manifest.as_bytes())?;
        Ok(())
    })?;
    println!(
        "sequences={} frames_each={} dir={}",
        dataset.sequences.len(),
        args.frames,
        args.out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory produced by synth or laid out the same way.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log path; defaults to the checkpoint path with a .log extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub position_weight: Option<f64>,
    #[arg(long)]
    pub velocity_weight: Option<f64>,
    /// Comma-separated encoder channel counts.
    #[arg(long)]
    pub conv_channels: Option<String>,
    #[arg(long)]
    pub fc1_units: Option<usize>,
    #[arg(long)]
    pub latent: Option<usize>,
}

pub fn train_cmd(args: &TrainArgs, cfg: &FileConfig, seed: u64) -> Result<()> {
    let dataset: DatasetF =
        load_dataset(&args.dataset).with_context(|| format!("loading {}", args.dataset.display()))?;
    let split_path = args.dataset.join("split.txt");
    let split_text = std::fs::read_to_string(&split_path)
        .with_context(|| format!("reading {}", split_path.display()))?;
    let split = split_dataset(&dataset, &voca_core::data::parse_split_spec(&split_text)?)?;
    if split.train.is_empty() {
        bail!("the training split is empty");
    }

    let subjects = subject_table(&dataset, &split.train);
    let first = &dataset.sequences[split.train[0]];
    let defaults = NetConfig::default();
    let net_config = NetConfig {
        window: first.windows.window_len(),
        feature_dim: first.windows.dim(),
        n_subjects: subjects.len(),
        conv_channels: match &args.conv_channels {
            Some(list) => parse_list(list)?,
            None => cfg.conv_channels.clone().unwrap_or(defaults.conv_channels),
        },
        fc1_units: args.fc1_units.or(cfg.fc1_units).unwrap_or(defaults.fc1_units),
        latent: args.latent.or(cfg.latent).unwrap_or(defaults.latent),
        n_vertices: first.meshes.n_vertices(),
    };
    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        epochs: args.epochs.or(cfg.epochs).unwrap_or(defaults.epochs),
        learning_rate: args.learning_rate.or(cfg.learning_rate).unwrap_or(defaults.learning_rate),
        batch_size: args.batch_size.or(cfg.batch_size).unwrap_or(defaults.batch_size),
        position_weight: args
            .position_weight
            .or(cfg.position_weight)
            .unwrap_or(defaults.position_weight),
        velocity_weight: args
            .velocity_weight
            .or(cfg.velocity_weight)
            .unwrap_or(defaults.velocity_weight),
        seed: derive_seed(seed, "train"),
        ..defaults
    };

    let result = train(&dataset, &split, &net_config, &train_config)?;
    save_checkpoint(&result.best_params, &result.pca, &result.subjects, &args.out)?;

    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("log"));
    let mut log = String::new();
    log.push_str(&format!("# epochs = {}\n", train_config.epochs));
    log.push_str(&format!("# learning_rate = {}\n", train_config.learning_rate));
    log.push_str(&format!("# batch_size = {}\n", train_config.batch_size));
    log.push_str(&format!("# position_weight = {}\n", train_config.position_weight));
    log.push_str(&format!("# velocity_weight = {}\n", train_config.velocity_weight));
    log.push_str(&format!("# seed = {}\n", seed));
    log.push_str("# epoch,step,train_loss,val_loss\n");
    for line in &result.log {
        log.push_str(line);
        log.push('\n');
    }
    atomic_write(&log_path, |w| {
        w.write_all(log.as_bytes())?;
        Ok(())
    })?;

    let last = result.history.last().unwrap();
    println!(
        "epochs={} final_train_loss={:e} best_val_loss={:e} checkpoint={}",
        train_config.epochs,
        last.train_loss,
        result
            .history
            .iter()
            .map(|h| h.val_loss)
            .fold(f64::INFINITY, f64::min),
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Template mesh (.obj or .ply) the displacements are applied to.
    #[arg(long)]
    pub template: PathBuf,
    /// Feature container driving the animation.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "ply")]
    pub format: MeshFormatArg,
    /// Comma-separated style weights over the training subjects.
    #[arg(long, allow_hyphen_values = true)]
    pub style: Option<String>,
    /// Pure style: the index of one training subject.
    #[arg(long)]
    pub style_index: Option<usize>,
    /// Head model enabling identity and pose edits.
    #[arg(long)]
    pub head_model: Option<PathBuf>,
    /// Identity coefficients in standard deviations, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<String>,
    /// Constant pose: per-joint axis-angle triples then the translation.
    #[arg(long, allow_hyphen_values = true)]
    pub pose: Option<String>,
    /// Upper,lower vertex pair; writes lip_metric.csv next to the frames.
    #[arg(long)]
    pub lip: Option<String>,
}

fn import_mesh(path: &Path) -> Result<MeshF> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => Ok(import_obj(path)?),
        Some("ply") => Ok(import_ply(path)?),
        _ => bail!("template must end in .obj or .ply: {}", path.display()),
    }
}

fn lip_pair(flag: &Option<String>, cfg: &FileConfig) -> Result<Option<(usize, usize)>> {
    if let Some(text) = flag {
        let v: Vec<usize> = parse_list(text)?;
        if v.len() != 2 {
            bail!("--lip needs exactly upper,lower");
        }
        return Ok(Some((v[0], v[1])));
    }
    match (cfg.lip_upper, cfg.lip_lower) {
        (Some(u), Some(l)) => Ok(Some((u, l))),
        (None, None) => Ok(None),
        _ => bail!("config sets only one of lip_upper/lip_lower"),
    }
}

pub fn animate_cmd(args: &AnimateArgs, cfg: &FileConfig) -> Result<()> {
    if args.style.is_some() && args.style_index.is_some() {
        bail!("--style and --style-index are mutually exclusive");
    }
    if (args.beta.is_some() || args.pose.is_some()) && args.head_model.is_none() {
        bail!("identity and pose edits need --head-model");
    }
    let lip = lip_pair(&args.lip, cfg)?;

    let (params, _pca, _subjects): (NetworkParamsF, PCABasisF, Vec<String>) =
        load_checkpoint(&args.checkpoint)?;
    let n_subjects = params.config.n_subjects;
    let weights = if let Some(list) = &args.style {
        StyleWeightsF::new(parse_list(list)?)?
    } else if let Some(j) = args.style_index {
        StyleWeightsF::one_hot(j, n_subjects)?
    } else if let Some(w) = &cfg.style_weights {
        StyleWeightsF::new(w.clone())?
    } else {
        bail!("select a style with --style, --style-index, or config style_weights");
    };

    let template = import_mesh(&args.template)?;
    let mut features: FeatureSequenceF = audio::import_features(&args.features)?;
    if (features.fps - audio::VIDEO_FPS).abs() > 1e-6 {
        features = audio::resample_features(&features, audio::VIDEO_FPS)?;
    }
    let windows = audio::window_features(&features, params.config.window)?;
    let mut seq = interpolate_styles(&params, &windows, &template, &weights)?;

    if let Some(model_path) = &args.head_model {
        let model: HeadModelF = load_head_model(model_path)?;
        if let Some(list) = &args.beta {
            let beta: Vec<f32> = parse_list(list)?;
            seq = edit_identity(&seq, &model, &beta)?;
        }
        if let Some(list) = &args.pose {
            let vals: Vec<f32> = parse_list(list)?;
            let k = model.n_joints();
            if vals.len() != 3 * k + 3 {
                bail!("pose needs {} values: {} axis-angle triples plus a translation", 3 * k + 3, k);
            }
            let pose = PoseF {
                theta: vals[..3 * k].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
                translation: [vals[3 * k], vals[3 * k + 1], vals[3 * k + 2]],
            };
            seq = edit_pose(&seq, &model, &[pose])?;
        }
    }

    let files = export_sequence(&seq, &template.topology, &args.out_dir, args.format.into())?;
    if let Some((upper, lower)) = lip {
        let series = lip_distance(&seq, upper, lower)?;
        series.save(&args.out_dir.join("lip_metric.csv"))?;
    }
    println!("frames={} dir={}", files.len(), args.out_dir.display());
    Ok(())
}

#[derive(Args)]
pub struct MetricsArgs {
    /// Mesh-sequence container to measure.
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    /// Directory of frame_NNNNNN meshes to measure instead.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ply")]
    pub format: MeshFormatArg,
    /// Upper lip vertex index.
    #[arg(long)]
    pub upper: Option<usize>,
    /// Lower lip vertex index.
    #[arg(long)]
    pub lower: Option<usize>,
    /// Output two-column text file.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn metrics(args: &MetricsArgs, cfg: &FileConfig) -> Result<()> {
    let (upper, lower) = match (args.upper, args.lower) {
        (Some(u), Some(l)) => (u, l),
        (None, None) => match (cfg.lip_upper, cfg.lip_lower) {
            (Some(u), Some(l)) => (u, l),
            _ => bail!("need --upper and --lower (or both in the config)"),
        },
        _ => bail!("--upper and --lower go together"),
    };

    let seq: MeshSequenceF = match (&args.sequence, &args.frames_dir) {
        (Some(_), Some(_)) => bail!("--sequence and --frames-dir are mutually exclusive"),
        (Some(path), None) => load_mesh_sequence(path)?,
        (None, Some(dir)) => {
            let ext = match args.format {
                MeshFormatArg::Obj => "obj",
                MeshFormatArg::Ply => "ply",
            };
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension().and_then(|e| e.to_str()) == Some(ext)
                        && p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("frame_"))
                })
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no frame_*.{} files in {}", ext, dir.display());
            }
            let frames = paths
                .iter()
                .map(|p| {
                    let mesh: MeshF = match args.format {
                        MeshFormatArg::Obj => import_obj(p)?,
                        MeshFormatArg::Ply => import_ply(p)?,
                    };
                    Ok(mesh.vertices)
                })
                .collect::<Result<Vec<_>>>()?;
            MeshSequence::new(frames)?
        }
        (None, None) => bail!("need --sequence or --frames-dir"),
    };

    let series = lip_distance(&seq, upper, lower)?;
    series.save(&args.out)?;
    println!("frames={} out={}", series.len(), args.out.display());
    Ok(())
}
