//! The `duet` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::audio::{features_per_frame, AudioTrack, FeatureRole, FrameWindowing};
use crate::data::blob::{write_atomic, Archive, TensorBlob};
use crate::data::manifest::{condition_schedule, load_manifest, load_pose_blob, role_at, save_pose_blob, ClipManifest, Role};
use crate::data::synthetic::{make_synthetic_scene, pose_dataset, AnalyticScene, SceneSpec, ORACLE_KIND};
use crate::encoding::HeadPose;
use crate::error::{Error, Result};
use crate::field::{Condition, FieldConfig, FieldParams};
use crate::image::Image;
use crate::metrics::{psnr, ssim};
use crate::posegen::{manifest_sequences, predict_poses, train_posegen, PosegenConfig, PosegenModel};
use crate::render::{render_image, FrameView, RadianceField, RenderConfig};
use crate::train::{loss_csv, FieldDataset, FieldTrainer, TrainConfig, FIELD_CHECKPOINT_KIND};

#[derive(Debug, Parser)]
#[command(name = "duet", version, about = "Two-person talking-head synthesis")]
pub struct Cli {
    /// Seed for every random choice; overrides seeds in config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Audio features.
    #[command(subcommand)]
    Features(FeaturesCommand),
    /// Head pose forecaster.
    #[command(subcommand)]
    Posegen(PosegenCommand),
    /// Radiance field.
    #[command(subcommand)]
    Field(FieldCommand),
    /// Render frames from a checkpoint.
    Render(RenderArgs),
    /// Compare two frame directories.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write a synthetic clip with ground-truth frames and an oracle checkpoint.
    MakeScene(MakeSceneArgs),
}

#[derive(Debug, Args)]
pub struct MakeSceneArgs {
    /// Preset name (slab, two_identity, torso_motion) or JSON spec path.
    #[arg(long)]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the number of frames.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum FeaturesCommand {
    /// Per-frame (zcr, rms) of a WAV file.
    Extract(ExtractArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub wav: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub fps: f64,
    /// Defaults to every whole frame of the audio.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum PosegenCommand {
    Train(PosegenTrainArgs),
    Predict(PosegenPredictArgs),
}

#[derive(Debug, Args)]
pub struct PosegenTrainArgs {
    /// Clip whose role segments become training sequences.
    #[arg(long, conflicts_with = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Train on this many generated dialogue sequences instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Frames per generated sequence.
    #[arg(long, default_value_t = 100)]
    pub sequence_frames: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV of `epoch,loss`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PosegenPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// T x 2 (zcr, rms) blob.
    #[arg(long)]
    pub features: PathBuf,
    /// Known speaker poses; the listener head is then driven by them.
    #[arg(long)]
    pub speaker_poses: Option<PathBuf>,
    /// Directory receiving speaker.blob and listener.blob.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum FieldCommand {
    Train(FieldTrainArgs),
}

#[derive(Debug, Args)]
pub struct FieldTrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON with optional `field` and `train` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Continue from a saved checkpoint.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Field checkpoint or synthetic oracle checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory with speaker.blob and listener.blob replacing clip poses.
    #[arg(long)]
    pub poses: Option<PathBuf>,
    /// Samples per ray and part; defaults to the training value (256 for oracles).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// JSON accepted by `field train --config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldJob {
    pub field: FieldConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Failure {
    Validation,
    Runtime,
}

impl Failure {
    pub fn exit_code(self) -> i32 {
        match self {
            Failure::Validation => 1,
            Failure::Runtime => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub subcommand: String,
    pub failure: Failure,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let field = self.error.field();
        let text = self.error.to_string();
        let msg = text.strip_prefix(&format!("{field}: ")).unwrap_or(&text);
        write!(f, "error:{}:{}: {}", self.subcommand, field, msg)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

struct Ctx {
    name: &'static str,
}

impl Ctx {
    fn check<T>(&self, r: Result<T>) -> CliResult<T> {
        r.map_err(|error| CliError {
            subcommand: self.name.into(),
            failure: Failure::Validation,
            error,
        })
    }

    fn run<T>(&self, r: Result<T>) -> CliResult<T> {
        r.map_err(|error| CliError {
            subcommand: self.name.into(),
            failure: Failure::Runtime,
            error,
        })
    }

    fn invalid<T>(&self, field: &str, msg: impl Into<String>) -> CliResult<T> {
        self.check(Err(Error::invalid(field, msg)))
    }

    fn require_file(&self, field: &str, p: &Path) -> CliResult<()> {
        if p.is_file() {
            Ok(())
        } else {
            self.invalid(field, format!("{} is not a file", p.display()))
        }
    }

    fn require_dir(&self, field: &str, p: &Path) -> CliResult<()> {
        if p.is_dir() {
            Ok(())
        } else {
            self.invalid(field, format!("{} is not a directory", p.display()))
        }
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Errors go to stderr as one
/// `error:<subcommand>:<field>: message` line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error:cli:args: {first}");
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.failure.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Ctx { name: "cli" }.invalid("threads", "must be >= 1");
        }
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Synth(SynthCommand::MakeScene(a)) => make_scene(a, cli.seed),
        Command::Features(FeaturesCommand::Extract(a)) => extract(a),
        Command::Posegen(PosegenCommand::Train(a)) => posegen_train(a, cli.seed),
        Command::Posegen(PosegenCommand::Predict(a)) => posegen_predict(a),
        Command::Field(FieldCommand::Train(a)) => field_train(a, cli.seed),
        Command::Render(a) => render(a, cli.seed),
        Command::Eval(a) => eval(a),
    }
}

/// A fresh hidden sibling of `out` to build a directory in.
fn staging_dir(out: &Path) -> Result<PathBuf> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = out
        .file_name()
        .ok_or_else(|| Error::invalid("out", format!("{} has no file name", out.display())))?;
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    Ok(tmp)
}

/// Moves a finished staging directory over `out`.
fn commit_dir(tmp: &Path, out: &Path) -> Result<()> {
    if out.exists() {
        let old = tmp.with_extension("old");
        fs::rename(out, &old).map_err(|e| Error::io(out, e))?;
        fs::rename(tmp, out).map_err(|e| Error::io(out, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(tmp, out).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}

fn build_dir(out: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = staging_dir(out)?;
    match f(&tmp).and_then(|_| commit_dir(&tmp, out)) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        field: field.into(),
        source: e,
    })
}

fn make_scene(a: &MakeSceneArgs, seed: Option<u64>) -> CliResult<()> {
    let cx = Ctx { name: "synth" };
    let mut spec = cx.check(SceneSpec::resolve(&a.spec))?;
    if let Some(n) = a.frames {
        spec.frames = n;
    }
    cx.check(spec.validate())?;
    let seed = seed.unwrap_or(0);
    cx.run(build_dir(&a.out, |dir| make_synthetic_scene(&spec, seed, dir).map(|_| ())))?;
    println!("wrote scene `{}` ({} frames) to {}", spec.name, spec.frames, a.out.display());
    Ok(())
}

fn extract(a: &ExtractArgs) -> CliResult<()> {
    let cx = Ctx { name: "features" };
    if !(a.fps.is_finite() && a.fps > 0.0) {
        return cx.invalid("fps", "must be positive");
    }
    if a.frames == Some(0) {
        return cx.invalid("frames", "must be >= 1");
    }
    cx.require_file("wav", &a.wav)?;
    let track = cx.run(AudioTrack::read_wav(&a.wav))?;
    let n = a.frames.unwrap_or((track.duration_s() * a.fps + 1e-9).floor() as usize);
    if n == 0 {
        return cx.invalid("frames", "audio shorter than one frame");
    }
    let feats = cx.run(features_per_frame(&track, &FrameWindowing::new(a.fps), n))?;
    let flat: Vec<f64> = feats.iter().flatten().copied().collect();
    cx.run(TensorBlob::f64(vec![n, 2], flat).and_then(|b| b.save(&a.out)))?;
    println!("wrote {n} frames of (zcr, rms) to {}", a.out.display());
    Ok(())
}

fn load_features(path: &Path) -> Result<Vec<[f64; 2]>> {
    let b = TensorBlob::load(path)?;
    if b.dims.len() != 2 || b.dims[1] != 2 {
        return Err(Error::format("features", format!("expected T x 2, got {:?}", b.dims)));
    }
    Ok(b.to_f64().chunks_exact(2).map(|c| [c[0], c[1]]).collect())
}

fn posegen_train(a: &PosegenTrainArgs, seed: Option<u64>) -> CliResult<()> {
    let cx = Ctx { name: "posegen" };
    if a.manifest.is_none() && a.synthetic.is_none() {
        return cx.invalid("manifest", "give --manifest or --synthetic");
    }
    if a.synthetic == Some(0) || a.sequence_frames == 0 {
        return cx.invalid("synthetic", "sequence count and length must be >= 1");
    }
    let mut config = match &a.config {
        Some(p) => {
            cx.require_file("config", p)?;
            cx.check(read_json::<PosegenConfig>(p, "config"))?
        }
        None => PosegenConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    cx.check(config.validate())?;
    let data = match (&a.manifest, a.synthetic) {
        (Some(m), _) => {
            cx.require_file("manifest", m)?;
            let m = cx.run(load_manifest(m))?;
            cx.run(manifest_sequences(&m))?
        }
        (None, Some(n)) => cx.run(pose_dataset(config.seed, n, a.sequence_frames, 25.0))?,
        (None, None) => unreachable!(),
    };
    let res = cx.run(train_posegen(config, &data))?;
    cx.run(res.model.save(&a.out))?;
    if let Some(p) = &a.loss_csv {
        let mut csv = String::from("epoch,loss\n");
        for (e, l) in res.epoch_loss.iter().enumerate() {
            csv.push_str(&format!("{e},{l:.9e}\n"));
        }
        cx.run(write_atomic(p, csv.as_bytes()))?;
    }
    println!(
        "trained on {} sequences; final loss {:.6e}",
        data.len(),
        res.epoch_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn posegen_predict(a: &PosegenPredictArgs) -> CliResult<()> {
    let cx = Ctx { name: "posegen" };
    cx.require_file("model", &a.model)?;
    cx.require_file("features", &a.features)?;
    if let Some(p) = &a.speaker_poses {
        cx.require_file("speaker_poses", p)?;
    }
    let model = cx.run(PosegenModel::load(&a.model, None))?;
    let feats = cx.run(load_features(&a.features))?;
    let known = match &a.speaker_poses {
        Some(p) => Some(cx.run(load_pose_blob(p))?),
        None => None,
    };
    let (sp, li) = cx.run(predict_poses(&model, &feats, known.as_deref(), None))?;
    cx.run(build_dir(&a.out, |dir| {
        save_pose_blob(&dir.join("speaker.blob"), &sp)?;
        save_pose_blob(&dir.join("listener.blob"), &li)
    }))?;
    println!("wrote {} speaker and listener poses to {}", sp.len(), a.out.display());
    Ok(())
}

fn field_train(a: &FieldTrainArgs, seed: Option<u64>) -> CliResult<()> {
    let cx = Ctx { name: "field" };
    cx.require_file("manifest", &a.manifest)?;
    if a.iterations == Some(0) {
        return cx.invalid("iterations", "must be >= 1");
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            cx.require_file("resume", p)?;
            cx.run(FieldTrainer::load(p))?
        }
        None => {
            let mut job = match &a.config {
                Some(p) => {
                    cx.require_file("config", p)?;
                    cx.check(read_json::<FieldJob>(p, "config"))?
                }
                None => FieldJob::default(),
            };
            if let Some(s) = seed {
                job.train.seed = s;
            }
            if let Some(n) = a.iterations {
                job.train.iterations = n;
            }
            cx.check(job.field.validate())?;
            cx.check(job.train.validate())?;
            let m = cx.run(load_manifest(&a.manifest))?;
            let field = cx.run(FieldParams::new(job.field, &m.ids(), job.train.seed))?;
            cx.run(FieldTrainer::new(field, job.train))?
        }
    };
    if a.resume.is_some() {
        if let Some(n) = a.iterations {
            trainer.cfg.iterations = n;
        }
    }
    let m = cx.run(load_manifest(&a.manifest))?;
    for id in m.ids() {
        cx.run(trainer.field.registry.index_of(&id).map(|_| ()))?;
    }
    let data = cx.run(FieldDataset::from_manifest(&m))?;
    cx.run(trainer.run(&data, Some(&a.out)))?;
    if let Some(p) = &a.loss_csv {
        cx.run(write_atomic(p, loss_csv(&trainer.curve).as_bytes()))?;
    }
    if let Some(last) = trainer.curve.last() {
        println!("iteration {} loss {:.6e} psnr {:.2}", last.iteration, last.loss, last.psnr);
    }
    Ok(())
}

enum Renderer {
    Field(Box<FieldParams>, usize),
    Oracle(Box<AnalyticScene>),
}

impl Renderer {
    fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        match a.header_kind() {
            Some(k) if k == FIELD_CHECKPOINT_KIND => {
                let t = FieldTrainer::from_archive(&a)?;
                let n = t.cfg.n_samples;
                Ok(Renderer::Field(Box::new(t.field), n))
            }
            Some(k) if k == ORACLE_KIND => Ok(Renderer::Oracle(Box::new(AnalyticScene::from_archive(&a)?))),
            other => Err(Error::format("checkpoint.kind", format!("unsupported checkpoint kind {other:?}"))),
        }
    }

    fn field(&self) -> &dyn RadianceField {
        match self {
            Renderer::Field(f, _) => f.as_ref(),
            Renderer::Oracle(o) => o.as_ref(),
        }
    }

    fn default_samples(&self) -> usize {
        match self {
            Renderer::Field(_, n) => *n,
            Renderer::Oracle(_) => 256,
        }
    }

    fn identity(&self, id: &str) -> Result<usize> {
        match self {
            Renderer::Field(f, _) => f.registry.index_of(id),
            Renderer::Oracle(o) => o.spec.identities.iter().position(|i| i.id == id).ok_or_else(|| Error::UnknownIdentity {
                field: "checkpoint.identities".into(),
                id: id.into(),
            }),
        }
    }
}

/// Poses per individual for every frame: the clip's own, or generated
/// speaker/listener tracks assigned by each frame's role.
fn frame_poses(m: &ClipManifest, id: &str, generated: Option<&(Vec<HeadPose>, Vec<HeadPose>)>) -> Result<Vec<HeadPose>> {
    let Some((sp, li)) = generated else {
        return m.load_poses(id);
    };
    if sp.len() < m.num_frames || li.len() < m.num_frames {
        return Err(Error::dim("poses", m.num_frames, sp.len().min(li.len())));
    }
    (0..m.num_frames)
        .map(|f| {
            Ok(match role_at(m, m.frame_time(f), id)? {
                Role::Speaker => sp[f],
                Role::Listener | Role::Silent => li[f],
            })
        })
        .collect()
}

fn render(a: &RenderArgs, seed: Option<u64>) -> CliResult<()> {
    let cx = Ctx { name: "render" };
    cx.require_file("checkpoint", &a.checkpoint)?;
    cx.require_file("manifest", &a.manifest)?;
    if a.samples == Some(0) {
        return cx.invalid("samples", "must be >= 1");
    }
    if let Some(p) = &a.poses {
        cx.require_dir("poses", p)?;
    }
    let renderer = cx.run(Renderer::load(&a.checkpoint))?;
    let m = cx.run(load_manifest(&a.manifest))?;
    let generated = match &a.poses {
        Some(p) => Some((
            cx.run(load_pose_blob(&p.join("speaker.blob")))?,
            cx.run(load_pose_blob(&p.join("listener.blob")))?,
        )),
        None => None,
    };
    let cfg = RenderConfig {
        n_samples: a.samples.unwrap_or(renderer.default_samples()),
        jitter: false,
        seed: seed.unwrap_or(0),
    };
    let background = cx.run(Image::load_png(&m.resolve(&m.background_image)))?;
    let speaker = cx.run(m.load_speaker_features())?;
    let mut count = 0;
    cx.run(build_dir(&a.out, |dir| {
        for ind in &m.individuals {
            let identity = renderer.identity(&ind.id)?;
            let poses = frame_poses(&m, &ind.id, generated.as_ref())?;
            let expr = m.load_expression_features(&ind.id)?;
            let sub = dir.join(&ind.id);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (f, (role, src)) in condition_schedule(&m, &ind.id)?.into_iter().enumerate() {
                let features = match role {
                    FeatureRole::SpeakerAudio => speaker.frame(src),
                    FeatureRole::ListenerExpression => expr.frame(src),
                };
                let view = FrameView {
                    identity,
                    head_pose: poses[f],
                    head_intr: m.head_intrinsics(ind),
                    torso_pose: m.torso_pose(ind),
                    torso_intr: m.torso_intrinsics(ind),
                    bounds: (ind.t_near, ind.t_far),
                    cond: Condition { role, features },
                    background: &background,
                };
                let out = render_image(renderer.field(), &view, &cfg).map_err(|e| e.context(format!("{}.{f:05}", ind.id)))?;
                out.image.save_png(&sub.join(format!("{f:05}.png")))?;
                count += 1;
            }
        }
        Ok(())
    }))?;
    println!("rendered {count} frames to {}", a.out.display());
    Ok(())
}

fn collect_pngs(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let dir = root.join(rel);
    let mut entries: Vec<_> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(&dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let r = rel.join(e.file_name());
        let p = e.path();
        if p.is_dir() {
            collect_pngs(root, &r, out)?;
        } else if p.extension().is_some_and(|x| x == "png") {
            out.push(r);
        }
    }
    Ok(())
}

/// Per-frame PSNR and SSIM rows plus a `mean` row.
pub fn eval_report(reference: &Path, generated: &Path) -> Result<(String, f64, f64)> {
    let mut frames = Vec::new();
    collect_pngs(reference, Path::new(""), &mut frames)?;
    if frames.is_empty() {
        return Err(Error::invalid("ref", "no PNG frames found"));
    }
    let mut csv = String::from("frame,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for rel in &frames {
        let name = rel.to_string_lossy().replace('\\', "/");
        let r = Image::load_png(&reference.join(rel))?;
        let gp = generated.join(rel);
        if !gp.is_file() {
            return Err(Error::invalid(format!("gen.{name}"), "missing frame"));
        }
        let g = Image::load_png(&gp)?;
        let p = psnr(&r, &g).map_err(|e| e.context(&name))?;
        let s = ssim(&r, &g).map_err(|e| e.context(&name))?;
        csv.push_str(&format!("{name},{p:.6},{s:.6}\n"));
        sp += p;
        ss += s;
    }
    let n = frames.len() as f64;
    let (mp, ms) = (sp / n, ss / n);
    csv.push_str(&format!("mean,{mp:.6},{ms:.6}\n"));
    Ok((csv, mp, ms))
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let cx = Ctx { name: "eval" };
    cx.require_dir("ref", &a.reference)?;
    cx.require_dir("gen", &a.gen)?;
    let (csv, p, s) = cx.run(eval_report(&a.reference, &a.gen))?;
    cx.run(write_atomic(&a.out, csv.as_bytes()))?;
    println!("psnr={p:.4} ssim={s:.4} cpbd=n/a sync=n/a");
    Ok(())
}
