//! File-level commands behind the `ksr` tool.
//!
//! Every command is a plain value ([`Command`]) holding its fully resolved
//! arguments. Running one writes its outputs plus a [`RunManifest`]; feeding
//! that manifest to [`replay`] reruns the same command and, because every
//! stage is deterministic, reproduces the outputs byte for byte.
//!
//! Manifest placement: commands that write a directory put `run.json` inside
//! it; commands that write a single file put `<file>.run.json` next to it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, export_png, load_dataset, load_image, save_dataset, save_image, write_atomic, PhantomSpec};
use crate::error::{Error, Result};
use crate::image::{Image, Role};
use crate::kspace::{MaskConfig, PhaseAxis, SamplingMask};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{evaluate, AdamState, Aggregate, EpochRecord, History, TrainConfig, Trainer};

pub const RUN_MANIFEST: &str = "run.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";
const ADAM_FILE: &str = "adam.bin";

/// Network shape as read from a config file; the image size comes from the
/// dataset and the modality count from the command line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub depth: usize,
    pub base_width: usize,
    pub growth_rate: usize,
    pub num_layers: usize,
    pub fuse_after_stages: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let d = ModelConfig::desk(true);
        Self {
            depth: d.depth,
            base_width: d.base_width,
            growth_rate: d.growth_rate,
            num_layers: d.num_layers,
            fuse_after_stages: d.fuse_after_stages,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, multimodal: bool, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            base_width: self.base_width,
            growth_rate: self.growth_rate,
            num_layers: self.num_layers,
            multimodal,
            fuse_after_stages: self.fuse_after_stages,
            height,
            width,
        }
    }
}

/// Contents of a training config file. Missing fields take defaults and the
/// resolved value is what lands in the run manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ArchConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskArgs {
    pub lines: usize,
    pub config: MaskConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub mask: PathBuf,
    pub axis: PhaseAxis,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    pub data: PathBuf,
    pub multimodal: bool,
    /// `config.train.seed` also seeds the weight initialisation.
    pub config: RunConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconArgs {
    pub t2: PathBuf,
    pub flair: Option<PathBuf>,
    pub mask: PathBuf,
    pub checkpoint: PathBuf,
    pub axis: PhaseAxis,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotArgs {
    pub history: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "lowercase")]
pub enum Command {
    Mask(MaskArgs),
    Synth(SynthArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    Recon(ReconArgs),
    Plot(PlotArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Mask(_) => "mask",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Recon(_) => "recon",
            Command::Plot(_) => "plot",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Command::Synth(a) => a.seed,
            Command::Train(a) => a.config.train.seed,
            _ => 0,
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::Mask(_) => vec![],
            Command::Synth(a) => vec![a.mask.clone()],
            Command::Train(a) => vec![a.data.clone()],
            Command::Eval(a) => vec![a.data.clone(), a.checkpoint.clone()],
            Command::Recon(a) => {
                let mut v = vec![a.t2.clone()];
                v.extend(a.flair.clone());
                v.extend([a.mask.clone(), a.checkpoint.clone()]);
                v
            }
            Command::Plot(a) => vec![a.history.clone()],
        }
    }

    pub fn output(&self) -> &Path {
        match self {
            Command::Mask(a) => &a.out,
            Command::Synth(a) => &a.out,
            Command::Train(a) => &a.out,
            Command::Eval(a) => &a.out,
            Command::Recon(a) => &a.out,
            Command::Plot(a) => &a.out,
        }
    }

    /// Whether the output is a directory (manifest inside) or a file.
    pub fn writes_directory(&self) -> bool {
        matches!(self, Command::Synth(_) | Command::Train(_) | Command::Eval(_))
    }

    pub fn manifest_path(&self) -> PathBuf {
        manifest_path_for(self.output(), self.writes_directory())
    }

    /// Rewrites every path argument through `f`.
    pub fn map_paths(&mut self, f: impl Fn(&Path) -> PathBuf) {
        let m = |p: &mut PathBuf| *p = f(p);
        match self {
            Command::Mask(a) => m(&mut a.out),
            Command::Synth(a) => {
                m(&mut a.mask);
                m(&mut a.out);
            }
            Command::Train(a) => {
                m(&mut a.data);
                m(&mut a.out);
            }
            Command::Eval(a) => {
                m(&mut a.data);
                m(&mut a.checkpoint);
                m(&mut a.out);
            }
            Command::Recon(a) => {
                m(&mut a.t2);
                if let Some(p) = a.flair.as_mut() {
                    m(p);
                }
                m(&mut a.mask);
                m(&mut a.checkpoint);
                m(&mut a.out);
            }
            Command::Plot(a) => {
                m(&mut a.history);
                m(&mut a.out);
            }
        }
    }
}

fn manifest_path_for(out: &Path, dir: bool) -> PathBuf {
    if dir {
        out.join(RUN_MANIFEST)
    } else {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".");
        name.push(RUN_MANIFEST);
        out.with_file_name(name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    #[serde(flatten)]
    pub command: Command,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| missing_or_io(path, e))?;
        serde_json::from_slice(&text).map_err(|source| Error::Json { path: path.into(), source })
    }

    fn save(&self) -> Result<()> {
        let path = self.command.manifest_path();
        let mut json = serde_json::to_vec_pretty(self).map_err(|source| Error::Json { path: path.clone(), source })?;
        json.push(b'\n');
        write_atomic(&path, &json)
    }
}

/// Per-command knobs that shape the session but not the result.
#[derive(Clone, Debug, Default)]
pub struct Session {
    /// Continue a training run from `last.json` in its output directory.
    pub resume: bool,
    /// End this training session after this many epochs.
    pub stop_after: Option<usize>,
}

/// Missing inputs are user errors, everything else is a runtime failure.
fn missing_or_io(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::Config(format!("{} does not exist", path.display()))
    } else {
        Error::io(path, e)
    }
}

fn require_inputs(cmd: &Command) -> Result<()> {
    for p in cmd.inputs() {
        if !p.exists() {
            return Err(Error::Config(format!("{} does not exist", p.display())));
        }
    }
    Ok(())
}

/// Executes `cmd` and writes its outputs and manifest.
pub fn execute(cmd: &Command, session: &Session) -> Result<RunManifest> {
    require_inputs(cmd)?;
    let start = Instant::now();
    let outputs = match cmd {
        Command::Mask(a) => run_mask(a)?,
        Command::Synth(a) => run_synth(a)?,
        Command::Train(a) => run_train(a, session)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Recon(a) => run_recon(a)?,
        Command::Plot(a) => run_plot(a)?,
    };
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cmd.seed(),
        command: cmd.clone(),
        inputs: cmd.inputs(),
        outputs,
        duration_secs: start.elapsed().as_secs_f64(),
    };
    manifest.save()?;
    Ok(manifest)
}

/// Reruns the command recorded at `manifest` with its paths rewritten by
/// `remap`. Training restarts from scratch even if the recorded run was
/// resumed.
pub fn replay(manifest: &Path, remap: impl Fn(&Path) -> PathBuf) -> Result<RunManifest> {
    let mut cmd = RunManifest::load(manifest)?.command;
    cmd.map_paths(remap);
    if cmd.writes_directory() && cmd.output().exists() {
        return Err(Error::Config(format!("replay target {} already exists", cmd.output().display())));
    }
    execute(&cmd, &Session::default())
}

fn run_mask(a: &MaskArgs) -> Result<Vec<PathBuf>> {
    let mask = SamplingMask::new(a.lines, a.config)?;
    write_atomic(&a.out, mask.to_text().as_bytes())?;
    Ok(vec![a.out.clone()])
}

pub fn load_mask(path: &Path) -> Result<SamplingMask> {
    let text = fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
    SamplingMask::from_text(&text).map_err(|e| match e {
        Error::Config(d) => Error::Format {
            path: path.into(),
            offset: 0,
            detail: d,
        },
        other => other,
    })
}

fn check_mask_fits(mask: &SamplingMask, height: usize, width: usize, axis: PhaseAxis) -> Result<()> {
    let lines = match axis {
        PhaseAxis::Height => height,
        PhaseAxis::Width => width,
    };
    if mask.len() != lines {
        return Err(Error::Config(format!(
            "mask has {} lines but the {axis:?} axis of a {height}x{width} image has {lines}",
            mask.len()
        )));
    }
    Ok(())
}

fn run_synth(a: &SynthArgs) -> Result<Vec<PathBuf>> {
    let mask = load_mask(&a.mask)?;
    check_mask_fits(&mask, a.height, a.width, a.axis)?;
    if a.out.exists() {
        return Err(Error::Config(format!("{} already exists", a.out.display())));
    }
    let samples = data::build_dataset(a.n, &PhantomSpec::new(a.height, a.width, a.seed), &mask, a.axis)?;
    save_dataset(&a.out, &samples)?;
    Ok(vec![a.out.clone()])
}

fn encode_adam(adam: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&adam.t.to_le_bytes());
    out.extend_from_slice(&(adam.m.len() as u64).to_le_bytes());
    for t in adam.m.iter().chain(&adam.v) {
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn decode_adam(bytes: &[u8], params: &[Tensor], path: &Path) -> Result<AdamState> {
    let err = |offset: usize, detail: String| Error::Format {
        path: path.into(),
        offset: offset as u64,
        detail,
    };
    let total: usize = params.iter().map(|p| p.len()).sum();
    let want = 16 + 16 * total;
    if bytes.len() != want {
        return Err(err(bytes.len().min(want), format!("expected {want} bytes, found {}", bytes.len())));
    }
    let t = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if n != params.len() {
        return Err(err(8, format!("optimizer holds {n} tensors, model has {}", params.len())));
    }
    let mut vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = || -> Result<Vec<Tensor>> {
        params
            .iter()
            .map(|p| Tensor::new(p.shape(), vals.by_ref().take(p.len()).collect()))
            .collect()
    };
    let m = take()?;
    let v = take()?;
    Ok(AdamState { m, v, t })
}

fn write_history(dir: &Path, h: &History) -> Result<()> {
    write_atomic(&dir.join(HISTORY_FILE), h.to_csv().as_bytes())
}

fn run_train(a: &TrainArgs, session: &Session) -> Result<Vec<PathBuf>> {
    let samples = load_dataset(&a.data)?;
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = first.t2.shape();
    if let Some(bad) = samples.iter().find(|s| s.t2.shape() != (h, w)) {
        return Err(Error::Config(format!("sample {} is {:?}, expected {h}x{w}", bad.id, bad.t2.shape())));
    }
    let model_cfg = a.config.model.model_config(a.multimodal, h, w);
    let mut cfg = a.config.train.clone();
    let out = &a.out;
    let last_path = out.join(LAST_CHECKPOINT);
    let best_path = out.join(BEST_CHECKPOINT);
    let adam_path = out.join(ADAM_FILE);
    let cmd = Command::Train(a.clone());

    let (model, adam, history) = if session.resume {
        let prev = RunManifest::load(&cmd.manifest_path())?;
        if prev.command != cmd {
            return Err(Error::Config(format!(
                "--resume needs the recorded configuration; {} differs",
                cmd.manifest_path().display()
            )));
        }
        let (model, meta) = load_checkpoint(&last_path, Some(&model_cfg))?;
        let bytes = fs::read(&adam_path).map_err(|e| Error::io(&adam_path, e))?;
        let adam = decode_adam(&bytes, model.params(), &adam_path)?;
        (model, adam, meta.history)
    } else {
        if out.join(RUN_MANIFEST).exists() {
            return Err(Error::Config(format!(
                "{} already holds a run; pass --resume or choose another directory",
                out.display()
            )));
        }
        let model = Model::build(&model_cfg, cfg.seed)?;
        let adam = AdamState::new(model.params());
        (model, adam, History::default())
    };
    if let Some(n) = session.stop_after {
        cfg.epochs = cfg.epochs.min(history.last_epoch() + n);
    }
    let mut trainer = Trainer::resume(model, adam, history, samples.len(), cfg)?;
    // A placeholder manifest lets an interrupted run be resumed.
    RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cmd.seed(),
        command: cmd.clone(),
        inputs: cmd.inputs(),
        outputs: vec![],
        duration_secs: 0.0,
    }
    .save()?;

    let save_epoch = |t: &Trainer, rec: &EpochRecord, improved: bool| -> Result<()> {
        save_checkpoint(&last_path, t.model(), rec.epoch, t.history())?;
        write_atomic(&adam_path, &encode_adam(t.adam()))?;
        write_history(out, t.history())?;
        if improved {
            save_checkpoint(&best_path, t.model(), rec.epoch, t.history())?;
        }
        Ok(())
    };
    trainer.run(&samples, save_epoch)?;
    let epoch = trainer.history().last_epoch();
    let (best, history) = trainer.finish();
    write_history(out, &history)?;
    if !best_path.exists() {
        save_checkpoint(&best_path, &best, history.best_epoch, &history)?;
    }
    if !last_path.exists() {
        save_checkpoint(&last_path, &best, epoch, &history)?;
        write_atomic(&adam_path, &encode_adam(&AdamState::new(best.params())))?;
    }
    Ok([HISTORY_FILE, BEST_CHECKPOINT, LAST_CHECKPOINT, ADAM_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub checkpoint_epoch: usize,
    pub model: Aggregate,
    pub zero_filled: Aggregate,
}

fn jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for it in items {
        serde_json::to_writer(&mut out, it).map_err(|source| Error::Json { path: path.into(), source })?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

fn run_eval(a: &EvalArgs) -> Result<Vec<PathBuf>> {
    let samples = load_dataset(&a.data)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (model, meta) = load_checkpoint(&a.checkpoint, None)?;
    let c = model.config();
    if let Some(bad) = samples.iter().find(|s| s.t2.shape() != (c.height, c.width)) {
        return Err(Error::Config(format!(
            "sample {} is {:?} but the checkpoint expects {}x{}",
            bad.id,
            bad.t2.shape(),
            c.height,
            c.width
        )));
    }
    let report = evaluate(&model, &samples)?;
    let out = &a.out;
    jsonl(&out.join("metrics.jsonl"), &report.records)?;
    jsonl(&out.join("zero_filled.jsonl"), &report.baseline)?;
    let summary = EvalSummary {
        checkpoint_epoch: meta.epoch,
        model: report.summary.clone(),
        zero_filled: report.baseline_summary.clone(),
    };
    let path = out.join("summary.json");
    let json = serde_json::to_vec_pretty(&summary).map_err(|source| Error::Json { path: path.clone(), source })?;
    write_atomic(&path, &json)?;
    let panels = out.join("panels");
    for (s, p) in samples.iter().zip(&report.predictions) {
        export_png(&panels.join(format!("{}.png", s.id)), &Image::hstack(&[&s.t2sub, p, &s.t2])?)?;
    }
    Ok(vec![out.join("metrics.jsonl"), out.join("zero_filled.jsonl"), path, panels])
}

fn run_recon(a: &ReconArgs) -> Result<Vec<PathBuf>> {
    let t2 = load_image(&a.t2)?;
    let mask = load_mask(&a.mask)?;
    let (h, w) = t2.shape();
    check_mask_fits(&mask, h, w, a.axis)?;
    let (model, _) = load_checkpoint(&a.checkpoint, None)?;
    let c = model.config();
    if (c.height, c.width) != (h, w) {
        return Err(Error::Config(format!(
            "{} is {h}x{w} but the checkpoint expects {}x{}",
            a.t2.display(),
            c.height,
            c.width
        )));
    }
    let flair = match (&a.flair, c.multimodal) {
        (Some(p), true) => {
            let f = load_image(p)?;
            if f.shape() != (h, w) {
                return Err(Error::Config(format!("{} is {:?}, expected {h}x{w}", p.display(), f.shape())));
            }
            Some(f.to_tensor())
        }
        (None, true) => return Err(Error::Config("the checkpoint is multimodal; pass --flair".into())),
        (Some(_), false) => return Err(Error::Config("the checkpoint is unimodal; drop --flair".into())),
        (None, false) => None,
    };
    let sub = data::subsample(&t2, &mask, a.axis)?;
    let pred = model.predict(&sub.to_tensor(), flair.as_ref())?;
    let img = Image::from_tensor(&pred, 0)?.with_role(Role::Prediction).quantize_f32();
    save_image(&a.out, &img)?;
    Ok(vec![a.out.clone()])
}

fn run_plot(a: &PlotArgs) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(&a.history).map_err(|e| missing_or_io(&a.history, e))?;
    let records = History::parse_csv(&text).map_err(|e| match e {
        Error::Config(d) => Error::Format {
            path: a.history.clone(),
            offset: 0,
            detail: d,
        },
        other => other,
    })?;
    write_atomic(&a.out, loss_svg(&records).as_bytes())?;
    Ok(vec![a.out.clone()])
}

/// Train and validation loss against epoch, log-scaled, as a standalone SVG.
pub fn loss_svg(records: &[EpochRecord]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let vals: Vec<f64> = records
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .filter(|v| v.is_finite() && *v > 0.0)
        .map(f64::log10)
        .collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi.max(lo + 1e-9)) } else { (0.0, 1.0) };
    let n = records.last().map_or(1, |r| r.epoch.max(1)) as f64;
    let px = |e: usize| m + (e as f64 / n) * (w - 2.0 * m);
    let py = |v: f64| h - m - (v.log10() - lo) / (hi - lo) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">epoch</text>"#, w / 2.0, h - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" font-size="12" transform="rotate(-90 15 {})" text-anchor="middle">loss (log10)</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (name, colour, pick) in [
        ("train", "steelblue", (|r: &EpochRecord| r.train_loss) as fn(&EpochRecord) -> f64),
        ("validation", "darkorange", |r: &EpochRecord| r.val_loss),
    ] {
        let pts: Vec<String> = records
            .iter()
            .filter(|r| pick(r).is_finite() && pick(r) > 0.0)
            .map(|r| format!("{:.2},{:.2}", px(r.epoch), py(pick(r))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"><title>{name}</title></polyline>"#,
            pts.join(" ")
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" fill="steelblue">train</text>"#, w - m - 80.0, m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" fill="darkorange">validation</text>"#, w - m - 80.0, m + 16.0);
    s.push_str("</svg>\n");
    s
}

/// SHA-256 over a file, or over every file below a directory in sorted
/// relative-path order. Run manifests are skipped since they carry a
/// wall-clock duration.
pub fn tree_hash(path: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(path, Path::new(""), &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let full = if rel.as_os_str().is_empty() { path.to_path_buf() } else { path.join(&rel) };
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let here = if rel.as_os_str().is_empty() { root.to_path_buf() } else { root.join(rel) };
    let meta = fs::metadata(&here).map_err(|e| Error::io(&here, e))?;
    if meta.is_file() {
        let name = here.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name != RUN_MANIFEST && !name.ends_with(&format!(".{RUN_MANIFEST}")) {
            out.push(rel.to_path_buf());
        }
        return Ok(());
    }
    for entry in fs::read_dir(&here).map_err(|e| Error::io(&here, e))? {
        let entry = entry.map_err(|e| Error::io(&here, e))?;
        collect_files(root, &rel.join(entry.file_name()), out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_defaults_and_rejects_unknown_fields() {
        let p = Path::new("c.json");
        let c = RunConfig::from_json("{}", p).unwrap();
        assert_eq!(c, RunConfig::default());
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#, p).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#, p), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"model": {"depht": 2}}"#, p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn manifest_paths() {
        assert_eq!(manifest_path_for(Path::new("a/b"), true), PathBuf::from("a/b/run.json"));
        assert_eq!(manifest_path_for(Path::new("a/m.txt"), false), PathBuf::from("a/m.txt.run.json"));
    }

    #[test]
    fn command_json_round_trip() {
        let cmd = Command::Mask(MaskArgs {
            lines: 8,
            config: MaskConfig::custom(4.0, 0.5),
            out: "m.txt".into(),
        });
        let m = RunManifest {
            tool_version: "0".into(),
            seed: 0,
            command: cmd,
            inputs: vec![],
            outputs: vec!["m.txt".into()],
            duration_secs: 0.5,
        };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains(r#""command":"mask""#), "{text}");
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
    }

    #[test]
    fn svg_has_both_curves() {
        let recs: Vec<EpochRecord> = (1..=3)
            .map(|e| EpochRecord {
                epoch: e,
                train_loss: 1.0 / e as f64,
                val_loss: 2.0 / e as f64,
                val_ssim: 0.5,
            })
            .collect();
        let s = loss_svg(&recs);
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }
}
