//! `train` and `eval`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sgcd::dataset::{load_bundle, load_dictionary, ConceptDictionary, EmbeddingBundle};
use sgcd::evaluation::EvalResult;
use sgcd::losses::KdMode;
use sgcd::pipeline::{evaluate, EvalOptions, TrainingData};
use sgcd::spectral::load_report;
use sgcd::trainer::{
    load_checkpoint, read_checkpoint_manifest, run_until, save_checkpoint, CheckpointManifest, Event, Precision,
    TrainConfig, TrainState,
};
use sgcd::{Error, Real, Result};

use crate::config::{resolve, ConfigFile, Overrides};
use crate::manifest::{create_dir, manifest_beside, write_json, RunManifest, Runtime, TOOL, VERSION};
use crate::DataArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Training hyperparameter flags; unset ones fall back to the config file,
/// then to the defaults.
#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    /// Learning rate of the recalibration layer.
    #[arg(long)]
    lr_recalib: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Weight of the supervised terms; unsupervised terms get 1 - lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the mean-prediction entropy regularizer.
    #[arg(long)]
    epsilon: Option<f64>,
    /// CLIP logit temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tau_cls: Option<f64>,
    /// Temperature of the sharpened self-distillation targets.
    #[arg(long)]
    tau_sharp: Option<f64>,
    #[arg(long)]
    tau_contrast: Option<f64>,
    /// Distillation directions: both, forward, reverse or none.
    #[arg(long)]
    kd: Option<KdMode>,
    #[arg(long)]
    symmetric_unsup_con: bool,
    #[arg(long)]
    d_proj: Option<usize>,
    #[arg(long)]
    d_contrast: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Evaluate and checkpoint every this many epochs (0: only at the end).
    #[arg(long)]
    eval_every: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides::default();
        o.set("epochs", self.epochs)
            .set("batch_size", self.batch_size)
            .set("lr_head", self.lr_head)
            .set("lr_recalib", self.lr_recalib)
            .set("momentum", self.momentum)
            .set("weight_decay", self.weight_decay)
            .set("lambda", self.lambda)
            .set("epsilon", self.epsilon)
            .set("temperatures.logit", self.tau)
            .set("temperatures.cls_student", self.tau_cls)
            .set("temperatures.cls_sharp", self.tau_sharp)
            .set("temperatures.contrast", self.tau_contrast)
            .set("kd", self.kd)
            .set("symmetric_unsup_con", self.symmetric_unsup_con.then_some(true))
            .set("d_proj", self.d_proj)
            .set("d_contrast", self.d_contrast)
            .set("seed", self.seed)
            .set("precision", self.precision)
            .set("eval_every", self.eval_every);
        o
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Spectral report choosing the retained concepts.
    #[arg(long, value_name = "FILE", conflicts_with = "no_filter")]
    report: Option<PathBuf>,
    /// Train on the whole dictionary instead of a filtered subset.
    #[arg(long)]
    no_filter: bool,
    /// Directory for the checkpoint, training log and run manifest.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Continue from a checkpoint with its stored configuration.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are complete, keeping the learning-rate
    /// schedule of the full run so a later --resume continues it exactly.
    #[arg(long, value_name = "EPOCH")]
    stop_after: Option<usize>,
    #[command(flatten)]
    flags: TrainFlags,
}

struct Inputs {
    student: EmbeddingBundle,
    teacher: EmbeddingBundle,
    student_dict: ConceptDictionary,
    teacher_dict: ConceptDictionary,
}

fn load_inputs(d: &DataArgs, run: &mut RunManifest) -> Result<Inputs> {
    let inputs = Inputs {
        student: load_bundle(&d.student)?,
        teacher: load_bundle(&d.teacher)?,
        student_dict: load_dictionary(&d.student_dict)?,
        teacher_dict: load_dictionary(&d.teacher_dict)?,
    };
    run.input("student", &d.student)?;
    run.input("teacher", &d.teacher)?;
    run.input("student_dict", &d.student_dict)?;
    run.input("teacher_dict", &d.teacher_dict)?;
    Ok(inputs)
}

/// Synthetic inputs train at desk scale; anything else starts from the
/// full-size defaults.
fn base_config(student: &EmbeddingBundle) -> TrainConfig {
    if student.encoder_id().starts_with("synthetic") {
        TrainConfig::desk_scale(student.n_samples())
    } else {
        TrainConfig::default()
    }
}

pub fn train(args: &TrainArgs, file: &ConfigFile, rt: &Runtime) -> Result<()> {
    let mut run = RunManifest::new("train", Value::Null, None, rt);
    let inputs = load_inputs(&args.data, &mut run)?;

    let resumed = match &args.resume {
        Some(p) => {
            let flags = args.flags.overrides();
            if !flags.is_empty() {
                return Err(Error::Invalid(
                    "--resume continues with the checkpoint's configuration; drop the training flags".into(),
                ));
            }
            run.input("resume", p)?;
            Some(read_checkpoint_manifest(p)?)
        }
        None => None,
    };
    let mut cfg = match &resumed {
        Some(m) => m.config.clone(),
        None => resolve(&base_config(&inputs.student), file.section("train"), &args.flags.overrides())?.0,
    };
    let tau = cfg.loss.temperatures.logit;
    let data = match (&args.report, args.no_filter) {
        (Some(p), _) => {
            let report = load_report(p)?;
            run.input("report", p)?;
            if resumed.is_none() {
                cfg.beta_e = report.beta_e;
                cfg.beta_c = report.beta_c;
            }
            TrainingData::from_report(
                &inputs.student,
                &inputs.teacher,
                &inputs.student_dict,
                &inputs.teacher_dict,
                &report,
                tau,
            )?
        }
        (None, true) => {
            let all: Vec<usize> = (0..inputs.teacher_dict.len()).collect();
            TrainingData::prepare(&inputs.student, &inputs.teacher, &inputs.student_dict, &inputs.teacher_dict, &all, tau)?
        }
        (None, false) => {
            return Err(Error::Invalid(
                "missing spectral report: pass --report FILE (from `sgcd filter`) or --no-filter".into(),
            ))
        }
    };
    if let Some(m) = &resumed {
        if m.concepts != data.concepts {
            return Err(Error::Invalid(
                "checkpoint was trained on a different concept set than the given report selects".into(),
            ));
        }
    }
    let stop = args.stop_after.unwrap_or(cfg.epochs);
    if stop > cfg.epochs {
        return Err(Error::Invalid(format!("--stop-after {stop} exceeds the configured {} epochs", cfg.epochs)));
    }
    run.config = serde_json::to_value(&cfg).expect("config serializes");
    run.seed = Some(cfg.seed);

    create_dir(&args.out_dir)?;
    let ckpt = args.out_dir.join(CHECKPOINT_FILE);
    let log = args.out_dir.join(LOG_FILE);
    let job = Job {
        data: &data,
        cfg: &cfg,
        resume: args.resume.as_deref(),
        stop,
        checkpoint: &ckpt,
        log: &log,
    };
    match cfg.precision {
        Precision::F32 => job.run::<f32>()?,
        Precision::F64 => job.run::<f64>()?,
    }
    run.output(&ckpt);
    run.output(&log);
    run.write(&args.out_dir.join("run.json"))
}

struct Job<'a> {
    data: &'a TrainingData,
    cfg: &'a TrainConfig,
    resume: Option<&'a Path>,
    stop: usize,
    checkpoint: &'a Path,
    log: &'a Path,
}

struct Log {
    out: BufWriter<File>,
    path: PathBuf,
    failed: Option<std::io::Error>,
}

impl Log {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Log {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
            failed: None,
        })
    }

    fn line(&mut self, v: &Value) {
        if self.failed.is_none() {
            if let Err(e) = serde_json::to_writer(&mut self.out, v).map_err(std::io::Error::from).and_then(|_| self.out.write_all(b"\n")) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(Error::io(&self.path, e));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn tagged<T: Serialize>(event: &str, body: &T) -> Value {
    let mut v = serde_json::to_value(body).expect("log entry serializes");
    if let Value::Object(m) = &mut v {
        m.insert("event".into(), Value::String(event.into()));
    }
    v
}

impl Job<'_> {
    fn run<T: Real>(&self) -> Result<()> {
        let (mut state, append) = match self.resume {
            Some(p) => (load_checkpoint::<T>(p)?.0, true),
            None => (TrainState::<T>::new(self.cfg.head_dims(self.data), self.cfg.seed), false),
        };
        if state.epoch > self.stop {
            return Err(Error::Invalid(format!(
                "checkpoint already has {} epochs, past the requested stop at {}",
                state.epoch, self.stop
            )));
        }
        let mut log = Log::open(self.log, append)?;
        if !append {
            log.line(&json!({"event": "start", "config": self.cfg, "n_concepts": self.data.n_concepts()}));
        }
        // Checkpoint at every evaluation so an interrupted run loses at most
        // one evaluation period.
        let period = if self.cfg.eval_every == 0 { self.stop.max(1) } else { self.cfg.eval_every };
        while state.epoch < self.stop {
            let next = ((state.epoch / period + 1) * period).min(self.stop);
            let outcome = run_until(&mut state, self.data, self.cfg, next, &mut |event| match event {
                Event::Epoch(s) => log.line(&tagged("epoch", s)),
                Event::Eval(r) => {
                    log.line(&tagged("eval", r));
                    eprintln!(
                        "epoch {:>4}  all {:.4}  old {:.4}  new {:.4}  spearman {:.3}",
                        r.epoch, r.result.acc_all, r.result.acc_old, r.result.acc_new, r.result.spearman_mean
                    );
                }
                Event::Step { .. } => {}
            });
            if let Err(e) = outcome {
                log.line(&json!({"event": "error", "epoch": state.epoch, "step": state.step, "message": e.to_string()}));
                log.finish()?;
                return Err(e);
            }
            save_checkpoint(self.checkpoint, &state, self.cfg, &self.data.concepts)?;
        }
        if state.epoch == 0 {
            save_checkpoint(self.checkpoint, &state, self.cfg, &self.data.concepts)?;
        }
        log.finish()?;
        match &state.best {
            Some(b) => println!(
                "trained {} epochs; best all {:.4} at epoch {} -> {}",
                state.epoch,
                b.result.acc_all,
                b.epoch,
                self.checkpoint.display()
            ),
            None => println!("trained {} epochs -> {}", state.epoch, self.checkpoint.display()),
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
    /// Optional spectral report; checked against the checkpoint's concepts.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Also compute the silhouette of the projected embeddings (quadratic in N).
    #[arg(long)]
    silhouette: bool,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

/// The `eval` output: every [`EvalResult`] field plus what was scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub result: EvalResult,
    pub epoch: usize,
    pub precision: Precision,
    pub n_concepts: usize,
    pub checkpoint_payload_sha256: String,
    pub tool: String,
    pub version: String,
}

/// Dictionary positions of the checkpoint's concepts, in head input order.
fn retained_from_names(m: &CheckpointManifest, dict: &ConceptDictionary) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> =
        dict.concepts().iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    m.concepts
        .iter()
        .map(|c| {
            index
                .get(c.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("checkpoint concept {c:?} is not in the dictionary")))
        })
        .collect()
}

pub fn eval(args: &EvalArgs, rt: &Runtime) -> Result<()> {
    let mut run = RunManifest::new("eval", Value::Null, None, rt);
    let inputs = load_inputs(&args.data, &mut run)?;
    let m = read_checkpoint_manifest(&args.checkpoint)?;
    run.input("checkpoint", &args.checkpoint)?;
    let retained = retained_from_names(&m, &inputs.teacher_dict)?;
    if let Some(p) = &args.report {
        let report = load_report(p)?;
        run.input("report", p)?;
        if report.retained_indices != retained {
            return Err(Error::Invalid("checkpoint concepts differ from the report's retained set".into()));
        }
    }
    let data = TrainingData::prepare(
        &inputs.student,
        &inputs.teacher,
        &inputs.student_dict,
        &inputs.teacher_dict,
        &retained,
        m.config.loss.temperatures.logit,
    )?;
    let opts = EvalOptions {
        silhouette: args.silhouette,
    };
    let result = match m.precision {
        Precision::F32 => score::<f32>(&args.checkpoint, &data, &m, opts)?,
        Precision::F64 => score::<f64>(&args.checkpoint, &data, &m, opts)?,
    };
    let report = EvalReport {
        result,
        epoch: m.epoch,
        precision: m.precision,
        n_concepts: data.n_concepts(),
        checkpoint_payload_sha256: m.payload_sha256.clone(),
        tool: TOOL.into(),
        version: VERSION.into(),
    };
    write_json(&args.out, &report)?;
    run.config = json!({"silhouette": args.silhouette, "checkpoint_config": m.config});
    run.seed = Some(m.config.seed);
    run.output(&args.out);
    run.write(&manifest_beside(&args.out))?;
    let r = &report.result;
    println!(
        "all {:.4}  old {:.4}  new {:.4}  spearman {:.3} ± {:.3}{}",
        r.acc_all,
        r.acc_old,
        r.acc_new,
        r.spearman_mean,
        r.spearman_std,
        r.silhouette.map_or(String::new(), |s| format!("  silhouette {s:.3}"))
    );
    Ok(())
}

fn score<T: Real>(path: &Path, data: &TrainingData, m: &CheckpointManifest, opts: EvalOptions) -> Result<EvalResult> {
    let (state, _) = load_checkpoint::<T>(path)?;
    let want = m.config.head_dims(data);
    if state.params.dims != want {
        return Err(Error::Invalid(format!(
            "checkpoint head {:?} does not fit the data ({want:?})",
            state.params.dims
        )));
    }
    evaluate(&state.params, data, &m.config.loss.temperatures, opts)
}
