use std::path::{Path, PathBuf};

use clap::Args;
use latgeo_core::data::{Scene, Vocabulary};
use latgeo_core::model::Model;
use latgeo_core::training::{Checkpoint, Trainer};

use crate::common::{self, ConfigArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::settings::RunConfig;

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training scenes (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Validation scenes; the training set is scored when absent
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory for the manifest, log and checkpoints
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a `last.ckpt`
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct RlArgs {
    /// Cross-entropy checkpoint to start from
    #[arg(long, required_unless_present = "resume")]
    pub from: Option<PathBuf>,
    #[command(flatten)]
    pub run: TrainArgs,
}

struct Inputs {
    train: Vec<Scene>,
    val: Vec<Scene>,
}

fn inputs(a: &TrainArgs) -> CliResult<Inputs> {
    let train = common::scenes(&a.data)?;
    if train.is_empty() {
        return Err(CliError::Input(format!("{}: no scenes", a.data.display())));
    }
    let val = match &a.val {
        Some(p) => common::scenes(p)?,
        None => Vec::new(),
    };
    Ok(Inputs { train, val })
}

/// A resumed run must keep every tensor shape of the checkpoint.
fn check_shapes(ck: &mut Checkpoint, cfg: &RunConfig) -> CliResult<()> {
    if cfg.model != ck.model {
        let mut expected = cfg.model.clone();
        expected.vocab_size = ck.vocab.len();
        let mut probe = Model::new(expected.clone(), 0)?;
        probe.load_params(&ck.group("param/"))?;
        ck.model = expected;
    }
    Ok(())
}

fn begin(command: &str, a: &TrainArgs, cfg: &RunConfig, flat: &crate::settings::Settings, threads: usize) -> CliResult<Manifest> {
    common::create_dir(&a.out)?;
    let mut m = Manifest::begin(command, &a.out, cfg.train.seed, threads, flat.flat()).input("data", &a.data);
    if let Some(v) = &a.val {
        m = m.input("val", v);
    }
    if let Some(r) = &a.resume {
        m = m.input("resume", r);
    }
    m = m
        .artifact("log", &a.out.join("log.csv"))
        .artifact("last", &a.out.join("last.ckpt"))
        .artifact("best", &a.out.join("best.ckpt"));
    m.write()?;
    Ok(m)
}

fn drive(t: &mut Trainer) -> CliResult<()> {
    while t.epoch() < t.epoch_limit() {
        let stop = t.run_epoch()?;
        if let Some(row) = t.log.last() {
            let cider = row.cider_d.map(|c| format!(" cider_d {c:.4}")).unwrap_or_default();
            eprintln!(
                "{} epoch {} loss {:.4}{} lr {:.3e} {:.1}s",
                row.phase.name(),
                row.epoch,
                row.loss,
                cider,
                row.lr,
                row.seconds
            );
        }
        if stop {
            eprintln!("early stop: no improvement for {} validations", t.cfg.patience);
            break;
        }
    }
    eprintln!("best cider_d {:.4} at epoch {}", t.best_score(), t.best_epoch());
    Ok(())
}

fn resume(path: &Path, a: &TrainArgs, data: &Inputs) -> CliResult<(Trainer, RunConfig, crate::settings::Settings)> {
    let mut ck = common::checkpoint(path)?;
    let settings = a.cfg.settings(Some(&ck))?;
    let cfg = settings.resolve()?;
    check_shapes(&mut ck, &cfg)?;
    let t = Trainer::resume(&ck, &data.train, &data.val, cfg.train.clone())?;
    Ok((t, cfg, settings))
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let threads = common::threads()?;
    let data = inputs(&a)?;
    let (mut t, cfg, settings) = match &a.resume {
        Some(path) => resume(path, &a, &data)?,
        None => {
            let settings = a.cfg.settings(None)?;
            let mut cfg = settings.resolve()?;
            let vocab = Vocabulary::build(
                data.train.iter().flat_map(|s| s.references.iter().map(String::as_str)),
                cfg.data.min_count,
            );
            cfg.model.vocab_size = vocab.len();
            cfg.model.d_feat = data.train[0].d_feat();
            let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
            let t = Trainer::new(model, vocab, &data.train, &data.val, cfg.train.clone())?;
            (t, cfg, settings)
        }
    };
    let manifest = begin("train", &a, &cfg, &settings, threads)?;
    t = t.with_output(&a.out)?;
    t.set_threads(threads);
    let outcome = drive(&mut t);
    manifest.finish(&outcome)?;
    outcome
}

pub fn rl(a: RlArgs) -> CliResult<()> {
    let threads = common::threads()?;
    let run = &a.run;
    let data = inputs(run)?;
    let (mut t, cfg, settings) = match (&run.resume, &a.from) {
        (Some(path), _) => resume(path, run, &data)?,
        (None, Some(from)) => {
            let mut ck = common::checkpoint(from)?;
            let settings = run.cfg.settings(Some(&ck))?;
            let cfg = settings.resolve()?;
            check_shapes(&mut ck, &cfg)?;
            let best = ck.group("best/");
            let model = if best.is_empty() { ck.model()? } else { ck.model_from("best/")? };
            let mut t = Trainer::new(model, ck.vocab.clone(), &data.train, &data.val, cfg.train.clone())?;
            t.set_threads(threads);
            t.start_rl()?;
            eprintln!("rl start: cider_d {:.4}", t.best_score());
            (t, cfg, settings)
        }
        (None, None) => return Err(CliError::Input("rl needs --from or --resume".into())),
    };
    let mut manifest = begin("rl", run, &cfg, &settings, threads)?;
    if let Some(from) = &a.from {
        manifest = manifest.input("from", from);
        manifest.write()?;
    }
    t = t.with_output(&run.out)?;
    t.set_threads(threads);
    let outcome = drive(&mut t);
    manifest.finish(&outcome)?;
    outcome
}
