use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use latgeo_core::data::{Scene, Vocabulary};
use latgeo_core::decode::caption_all;
use latgeo_core::geometry::GeometryKind;
use latgeo_core::metrics::{evaluate, Scores};
use latgeo_core::model::{Connectivity, Model, ModelConfig, CONNECTIVITY_GRID};
use latgeo_core::training::Trainer;

use crate::common::{self, ConfigArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::settings::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// The configured model alone
    Base,
    /// Proposal-module ablation: geometry, background and label attention
    Modules,
    /// Encoder-decoder connectivity at 3 and 6 layers
    Connectivity,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Grid::Modules)]
    pub grid: Grid,
    /// Directory for the table and one run directory per configuration
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

pub fn variants(grid: Grid, base: &ModelConfig) -> Vec<Variant> {
    let with = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut model = base.clone();
        f(&mut model);
        Variant { name: name.to_string(), model }
    };
    match grid {
        Grid::Base => vec![with("base", &|_| {})],
        Grid::Modules => {
            let bare = |m: &mut ModelConfig| {
                m.connectivity = Connectivity::FullyConnected;
                m.use_geometry = false;
                m.use_background = false;
                m.use_lam = false;
            };
            vec![
                with("proposals", &bare),
                with("proposals+l1", &|m| {
                    bare(m);
                    m.use_geometry = true;
                    m.geometry_kind = GeometryKind::L1;
                }),
                with("proposals+ratio", &|m| {
                    bare(m);
                    m.use_geometry = true;
                    m.geometry_kind = GeometryKind::Ratio;
                }),
                with("proposals+background+ratio", &|m| {
                    bare(m);
                    m.use_geometry = true;
                    m.use_background = true;
                }),
                with("proposals+background+ratio+lam", &|m| {
                    bare(m);
                    m.use_geometry = true;
                    m.use_background = true;
                    m.use_lam = true;
                }),
            ]
        }
        Grid::Connectivity => CONNECTIVITY_GRID
            .iter()
            .map(|&(c, layers)| {
                with(&format!("{}_l{layers}", c.name()), &|m| {
                    m.connectivity = c;
                    m.layers = layers;
                })
            })
            .collect(),
    }
}

pub const HEADER: &str = "name,connectivity,layers,use_geometry,geometry_kind,use_lam,use_background,parameters,xe_epochs,rl_epochs,bleu1,bleu4,rougeL,ciderD,status";

struct Outcome {
    parameters: usize,
    xe_epochs: usize,
    rl_epochs: usize,
    scores: Scores,
}

fn run_one(v: &Variant, cfg: &RunConfig, vocab: &Vocabulary, train: &[Scene], val: &[Scene], dir: &std::path::Path, threads: usize) -> CliResult<Outcome> {
    let model = Model::new(v.model.clone(), cfg.train.seed)?;
    let parameters = model.num_parameters();
    let mut t = Trainer::new(model, vocab.clone(), train, val, cfg.train.clone())?.with_output(dir)?;
    t.set_threads(threads);
    t.run()?;
    let xe_epochs = t.epoch();
    let mut rl_epochs = 0;
    if cfg.train.rl_epochs > 0 {
        t.start_rl()?;
        t.run()?;
        rl_epochs = t.epoch();
    }
    let best = t.best_model();
    let eval_set = if val.is_empty() { train } else { val };
    let prepared = eval_set.iter().map(|s| best.prepare(s, vocab)).collect::<Result<Vec<_>, _>>()?;
    let hyps = caption_all(&best, &prepared, cfg.decode.beam, threads)?;
    let ids: Vec<String> = eval_set.iter().map(|s| s.id.clone()).collect();
    let caps: Vec<String> = hyps.iter().map(|h| vocab.decode(&h.tokens)).collect();
    let refs: Vec<Vec<String>> = eval_set.iter().map(|s| s.references.clone()).collect();
    let scores = evaluate(&ids, &caps, &refs);
    if ![scores.bleu1, scores.bleu4, scores.rouge_l, scores.cider_d].iter().all(|x| x.is_finite()) {
        return Err(CliError::Numeric("non-finite score".into()));
    }
    Ok(Outcome { parameters, xe_epochs, rl_epochs, scores })
}

fn row(v: &Variant, outcome: &CliResult<Outcome>) -> String {
    let m = &v.model;
    let kind = match m.geometry_kind {
        GeometryKind::Ratio => "ratio",
        GeometryKind::L1 => "l1",
    };
    let head = format!(
        "{},{},{},{},{},{},{}",
        v.name,
        m.connectivity.name(),
        m.layers,
        m.use_geometry,
        kind,
        m.use_lam,
        m.use_background
    );
    match outcome {
        Ok(o) => format!(
            "{head},{},{},{},{:.6},{:.6},{:.6},{:.6},ok",
            o.parameters, o.xe_epochs, o.rl_epochs, o.scores.bleu1, o.scores.bleu4, o.scores.rouge_l, o.scores.cider_d
        ),
        Err(e) => {
            let msg = e.to_string().replace([',', '\n'], ";");
            format!("{head},,,,,,,,error: {msg}")
        }
    }
}

pub fn run(a: AblateArgs) -> CliResult<()> {
    let threads = common::threads()?;
    let settings = a.cfg.settings(None)?;
    let mut cfg = settings.resolve()?;
    let train = common::scenes(&a.data)?;
    if train.is_empty() {
        return Err(CliError::Input(format!("{}: no scenes", a.data.display())));
    }
    let val = match &a.val {
        Some(p) => common::scenes(p)?,
        None => Vec::new(),
    };
    let vocab = Vocabulary::build(
        train.iter().flat_map(|s| s.references.iter().map(String::as_str)),
        cfg.data.min_count,
    );
    cfg.model.vocab_size = vocab.len();
    cfg.model.d_feat = train[0].d_feat();

    common::create_dir(&a.out)?;
    let table = a.out.join("ablation.csv");
    let mut manifest = Manifest::begin("ablate", &a.out, cfg.train.seed, threads, settings.flat())
        .input("data", &a.data)
        .artifact("table", &table);
    if let Some(v) = &a.val {
        manifest = manifest.input("val", v);
    }
    manifest.write()?;

    let outcome = (|| -> CliResult<()> {
        let mut f = std::fs::File::create(&table).map_err(|e| CliError::io(&table, e))?;
        writeln!(f, "{HEADER}").map_err(|e| CliError::io(&table, e))?;
        println!("{HEADER}");
        for v in variants(a.grid, &cfg.model) {
            let dir = a.out.join(&v.name);
            common::create_dir(&dir)?;
            eprintln!("== {}", v.name);
            let result = run_one(&v, &cfg, &vocab, &train, &val, &dir, threads);
            if let Err(e) = &result {
                eprintln!("{} failed: {e}", v.name);
            }
            let line = row(&v, &result);
            writeln!(f, "{line}").map_err(|e| CliError::io(&table, e))?;
            println!("{line}");
        }
        Ok(())
    })();
    manifest.finish(&outcome)?;
    outcome
}
