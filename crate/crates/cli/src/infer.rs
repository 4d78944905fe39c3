use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use latgeo_core::data::{Scene, Vocabulary};
use latgeo_core::decode::{caption_all, greedy_caption};
use latgeo_core::gradsuite;
use latgeo_core::metrics::evaluate;
use latgeo_core::model::{Model, PreparedScene};
use latgeo_core::numeric::gradcheck::TOLERANCE;
use latgeo_core::numeric::{AttentionRecord, Graph};
use serde::{Deserialize, Serialize};

use crate::common::{self, ConfigArgs};
use crate::error::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct CaptionArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scenes to caption (JSONL)
    #[arg(long)]
    pub data: PathBuf,
    /// Candidates JSONL to write
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Candidates JSONL ({"id", "caption"} per line)
    #[arg(long)]
    pub candidates: PathBuf,
    /// Scenes holding the reference captions
    #[arg(long)]
    pub data: PathBuf,
    /// Scores JSON; printed to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Scene to trace; the first scene when absent
    #[arg(long)]
    pub id: Option<String>,
    /// Attention CSV to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub caption: String,
}

fn load_model(path: &std::path::Path) -> CliResult<(Model, Vocabulary)> {
    let ck = common::checkpoint(path)?;
    Ok((ck.model()?, ck.vocab))
}

fn prepare(model: &Model, vocab: &Vocabulary, scenes: &[Scene]) -> CliResult<Vec<PreparedScene>> {
    scenes.iter().map(|s| Ok(model.prepare(s, vocab)?)).collect()
}

fn create(path: &std::path::Path) -> CliResult<BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(BufWriter::new(f))
}

pub fn caption(a: CaptionArgs) -> CliResult<()> {
    let threads = common::threads()?;
    let cfg = a.cfg.settings(None)?.resolve()?;
    let (model, vocab) = load_model(&a.ckpt)?;
    let scenes = common::scenes(&a.data)?;
    let prepared = prepare(&model, &vocab, &scenes)?;
    let hyps = caption_all(&model, &prepared, cfg.decode.beam, threads)?;
    let mut w = create(&a.out)?;
    for (scene, h) in scenes.iter().zip(&hyps) {
        let line = Candidate { id: scene.id.clone(), caption: vocab.decode(&h.tokens) };
        let text = serde_json::to_string(&line).expect("candidate serializes");
        writeln!(w, "{text}").map_err(|e| CliError::io(&a.out, e))?;
    }
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    eprintln!("captioned {} scenes (beam {})", scenes.len(), cfg.decode.beam);
    Ok(())
}

pub fn read_candidates(path: &std::path::Path) -> CliResult<Vec<Candidate>> {
    let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Candidate = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(c);
    }
    Ok(out)
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    let cands = read_candidates(&a.candidates)?;
    let scenes = common::scenes(&a.data)?;
    let by_id: HashMap<&str, &str> = cands.iter().map(|c| (c.id.as_str(), c.caption.as_str())).collect();
    let mut ids = Vec::new();
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for s in &scenes {
        let c = by_id
            .get(s.id.as_str())
            .ok_or_else(|| CliError::Input(format!("no candidate for scene `{}`", s.id)))?;
        if s.references.is_empty() {
            return Err(CliError::Input(format!("scene `{}` has no references", s.id)));
        }
        ids.push(s.id.clone());
        hyps.push(c.to_string());
        refs.push(s.references.clone());
    }
    let scores = evaluate(&ids, &hyps, &refs);
    let text = serde_json::to_string_pretty(&scores).expect("scores serialize");
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))?,
        None => println!("{text}"),
    }
    eprintln!(
        "bleu1 {:.4} bleu4 {:.4} rougeL {:.4} ciderD {:.4}",
        scores.bleu1, scores.bleu4, scores.rouge_l, scores.cider_d
    );
    Ok(())
}

/// Names of the rows and columns of one attention map.
fn axis_labels(rec: &AttentionRecord, scene: &Scene, model: &Model, words: &[String]) -> (Vec<String>, Vec<String>) {
    let mut tokens: Vec<String> = scene.proposals.iter().map(|p| p.label.clone()).collect();
    if model.cfg.use_background {
        tokens.push("<background>".into());
    }
    let objects: Vec<String> = scene.proposals.iter().map(|p| p.label.clone()).collect();
    let [rows, cols] = [rec.weights.rows(), rec.weights.cols()];
    let pad = |mut v: Vec<String>, n: usize| {
        let base = v.len();
        v.extend((base..n).map(|k| format!("<mem{}>", k - base)));
        v.truncate(n);
        v
    };
    let module = rec.module.as_str();
    if module == "encoder" {
        (pad(tokens.clone(), rows), pad(tokens, cols))
    } else if module == "lam" {
        (pad(objects.clone(), rows), pad(objects, cols))
    } else if module == "decoder_self" {
        (pad(words.to_vec(), rows), pad(words.to_vec(), cols))
    } else {
        (pad(words.to_vec(), rows), pad(tokens, cols))
    }
}

pub fn attn_dump(a: AttnArgs) -> CliResult<()> {
    let (model, vocab) = load_model(&a.ckpt)?;
    let scenes = common::scenes(&a.data)?;
    let scene = match &a.id {
        Some(id) => scenes
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| CliError::Input(format!("no scene `{id}` in {}", a.data.display())))?,
        None => scenes.first().ok_or_else(|| CliError::Input("no scenes".into()))?,
    };
    let prepared = model.prepare(scene, &vocab)?;
    let hyp = greedy_caption(&model, &prepared)?;
    // the decoder reads the caption up to, not including, END
    let prefix: Vec<usize> = hyp.tokens.iter().copied().take_while(|&t| t != latgeo_core::data::END).collect();
    let words: Vec<String> = prefix.iter().map(|&t| vocab.word(t).unwrap_or("<unk>").to_string()).collect();

    let mut g = Graph::new();
    g.enable_trace();
    let enc = model.encode(&mut g, &prepared)?;
    model.decode(&mut g, &enc, &[&prefix])?;
    let trace = g.take_trace();

    let mut w = create(&a.out)?;
    let io = |e| CliError::io(&a.out, e);
    writeln!(w, "scene,module,layer,head,query,key,query_label,key_label,weight").map_err(io)?;
    let mut rows = 0usize;
    for rec in &trace {
        let (ql, kl) = axis_labels(rec, scene, &model, &words);
        for (q, q_label) in ql.iter().enumerate() {
            for (k, k_label) in kl.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{q},{k},{},{},{}",
                    scene.id,
                    rec.module,
                    rec.layer,
                    rec.head,
                    q_label,
                    k_label,
                    rec.weights.at(q, k)
                )
                .map_err(|e| CliError::io(&a.out, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    eprintln!("caption: {}", vocab.decode(&hyp.tokens));
    eprintln!("wrote {rows} attention weights from {} maps", trace.len());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let started = std::time::Instant::now();
    let entries = gradsuite::run(a.cases, a.seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.report.passes(TOLERANCE);
        println!(
            "{:<24} {}  max_rel_err {:.3e}  checked {}  skipped {}",
            e.name,
            if ok { "ok  " } else { "FAIL" },
            e.report.max_rel_err,
            e.report.checked,
            e.report.skipped
        );
        if !ok {
            failed.push(e.name);
        }
    }
    println!("{} groups, {:.1}s", entries.len(), started.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check above {TOLERANCE:e} in: {}",
            failed.join(", ")
        )))
    }
}
