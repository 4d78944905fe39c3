use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use latgeo_core::data::{generate_corpus, write_scenes, SynthConfig};

use crate::error::{CliError, CliResult};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene JSONL to write
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Seed of the first scene; scene i uses seed + i
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().objects_min)]
    pub objects_min: usize,
    #[arg(long, default_value_t = SynthConfig::default().objects_max)]
    pub objects_max: usize,
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    pub classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().d_feat)]
    pub dfeat: usize,
}

pub fn run(a: SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        objects_min: a.objects_min,
        objects_max: a.objects_max,
        classes: a.classes,
        d_feat: a.dfeat,
        ..SynthConfig::default()
    };
    let scenes = generate_corpus(a.n, a.seed, &cfg)?;
    let file = std::fs::File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    write_scenes(&mut w, &scenes)?;
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    eprintln!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(())
}
