//! Command-line driver for the glyph-synthesis pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
//! fault. Every failure prints one `error: ...` line to stderr; every run
//! logs its config digest and seed to stderr so reports are reproducible
//! from their headers alone.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use glyphsynth::checkpoint::{ensure_geometry, load as load_ckpt, save as save_ckpt, sha256_hex};
use glyphsynth::codec::{assemble_image, chunk_image, ChunkConfig};
use glyphsynth::data::{Corpus, CorpusManifest, SplitSpec, SOURCE_STYLE};
use glyphsynth::error::{Error, Result};
use glyphsynth::eval::{evaluate, render_report, ReportMeta};
use glyphsynth::gradcheck::full_suite;
use glyphsynth::pbm;
use glyphsynth::pipeline::{synthesize, SynthesisTask};
use glyphsynth::toyfont::{generate, ToySpec};
use glyphsynth::train::{finetune, pretrain, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "glyphsynth",
    about = "Few-shot glyph synthesis: toy corpora, training, inference, evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural toy-font corpus from a spec file.
    GenToy {
        /// Toy spec (TOML: styles, chars, size, seed).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for bitmaps and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain both stages from scratch on the pretrain styles.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Experiment config (TOML: model geometry + training knobs).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to write; the step log goes to <out>.log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained checkpoint to the split's fine-tune style.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        /// Checkpoint to write; the step log goes to <out>.log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize one glyph and write it as a portable bitmap.
    Synthesize {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus supplying the source glyph and the reference glyphs.
        #[arg(long)]
        manifest: PathBuf,
        /// Target character id.
        #[arg(long = "char")]
        char_id: usize,
        /// Target style id.
        #[arg(long = "style")]
        style_id: usize,
        /// Comma-separated reference character ids (rendered in the target style).
        #[arg(long, value_delimiter = ',', required = true)]
        refs: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the checkpoint on the split's test set and write a TSV report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify chunk->assemble is the identity on every corpus glyph.
    CodecRoundtrip {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// Seed for the randomized check inputs.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    return ExitCode::SUCCESS;
                }
                _ => 1,
            };
            eprintln!("error: usage: {}", one_line(&e.to_string()));
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().next().unwrap_or("").to_string()
}

fn info_provenance(digest: &str, seed: u64) {
    eprintln!("info: config_digest={digest} seed={seed}");
}

fn load_corpus(manifest_path: &Path) -> Result<(CorpusManifest, Corpus)> {
    let manifest = CorpusManifest::load(manifest_path)?;
    let corpus = Corpus::load(&manifest)?;
    Ok((manifest, corpus))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn open_log(ckpt_out: &Path) -> Result<std::fs::File> {
    let mut name = ckpt_out.as_os_str().to_owned();
    name.push(".log");
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(PathBuf::from(name))
        .map_err(Error::Io)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenToy { spec, out } => {
            let spec = ToySpec::load(&spec)?;
            let digest = sha256_hex(
                toml::to_string(&spec)
                    .map_err(|e| Error::Config(e.to_string()))?
                    .as_bytes(),
            );
            info_provenance(&digest, spec.seed);
            let manifest = generate(&spec, &out)?;
            println!(
                "wrote {} glyphs and {}",
                manifest.entries.len(),
                out.join("manifest.tsv").display()
            );
            Ok(())
        }
        Cmd::Pretrain {
            manifest,
            split,
            config,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            info_provenance(&cfg.digest()?, cfg.train.seed);
            let (_, corpus) = load_corpus(&manifest)?;
            let split = SplitSpec::load(&split)?;
            let mut log = open_log(&out)?;
            let model = pretrain(&cfg, &corpus, &split, &mut log)?;
            save_ckpt(&model, &out)?;
            println!("wrote checkpoint {} (digest {})", out.display(), file_digest(&out)?);
            Ok(())
        }
        Cmd::Finetune {
            ckpt,
            manifest,
            split,
            out,
        } => {
            let mut model = load_ckpt(&ckpt)?;
            info_provenance(&model.cfg.digest()?, model.cfg.train.seed);
            let (_, corpus) = load_corpus(&manifest)?;
            ensure_geometry(&model, corpus.height(), corpus.width())?;
            let split = SplitSpec::load(&split)?;
            let mut log = open_log(&out)?;
            finetune(&mut model, &corpus, &split, &mut log)?;
            save_ckpt(&model, &out)?;
            println!("wrote checkpoint {} (digest {})", out.display(), file_digest(&out)?);
            Ok(())
        }
        Cmd::Synthesize {
            ckpt,
            manifest,
            char_id,
            style_id,
            refs,
            out,
        } => {
            let model = load_ckpt(&ckpt)?;
            info_provenance(&model.cfg.digest()?, model.cfg.train.seed);
            let (_, corpus) = load_corpus(&manifest)?;
            ensure_geometry(&model, corpus.height(), corpus.width())?;
            let task = build_synthesis_task(&corpus, style_id, char_id, &refs)?;
            let result = synthesize(&model.store, &model.cfg.model, &task)?;
            pbm::save(&result.ts.image, &out, false)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Cmd::Eval {
            ckpt,
            manifest,
            split,
            out,
        } => {
            let model = load_ckpt(&ckpt)?;
            info_provenance(&model.cfg.digest()?, model.cfg.train.seed);
            let (man, corpus) = load_corpus(&manifest)?;
            let split_spec = SplitSpec::load(&split)?;
            let report = evaluate(&model, &man, &corpus, &split_spec)?;
            let meta = ReportMeta {
                checkpoint_digest: file_digest(&ckpt)?,
                split_digest: file_digest(&split)?,
                config_digest: model.cfg.digest()?,
                seed: model.cfg.train.seed,
            };
            std::fs::write(&out, render_report(&report, &meta)).map_err(Error::Io)?;
            println!(
                "wrote {} ({} glyphs, mean MAE {})",
                out.display(),
                report.rows.len(),
                report.mean_mae
            );
            Ok(())
        }
        Cmd::CodecRoundtrip { manifest } => {
            let (man, corpus) = load_corpus(&manifest)?;
            info_provenance(&sha256_hex(&std::fs::read(&manifest).map_err(Error::Io)?), 0);
            let mut checked = 0usize;
            for cfg in roundtrip_configs(man.height, man.width) {
                for style in corpus.styles() {
                    for ch in corpus.chars_in_style(style) {
                        let img = corpus.image(style, ch)?;
                        let back = assemble_image(&chunk_image(img, &cfg)?, &cfg)?;
                        if &back != img {
                            return Err(Error::Data(format!(
                                "roundtrip mismatch style={style} char={ch} block={} patch={}",
                                cfg.block, cfg.patch
                            )));
                        }
                        checked += 1;
                    }
                }
            }
            if checked == 0 {
                return Err(Error::Data(
                    "no (block, patch) combination divides the corpus geometry".into(),
                ));
            }
            println!("roundtrip ok over {checked} glyph/config combinations");
            Ok(())
        }
        Cmd::GradCheck { seed } => {
            info_provenance("none", seed);
            let results = full_suite(seed)?;
            let mut failed = 0usize;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status}\t{}\trel_err={:.3e}\ttol={:.1e}", r.name, r.max_rel_err, r.tolerance);
                if !r.passed() {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(Error::Numeric(format!(
                    "{failed}/{} gradient checks exceeded tolerance",
                    results.len()
                )));
            }
            println!("all {} gradient checks passed", results.len());
            Ok(())
        }
    }
}

/// Every tokenization geometry the roundtrip sweep tries on an HxW corpus.
fn roundtrip_configs(height: usize, width: usize) -> Vec<ChunkConfig> {
    let mut out = Vec::new();
    for block in [4usize, 8, 16, 32, 64] {
        if height % block != 0 || width % block != 0 {
            continue;
        }
        for patch in [1usize, 2, 4] {
            if block % patch == 0 {
                if let Ok(cfg) = ChunkConfig::new(height, width, block, patch, 1) {
                    out.push(cfg);
                }
            }
        }
    }
    out
}

/// Assemble an inference task from explicit reference ids: source glyph
/// from the source font, references rendered in the target style, no
/// ground-truth target.
fn build_synthesis_task(
    corpus: &Corpus,
    style_id: usize,
    char_id: usize,
    refs: &[usize],
) -> Result<SynthesisTask> {
    if refs.is_empty() {
        return Err(Error::Data("need at least one reference char id".into()));
    }
    if refs.contains(&char_id) {
        return Err(Error::Data(
            "reference chars must differ from the target char".into(),
        ));
    }
    let (source_image, source_meta) = corpus.glyph(SOURCE_STYLE, char_id)?;
    let mut references = Vec::with_capacity(refs.len());
    for &r in refs {
        references.push(corpus.glyph(style_id, r)?);
    }
    let mut target_meta = source_meta;
    target_meta.style_id = style_id;
    Ok(SynthesisTask {
        references,
        source_image,
        source_meta,
        target_meta,
        target_image: None,
    })
}
