//! Pretraining and fine-tuning loops with the warmup learning-rate
//! schedule.
//!
//! Pretraining runs in two strictly ordered phases: the parallel stage is
//! trained to completion, then the serial stage is trained teacher-forced
//! on the (frozen-at-that-point) parallel stage's outputs. Gradients never
//! cross the binarization between stages; the shared codebook and embedding
//! tables receive updates in whichever phase is active. Fine-tuning adapts
//! both stages to one unseen style at a constant learning rate, resuming
//! the optimizer moments saved in the checkpoint.
//!
//! Every optimizer step appends one log line: `step<TAB>stage<TAB>lr<TAB>loss`.
//! All sampling flows from one seeded generator, so a fixed (corpus, split,
//! config, seed) reproduces losses and parameters bitwise.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_task, Corpus, SplitSpec, TaskPhase, SOURCE_STYLE};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::{GraphParams, ParamStore};
use crate::pipeline::{
    init_model, tp_forward, tp_loss_node, ts_loss_node, ModelConfig, SynthesisTask,
    STAGE_PARALLEL, STAGE_SERIAL,
};

/// Gradients are rescaled to this joint L2 norm when they exceed it.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Optimization hyperparameters. Defaults are the full-scale values; toy
/// profiles override selectively in the experiment file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub warmup: usize,
    pub factor: f64,
    /// Token width the schedule scales by; normally the model's d_token.
    pub d_token: usize,
    pub seed: u64,
    /// References per task.
    pub k_refs: usize,
    /// Use the published schedule text verbatim (multiplies by d_token
    /// instead of its inverse square root); off by default because the
    /// resulting peak learning rate is far too large to train.
    pub literal_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            pretrain_epochs: 10,
            finetune_epochs: 100,
            finetune_lr: 1e-4,
            warmup: 400,
            factor: 1.0,
            d_token: 448,
            seed: 0,
            k_refs: 4,
            literal_schedule: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.pretrain_epochs == 0
            || self.finetune_epochs == 0
            || self.warmup == 0
            || self.d_token == 0
            || self.k_refs == 0
        {
            return Err(Error::Config(
                "batch size, epochs, warmup, d_token and k_refs must be positive".into(),
            ));
        }
        if self.finetune_lr <= 0.0 || self.factor <= 0.0 {
            return Err(Error::Config(
                "learning-rate factors must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Everything one experiment needs: model geometry plus optimization
/// hyperparameters, stored as one TOML document.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Digest of the canonical serialized form, for provenance lines in
    /// checkpoints and reports.
    pub fn digest(&self) -> Result<String> {
        Ok(crate::checkpoint::sha256_hex(self.to_toml()?.as_bytes()))
    }
}

/// Warmup learning-rate schedule: linear ramp to the peak at `warmup`,
/// inverse-square-root decay after it, scaled by `factor * d_token^(-1/2)`
/// (or by `factor * d_token` in literal mode).
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate schedule starts at step 1".into()));
    }
    let s = step as f64;
    let w = cfg.warmup as f64;
    let d = cfg.d_token as f64;
    let dim_term = if cfg.literal_schedule {
        d
    } else {
        d.powf(-0.5)
    };
    Ok(cfg.factor * dim_term * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// A trained (or training) model: parameters plus per-stage optimizer
/// states and the experiment that produced them.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub cfg: ExperimentConfig,
    pub store: ParamStore,
    pub adam_p: AdamState,
    pub adam_s: AdamState,
}

/// Which stage a batch updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Parallel,
    Serial,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Parallel => STAGE_PARALLEL,
            Stage::Serial => STAGE_SERIAL,
        }
    }
}

fn describe_batch(batch: &[SynthesisTask]) -> String {
    let mut s = String::new();
    for t in batch {
        let _ = write!(s, "(style {}, char {}) ", t.target_meta.style_id, t.target_meta.char_id);
    }
    s.trim_end().to_string()
}

/// Run one optimizer step over a batch: average the per-task gradients,
/// zero pinned rows, clip, and apply Adam. Returns the mean loss.
fn train_step(
    model: &mut TrainedModel,
    stage: Stage,
    batch: &[SynthesisTask],
    lr: f64,
    log: &mut dyn std::io::Write,
) -> Result<f64> {
    let mcfg = model.cfg.model;
    let mut grand: BTreeMap<String, crate::tensor::Tensor> = BTreeMap::new();
    let mut loss_sum = 0.0;

    for task in batch {
        let mut g = Graph::new();
        let mut bound = GraphParams::new();
        let loss = match stage {
            Stage::Parallel => tp_loss_node(&mut g, &mut bound, &model.store, &mcfg, task)?,
            Stage::Serial => {
                // teacher forcing conditions on the current parallel output;
                // binarization keeps gradients from crossing the stage gap
                let i_tp = tp_forward(&model.store, &mcfg, task)?.image;
                ts_loss_node(&mut g, &mut bound, &model.store, &mcfg, task, &i_tp)?
            }
        };
        let loss_value = g.value(loss).at(0, 0);
        if !loss_value.is_finite() {
            let dump = describe_batch(batch);
            let _ = writeln!(log, "# non-finite loss; batch: {dump}");
            return Err(Error::Numeric(format!(
                "loss became non-finite on batch [{dump}]"
            )));
        }
        loss_sum += loss_value;
        let mut grads = g.backward(loss)?;
        for (name, grad) in bound.collect_grads(&g, &mut grads) {
            match grand.get_mut(&name) {
                Some(t) => t.add_scaled(&grad, 1.0),
                None => {
                    grand.insert(name, grad);
                }
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for t in grand.values_mut() {
        t.scale_in_place(inv);
    }
    model.store.zero_pinned_grads(&mut grand);
    clip_global_norm(&mut grand, GRAD_CLIP_NORM);
    let adam = match stage {
        Stage::Parallel => &mut model.adam_p,
        Stage::Serial => &mut model.adam_s,
    };
    adam.apply(&AdamConfig::default(), lr, &mut model.store, &grand)?;
    Ok(loss_sum * inv)
}

/// Shuffle the targets, cut them into batches, and run one epoch of steps
/// for one stage. References are resampled per task per epoch.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut TrainedModel,
    corpus: &Corpus,
    split: &SplitSpec,
    phase: TaskPhase,
    stage: Stage,
    targets: &mut Vec<(usize, usize)>,
    constant_lr: Option<f64>,
    rng: &mut ChaCha8Rng,
    log: &mut dyn std::io::Write,
) -> Result<f64> {
    let tcfg = model.cfg.train;
    targets.shuffle(rng);
    let mut last_loss = 0.0;
    for chunk in targets.chunks(tcfg.batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &(style, ch) in chunk {
            batch.push(make_task(corpus, split, phase, style, ch, tcfg.k_refs, rng)?);
        }
        let adam_step = match stage {
            Stage::Parallel => model.adam_p.step_count(),
            Stage::Serial => model.adam_s.step_count(),
        };
        let lr = match constant_lr {
            Some(lr) => lr,
            None => lr_schedule(adam_step + 1, &tcfg)?,
        };
        let loss = train_step(model, stage, &batch, lr, log)?;
        let step = adam_step + 1;
        writeln!(log, "{step}\t{}\t{lr}\t{loss}", stage.tag()).map_err(Error::Io)?;
        last_loss = loss;
    }
    Ok(last_loss)
}

/// Targets for pretraining: every corpus glyph of every pretrain style, as
/// long as the source font covers its character.
fn pretrain_targets(corpus: &Corpus, split: &SplitSpec) -> Result<Vec<(usize, usize)>> {
    let mut styles_present = 0;
    let mut targets = Vec::new();
    for &style in &split.pretrain_styles {
        let chars = corpus.chars_in_style(style);
        if chars.is_empty() {
            return Err(Error::Data(format!(
                "pretrain style {style} has no glyphs in the corpus"
            )));
        }
        styles_present += 1;
        for ch in chars {
            if !corpus.contains(SOURCE_STYLE, ch) {
                return Err(Error::Data(format!(
                    "source font lacks char {ch} needed for style {style}"
                )));
            }
            targets.push((style, ch));
        }
    }
    if styles_present < 2 {
        return Err(Error::Data(format!(
            "pretraining needs at least 2 target styles, corpus+split provide {styles_present}"
        )));
    }
    Ok(targets)
}

/// Pretrain from scratch: initialize parameters, train the parallel stage
/// for `pretrain_epochs`, then the serial stage for `pretrain_epochs`.
pub fn pretrain(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    split: &SplitSpec,
    log: &mut dyn std::io::Write,
) -> Result<TrainedModel> {
    cfg.validate()?;
    split.validate()?;
    let mut targets = pretrain_targets(corpus, split)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let store = init_model(&cfg.model, &mut rng)?;
    let mut model = TrainedModel {
        cfg: *cfg,
        store,
        adam_p: AdamState::new(),
        adam_s: AdamState::new(),
    };
    for stage in [Stage::Parallel, Stage::Serial] {
        for _ in 0..cfg.train.pretrain_epochs {
            run_epoch(
                &mut model,
                corpus,
                split,
                TaskPhase::Pretrain,
                stage,
                &mut targets,
                None,
                &mut rng,
                log,
            )?;
        }
    }
    Ok(model)
}

/// Adapt a pretrained model to one unseen style from its few-shot set.
/// Both stages are updated each epoch at the constant fine-tune rate; the
/// new style's table row is the untouched initialization row. Optimizer
/// moments resume from the checkpointed states.
pub fn finetune(
    model: &mut TrainedModel,
    corpus: &Corpus,
    split: &SplitSpec,
    log: &mut dyn std::io::Write,
) -> Result<()> {
    model.cfg.validate()?;
    split.validate()?;
    let tcfg = model.cfg.train;
    if split.finetune_styles.len() != 1 {
        return Err(Error::Data(format!(
            "fine-tuning adapts exactly one style, split lists {}",
            split.finetune_styles.len()
        )));
    }
    let style = split.finetune_styles[0];
    if split.pretrain_styles.contains(&style) {
        return Err(Error::Data(format!(
            "style {style} was already seen during pretraining"
        )));
    }
    let style_rows = model.store.get("style")?.rows();
    if style >= style_rows {
        return Err(Error::Config(format!(
            "style {style} does not fit the style table ({style_rows} rows); \
             pretrain with n_styles > {style}"
        )));
    }
    let mut targets: Vec<(usize, usize)> = Vec::new();
    for &ch in &split.finetune_chars {
        if !corpus.contains(style, ch) {
            return Err(Error::Data(format!(
                "few-shot char {ch} of style {style} is missing from the corpus"
            )));
        }
        if !corpus.contains(SOURCE_STYLE, ch) {
            return Err(Error::Data(format!(
                "source font lacks few-shot char {ch}"
            )));
        }
        targets.push((style, ch));
    }
    if targets.len() < 2 {
        return Err(Error::Data(
            "fine-tuning needs at least 2 few-shot glyphs (references exclude the target)".into(),
        ));
    }

    // derive the fine-tune stream from the seed without replaying pretrain
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x66696e65_74756e65); // "finetune"
    for _ in 0..tcfg.finetune_epochs {
        for stage in [Stage::Parallel, Stage::Serial] {
            run_epoch(
                model,
                corpus,
                split,
                TaskPhase::Finetune,
                stage,
                &mut targets,
                Some(tcfg.finetune_lr),
                &mut rng,
                log,
            )?;
        }
    }
    Ok(())
}
