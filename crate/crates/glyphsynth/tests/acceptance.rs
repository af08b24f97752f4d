//! Acceptance gate: ten end-to-end checks, one test per criterion.
//!
//! c01  chunk codec is a perfect inverse pair across geometries
//! c02  token grid and token width at the two production geometries
//! c03  attention-hidden keys cannot influence visible rows
//! c04  serial decoding is causal in the teacher sequence
//! c05  analytic gradients match finite differences
//! c06  learning-rate schedule hits its landmark values
//! c07  two-stage training overfits a small corpus to low pixel error
//! c08  few-shot fine-tuning beats no-finetune and copy-source baselines
//! c09  training reruns with the same seed are bitwise identical
//! c10  checkpoint save/load preserves synthesis bitwise
//!
//! The heavy fixtures (c07, c08) are trained once and shared; c09 retrains
//! both from scratch and compares against the cached runs.

use std::rc::Rc;
use std::sync::OnceLock;
use std::time::Instant;

use glyphsynth::codec::{ChunkConfig, GlyphMeta, WubiCode};
use glyphsynth::data::{make_task, Corpus, CorpusManifest, SplitSpec, TaskPhase};
use glyphsynth::eval::{copy_source_mae, evaluate, mae};
use glyphsynth::gradcheck::full_suite;
use glyphsynth::graph::{AttnMask, Graph};
use glyphsynth::image::GlyphImage;
use glyphsynth::params::{GraphParams, ParamStore};
use glyphsynth::pipeline::{init_model, synthesize, ts_predict_node, ModelConfig, SynthesisTask};
use glyphsynth::tensor::Tensor;
use glyphsynth::toyfont::{generate, ToySpec};
use glyphsynth::train::{finetune, lr_schedule, pretrain, ExperimentConfig, TrainConfig, TrainedModel};
use glyphsynth::transformer::{encoder_forward, init_stack, StackConfig};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// helpers

fn store_bits(store: &ParamStore) -> Vec<u64> {
    let mut bits = Vec::new();
    for (_, t) in store.iter() {
        bits.extend(t.data().iter().map(|v| v.to_bits()));
    }
    bits
}

fn tensor_bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.rows() == b.rows()
        && a.cols() == b.cols()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Loss column of a training log, as raw bits.
fn log_loss_bits(log: &str) -> Vec<u64> {
    log.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let loss = l.split('\t').nth(3).expect("log line has 4 columns");
            loss.parse::<f64>().expect("loss parses").to_bits()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// c07 fixture: overfit a tiny two-style corpus

struct OverfitFixture {
    cfg: ExperimentConfig,
    corpus: Corpus,
    split: SplitSpec,
    model: TrainedModel,
    log: String,
    train_secs: f64,
}

fn overfit_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            chunk: ChunkConfig::new(32, 32, 8, 4, 4).unwrap(),
            d_style: 20,
            d_content: 20,
            d_wubi: 2,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 256,
            n_styles: 3,
            n_chars: 8,
        },
        train: TrainConfig {
            batch_size: 4,
            pretrain_epochs: 375,
            finetune_epochs: 1,
            finetune_lr: 1e-4,
            warmup: 200,
            factor: 0.5,
            d_token: 64,
            seed: 42,
            k_refs: 3,
            literal_schedule: false,
        },
    }
}

fn build_overfit() -> OverfitFixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        styles: 2,
        chars: 8,
        size: 32,
        seed: 11,
    };
    let manifest = generate(&spec, dir.path()).unwrap();
    let corpus = Corpus::load(&manifest).unwrap();
    let split = SplitSpec {
        pretrain_styles: vec![1, 2],
        finetune_styles: vec![],
        finetune_chars: vec![],
        test_chars: vec![],
    };
    let cfg = overfit_config();
    let mut log = Vec::new();
    let t0 = Instant::now();
    let model = pretrain(&cfg, &corpus, &split, &mut log).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    OverfitFixture {
        cfg,
        corpus,
        split,
        model,
        log: String::from_utf8(log).unwrap(),
        train_secs,
    }
}

fn overfit() -> &'static OverfitFixture {
    static FIXTURE: OnceLock<OverfitFixture> = OnceLock::new();
    FIXTURE.get_or_init(build_overfit)
}

/// Mean pixel error of both stage outputs over every training glyph.
fn overfit_train_mae(fx: &OverfitFixture) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(999);
    let mut tp_total = 0.0;
    let mut ts_total = 0.0;
    let mut n = 0usize;
    for &style in &fx.split.pretrain_styles {
        for ch in 1..=8 {
            let task = make_task(
                &fx.corpus,
                &fx.split,
                TaskPhase::Pretrain,
                style,
                ch,
                fx.cfg.train.k_refs,
                &mut rng,
            )
            .unwrap();
            let target = task.target_image.clone().unwrap();
            let out = synthesize(&fx.model.store, &fx.cfg.model, &task).unwrap();
            tp_total += mae(&out.tp.image, &target).unwrap();
            ts_total += mae(&out.ts.image, &target).unwrap();
            n += 1;
        }
    }
    (tp_total / n as f64, ts_total / n as f64)
}

// ---------------------------------------------------------------------------
// c08 fixture: pretrain on five styles, fine-tune on a held-out sixth

struct FewshotFixture {
    corpus: Corpus,
    manifest: CorpusManifest,
    split: SplitSpec,
    pretrained: TrainedModel,
    model: TrainedModel,
    log: String,
    train_secs: f64,
}

fn fewshot_config() -> ExperimentConfig {
    ExperimentConfig {
        model: ModelConfig {
            chunk: ChunkConfig::new(32, 32, 8, 4, 4).unwrap(),
            d_style: 20,
            d_content: 20,
            d_wubi: 2,
            n_heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 256,
            n_styles: 7,
            n_chars: 40,
        },
        train: TrainConfig {
            batch_size: 8,
            pretrain_epochs: 20,
            finetune_epochs: 50,
            finetune_lr: 1e-4,
            warmup: 200,
            factor: 1.0,
            d_token: 64,
            seed: 77,
            k_refs: 3,
            literal_schedule: false,
        },
    }
}

fn build_fewshot() -> FewshotFixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToySpec {
        styles: 6,
        chars: 40,
        size: 32,
        seed: 13,
    };
    let manifest = generate(&spec, dir.path()).unwrap();
    let corpus = Corpus::load(&manifest).unwrap();
    let split = SplitSpec {
        pretrain_styles: vec![1, 2, 3, 4, 5],
        finetune_styles: vec![6],
        finetune_chars: (1..=10).collect(),
        test_chars: (11..=40).collect(),
    };
    let cfg = fewshot_config();
    let mut log = Vec::new();
    let t0 = Instant::now();
    let pretrained = pretrain(&cfg, &corpus, &split, &mut log).unwrap();
    let mut model = pretrained.clone();
    finetune(&mut model, &corpus, &split, &mut log).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    FewshotFixture {
        corpus,
        manifest,
        split,
        pretrained,
        model,
        log: String::from_utf8(log).unwrap(),
        train_secs,
    }
}

fn fewshot() -> &'static FewshotFixture {
    static FIXTURE: OnceLock<FewshotFixture> = OnceLock::new();
    FIXTURE.get_or_init(build_fewshot)
}

// ---------------------------------------------------------------------------
// c01

#[test]
fn c01_chunk_roundtrip_is_exact_across_geometries() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (side, block) in [(32usize, 8usize), (256, 16), (1024, 64)] {
        let cfg = ChunkConfig::new(side, side, block, 4, 1).unwrap();
        for i in 0..1000 {
            let img = GlyphImage::random(side, side, &mut rng);
            let chunked = glyphsynth::codec::chunk_image(&img, &cfg).unwrap();
            let back = glyphsynth::codec::assemble_image(&chunked, &cfg).unwrap();
            assert_eq!(img, back, "roundtrip mismatch at side {side} image {i}");
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "roundtrip sweep took {secs:.1}s, budget 60s");
    println!("PASS c01: 3000 random images reassembled exactly in {secs:.1}s");
}

// ---------------------------------------------------------------------------
// c02

#[test]
fn c02_token_grid_and_width_at_production_geometries() {
    let a = ChunkConfig::new(256, 256, 16, 4, 16).unwrap();
    assert_eq!(a.n_tokens(), 256);
    assert_eq!(a.token_content_dim(), 256);
    let b = ChunkConfig::new(1024, 1024, 64, 4, 2).unwrap();
    assert_eq!(b.n_tokens(), 256);
    assert_eq!(b.token_content_dim(), 512);
    println!("PASS c02: 256x256/B16 -> 256 tokens of width 256; 1024x1024/B64 -> 256 tokens of width 512");
}

// ---------------------------------------------------------------------------
// c03

#[test]
fn c03_hidden_keys_cannot_influence_visible_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n_heads = *[1usize, 2, 4].choose(&mut rng).unwrap();
        let d_model = n_heads * rng.gen_range(3..=8);
        let n = rng.gen_range(3..=10);
        let cfg = StackConfig {
            d_model,
            n_heads,
            d_ff: 2 * d_model,
            n_layers: rng.gen_range(1..=2),
        };
        let store = init_stack(&cfg, "enc", &mut rng).unwrap();
        let x = Tensor::randn(n, d_model, 1.0, &mut rng);

        // at least one hidden and one visible key
        let mut visible = vec![true; n];
        visible[rng.gen_range(0..n)] = false;
        for v in visible.iter_mut() {
            if rng.gen_bool(0.3) {
                *v = false;
            }
        }
        if visible.iter().all(|v| !v) {
            visible[0] = true;
        }

        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let mut bound = GraphParams::new();
            let xid = g.constant(input.clone());
            let mask = Rc::new(AttnMask::keys_visible(n, &visible));
            let out = encoder_forward(&mut g, &mut bound, &store, "enc", &cfg, xid, &mask).unwrap();
            g.value(out).clone()
        };

        let base = run(&x);
        let mut perturbed = x.clone();
        for (i, &v) in visible.iter().enumerate() {
            if !v {
                for val in perturbed.row_mut(i) {
                    *val += rng.gen_range(-10.0..10.0);
                }
            }
        }
        let out = run(&perturbed);
        for (i, &v) in visible.iter().enumerate() {
            if v {
                for (a, b) in base.row(i).iter().zip(out.row(i)) {
                    let diff = (a - b).abs();
                    worst = worst.max(diff);
                    assert!(
                        diff < 1e-12,
                        "case {case}: visible row {i} moved by {diff:e} after a hidden row changed"
                    );
                }
            }
        }
    }
    println!("PASS c03: 100 cases, max visible-row drift {worst:e} (< 1e-12)");
}

// ---------------------------------------------------------------------------
// c04

#[test]
fn c04_serial_decoding_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let chunk = ChunkConfig::new(32, 32, 8, 4, 4).unwrap();
    let cfg = ModelConfig {
        chunk,
        d_style: 6,
        d_content: 6,
        d_wubi: 2,
        n_heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 32,
        n_styles: 4,
        n_chars: 6,
    };
    let n = chunk.n_tokens();
    let block = chunk.block;
    let blocks_per_row = chunk.width / block;
    let mut worst = 0.0f64;

    for case in 0..100 {
        let store = init_model(&cfg, &mut rng).unwrap();
        let meta = |style_id, char_id| GlyphMeta {
            style_id,
            char_id,
            wubi: WubiCode::parse("abcd").unwrap(),
        };
        let task = SynthesisTask {
            references: vec![(GlyphImage::random(32, 32, &mut rng), meta(1, 2))],
            source_image: GlyphImage::random(32, 32, &mut rng),
            source_meta: meta(0, 1),
            target_meta: meta(1, 1),
            target_image: None,
        };
        let i_tp = GlyphImage::random(32, 32, &mut rng);
        let teacher = GlyphImage::random(32, 32, &mut rng);

        // flip every pixel of one teacher block; predictions for that block
        // and everything before it must not move
        let b = rng.gen_range(0..n);
        let mut poked = teacher.clone();
        let (br, bc) = (b / blocks_per_row, b % blocks_per_row);
        for r in 0..block {
            for c in 0..block {
                let (pr, pc) = (br * block + r, bc * block + c);
                poked.set(pr, pc, 1 - poked.get(pr, pc));
            }
        }

        let run = |t: &GlyphImage| {
            let mut g = Graph::new();
            let mut bound = GraphParams::new();
            let out = ts_predict_node(&mut g, &mut bound, &store, &cfg, &task, &i_tp, t).unwrap();
            g.value(out).clone()
        };
        let base = run(&teacher);
        let out = run(&poked);
        for row in 0..=b {
            for (a, y) in base.row(row).iter().zip(out.row(row)) {
                let diff = (a - y).abs();
                worst = worst.max(diff);
                assert!(
                    diff < 1e-12,
                    "case {case}: prediction row {row} moved by {diff:e} after block {b} changed"
                );
            }
        }
    }
    println!("PASS c04: 100 cases, max prefix drift {worst:e} (< 1e-12)");
}

// ---------------------------------------------------------------------------
// c05

#[test]
fn c05_analytic_gradients_match_finite_differences() {
    let t0 = Instant::now();
    let results = full_suite(5).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    assert!(!results.is_empty());
    for r in &results {
        assert!(
            r.passed() && r.max_rel_err < 1e-5,
            "gradient check {} has relative error {:e} (tolerance {:e})",
            r.name,
            r.max_rel_err,
            r.tolerance
        );
    }
    assert!(secs < 300.0, "gradient suite took {secs:.1}s, budget 300s");
    let worst = results
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    println!(
        "PASS c05: {} checks, worst relative error {worst:e} (< 1e-5) in {secs:.1}s",
        results.len()
    );
}

// ---------------------------------------------------------------------------
// c06

#[test]
fn c06_learning_rate_schedule_hits_landmarks() {
    let cfg = TrainConfig {
        d_token: 448,
        warmup: 400,
        ..TrainConfig::default()
    };
    // landmark values computed independently from the closed form
    let expect = [
        (1u64, 5.90569489076917616e-6),
        (400, 2.36227795630767051e-3),
        (1600, 1.18113897815383525e-3),
    ];
    for (step, want) in expect {
        let got = lr_schedule(step, &cfg).unwrap();
        let rel = (got - want).abs() / want;
        assert!(
            rel <= 1e-9,
            "step {step}: lr {got:e} differs from {want:e} by {rel:e} relative"
        );
    }
    println!("PASS c06: schedule matches landmarks at steps 1/400/1600 within 1e-9 relative");
}

// ---------------------------------------------------------------------------
// c07

#[test]
fn c07_two_stage_training_overfits_small_corpus() {
    let fx = overfit();
    let steps = fx.model.adam_p.step_count() + fx.model.adam_s.step_count();
    assert!(steps <= 3000, "used {steps} optimizer steps, budget 3000");
    assert!(
        fx.train_secs < 900.0,
        "training took {:.1}s, budget 900s",
        fx.train_secs
    );
    let (tp_mae, ts_mae) = overfit_train_mae(fx);
    assert!(
        ts_mae < 0.05,
        "serial-stage training MAE {ts_mae:.4} is not below 0.05"
    );
    assert!(
        ts_mae <= tp_mae,
        "serial stage ({ts_mae:.4}) did not improve on parallel stage ({tp_mae:.4})"
    );
    println!(
        "PASS c07: {steps} steps in {:.1}s; train MAE parallel {tp_mae:.4}, serial {ts_mae:.4}",
        fx.train_secs
    );
}

// ---------------------------------------------------------------------------
// c08

#[test]
fn c08_few_shot_finetune_beats_baselines() {
    let fx = fewshot();
    assert!(
        fx.train_secs < 3600.0,
        "training took {:.1}s, budget 3600s",
        fx.train_secs
    );
    let tuned = evaluate(&fx.model, &fx.manifest, &fx.corpus, &fx.split).unwrap();
    let untouched = evaluate(&fx.pretrained, &fx.manifest, &fx.corpus, &fx.split).unwrap();
    let copy = copy_source_mae(&fx.corpus, &fx.split).unwrap();
    assert_eq!(tuned.rows.len(), 30, "expected 30 held-out glyphs");
    assert!(
        tuned.mean_mae < untouched.mean_mae,
        "fine-tuned MAE {:.4} does not beat the no-finetune baseline {:.4}",
        tuned.mean_mae,
        untouched.mean_mae
    );
    assert!(
        tuned.mean_mae < copy,
        "fine-tuned MAE {:.4} does not beat the copy-source baseline {copy:.4}",
        tuned.mean_mae
    );
    println!(
        "PASS c08: test MAE {:.4} beats no-finetune {:.4} and copy-source {copy:.4} ({:.1}s training)",
        tuned.mean_mae, untouched.mean_mae, fx.train_secs
    );
}

// ---------------------------------------------------------------------------
// c09

#[test]
fn c09_training_reruns_are_bitwise_identical() {
    let first_overfit = overfit();
    let second_overfit = build_overfit();
    assert_eq!(
        log_loss_bits(&first_overfit.log),
        log_loss_bits(&second_overfit.log),
        "overfit rerun produced different losses"
    );
    assert_eq!(
        first_overfit.log, second_overfit.log,
        "overfit rerun produced a different training log"
    );
    assert_eq!(
        store_bits(&first_overfit.model.store),
        store_bits(&second_overfit.model.store),
        "overfit rerun produced different parameters"
    );

    let first_fewshot = fewshot();
    let second_fewshot = build_fewshot();
    assert_eq!(
        log_loss_bits(&first_fewshot.log),
        log_loss_bits(&second_fewshot.log),
        "few-shot rerun produced different losses"
    );
    assert_eq!(
        first_fewshot.log, second_fewshot.log,
        "few-shot rerun produced a different training log"
    );
    assert_eq!(
        store_bits(&first_fewshot.model.store),
        store_bits(&second_fewshot.model.store),
        "few-shot rerun produced different parameters"
    );
    let n = log_loss_bits(&first_overfit.log).len() + log_loss_bits(&first_fewshot.log).len();
    println!("PASS c09: {n} logged losses and all parameters identical across reruns");
}

// ---------------------------------------------------------------------------
// c10

#[test]
fn c10_checkpoint_roundtrip_preserves_synthesis() {
    let fx = overfit();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ftck");
    glyphsynth::checkpoint::save(&fx.model, &path).unwrap();
    let loaded = glyphsynth::checkpoint::load(&path).unwrap();
    assert_eq!(
        store_bits(&fx.model.store),
        store_bits(&loaded.store),
        "parameters changed across save/load"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..20 {
        let style = *fx.split.pretrain_styles.choose(&mut rng).unwrap();
        let ch = rng.gen_range(1..=8);
        let task = make_task(
            &fx.corpus,
            &fx.split,
            TaskPhase::Pretrain,
            style,
            ch,
            fx.cfg.train.k_refs,
            &mut rng,
        )
        .unwrap();
        let before = synthesize(&fx.model.store, &fx.cfg.model, &task).unwrap();
        let after = synthesize(&loaded.store, &loaded.cfg.model, &task).unwrap();
        assert!(
            tensor_bits_equal(&before.tp.patch_values, &after.tp.patch_values),
            "case {case}: parallel-stage values differ after reload"
        );
        assert!(
            tensor_bits_equal(&before.ts.patch_values, &after.ts.patch_values),
            "case {case}: serial-stage values differ after reload"
        );
        assert_eq!(before.tp.image, after.tp.image, "case {case}: parallel image differs");
        assert_eq!(before.ts.image, after.ts.image, "case {case}: serial image differs");
    }
    println!("PASS c10: 20 synthesis tasks bitwise identical across checkpoint roundtrip");
}
