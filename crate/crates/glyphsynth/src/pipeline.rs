//! Two-stage glyph synthesis.
//!
//! Stage one (the parallel stage) encodes a handful of reference glyphs in
//! the target style, then decodes the source-font glyph alongside a blank
//! half that carries the target's style/content/wubi slices; the blank
//! half's outputs are an initial prediction of every block at once. Stage
//! two (the serial stage) re-encodes that prediction and decodes the
//! target block-by-block under a causal mask, with each emitted block
//! binarized and fed back as the next input token, which lets later
//! blocks correct earlier structure.
//!
//! Both stages share the codebook and the style/content/wubi tables but
//! own separate encoder/decoder stacks and output heads. The same graph
//! builders serve training (differentiable leaves) and inference (no
//! backward pass); sequence assembly happens in-graph so gradients reach
//! the embedding tables.

use std::rc::Rc;

use rand::Rng;

use crate::codec::{
    binarize_block_to_patch_indices, binarize_patches, chunk_image, target_patches, ChunkConfig,
    ChunkedGlyph, EmbeddingTables, GlyphMeta, WUBI_ALPHABET, WUBI_LEN,
};
use crate::error::{Error, Result};
use crate::graph::{AttnMask, Graph, NodeId};
use crate::image::GlyphImage;
use crate::params::{GraphParams, ParamStore};
use crate::tensor::Tensor;
use crate::transformer::{
    decoder_forward, encoder_forward, generate_patches, init_decoder_stack, init_encoder_stack,
    init_generator, positional_encoding, StackConfig,
};

/// Parameter-name prefixes of the two stages.
pub const STAGE_PARALLEL: &str = "p";
pub const STAGE_SERIAL: &str = "s";

/// Full model geometry: tokenization plus embedding and stack dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub chunk: ChunkConfig,
    pub d_style: usize,
    pub d_content: usize,
    pub d_wubi: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    /// Style table rows; style 0 is the source font.
    pub n_styles: usize,
    /// Content table rows; char ids run 1..=n_chars.
    pub n_chars: usize,
}

impl ModelConfig {
    /// Width of one token: block content plus style, content and wubi
    /// slices.
    pub fn d_token(&self) -> usize {
        self.chunk.token_content_dim() + self.d_style + self.d_content + WUBI_LEN * self.d_wubi
    }

    pub fn enc_stack(&self) -> StackConfig {
        StackConfig {
            d_model: self.d_token(),
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.enc_layers,
        }
    }

    pub fn dec_stack(&self) -> StackConfig {
        StackConfig {
            d_model: self.d_token(),
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers: self.dec_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.chunk.validate()?;
        self.enc_stack().validate()?;
        self.dec_stack().validate()?;
        if self.d_token() % 2 != 0 {
            return Err(Error::Config(format!(
                "token dimension {} must be even for positional encoding",
                self.d_token()
            )));
        }
        if self.n_styles < 2 {
            return Err(Error::Config(
                "need the source style plus at least one target style".into(),
            ));
        }
        if self.n_chars == 0 {
            return Err(Error::Config("need at least one character".into()));
        }
        Ok(())
    }
}

/// Initialize every parameter of both stages plus the shared tables.
/// Codebook entry 0 is zeroed and pinned so blank patches always embed to
/// the zero vector.
pub fn init_model<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();

    let mut codebook = Tensor::randn(cfg.chunk.codebook_size(), cfg.chunk.lc, 1.0, rng);
    codebook.row_mut(0).fill(0.0);
    store.insert("codebook", codebook)?;
    store.pin_row("codebook", 0)?;

    store.insert("style", Tensor::randn(cfg.n_styles, cfg.d_style, 1.0, rng))?;
    store.insert("content", Tensor::randn(cfg.n_chars, cfg.d_content, 1.0, rng))?;
    store.insert("wubi", Tensor::randn(WUBI_ALPHABET, cfg.d_wubi, 1.0, rng))?;

    for stage in [STAGE_PARALLEL, STAGE_SERIAL] {
        init_encoder_stack(&mut store, &format!("{stage}.enc"), &cfg.enc_stack(), rng)?;
        init_decoder_stack(&mut store, &format!("{stage}.dec"), &cfg.dec_stack(), rng)?;
        init_generator(
            &mut store,
            &format!("{stage}.gen"),
            cfg.d_token(),
            cfg.chunk.block_pixels(),
            rng,
        )?;
    }
    Ok(store)
}

/// One synthesis problem: a few reference glyphs rendered in the target
/// style, the source-font glyph of the wanted character, and the target
/// identity. `target_image` is the ground truth when training or scoring.
#[derive(Clone, Debug)]
pub struct SynthesisTask {
    pub references: Vec<(GlyphImage, GlyphMeta)>,
    pub source_image: GlyphImage,
    pub source_meta: GlyphMeta,
    pub target_meta: GlyphMeta,
    pub target_image: Option<GlyphImage>,
}

impl SynthesisTask {
    pub fn validate(&self, chunk: &ChunkConfig) -> Result<()> {
        if self.references.is_empty() {
            return Err(Error::Data("task needs at least one reference glyph".into()));
        }
        if self.source_meta.style_id != 0 {
            return Err(Error::Data(format!(
                "source glyph must use the source font (style 0), got style {}",
                self.source_meta.style_id
            )));
        }
        for (_, meta) in &self.references {
            if meta.style_id != self.target_meta.style_id {
                return Err(Error::Data(format!(
                    "reference style {} does not match target style {}",
                    meta.style_id, self.target_meta.style_id
                )));
            }
            if meta.char_id == self.target_meta.char_id {
                return Err(Error::Data(format!(
                    "reference char {} equals the target char",
                    meta.char_id
                )));
            }
        }
        let check_geom = |img: &GlyphImage| -> Result<()> {
            if img.height() != chunk.height || img.width() != chunk.width {
                return Err(Error::Shape(format!(
                    "glyph {}x{} does not match configured {}x{}",
                    img.height(),
                    img.width(),
                    chunk.height,
                    chunk.width
                )));
            }
            Ok(())
        };
        for (img, _) in &self.references {
            check_geom(img)?;
        }
        check_geom(&self.source_image)?;
        if let Some(t) = &self.target_image {
            check_geom(t)?;
        }
        Ok(())
    }

    fn target_image(&self) -> Result<&GlyphImage> {
        self.target_image
            .as_ref()
            .ok_or_else(|| Error::Data("task has no target image for training".into()))
    }
}

/// Token-sequence recipe: patch indices plus the identity whose embedding
/// slices every token carries. Built from images, blanks, or shifted
/// teacher-forcing inputs, then materialized in-graph.
#[derive(Clone, Debug)]
struct SeqSpec {
    patch_indices: Vec<u32>,
    blank_flags: Vec<bool>,
    meta: GlyphMeta,
}

impl SeqSpec {
    fn from_image(img: &GlyphImage, meta: GlyphMeta, chunk: &ChunkConfig) -> Result<Self> {
        let chunked = chunk_image(img, chunk)?;
        let blank_flags = chunked.blank_flags(chunk);
        Ok(Self {
            patch_indices: chunked.patch_indices,
            blank_flags,
            meta,
        })
    }

    fn from_chunked(chunked: ChunkedGlyph, meta: GlyphMeta, chunk: &ChunkConfig) -> Self {
        let blank_flags = chunked.blank_flags(chunk);
        Self {
            patch_indices: chunked.patch_indices,
            blank_flags,
            meta,
        }
    }

    fn blank(meta: GlyphMeta, chunk: &ChunkConfig) -> Self {
        let n = chunk.n_tokens() * chunk.patches_per_block();
        Self {
            patch_indices: vec![0; n],
            blank_flags: vec![true; chunk.n_tokens()],
            meta,
        }
    }

    /// Teacher-forcing input: token 0 blank, token `j` carries block
    /// `j - 1` of the given image.
    fn shifted(img: &GlyphImage, meta: GlyphMeta, chunk: &ChunkConfig) -> Result<Self> {
        let chunked = chunk_image(img, chunk)?;
        let ppb = chunk.patches_per_block();
        let mut patch_indices = vec![0u32; chunked.patch_indices.len()];
        patch_indices[ppb..].copy_from_slice(
            &chunked.patch_indices[..chunked.patch_indices.len() - ppb],
        );
        Ok(Self::from_chunked(
            ChunkedGlyph { patch_indices },
            meta,
            chunk,
        ))
    }
}

/// Materialize a [`SeqSpec`] as an `N x d_token` node. Patch indices
/// gather codebook rows; meta slices gather table rows repeated at every
/// token. All gathers are differentiable, so training reaches the tables.
fn sequence_node(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    spec: &SeqSpec,
) -> Result<NodeId> {
    let chunk = &cfg.chunk;
    let n = chunk.n_tokens();
    {
        // reuse the codec-side meta validation
        let tables = EmbeddingTables {
            style: store.get("style")?,
            content: store.get("content")?,
            wubi: store.get("wubi")?,
        };
        tables.check_meta(&spec.meta)?;
    }

    let codebook = bound.node(g, store, "codebook")?;
    let idx: Vec<usize> = spec.patch_indices.iter().map(|&b| b as usize).collect();
    let gathered = g.gather_rows(codebook, Rc::new(idx))?;
    let xt = g.reshape(gathered, n, chunk.token_content_dim())?;

    let style = bound.node(g, store, "style")?;
    let content = bound.node(g, store, "content")?;
    let wubi = bound.node(g, store, "wubi")?;
    let style_rows = g.gather_rows(style, Rc::new(vec![spec.meta.style_id; n]))?;
    let content_rows = g.gather_rows(content, Rc::new(vec![spec.meta.char_id - 1; n]))?;
    let mut parts = vec![xt, style_rows, content_rows];
    for &letter in &spec.meta.wubi.0 {
        parts.push(g.gather_rows(wubi, Rc::new(vec![letter as usize; n]))?);
    }
    g.concat_cols(&parts)
}

/// Positions restart at every segment boundary: the table for one segment
/// of `n` positions, stacked `segments` times.
fn segmented_positions(segments: usize, n: usize, d: usize) -> Result<Tensor> {
    let pe = positional_encoding(n, d)?;
    let mut out = Tensor::zeros(segments * n, d);
    for s in 0..segments {
        for r in 0..n {
            out.row_mut(s * n + r).copy_from_slice(pe.row(r));
        }
    }
    Ok(out)
}

/// Concatenate segment specs into one sequence node with per-segment
/// positional encoding added; returns the node and the blank flags of the
/// concatenation.
fn segments_node(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    specs: &[&SeqSpec],
) -> Result<(NodeId, Vec<bool>)> {
    let mut parts = Vec::with_capacity(specs.len());
    let mut flags = Vec::with_capacity(specs.len() * cfg.chunk.n_tokens());
    for spec in specs {
        parts.push(sequence_node(g, bound, store, cfg, spec)?);
        flags.extend_from_slice(&spec.blank_flags);
    }
    let tokens = g.concat_rows(&parts)?;
    let pe = segmented_positions(specs.len(), cfg.chunk.n_tokens(), cfg.d_token())?;
    let pe_node = g.constant(pe);
    let with_pe = g.add(tokens, pe_node)?;
    Ok((with_pe, flags))
}

fn nonblank(flags: &[bool]) -> Vec<bool> {
    flags.iter().map(|&b| !b).collect()
}

/// Parallel-stage forward pass: returns the `N x B^2` prediction node for
/// the target glyph's blocks (continuous values in (-1, 1)).
pub fn tp_predict_node(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    task: &SynthesisTask,
) -> Result<NodeId> {
    cfg.validate()?;
    task.validate(&cfg.chunk)?;
    let n = cfg.chunk.n_tokens();

    // encoder over the concatenated reference glyphs
    let ref_specs: Vec<SeqSpec> = task
        .references
        .iter()
        .map(|(img, meta)| SeqSpec::from_image(img, *meta, &cfg.chunk))
        .collect::<Result<_>>()?;
    let ref_refs: Vec<&SeqSpec> = ref_specs.iter().collect();
    let (enc_in, enc_blank) = segments_node(g, bound, store, cfg, &ref_refs)?;
    let enc_visible = nonblank(&enc_blank);
    let enc_mask = Rc::new(AttnMask::keys_visible(enc_visible.len(), &enc_visible));
    let enc_out = encoder_forward(
        g,
        bound,
        store,
        &format!("{STAGE_PARALLEL}.enc"),
        &cfg.enc_stack(),
        enc_in,
        &enc_mask,
    )?;

    // decoder over [source sequence | blank target sequence]
    let source_spec = SeqSpec::from_image(&task.source_image, task.source_meta, &cfg.chunk)?;
    let blank_spec = SeqSpec::blank(task.target_meta, &cfg.chunk);
    let (dec_in, dec_blank) = segments_node(g, bound, store, cfg, &[&source_spec, &blank_spec])?;
    let dec_visible = nonblank(&dec_blank);
    let self_mask = Rc::new(AttnMask::keys_visible(2 * n, &dec_visible));
    let cross_mask = Rc::new(AttnMask::keys_visible(2 * n, &enc_visible));
    let dec_out = decoder_forward(
        g,
        bound,
        store,
        &format!("{STAGE_PARALLEL}.dec"),
        &cfg.dec_stack(),
        dec_in,
        enc_out,
        &self_mask,
        &cross_mask,
    )?;

    // predictions come from the blank half
    let tail = g.slice_rows(dec_out, n..2 * n)?;
    generate_patches(g, bound, store, &format!("{STAGE_PARALLEL}.gen"), tail)
}

/// Parallel-stage training loss: mean squared error of the predicted
/// blocks against the target image's blocks in -1/+1 pixel coding.
pub fn tp_loss_node(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    task: &SynthesisTask,
) -> Result<NodeId> {
    let pred = tp_predict_node(g, bound, store, cfg, task)?;
    let target = target_patches(task.target_image()?, &cfg.chunk)?;
    let target_node = g.constant(target);
    g.mse(pred, target_node)
}

/// Continuous block predictions of one stage together with their
/// binarization; `image` always equals `binarize_patches(patch_values)`.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub patch_values: Tensor,
    pub image: GlyphImage,
}

impl StageOutput {
    fn from_values(patch_values: Tensor, chunk: &ChunkConfig, context: &str) -> Result<Self> {
        patch_values.ensure_finite(context)?;
        let image = binarize_patches(&patch_values, chunk)?;
        Ok(Self {
            patch_values,
            image,
        })
    }
}

/// Run the parallel stage without gradients and binarize.
pub fn tp_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    task: &SynthesisTask,
) -> Result<StageOutput> {
    let mut g = Graph::new();
    let mut bound = GraphParams::new();
    let pred = tp_predict_node(&mut g, &mut bound, store, cfg, task)?;
    StageOutput::from_values(
        g.value(pred).clone(),
        &cfg.chunk,
        "parallel-stage prediction",
    )
}

/// Serial-stage encoder pass over the re-encoded parallel-stage output.
/// Returns the encoder output and its visible-key flags for reuse across
/// the serial decoding steps.
fn ts_encode(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    i_tp: &GlyphImage,
    target_meta: GlyphMeta,
) -> Result<(NodeId, Vec<bool>)> {
    let spec = SeqSpec::from_image(i_tp, target_meta, &cfg.chunk)?;
    let (enc_in, enc_blank) = segments_node(g, bound, store, cfg, &[&spec])?;
    let enc_visible = nonblank(&enc_blank);
    let enc_mask = Rc::new(AttnMask::keys_visible(enc_visible.len(), &enc_visible));
    let enc_out = encoder_forward(
        g,
        bound,
        store,
        &format!("{STAGE_SERIAL}.enc"),
        &cfg.enc_stack(),
        enc_in,
        &enc_mask,
    )?;
    Ok((enc_out, enc_visible))
}

/// Serial-stage decoder under a causal mask. `second_half` is the shifted
/// feedback sequence: blank first token, then previously known blocks.
fn ts_decode(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    source_spec: &SeqSpec,
    second_half: &SeqSpec,
    enc_out: NodeId,
    enc_visible: &[bool],
) -> Result<NodeId> {
    let n = cfg.chunk.n_tokens();
    let (dec_in, dec_blank) = segments_node(g, bound, store, cfg, &[source_spec, second_half])?;
    let dec_visible = nonblank(&dec_blank);
    let self_mask = Rc::new(AttnMask::causal_keys(2 * n, &dec_visible));
    let cross_mask = Rc::new(AttnMask::keys_visible(2 * n, enc_visible));
    let dec_out = decoder_forward(
        g,
        bound,
        store,
        &format!("{STAGE_SERIAL}.dec"),
        &cfg.dec_stack(),
        dec_in,
        enc_out,
        &self_mask,
        &cross_mask,
    )?;
    let tail = g.slice_rows(dec_out, n..2 * n)?;
    generate_patches(g, bound, store, &format!("{STAGE_SERIAL}.gen"), tail)
}

/// Serial-stage teacher-forced prediction node: the decoder sees the true
/// target blocks shifted right by one, so position `j` predicts block `j`
/// from blocks `< j`.
pub fn ts_predict_node(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    task: &SynthesisTask,
    i_tp: &GlyphImage,
    teacher: &GlyphImage,
) -> Result<NodeId> {
    cfg.validate()?;
    task.validate(&cfg.chunk)?;
    let (enc_out, enc_visible) = ts_encode(g, bound, store, cfg, i_tp, task.target_meta)?;
    let source_spec = SeqSpec::from_image(&task.source_image, task.source_meta, &cfg.chunk)?;
    let shifted = SeqSpec::shifted(teacher, task.target_meta, &cfg.chunk)?;
    ts_decode(
        g,
        bound,
        store,
        cfg,
        &source_spec,
        &shifted,
        enc_out,
        &enc_visible,
    )
}

/// Serial-stage training loss with teacher forcing on the target image.
pub fn ts_loss_node(
    g: &mut Graph,
    bound: &mut GraphParams,
    store: &ParamStore,
    cfg: &ModelConfig,
    task: &SynthesisTask,
    i_tp: &GlyphImage,
) -> Result<NodeId> {
    let target_img = task.target_image()?;
    let pred = ts_predict_node(g, bound, store, cfg, task, i_tp, target_img)?;
    let target = target_patches(target_img, &cfg.chunk)?;
    let target_node = g.constant(target);
    g.mse(pred, target_node)
}

/// Serial-stage inference: decode the target block-by-block, binarizing
/// each prediction and feeding it back as the next input token. The causal
/// mask guarantees step `j` only depends on blocks `< j`, so the final
/// image is exactly reproduced by a teacher-forced pass over itself.
pub fn ts_infer(
    store: &ParamStore,
    cfg: &ModelConfig,
    task: &SynthesisTask,
    i_tp: &GlyphImage,
) -> Result<StageOutput> {
    cfg.validate()?;
    task.validate(&cfg.chunk)?;
    let chunk = &cfg.chunk;
    let n = chunk.n_tokens();
    let ppb = chunk.patches_per_block();

    // the encoder side does not depend on the feedback sequence; run it
    // once and reuse its output tensor across steps
    let (enc_out_value, enc_visible) = {
        let mut g = Graph::new();
        let mut bound = GraphParams::new();
        let (enc_out, vis) = ts_encode(&mut g, &mut bound, store, cfg, i_tp, task.target_meta)?;
        (g.value(enc_out).clone(), vis)
    };
    let source_spec = SeqSpec::from_image(&task.source_image, task.source_meta, chunk)?;

    let mut feedback = vec![0u32; n * ppb]; // token j holds block j-1; token 0 stays blank
    let mut patch_values = Tensor::zeros(n, chunk.block_pixels());
    for j in 0..n {
        let mut g = Graph::new();
        let mut bound = GraphParams::new();
        let second_half = SeqSpec::from_chunked(
            ChunkedGlyph {
                patch_indices: feedback.clone(),
            },
            task.target_meta,
            chunk,
        );
        let enc_node = g.constant(enc_out_value.clone());
        let pred = ts_decode(
            &mut g,
            &mut bound,
            store,
            cfg,
            &source_spec,
            &second_half,
            enc_node,
            &enc_visible,
        )?;
        let values = g.value(pred);
        values.ensure_finite("serial-stage prediction")?;
        patch_values.row_mut(j).copy_from_slice(values.row(j));
        if j + 1 < n {
            let block = binarize_block_to_patch_indices(values.row(j), chunk)?;
            feedback[(j + 1) * ppb..(j + 2) * ppb].copy_from_slice(&block);
        }
    }
    StageOutput::from_values(patch_values, chunk, "serial-stage prediction")
}

/// Both stages' outputs for one task.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub tp: StageOutput,
    pub ts: StageOutput,
}

/// Full two-stage inference.
pub fn synthesize(store: &ParamStore, cfg: &ModelConfig, task: &SynthesisTask) -> Result<Synthesis> {
    let tp = tp_forward(store, cfg, task)?;
    let ts = ts_infer(store, cfg, task, &tp.image)?;
    Ok(Synthesis { tp, ts })
}
