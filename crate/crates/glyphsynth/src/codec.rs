//! Chunked glyph-image tokenization.
//!
//! A binary H x W image is cut into B x B blocks (row-major, left to right
//! then top to bottom), one token per block. Each block is further cut into
//! P x P patches; a patch flattens row-major, first pixel least significant,
//! into an integer in `[0, 2^(P*P))` that indexes a learnable codebook. The
//! token content vector is the concatenation of its patch codebook entries,
//! and the full token appends style, content and wubi embedding slices.
//!
//! Codebook entry 0 is pinned to the zero vector, so an all-background
//! block always has a zero content vector regardless of training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::tensor::Tensor;

/// Geometry governing tokenization.
///
/// `N = H*W / B^2` tokens per image, each with content dimension
/// `D_t = B^2 * L_c / P^2`, so higher resolutions keep the sequence length
/// constant by growing `B` and shrinking `L_c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkConfig {
    pub height: usize,
    pub width: usize,
    pub block: usize,
    pub patch: usize,
    /// Per-patch codebook embedding dimension, at most `patch^2`.
    pub lc: usize,
}

impl ChunkConfig {
    pub fn new(height: usize, width: usize, block: usize, patch: usize, lc: usize) -> Result<Self> {
        let cfg = Self {
            height,
            width,
            block,
            patch,
            lc,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.block == 0 || self.patch == 0 {
            return Err(Error::Config("chunk geometry must be positive".into()));
        }
        if self.height % self.block != 0 || self.width % self.block != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible into {}-pixel blocks",
                self.height, self.width, self.block
            )));
        }
        if self.block % self.patch != 0 {
            return Err(Error::Config(format!(
                "block {} not divisible into {}-pixel patches",
                self.block, self.patch
            )));
        }
        if self.patch > 4 {
            // codebook holds 2^(P^2) entries; P=4 already means 65536
            return Err(Error::Config(format!(
                "patch side {} too large, codebook would need 2^{} entries",
                self.patch,
                self.patch * self.patch
            )));
        }
        if self.lc == 0 || self.lc > self.patch * self.patch {
            return Err(Error::Config(format!(
                "lc must be in [1, {}], got {}",
                self.patch * self.patch,
                self.lc
            )));
        }
        Ok(())
    }

    /// Tokens per image.
    pub fn n_tokens(&self) -> usize {
        self.height * self.width / (self.block * self.block)
    }

    pub fn patches_per_block(&self) -> usize {
        let per_side = self.block / self.patch;
        per_side * per_side
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch * self.patch
    }

    pub fn block_pixels(&self) -> usize {
        self.block * self.block
    }

    /// Token content dimension `D_t`.
    pub fn token_content_dim(&self) -> usize {
        self.patches_per_block() * self.lc
    }

    pub fn codebook_size(&self) -> usize {
        1usize << (self.patch * self.patch)
    }
}

/// Number of wubi letters per character code.
pub const WUBI_LEN: usize = 4;
/// Size of the wubi letter alphabet (a-z).
pub const WUBI_ALPHABET: usize = 26;

/// Four-letter structural code, each component in `[0, 25]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WubiCode(pub [u8; WUBI_LEN]);

impl WubiCode {
    pub fn parse(s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != WUBI_LEN || !bytes.iter().all(|b| b.is_ascii_lowercase()) {
            return Err(Error::Data(format!(
                "wubi code must be exactly {WUBI_LEN} lowercase letters, got {s:?}"
            )));
        }
        let mut letters = [0u8; WUBI_LEN];
        for (l, b) in letters.iter_mut().zip(bytes) {
            *l = b - b'a';
        }
        Ok(Self(letters))
    }

    pub fn to_string(self) -> String {
        self.0.iter().map(|&l| (b'a' + l) as char).collect()
    }
}

/// Identity of one glyph: font style, character, structural code.
/// Style 0 is reserved for the source font; char ids are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlyphMeta {
    pub style_id: usize,
    pub char_id: usize,
    pub wubi: WubiCode,
}

/// Borrowed views of the learnable embedding tables.
///
/// Shapes: style `(S+1) x D_s`, content `C x D_c`, wubi `26 x D_w`.
#[derive(Clone, Copy)]
pub struct EmbeddingTables<'a> {
    pub style: &'a Tensor,
    pub content: &'a Tensor,
    pub wubi: &'a Tensor,
}

impl<'a> EmbeddingTables<'a> {
    /// Full token dimension once content, style, content-id and wubi slices
    /// are concatenated.
    pub fn d_token(&self, cfg: &ChunkConfig) -> usize {
        cfg.token_content_dim()
            + self.style.cols()
            + self.content.cols()
            + WUBI_LEN * self.wubi.cols()
    }

    pub fn check_meta(&self, meta: &GlyphMeta) -> Result<()> {
        if meta.style_id >= self.style.rows() {
            return Err(Error::Data(format!(
                "unknown style_id {} (table has {} rows)",
                meta.style_id,
                self.style.rows()
            )));
        }
        if meta.char_id == 0 || meta.char_id > self.content.rows() {
            return Err(Error::Data(format!(
                "unknown char_id {} (valid range 1..={})",
                meta.char_id,
                self.content.rows()
            )));
        }
        if self.wubi.rows() != WUBI_ALPHABET {
            return Err(Error::Config(format!(
                "wubi table must have {WUBI_ALPHABET} rows, has {}",
                self.wubi.rows()
            )));
        }
        Ok(())
    }
}

/// Patch indices of one image: `n_tokens * patches_per_block` entries,
/// blocks row-major over the image, patches row-major inside each block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedGlyph {
    pub patch_indices: Vec<u32>,
}

impl ChunkedGlyph {
    pub fn block(&self, i: usize, cfg: &ChunkConfig) -> &[u32] {
        let ppb = cfg.patches_per_block();
        &self.patch_indices[i * ppb..(i + 1) * ppb]
    }

    /// `blank_flags[i]` is true iff every patch index of block `i` is 0.
    pub fn blank_flags(&self, cfg: &ChunkConfig) -> Vec<bool> {
        self.patch_indices
            .chunks(cfg.patches_per_block())
            .map(|block| block.iter().all(|&b| b == 0))
            .collect()
    }
}

/// Token sequence of one glyph. `tokens` is `N x d_token`; `blank_flags[i]`
/// marks tokens whose content slice is the zero vector.
#[derive(Clone, Debug)]
pub struct GlyphSequence {
    pub tokens: Tensor,
    pub blank_flags: Vec<bool>,
}

/// Flatten a P x P patch (row-major, value 0/1) into its codebook index;
/// the first pixel is the least significant bit.
pub fn patch_to_index(patch: &[u8], patch_side: usize) -> Result<u32> {
    if patch.len() != patch_side * patch_side {
        return Err(Error::Shape(format!(
            "patch has {} pixels, expected {}",
            patch.len(),
            patch_side * patch_side
        )));
    }
    let mut index = 0u32;
    for (bit, &px) in patch.iter().enumerate() {
        match px {
            0 => {}
            1 => index |= 1 << bit,
            other => {
                return Err(Error::Data(format!(
                    "patch pixels must be 0 or 1, found {other}"
                )))
            }
        }
    }
    Ok(index)
}

/// Inverse of [`patch_to_index`].
pub fn index_to_patch(index: u32, patch_side: usize) -> Result<Vec<u8>> {
    let bits = patch_side * patch_side;
    if u64::from(index) >= 1u64 << bits {
        return Err(Error::Data(format!(
            "patch index {index} out of range for {patch_side}x{patch_side} patches"
        )));
    }
    Ok((0..bits).map(|bit| ((index >> bit) & 1) as u8).collect())
}

/// Cut an image into per-block patch indices.
pub fn chunk_image(img: &GlyphImage, cfg: &ChunkConfig) -> Result<ChunkedGlyph> {
    cfg.validate()?;
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::Shape(format!(
            "image {}x{} does not match config {}x{}",
            img.height(),
            img.width(),
            cfg.height,
            cfg.width
        )));
    }
    let p = cfg.patch;
    let per_side = cfg.block / p;
    let mut patch_indices = Vec::with_capacity(cfg.n_tokens() * cfg.patches_per_block());
    let mut patch = vec![0u8; p * p];
    for block_row in 0..cfg.height / cfg.block {
        for block_col in 0..cfg.width / cfg.block {
            let top = block_row * cfg.block;
            let left = block_col * cfg.block;
            for patch_row in 0..per_side {
                for patch_col in 0..per_side {
                    for r in 0..p {
                        for c in 0..p {
                            patch[r * p + c] = img.get(top + patch_row * p + r, left + patch_col * p + c);
                        }
                    }
                    patch_indices.push(patch_to_index(&patch, p)?);
                }
            }
        }
    }
    Ok(ChunkedGlyph { patch_indices })
}

/// Paste per-block patch indices back into a full image.
pub fn assemble_image(chunked: &ChunkedGlyph, cfg: &ChunkConfig) -> Result<GlyphImage> {
    cfg.validate()?;
    let expected = cfg.n_tokens() * cfg.patches_per_block();
    if chunked.patch_indices.len() != expected {
        return Err(Error::Shape(format!(
            "chunked glyph has {} patch indices, expected {expected}",
            chunked.patch_indices.len()
        )));
    }
    let p = cfg.patch;
    let per_side = cfg.block / p;
    let blocks_per_row = cfg.width / cfg.block;
    let mut img = GlyphImage::blank(cfg.height, cfg.width);
    for (i, &index) in chunked.patch_indices.iter().enumerate() {
        let block = i / cfg.patches_per_block();
        let patch_in_block = i % cfg.patches_per_block();
        let top = (block / blocks_per_row) * cfg.block + (patch_in_block / per_side) * p;
        let left = (block % blocks_per_row) * cfg.block + (patch_in_block % per_side) * p;
        let pixels = index_to_patch(index, p)?;
        for r in 0..p {
            for c in 0..p {
                img.set(top + r, left + c, pixels[r * p + c]);
            }
        }
    }
    Ok(img)
}

/// Concatenate the codebook entries of one block's patches into its
/// content vector of dimension `D_t`.
pub fn block_embedding(block: &[u32], codebook: &Tensor, cfg: &ChunkConfig) -> Result<Vec<f64>> {
    if block.len() != cfg.patches_per_block() {
        return Err(Error::Shape(format!(
            "block has {} patches, expected {}",
            block.len(),
            cfg.patches_per_block()
        )));
    }
    if codebook.rows() != cfg.codebook_size() || codebook.cols() != cfg.lc {
        return Err(Error::Shape(format!(
            "codebook {}x{} does not match config ({}x{})",
            codebook.rows(),
            codebook.cols(),
            cfg.codebook_size(),
            cfg.lc
        )));
    }
    let mut out = Vec::with_capacity(cfg.token_content_dim());
    for &index in block {
        if index as usize >= codebook.rows() {
            return Err(Error::Data(format!("patch index {index} out of range")));
        }
        out.extend_from_slice(codebook.row(index as usize));
    }
    Ok(out)
}

fn meta_slices(meta: &GlyphMeta, tables: &EmbeddingTables) -> Result<Vec<f64>> {
    tables.check_meta(meta)?;
    let mut extra = Vec::with_capacity(
        tables.style.cols() + tables.content.cols() + WUBI_LEN * tables.wubi.cols(),
    );
    extra.extend_from_slice(tables.style.row(meta.style_id));
    extra.extend_from_slice(tables.content.row(meta.char_id - 1));
    for &letter in &meta.wubi.0 {
        extra.extend_from_slice(tables.wubi.row(letter as usize));
    }
    Ok(extra)
}

fn sequence_from_indices(
    chunked: &ChunkedGlyph,
    meta: &GlyphMeta,
    codebook: &Tensor,
    tables: &EmbeddingTables,
    cfg: &ChunkConfig,
) -> Result<GlyphSequence> {
    let extra = meta_slices(meta, tables)?;
    let n = cfg.n_tokens();
    let d_token = tables.d_token(cfg);
    let mut tokens = Tensor::zeros(n, d_token);
    for i in 0..n {
        let content = block_embedding(chunked.block(i, cfg), codebook, cfg)?;
        let row = tokens.row_mut(i);
        row[..content.len()].copy_from_slice(&content);
        row[content.len()..].copy_from_slice(&extra);
    }
    Ok(GlyphSequence {
        tokens,
        blank_flags: chunked.blank_flags(cfg),
    })
}

/// Tokenize a glyph image into its full embedding sequence: per token the
/// block content vector followed by the style, content and wubi slices
/// (identical meta slices repeated at every token).
pub fn build_glyph_sequence(
    img: &GlyphImage,
    meta: &GlyphMeta,
    codebook: &Tensor,
    tables: &EmbeddingTables,
    cfg: &ChunkConfig,
) -> Result<GlyphSequence> {
    let chunked = chunk_image(img, cfg)?;
    sequence_from_indices(&chunked, meta, codebook, tables, cfg)
}

/// Sequence of N all-blank tokens carrying the target glyph's meta slices;
/// content slices are zero and every blank flag is set.
pub fn build_blank_sequence(
    meta: &GlyphMeta,
    codebook: &Tensor,
    tables: &EmbeddingTables,
    cfg: &ChunkConfig,
) -> Result<GlyphSequence> {
    let chunked = ChunkedGlyph {
        patch_indices: vec![0; cfg.n_tokens() * cfg.patches_per_block()],
    };
    sequence_from_indices(&chunked, meta, codebook, tables, cfg)
}

/// Per-block pixel targets for the generator, mapped `{0,1} -> {-1,+1}`.
/// Row `i` holds block `i`'s pixels row-major, matching the generator's
/// output layout.
pub fn target_patches(img: &GlyphImage, cfg: &ChunkConfig) -> Result<Tensor> {
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::Shape(format!(
            "image {}x{} does not match config {}x{}",
            img.height(),
            img.width(),
            cfg.height,
            cfg.width
        )));
    }
    let blocks_per_row = cfg.width / cfg.block;
    let mut out = Tensor::zeros(cfg.n_tokens(), cfg.block_pixels());
    for block in 0..cfg.n_tokens() {
        let top = (block / blocks_per_row) * cfg.block;
        let left = (block % blocks_per_row) * cfg.block;
        let row = out.row_mut(block);
        for r in 0..cfg.block {
            for c in 0..cfg.block {
                row[r * cfg.block + c] = if img.get(top + r, left + c) == 1 {
                    1.0
                } else {
                    -1.0
                };
            }
        }
    }
    Ok(out)
}

/// Threshold continuous per-block pixel predictions (tanh range) at 0 and
/// paste the blocks back into an image.
pub fn binarize_patches(pred: &Tensor, cfg: &ChunkConfig) -> Result<GlyphImage> {
    if pred.rows() != cfg.n_tokens() || pred.cols() != cfg.block_pixels() {
        return Err(Error::Shape(format!(
            "predictions {}x{} do not match {} blocks of {} pixels",
            pred.rows(),
            pred.cols(),
            cfg.n_tokens(),
            cfg.block_pixels()
        )));
    }
    let blocks_per_row = cfg.width / cfg.block;
    let mut img = GlyphImage::blank(cfg.height, cfg.width);
    for block in 0..cfg.n_tokens() {
        let top = (block / blocks_per_row) * cfg.block;
        let left = (block % blocks_per_row) * cfg.block;
        let row = pred.row(block);
        for r in 0..cfg.block {
            for c in 0..cfg.block {
                img.set(top + r, left + c, (row[r * cfg.block + c] > 0.0) as u8);
            }
        }
    }
    Ok(img)
}

/// Binarize a single block's pixel predictions into patch indices, the
/// quantization step of serial feedback decoding.
pub fn binarize_block_to_patch_indices(block_pred: &[f64], cfg: &ChunkConfig) -> Result<Vec<u32>> {
    if block_pred.len() != cfg.block_pixels() {
        return Err(Error::Shape(format!(
            "block prediction has {} values, expected {}",
            block_pred.len(),
            cfg.block_pixels()
        )));
    }
    let p = cfg.patch;
    let per_side = cfg.block / p;
    let mut out = Vec::with_capacity(cfg.patches_per_block());
    let mut patch = vec![0u8; p * p];
    for patch_row in 0..per_side {
        for patch_col in 0..per_side {
            for r in 0..p {
                for c in 0..p {
                    let px = block_pred[(patch_row * p + r) * cfg.block + patch_col * p + c];
                    patch[r * p + c] = (px > 0.0) as u8;
                }
            }
            out.push(patch_to_index(&patch, p)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ChunkConfig {
        ChunkConfig::new(32, 32, 8, 4, 4).unwrap()
    }

    fn toy_tables() -> (Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (
            Tensor::randn(4, 6, 1.0, &mut rng),           // styles 0..=3
            Tensor::randn(10, 5, 1.0, &mut rng),          // chars 1..=10
            Tensor::randn(WUBI_ALPHABET, 2, 1.0, &mut rng),
        )
    }

    fn toy_codebook(cfg: &ChunkConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cb = Tensor::randn(cfg.codebook_size(), cfg.lc, 1.0, &mut rng);
        for c in 0..cb.cols() {
            cb.set(0, c, 0.0);
        }
        cb
    }

    fn meta() -> GlyphMeta {
        GlyphMeta {
            style_id: 1,
            char_id: 3,
            wubi: WubiCode::parse("abcz").unwrap(),
        }
    }

    #[test]
    fn patch_index_zero_and_full() {
        assert_eq!(patch_to_index(&[0; 16], 4).unwrap(), 0);
        assert_eq!(patch_to_index(&[1; 16], 4).unwrap(), 65535);
    }

    #[test]
    fn patch_index_lsb_first_row_major() {
        let mut patch = [0u8; 16];
        patch[0] = 1; // (0,0)
        patch[1] = 1; // (0,1)
        assert_eq!(patch_to_index(&patch, 4).unwrap(), 3);
    }

    #[test]
    fn patch_index_rejects_bad_input() {
        assert!(patch_to_index(&[0; 15], 4).is_err());
        assert!(patch_to_index(&[2; 16], 4).is_err());
        assert!(index_to_patch(65536, 4).is_err());
    }

    #[test]
    fn index_to_patch_inverts() {
        assert_eq!(index_to_patch(0, 4).unwrap(), vec![0; 16]);
        assert_eq!(index_to_patch(65535, 4).unwrap(), vec![1; 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..256 {
            let b: u32 = rand::Rng::gen_range(&mut rng, 0..65536);
            assert_eq!(patch_to_index(&index_to_patch(b, 4).unwrap(), 4).unwrap(), b);
        }
    }

    #[test]
    fn paper_config_block_counts() {
        let c256 = ChunkConfig::new(256, 256, 16, 4, 16).unwrap();
        assert_eq!(c256.n_tokens(), 256);
        assert_eq!(c256.patches_per_block(), 16);
        assert_eq!(c256.token_content_dim(), 256);

        let c1024 = ChunkConfig::new(1024, 1024, 64, 4, 2).unwrap();
        assert_eq!(c1024.n_tokens(), 256);
        assert_eq!(c1024.patches_per_block(), 256);
        assert_eq!(c1024.token_content_dim(), 512);
    }

    #[test]
    fn chunk_all_white_is_all_zero_indices() {
        let cfg = toy_cfg();
        let img = GlyphImage::blank(32, 32);
        let chunked = chunk_image(&img, &cfg).unwrap();
        assert!(chunked.patch_indices.iter().all(|&b| b == 0));
        assert!(chunked.blank_flags(&cfg).iter().all(|&f| f));
    }

    #[test]
    fn chunk_rejects_geometry_mismatch() {
        let cfg = toy_cfg();
        let img = GlyphImage::blank(16, 32);
        assert!(chunk_image(&img, &cfg).is_err());
    }

    #[test]
    fn roundtrip_checkerboard() {
        let cfg = toy_cfg();
        let mut img = GlyphImage::blank(32, 32);
        for r in 0..32 {
            for c in 0..32 {
                img.set(r, c, ((r + c) % 2) as u8);
            }
        }
        let back = assemble_image(&chunk_image(&img, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn roundtrip_random_images() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..32 {
            let img = GlyphImage::random(32, 32, &mut rng);
            let back = assemble_image(&chunk_image(&img, &cfg).unwrap(), &cfg).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn single_block_image_pastes_at_origin() {
        let cfg = ChunkConfig::new(8, 8, 8, 4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = GlyphImage::random(8, 8, &mut rng);
        let chunked = chunk_image(&img, &cfg).unwrap();
        assert_eq!(chunked.patch_indices.len(), cfg.patches_per_block());
        assert_eq!(assemble_image(&chunked, &cfg).unwrap(), img);
    }

    #[test]
    fn block_embedding_dims_match_both_paper_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c256 = ChunkConfig::new(256, 256, 16, 4, 16).unwrap();
        let cb = Tensor::randn(c256.codebook_size(), c256.lc, 1.0, &mut rng);
        let block = vec![1u32; c256.patches_per_block()];
        assert_eq!(block_embedding(&block, &cb, &c256).unwrap().len(), 256);

        let c1024 = ChunkConfig::new(1024, 1024, 64, 4, 2).unwrap();
        let cb = Tensor::randn(c1024.codebook_size(), c1024.lc, 1.0, &mut rng);
        let block = vec![7u32; c1024.patches_per_block()];
        assert_eq!(block_embedding(&block, &cb, &c1024).unwrap().len(), 512);
    }

    #[test]
    fn blank_block_embedding_is_zero() {
        let cfg = toy_cfg();
        let cb = toy_codebook(&cfg);
        let block = vec![0u32; cfg.patches_per_block()];
        let emb = block_embedding(&block, &cb, &cfg).unwrap();
        assert!(emb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sequence_has_d_token_columns_and_blank_flags() {
        let cfg = toy_cfg();
        let cb = toy_codebook(&cfg);
        let (style, content, wubi) = toy_tables();
        let tables = EmbeddingTables {
            style: &style,
            content: &content,
            wubi: &wubi,
        };
        // D_t=16, D_s=6, D_c=5, 4*D_w=8 -> 35
        assert_eq!(tables.d_token(&cfg), 35);

        let img = GlyphImage::blank(32, 32);
        let seq = build_glyph_sequence(&img, &meta(), &cb, &tables, &cfg).unwrap();
        assert_eq!(seq.tokens.shape(), [16, 35]);
        assert!(seq.blank_flags.iter().all(|&f| f));
        // blank content slice, nonzero meta slices
        for i in 0..16 {
            assert!(seq.tokens.row(i)[..16].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_image_different_style_differs_only_in_style_slice() {
        let cfg = toy_cfg();
        let cb = toy_codebook(&cfg);
        let (style, content, wubi) = toy_tables();
        let tables = EmbeddingTables {
            style: &style,
            content: &content,
            wubi: &wubi,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = GlyphImage::random(32, 32, &mut rng);
        let m1 = meta();
        let mut m2 = meta();
        m2.style_id = 2;
        let s1 = build_glyph_sequence(&img, &m1, &cb, &tables, &cfg).unwrap();
        let s2 = build_glyph_sequence(&img, &m2, &cb, &tables, &cfg).unwrap();
        let dt = cfg.token_content_dim();
        let ds = style.cols();
        for i in 0..cfg.n_tokens() {
            let (r1, r2) = (s1.tokens.row(i), s2.tokens.row(i));
            assert_eq!(r1[..dt], r2[..dt]);
            assert_ne!(r1[dt..dt + ds], r2[dt..dt + ds]);
            assert_eq!(r1[dt + ds..], r2[dt + ds..]);
        }
    }

    #[test]
    fn blank_sequence_carries_target_meta() {
        let cfg = toy_cfg();
        let cb = toy_codebook(&cfg);
        let (style, content, wubi) = toy_tables();
        let tables = EmbeddingTables {
            style: &style,
            content: &content,
            wubi: &wubi,
        };
        let m = meta();
        let seq = build_blank_sequence(&m, &cb, &tables, &cfg).unwrap();
        assert_eq!(seq.tokens.rows(), cfg.n_tokens());
        assert!(seq.blank_flags.iter().all(|&f| f));
        let dt = cfg.token_content_dim();
        let ds = style.cols();
        let dc = content.cols();
        for i in 0..cfg.n_tokens() {
            let row = seq.tokens.row(i);
            assert!(row[..dt].iter().all(|&v| v == 0.0));
            assert_eq!(&row[dt + ds..dt + ds + dc], content.row(m.char_id - 1));
        }
    }

    #[test]
    fn sequence_rejects_unknown_meta() {
        let cfg = toy_cfg();
        let cb = toy_codebook(&cfg);
        let (style, content, wubi) = toy_tables();
        let tables = EmbeddingTables {
            style: &style,
            content: &content,
            wubi: &wubi,
        };
        let img = GlyphImage::blank(32, 32);
        let mut bad = meta();
        bad.style_id = 99;
        assert!(build_glyph_sequence(&img, &bad, &cb, &tables, &cfg).is_err());
        let mut bad = meta();
        bad.char_id = 0;
        assert!(build_glyph_sequence(&img, &bad, &cb, &tables, &cfg).is_err());
    }

    #[test]
    fn binarize_extremes() {
        let cfg = toy_cfg();
        let white = Tensor::filled(cfg.n_tokens(), cfg.block_pixels(), -0.9);
        assert!(binarize_patches(&white, &cfg)
            .unwrap()
            .pixels()
            .iter()
            .all(|&p| p == 0));
        let black = Tensor::filled(cfg.n_tokens(), cfg.block_pixels(), 0.9);
        assert!(binarize_patches(&black, &cfg)
            .unwrap()
            .pixels()
            .iter()
            .all(|&p| p == 1));
    }

    #[test]
    fn binarize_inverts_target_mapping() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = GlyphImage::random(32, 32, &mut rng);
        let targets = target_patches(&img, &cfg).unwrap();
        assert_eq!(binarize_patches(&targets, &cfg).unwrap(), img);
    }

    #[test]
    fn block_quantization_matches_chunking() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = GlyphImage::random(32, 32, &mut rng);
        let chunked = chunk_image(&img, &cfg).unwrap();
        let targets = target_patches(&img, &cfg).unwrap();
        for i in 0..cfg.n_tokens() {
            let quantized = binarize_block_to_patch_indices(targets.row(i), &cfg).unwrap();
            assert_eq!(quantized, chunked.block(i, &cfg));
        }
    }

    #[test]
    fn wubi_parse_rules() {
        assert!(WubiCode::parse("abcd").is_ok());
        assert!(WubiCode::parse("abc").is_err());
        assert!(WubiCode::parse("abcde").is_err());
        assert!(WubiCode::parse("aBcd").is_err());
        assert_eq!(WubiCode::parse("zzaa").unwrap().to_string(), "zzaa");
    }

    proptest! {
        #[test]
        fn roundtrip_any_16x16(bits in proptest::collection::vec(0u8..2, 256)) {
            let cfg = ChunkConfig::new(16, 16, 8, 4, 4).unwrap();
            let img = GlyphImage::new(16, 16, bits).unwrap();
            let back = assemble_image(&chunk_image(&img, &cfg).unwrap(), &cfg).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn patch_index_roundtrip(index in 0u32..65536) {
            let patch = index_to_patch(index, 4).unwrap();
            prop_assert_eq!(patch_to_index(&patch, 4).unwrap(), index);
        }
    }
}
