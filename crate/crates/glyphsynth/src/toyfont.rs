//! Procedural toy-font corpus generator for desk-scale experiments.
//!
//! Every character gets a fixed skeleton: a few line segments whose
//! endpoints sit on a coarse grid inside the frame. Every style is a
//! deterministic affine-ish transform of that skeleton — stroke thickness
//! (brush), horizontal slant (layout), and translation (placement). Style 0
//! is the identity transform and plays the source-font role; `styles = n`
//! requests n additional target styles on top of it.
//!
//! The four-letter structural code of each character is derived from its
//! skeleton (stroke directions and lengths), so all styles of one character
//! share a code. Generation is bitwise deterministic in the `ToySpec` seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{WubiCode, WUBI_ALPHABET, WUBI_LEN};
use crate::data::{CorpusManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::pbm;

/// What to generate: `styles` target styles (style 0 is always added as the
/// source font), characters `1..=chars`, square `size`×`size` bitmaps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    pub styles: usize,
    pub chars: usize,
    pub size: usize,
    pub seed: u64,
}

/// Transform lattice sizes: thickness x slant x translation combinations
/// available to target styles before parameters repeat.
const MAX_STYLES: usize = 3 * 5 * 5;

impl ToySpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read spec {}: {e}", path.display())))?;
        let spec: ToySpec = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.styles == 0 || self.chars == 0 {
            return Err(Error::Config(
                "toy spec needs at least one style and one char".into(),
            ));
        }
        if self.styles >= MAX_STYLES {
            return Err(Error::Config(format!(
                "toy generator offers {MAX_STYLES} distinct style transforms, asked for {}",
                self.styles
            )));
        }
        if self.size < 8 {
            return Err(Error::Config(format!(
                "toy glyphs need size >= 8, got {}",
                self.size
            )));
        }
        Ok(())
    }
}

/// One line segment in normalized coordinates (fractions of the frame).
#[derive(Clone, Copy, Debug)]
struct Stroke {
    r0: f64,
    c0: f64,
    r1: f64,
    c1: f64,
}

/// Fixed per-character shape: 2-4 strokes on a 5x5 grid.
#[derive(Clone, Debug)]
pub struct Skeleton {
    strokes: Vec<Stroke>,
}

/// Per-style rendering parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleTransform {
    /// Stamp side length in pixels; 1 draws hairlines.
    pub thickness: usize,
    /// Horizontal shear per vertical pixel away from the frame center.
    pub slant: f64,
    /// Pixel offset applied after shearing, (rows, cols).
    pub translate: (i64, i64),
}

impl StyleTransform {
    pub fn identity() -> Self {
        Self {
            thickness: 1,
            slant: 0.0,
            translate: (0, 0),
        }
    }

    /// Deterministic transform for a style id: style 0 is the identity;
    /// target styles walk a thickness x slant x translation lattice so any
    /// two ids below the lattice size get distinct parameters.
    pub fn for_style(style_id: usize) -> Self {
        if style_id == 0 {
            return Self::identity();
        }
        const SLANTS: [f64; 5] = [0.0, 0.2, -0.2, 0.4, -0.4];
        const SHIFTS: [(i64, i64); 5] = [(0, 0), (2, 1), (-2, 1), (1, -2), (-1, 2)];
        let s = style_id; // s >= 1 keeps every combination off the identity
        Self {
            thickness: 1 + s % 3,
            slant: SLANTS[(s / 3) % 5],
            translate: SHIFTS[(s / 15) % 5],
        }
    }
}

fn grid_fraction(idx: usize) -> f64 {
    0.1 + 0.2 * idx as f64
}

/// Draw a random skeleton: 2-4 strokes, endpoints distinct grid nodes.
fn random_skeleton<R: Rng>(rng: &mut R) -> Skeleton {
    let n_strokes = 2 + rng.gen_range(0..3usize);
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let a = rng.gen_range(0..25usize);
        let mut b = rng.gen_range(0..24usize);
        if b >= a {
            b += 1; // distinct endpoints without rejection sampling
        }
        strokes.push(Stroke {
            r0: grid_fraction(a / 5),
            c0: grid_fraction(a % 5),
            r1: grid_fraction(b / 5),
            c1: grid_fraction(b % 5),
        });
    }
    Skeleton { strokes }
}

/// Structure-derived four-letter code: one letter per stroke slot from the
/// stroke's direction and length buckets; absent slots hash the stroke
/// count so short skeletons still get a full code.
pub fn derive_wubi(skeleton: &Skeleton) -> WubiCode {
    let mut letters = [0u8; WUBI_LEN];
    for (i, slot) in letters.iter_mut().enumerate() {
        *slot = match skeleton.strokes.get(i) {
            Some(s) => {
                let dr = s.r1 - s.r0;
                let dc = s.c1 - s.c0;
                let dir = ((dr.atan2(dc) + std::f64::consts::PI) / (std::f64::consts::PI / 4.0))
                    .floor() as usize
                    % 8;
                let len = (dr * dr + dc * dc).sqrt();
                let len_bucket = if len < 0.3 {
                    0
                } else if len < 0.6 {
                    1
                } else {
                    2
                };
                ((dir * 3 + len_bucket) % WUBI_ALPHABET) as u8
            }
            None => ((skeleton.strokes.len() * 7 + i) % WUBI_ALPHABET) as u8,
        };
    }
    WubiCode(letters)
}

/// Rasterize a skeleton under a style transform.
pub fn render(skeleton: &Skeleton, t: &StyleTransform, size: usize) -> GlyphImage {
    let mut img = GlyphImage::blank(size, size);
    let center = (size as f64 - 1.0) / 2.0;
    let scale = size as f64;
    for s in &skeleton.strokes {
        // shear maps lines to lines, so transforming the endpoints and
        // interpolating between them is exact
        let map = |r: f64, c: f64| -> (f64, f64) {
            let row = r * scale;
            let col = c * scale + t.slant * (row - center);
            (row + t.translate.0 as f64, col + t.translate.1 as f64)
        };
        let (r0, c0) = map(s.r0, s.c0);
        let (r1, c1) = map(s.r1, s.c1);
        let steps = (2.0 * (r1 - r0).abs().max((c1 - c0).abs())).ceil() as usize + 1;
        for k in 0..=steps {
            let f = k as f64 / steps as f64;
            let row = r0 + f * (r1 - r0);
            let col = c0 + f * (c1 - c0);
            stamp(&mut img, row, col, t.thickness);
        }
    }
    img
}

/// Paint a thickness x thickness square centered (rounding down) on the
/// continuous point; pixels outside the frame are clipped.
fn stamp(img: &mut GlyphImage, row: f64, col: f64, thickness: usize) {
    let half = (thickness as i64 - 1) / 2;
    let r = row.round() as i64;
    let c = col.round() as i64;
    for dr in -half..(thickness as i64 - half) {
        for dc in -half..(thickness as i64 - half) {
            let (rr, cc) = (r + dr, c + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < img.height() && (cc as usize) < img.width() {
                img.set(rr as usize, cc as usize, 1);
            }
        }
    }
}

/// Generate the corpus under `dir`: one P4 bitmap per (style, char) plus a
/// `manifest.tsv`, styles `0..=spec.styles`, chars `1..=spec.chars`.
pub fn generate(spec: &ToySpec, dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let skeletons: Vec<Skeleton> = (0..spec.chars).map(|_| random_skeleton(&mut rng)).collect();

    let mut entries = Vec::new();
    for style_id in 0..=spec.styles {
        let t = StyleTransform::for_style(style_id);
        for (ci, skeleton) in skeletons.iter().enumerate() {
            let char_id = ci + 1;
            let img = render(skeleton, &t, spec.size);
            let mut name = String::new();
            let _ = write!(name, "s{style_id}_c{char_id}.pbm");
            pbm::save(&img, &dir.join(&name), false)?;
            entries.push(ManifestEntry {
                path: name,
                style_id,
                char_id,
                wubi: derive_wubi(skeleton),
            });
        }
    }
    let manifest = CorpusManifest {
        root: dir.to_path_buf(),
        height: spec.size,
        width: spec.size,
        entries,
    };
    manifest.save(&dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Corpus;

    fn spec() -> ToySpec {
        ToySpec {
            styles: 3,
            chars: 5,
            size: 32,
            seed: 11,
        }
    }

    #[test]
    fn spec_parses_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.toml");
        std::fs::write(&path, "styles = 6\nchars = 40\nsize = 32\nseed = 7\n").unwrap();
        let s = ToySpec::load(&path).unwrap();
        assert_eq!(
            s,
            ToySpec {
                styles: 6,
                chars: 40,
                size: 32,
                seed: 7
            }
        );
        std::fs::write(&path, "styles = 0\nchars = 1\nsize = 32\nseed = 7\n").unwrap();
        assert!(ToySpec::load(&path).is_err());
    }

    #[test]
    fn same_spec_and_seed_is_bitwise_identical() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        generate(&spec(), da.path()).unwrap();
        generate(&spec(), db.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(da.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            if name == "manifest.tsv" {
                continue; // roots differ only outside the file content
            }
            let a = std::fs::read(da.path().join(&name)).unwrap();
            let b = std::fs::read(db.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name:?} differs between runs");
        }
        let a = std::fs::read(da.path().join("manifest.tsv")).unwrap();
        let b = std::fs::read(db.path().join("manifest.tsv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_transform_matches_raw_skeleton_rendering() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sk = random_skeleton(&mut rng);
        let raw = render(&sk, &StyleTransform::identity(), 32);
        let styled = render(&sk, &StyleTransform::for_style(0), 32);
        assert_eq!(raw, styled);
        assert!(raw.ink_ratio() > 0.0, "skeleton rendered no ink");
    }

    #[test]
    fn distinct_styles_differ_on_every_char() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&spec(), dir.path()).unwrap();
        let corpus = Corpus::load(&manifest).unwrap();
        let styles = corpus.styles();
        for ci in 1..=5 {
            for (i, &a) in styles.iter().enumerate() {
                for &b in &styles[i + 1..] {
                    let ia = corpus.image(a, ci).unwrap();
                    let ib = corpus.image(b, ci).unwrap();
                    assert!(
                        ia.count_diff(ib) >= 1,
                        "styles {a} and {b} coincide on char {ci}"
                    );
                }
            }
        }
    }

    #[test]
    fn wubi_codes_are_structure_derived_and_shared_across_styles() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&spec(), dir.path()).unwrap();
        let mut per_char: std::collections::BTreeMap<usize, WubiCode> =
            std::collections::BTreeMap::new();
        for e in &manifest.entries {
            let prev = per_char.insert(e.char_id, e.wubi);
            if let Some(p) = prev {
                assert_eq!(p, e.wubi, "char {} wubi differs across styles", e.char_id);
            }
        }
        assert_eq!(per_char.len(), 5);
    }

    #[test]
    fn generated_corpus_loads_and_has_expected_shape() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate(&spec(), dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 4 * 5); // styles 0..=3
        let corpus = Corpus::load(&manifest).unwrap();
        assert_eq!(corpus.styles(), vec![0, 1, 2, 3]);
        assert_eq!(corpus.height(), 32);
        for style in corpus.styles() {
            for ch in 1..=5 {
                let img = corpus.image(style, ch).unwrap();
                let ink = img.ink_ratio();
                assert!(ink > 0.0, "style {style} char {ch} is blank");
                assert!(ink < 0.8, "style {style} char {ch} is nearly solid");
            }
        }
    }

    #[test]
    fn transforms_distinct_below_lattice_size() {
        for a in 0..20 {
            for b in a + 1..20 {
                assert_ne!(
                    StyleTransform::for_style(a),
                    StyleTransform::for_style(b),
                    "styles {a} and {b} share a transform"
                );
            }
        }
    }
}
