//! Corpus ingestion: glyph manifests, train/test splits, and task assembly.
//!
//! A corpus is a directory of portable-bitmap glyph images described by a
//! tab-separated manifest. Each row names one glyph: its image path
//! (relative to the manifest), font style id, character id, and four-letter
//! structural code. Style 0 is reserved for the source font. The manifest
//! declares the shared image geometry in `# height=` / `# width=` comment
//! lines before the column header.
//!
//! A split file (TOML) partitions styles and characters into pretraining,
//! fine-tuning, and held-out test sets. The task factory enforces the
//! no-leakage rule: a fine-tuning loss target is never a test character,
//! and references for the fine-tune style only come from its few-shot set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{GlyphMeta, WubiCode};
use crate::error::{Error, Result};
use crate::image::GlyphImage;
use crate::pbm;
use crate::pipeline::SynthesisTask;

/// Style id of the source font every task translates from.
pub const SOURCE_STYLE: usize = 0;

const MANIFEST_HEADER: &str = "path\tstyle_id\tchar_id\twubi";

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image location relative to the manifest's directory.
    pub path: String,
    pub style_id: usize,
    pub char_id: usize,
    pub wubi: WubiCode,
}

impl ManifestEntry {
    pub fn meta(&self) -> GlyphMeta {
        GlyphMeta {
            style_id: self.style_id,
            char_id: self.char_id,
            wubi: self.wubi,
        }
    }
}

/// Parsed, validated glyph manifest.
#[derive(Clone, Debug)]
pub struct CorpusManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    /// Parse and validate a manifest file. Duplicate (style, char) pairs,
    /// malformed rows, and missing image files are reported with their row
    /// numbers.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        if text.trim().is_empty() {
            return Err(Error::Data(format!(
                "manifest {} is empty",
                path.display()
            )));
        }
        let root = path
            .parent()
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));

        let mut height = None;
        let mut width = None;
        let mut saw_header = false;
        let mut entries = Vec::new();
        let mut seen: BTreeMap<(usize, usize), usize> = BTreeMap::new();

        for (idx, line) in text.lines().enumerate() {
            let row = idx + 1;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(v) = comment.strip_prefix("height=") {
                    height = Some(parse_field(v, row, "height")?);
                } else if let Some(v) = comment.strip_prefix("width=") {
                    width = Some(parse_field(v, row, "width")?);
                }
                continue;
            }
            if !saw_header {
                if line != MANIFEST_HEADER {
                    return Err(Error::Data(format!(
                        "manifest row {row}: expected header {MANIFEST_HEADER:?}, got {line:?}"
                    )));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest row {row}: expected 4 tab-separated fields, got {}",
                    fields.len()
                )));
            }
            let entry = ManifestEntry {
                path: fields[0].to_string(),
                style_id: parse_field(fields[1], row, "style_id")?,
                char_id: parse_field(fields[2], row, "char_id")?,
                wubi: WubiCode::parse(fields[3])
                    .map_err(|e| Error::Data(format!("manifest row {row}: {e}")))?,
            };
            if entry.char_id == 0 {
                return Err(Error::Data(format!(
                    "manifest row {row}: char_id must be >= 1"
                )));
            }
            if let Some(prev) = seen.insert((entry.style_id, entry.char_id), row) {
                return Err(Error::Data(format!(
                    "manifest rows {prev} and {row}: duplicate glyph (style {}, char {})",
                    entry.style_id, entry.char_id
                )));
            }
            let file = root.join(&entry.path);
            if !file.is_file() {
                return Err(Error::Data(format!(
                    "manifest row {row}: image file {} does not exist",
                    file.display()
                )));
            }
            entries.push(entry);
        }

        if !saw_header || entries.is_empty() {
            return Err(Error::Data(format!(
                "manifest {} has no glyph rows",
                path.display()
            )));
        }
        let height = height.ok_or_else(|| {
            Error::Data("manifest does not declare `# height=`".into())
        })?;
        let width =
            width.ok_or_else(|| Error::Data("manifest does not declare `# width=`".into()))?;
        if height == 0 || width == 0 {
            return Err(Error::Data("manifest declares zero geometry".into()));
        }
        Ok(Self {
            root,
            height,
            width,
            entries,
        })
    }

    /// Write the manifest next to its glyph files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "# height={}", self.height);
        let _ = writeln!(text, "# width={}", self.width);
        let _ = writeln!(text, "{MANIFEST_HEADER}");
        for e in &self.entries {
            let _ = writeln!(
                text,
                "{}\t{}\t{}\t{}",
                e.path,
                e.style_id,
                e.char_id,
                e.wubi.to_string()
            );
        }
        std::fs::write(path, text)
            .map_err(|e| Error::Data(format!("cannot write manifest {}: {e}", path.display())))
    }
}

fn parse_field(s: &str, row: usize, name: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| {
        Error::Data(format!(
            "manifest row {row}: field {name} is not a non-negative integer: {s:?}"
        ))
    })
}

/// Load one glyph image and check it against the declared geometry.
pub fn load_glyph(path: &Path, height: usize, width: usize) -> Result<GlyphImage> {
    pbm::load(path, height, width)
}

/// Style/character partition for an experiment.
///
/// Pretraining sees `pretrain_styles` in full. Fine-tuning introduces
/// `finetune_styles`, restricted to the few-shot `finetune_chars`;
/// `test_chars` of those styles stay unseen until evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub pretrain_styles: Vec<usize>,
    pub finetune_styles: Vec<usize>,
    pub finetune_chars: Vec<usize>,
    pub test_chars: Vec<usize>,
}

impl SplitSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read split {}: {e}", path.display())))?;
        let spec: SplitSpec = toml::from_str(&text)
            .map_err(|e| Error::Data(format!("malformed split {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self)
            .map_err(|e| Error::Data(format!("cannot serialize split: {e}")))?;
        std::fs::write(path, text)
            .map_err(|e| Error::Data(format!("cannot write split {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let pretrain: BTreeSet<_> = self.pretrain_styles.iter().copied().collect();
        let finetune: BTreeSet<_> = self.finetune_styles.iter().copied().collect();
        if pretrain.len() != self.pretrain_styles.len() {
            return Err(Error::Data("split repeats a pretrain style".into()));
        }
        if finetune.len() != self.finetune_styles.len() {
            return Err(Error::Data("split repeats a finetune style".into()));
        }
        if pretrain.contains(&SOURCE_STYLE) || finetune.contains(&SOURCE_STYLE) {
            return Err(Error::Data(format!(
                "style {SOURCE_STYLE} is the source font and cannot be a target style"
            )));
        }
        if let Some(s) = finetune.intersection(&pretrain).next() {
            return Err(Error::Data(format!(
                "style {s} appears in both pretrain and finetune sets"
            )));
        }
        let ft_chars: BTreeSet<_> = self.finetune_chars.iter().copied().collect();
        let test_chars: BTreeSet<_> = self.test_chars.iter().copied().collect();
        if let Some(c) = ft_chars.intersection(&test_chars).next() {
            return Err(Error::Data(format!(
                "char {c} appears in both finetune and test sets"
            )));
        }
        if self.finetune_chars.contains(&0) || self.test_chars.contains(&0) {
            return Err(Error::Data("char ids are 1-based; 0 is invalid".into()));
        }
        Ok(())
    }
}

/// Fully loaded corpus: every manifest image in memory, keyed by
/// (style, char).
#[derive(Clone, Debug)]
pub struct Corpus {
    height: usize,
    width: usize,
    glyphs: BTreeMap<(usize, usize), (GlyphImage, WubiCode)>,
}

impl Corpus {
    pub fn load(manifest: &CorpusManifest) -> Result<Self> {
        let mut glyphs = BTreeMap::new();
        for e in &manifest.entries {
            let img = load_glyph(&manifest.root.join(&e.path), manifest.height, manifest.width)?;
            glyphs.insert((e.style_id, e.char_id), (img, e.wubi));
        }
        Ok(Self {
            height: manifest.height,
            width: manifest.width,
            glyphs,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, style_id: usize, char_id: usize) -> bool {
        self.glyphs.contains_key(&(style_id, char_id))
    }

    pub fn image(&self, style_id: usize, char_id: usize) -> Result<&GlyphImage> {
        self.glyphs
            .get(&(style_id, char_id))
            .map(|(img, _)| img)
            .ok_or_else(|| missing(style_id, char_id))
    }

    pub fn meta(&self, style_id: usize, char_id: usize) -> Result<GlyphMeta> {
        self.glyphs
            .get(&(style_id, char_id))
            .map(|(_, wubi)| GlyphMeta {
                style_id,
                char_id,
                wubi: *wubi,
            })
            .ok_or_else(|| missing(style_id, char_id))
    }

    pub fn glyph(&self, style_id: usize, char_id: usize) -> Result<(GlyphImage, GlyphMeta)> {
        Ok((
            self.image(style_id, char_id)?.clone(),
            self.meta(style_id, char_id)?,
        ))
    }

    /// All style ids present, in ascending order.
    pub fn styles(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.glyphs.keys().map(|&(s, _)| s).collect();
        set.into_iter().collect()
    }

    /// Character ids present for one style, in ascending order.
    pub fn chars_in_style(&self, style_id: usize) -> Vec<usize> {
        self.glyphs
            .keys()
            .filter(|&&(s, _)| s == style_id)
            .map(|&(_, c)| c)
            .collect()
    }

    /// Largest style id and char id present, for sizing embedding tables.
    pub fn max_ids(&self) -> (usize, usize) {
        let mut style = 0;
        let mut ch = 0;
        for &(s, c) in self.glyphs.keys() {
            style = style.max(s);
            ch = ch.max(c);
        }
        (style, ch)
    }
}

fn missing(style_id: usize, char_id: usize) -> Error {
    Error::Data(format!(
        "corpus has no glyph for style {style_id}, char {char_id}"
    ))
}

/// Which experiment phase a task is built for; decides the eligible
/// reference characters and the leakage checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskPhase {
    Pretrain,
    Finetune,
    Test,
}

/// Characters that may serve as references for `target_style` in `phase`:
/// every corpus character of that style during pretraining, only the
/// few-shot set for the fine-tune style.
pub fn reference_pool(
    corpus: &Corpus,
    split: &SplitSpec,
    phase: TaskPhase,
    target_style: usize,
) -> Vec<usize> {
    match phase {
        TaskPhase::Pretrain => corpus.chars_in_style(target_style),
        TaskPhase::Finetune | TaskPhase::Test => split
            .finetune_chars
            .iter()
            .copied()
            .filter(|&c| corpus.contains(target_style, c))
            .collect(),
    }
}

/// Assemble one synthesis task: the source-font glyph of `target_char`,
/// `k` reference glyphs of `target_style` sampled without replacement from
/// the phase's eligible pool, and the ground-truth target when the corpus
/// has it (always required outside the test phase).
pub fn make_task<R: Rng>(
    corpus: &Corpus,
    split: &SplitSpec,
    phase: TaskPhase,
    target_style: usize,
    target_char: usize,
    k: usize,
    rng: &mut R,
) -> Result<SynthesisTask> {
    if k == 0 {
        return Err(Error::Data("a task needs at least one reference".into()));
    }
    match phase {
        TaskPhase::Pretrain => {
            if !split.pretrain_styles.contains(&target_style) {
                return Err(Error::Data(format!(
                    "style {target_style} is not a pretrain style"
                )));
            }
        }
        TaskPhase::Finetune => {
            if !split.finetune_styles.contains(&target_style) {
                return Err(Error::Data(format!(
                    "style {target_style} is not a finetune style"
                )));
            }
            if !split.finetune_chars.contains(&target_char) {
                return Err(Error::Data(format!(
                    "char {target_char} is outside the few-shot finetune set"
                )));
            }
        }
        TaskPhase::Test => {
            if !split.finetune_styles.contains(&target_style) {
                return Err(Error::Data(format!(
                    "style {target_style} is not a finetune style"
                )));
            }
        }
    }
    // no-leakage guard: a training loss target is never a held-out test
    // character of the fine-tune style
    if phase != TaskPhase::Test
        && split.finetune_styles.contains(&target_style)
        && split.test_chars.contains(&target_char)
    {
        return Err(Error::Data(format!(
            "refusing to train on test char {target_char} of style {target_style}"
        )));
    }

    let pool: Vec<usize> = reference_pool(corpus, split, phase, target_style)
        .into_iter()
        .filter(|&c| c != target_char)
        .collect();
    if pool.len() < k {
        return Err(Error::Data(format!(
            "style {target_style} offers {} eligible references, need {k}",
            pool.len()
        )));
    }
    let picks = rand::seq::index::sample(rng, pool.len(), k);
    let mut references = Vec::with_capacity(k);
    for i in picks.iter() {
        references.push(corpus.glyph(target_style, pool[i])?);
    }

    let (source_image, source_meta) = corpus.glyph(SOURCE_STYLE, target_char)?;
    let wubi = source_meta.wubi;
    let target_image = match phase {
        TaskPhase::Test => corpus.image(target_style, target_char).ok().cloned(),
        _ => Some(corpus.image(target_style, target_char)?.clone()),
    };
    Ok(SynthesisTask {
        references,
        source_image,
        source_meta,
        target_meta: GlyphMeta {
            style_id: target_style,
            char_id: target_char,
            wubi,
        },
        target_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::fs;

    fn write_corpus(dir: &Path, styles: &[usize], chars: &[usize]) -> PathBuf {
        let mut entries = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for &s in styles {
            for &c in chars {
                let name = format!("s{s}_c{c}.pbm");
                let img = GlyphImage::random(16, 16, &mut rng);
                pbm::save(&img, &dir.join(&name), true).unwrap();
                entries.push(ManifestEntry {
                    path: name,
                    style_id: s,
                    char_id: c,
                    wubi: WubiCode::parse("abcd").unwrap(),
                });
            }
        }
        let manifest = CorpusManifest {
            root: dir.to_path_buf(),
            height: 16,
            width: 16,
            entries,
        };
        let path = dir.join("manifest.tsv");
        manifest.save(&path).unwrap();
        path
    }

    fn toy_split() -> SplitSpec {
        SplitSpec {
            pretrain_styles: vec![1, 2],
            finetune_styles: vec![3],
            finetune_chars: vec![1, 2],
            test_chars: vec![3, 4],
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[0, 1], &[1, 2, 3]);
        let m = CorpusManifest::load(&path).unwrap();
        assert_eq!(m.height, 16);
        assert_eq!(m.width, 16);
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.entries[0].style_id, 0);
        assert_eq!(m.entries[0].wubi, WubiCode::parse("abcd").unwrap());
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        fs::write(&path, "").unwrap();
        let err = CorpusManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("empty"), "{err}");
        // header but no rows is just as empty
        fs::write(&path, "# height=16\n# width=16\npath\tstyle_id\tchar_id\twubi\n").unwrap();
        let err = CorpusManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("no glyph rows"), "{err}");
    }

    #[test]
    fn duplicate_rows_name_both_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[0], &[1]);
        let mut text = fs::read_to_string(&path).unwrap();
        let dup = text.lines().last().unwrap().to_string();
        text.push_str(&dup);
        text.push('\n');
        fs::write(&path, text).unwrap();
        let err = CorpusManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("rows 4 and 5"), "{err}");
        assert!(err.contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_image_file_reported_with_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[0], &[1]);
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("ghost.pbm\t0\t2\tabcd\n");
        fs::write(&path, text).unwrap();
        let err = CorpusManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("row 5"), "{err}");
        assert!(err.contains("does not exist"), "{err}");
    }

    #[test]
    fn malformed_wubi_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[0], &[1]);
        let mut text = fs::read_to_string(&path).unwrap();
        text = text.replace("abcd", "abC1");
        fs::write(&path, text).unwrap();
        let err = CorpusManifest::load(&path).unwrap_err().to_string();
        assert!(err.contains("row 4"), "{err}");
        assert!(err.contains("lowercase"), "{err}");
    }

    #[test]
    fn load_glyph_checks_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let img = GlyphImage::blank(8, 8);
        let path = dir.path().join("g.pbm");
        pbm::save(&img, &path, true).unwrap();
        assert!(load_glyph(&path, 8, 8).is_ok());
        assert!(load_glyph(&path, 16, 16).is_err());
    }

    #[test]
    fn split_validation_catches_overlaps() {
        let mut s = toy_split();
        assert!(s.validate().is_ok());
        s.test_chars.push(1); // also a finetune char
        assert!(s.validate().is_err());

        let mut s = toy_split();
        s.finetune_styles = vec![1]; // also a pretrain style
        assert!(s.validate().is_err());

        let mut s = toy_split();
        s.pretrain_styles.push(SOURCE_STYLE);
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_toml_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.toml");
        let s = toy_split();
        s.save(&path).unwrap();
        assert_eq!(SplitSpec::load(&path).unwrap(), s);
    }

    fn load_test_corpus() -> Corpus {
        let dir = tempfile::tempdir().unwrap();
        let path = write_corpus(dir.path(), &[0, 1, 2, 3], &[1, 2, 3, 4, 5]);
        let m = CorpusManifest::load(&path).unwrap();
        Corpus::load(&m).unwrap()
    }

    #[test]
    fn corpus_lookup_and_enumeration() {
        let corpus = load_test_corpus();
        assert_eq!(corpus.styles(), vec![0, 1, 2, 3]);
        assert_eq!(corpus.chars_in_style(2), vec![1, 2, 3, 4, 5]);
        assert_eq!(corpus.max_ids(), (3, 5));
        assert!(corpus.image(1, 3).is_ok());
        assert!(corpus.image(9, 1).is_err());
        assert_eq!(corpus.meta(1, 3).unwrap().style_id, 1);
    }

    #[test]
    fn pretrain_task_draws_references_from_target_style() {
        let corpus = load_test_corpus();
        let split = toy_split();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let task =
            make_task(&corpus, &split, TaskPhase::Pretrain, 1, 3, 2, &mut rng).unwrap();
        assert_eq!(task.references.len(), 2);
        for (_, meta) in &task.references {
            assert_eq!(meta.style_id, 1);
            assert_ne!(meta.char_id, 3);
        }
        assert_eq!(task.source_meta.style_id, SOURCE_STYLE);
        assert_eq!(task.target_meta.char_id, 3);
        assert!(task.target_image.is_some());
        let distinct: BTreeSet<usize> =
            task.references.iter().map(|(_, m)| m.char_id).collect();
        assert_eq!(distinct.len(), 2, "references drawn with replacement");
    }

    #[test]
    fn finetune_references_stay_inside_few_shot_set() {
        let corpus = load_test_corpus();
        let split = toy_split();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // target char 1, few-shot set {1, 2}: only char 2 is eligible
        let task =
            make_task(&corpus, &split, TaskPhase::Finetune, 3, 1, 1, &mut rng).unwrap();
        assert_eq!(task.references[0].1.char_id, 2);
        // asking for 2 references exhausts the pool
        assert!(make_task(&corpus, &split, TaskPhase::Finetune, 3, 1, 2, &mut rng).is_err());
    }

    #[test]
    fn finetuning_on_a_test_char_is_refused() {
        let corpus = load_test_corpus();
        let split = toy_split();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = make_task(&corpus, &split, TaskPhase::Finetune, 3, 3, 1, &mut rng)
            .unwrap_err()
            .to_string();
        assert!(err.contains("few-shot") || err.contains("test"), "{err}");
    }

    #[test]
    fn test_phase_tasks_reference_only_few_shot_chars() {
        let corpus = load_test_corpus();
        let split = toy_split();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task =
                make_task(&corpus, &split, TaskPhase::Test, 3, 4, 2, &mut rng).unwrap();
            for (_, meta) in &task.references {
                assert!(split.finetune_chars.contains(&meta.char_id));
                assert!(!split.test_chars.contains(&meta.char_id));
            }
        }
    }

    #[test]
    fn wrong_phase_style_rejected() {
        let corpus = load_test_corpus();
        let split = toy_split();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // finetune style used as a pretrain target
        assert!(make_task(&corpus, &split, TaskPhase::Pretrain, 3, 3, 1, &mut rng).is_err());
        // pretrain style used as a test target
        assert!(make_task(&corpus, &split, TaskPhase::Test, 1, 3, 1, &mut rng).is_err());
    }

    #[test]
    fn task_sampling_is_deterministic_under_fixed_seed() {
        let corpus = load_test_corpus();
        let split = toy_split();
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = make_task(&corpus, &split, TaskPhase::Pretrain, 2, 1, 3, &mut rng).unwrap();
            t.references
                .iter()
                .map(|(_, m)| m.char_id)
                .collect::<Vec<_>>()
        };
        assert_eq!(pick(7), pick(7));
    }
}
