//! On-disk layout:
//!
//! * `meta.jsonl`: one JSON object per tuple with `id`, `split`, `identity`,
//!   `image` (relative path), `text`, `phrases` (`start`/`end` token span,
//!   `kind`, `text`), plus the generating `spec` and `render` jitter.
//! * `images/NNNNN.ppm`: binary PPM (P6), 8-bit RGB.
//! * `vocab.txt`: one word per line; line number (from 0) is the index.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataTuple, Dataset, Image, PersonSpec, RenderInfo, Split};
use crate::error::{Error, Result};
use crate::textpipe::{extract_phrases, Lexicon, PhraseKind, Vocab};

pub const META_FILE: &str = "meta.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PhraseRecord {
    start: usize,
    end: usize,
    kind: PhraseKind,
    text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaRecord {
    id: usize,
    split: Split,
    identity: usize,
    image: String,
    text: String,
    phrases: Vec<PhraseRecord>,
    spec: PersonSpec,
    render: RenderInfo,
}

fn image_name(id: usize) -> String {
    format!("{IMAGE_DIR}/{id:05}.ppm")
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |m: &str| Error::Dataset(format!("invalid PPM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected P6 with maxval 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    Image::new(height, width, body.to_vec())
}

fn dir_has_entries(dir: &Path) -> Result<bool> {
    Ok(dir.exists() && fs::read_dir(dir)?.next().is_some())
}

/// Writes the dataset layout. A non-empty target directory is refused unless
/// `force` is set, in which case previously generated files are replaced.
pub fn write_dataset(dir: &Path, ds: &Dataset, force: bool) -> Result<()> {
    if dir_has_entries(dir)? {
        if !force {
            return Err(Error::DirectoryNotEmpty(dir.to_path_buf()));
        }
        for f in [META_FILE, VOCAB_FILE] {
            let p = dir.join(f);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        if dir.join(IMAGE_DIR).exists() {
            fs::remove_dir_all(dir.join(IMAGE_DIR))?;
        }
    }
    fs::create_dir_all(dir.join(IMAGE_DIR))?;

    let mut meta = Vec::new();
    for t in ds.all() {
        let name = image_name(t.id);
        fs::write(dir.join(&name), encode_ppm(&t.image))?;
        let record = MetaRecord {
            id: t.id,
            split: t.split,
            identity: t.label,
            image: name,
            text: t.text.clone(),
            phrases: t
                .phrases
                .iter()
                .map(|p| PhraseRecord {
                    start: p.span.0,
                    end: p.span.1,
                    kind: p.kind,
                    text: p.text(),
                })
                .collect(),
            spec: t.spec,
            render: t.render,
        };
        serde_json::to_writer(&mut meta, &record)?;
        meta.push(b'\n');
    }
    fs::File::create(dir.join(META_FILE))?.write_all(&meta)?;
    fs::write(dir.join(VOCAB_FILE), ds.vocab.to_text())?;
    Ok(())
}

fn read_meta(dir: &Path) -> Result<Vec<MetaRecord>> {
    let text = fs::read_to_string(dir.join(META_FILE))
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.join(META_FILE).display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Dataset(format!("{META_FILE} line {}: {e}", i + 1)))
        })
        .collect()
}

fn read_image(dir: &Path, rel: &str) -> Result<Image> {
    decode_ppm(&fs::read(dir.join(rel))?)
}

/// Loads a dataset written by [`write_dataset`], checking that the stored
/// phrases match what the chunker extracts from each text.
pub fn read_dataset(dir: &Path, lexicon: &Lexicon) -> Result<Dataset> {
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let mut ds = Dataset {
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        vocab,
    };
    for r in read_meta(dir)? {
        let phrases = extract_phrases(&r.text, lexicon);
        let stored: Vec<(usize, usize, PhraseKind)> = r.phrases.iter().map(|p| (p.start, p.end, p.kind)).collect();
        let fresh: Vec<(usize, usize, PhraseKind)> = phrases.iter().map(|p| (p.span.0, p.span.1, p.kind)).collect();
        if stored != fresh {
            return Err(Error::Dataset(format!(
                "tuple {}: stored phrases do not match the chunker",
                r.id
            )));
        }
        let tuple = DataTuple {
            id: r.id,
            split: r.split,
            label: r.identity,
            image: read_image(dir, &r.image)?,
            render: r.render,
            text: r.text,
            phrases,
            spec: r.spec,
        };
        match r.split {
            Split::Train => ds.train.push(tuple),
            Split::Query => ds.query.push(tuple),
            Split::Gallery => ds.gallery.push(tuple),
        }
    }
    Ok(ds)
}

/// SHA-256 over the dataset files in a fixed order (metadata, vocabulary,
/// then images by name), each prefixed with its relative path and length.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut files: Vec<PathBuf> = vec![PathBuf::from(META_FILE), PathBuf::from(VOCAB_FILE)];
    let mut images: Vec<PathBuf> = fs::read_dir(dir.join(IMAGE_DIR))?
        .map(|e| e.map(|e| PathBuf::from(IMAGE_DIR).join(e.file_name())))
        .collect::<std::io::Result<_>>()?;
    images.sort();
    files.extend(images);
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(dir.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

/// Read access to tuples by position. Evaluation goes through this so that
/// test doubles can observe which fields are touched.
pub trait TupleSource {
    fn indices(&self, split: Split) -> Vec<usize>;
    fn label(&self, index: usize) -> usize;
    fn image(&self, index: usize) -> Result<Image>;
    fn text(&self, index: usize) -> Result<String>;
}

impl Dataset {
    fn nth(&self, index: usize) -> &DataTuple {
        self.all().nth(index).expect("tuple index in range")
    }
}

impl TupleSource for Dataset {
    fn indices(&self, split: Split) -> Vec<usize> {
        self.all()
            .enumerate()
            .filter(|(_, t)| t.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    fn label(&self, index: usize) -> usize {
        self.nth(index).label
    }

    fn image(&self, index: usize) -> Result<Image> {
        Ok(self.nth(index).image.clone())
    }

    fn text(&self, index: usize) -> Result<String> {
        Ok(self.nth(index).text.clone())
    }
}

/// Dataset directory read lazily: metadata up front, images on demand.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    dir: PathBuf,
    records: Vec<MetaRecord>,
}

impl DatasetDir {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Self {
            dir: dir.to_path_buf(),
            records: read_meta(dir)?,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}

impl TupleSource for DatasetDir {
    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    fn label(&self, index: usize) -> usize {
        self.records[index].identity
    }

    fn image(&self, index: usize) -> Result<Image> {
        read_image(&self.dir, &self.records[index].image)
    }

    fn text(&self, index: usize) -> Result<String> {
        Ok(self.records[index].text.clone())
    }
}
