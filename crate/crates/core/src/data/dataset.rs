//! Dataset directories, train/test splitting, the test-split guard and the
//! ROI cache.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::pgm::{read_image, read_mask, write_image16, write_mask8};
use super::roi::{RoiGeometry, RoiSample};
use super::AnnotatedImage;

pub const INDEX_FILE: &str = "index.tsv";
const INDEX_HEADER: &str = "id\timage\tmask\tlabel";

/// Writes `index.tsv`, `images/<id>.pgm` (16-bit) and `masks/<id>.pgm`
/// (8-bit `{0, 255}`).
pub fn save_dataset<T: Scalar>(dir: &Path, items: &[AnnotatedImage<T>]) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut index = String::from(INDEX_HEADER);
    index.push('\n');
    for item in items {
        let (img, mask) = (format!("images/{}.pgm", item.id), format!("masks/{}.pgm", item.id));
        write_image16(&dir.join(&img), &item.image)?;
        write_mask8(&dir.join(&mask), &item.mask)?;
        index.push_str(&format!("{}\t{img}\t{mask}\t{}\n", item.id, item.label));
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

/// One row of `index.tsv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub label: usize,
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(INDEX_HEADER) {
        return Err(Error::format(&path, format!("first line must be `{}`", INDEX_HEADER.replace('\t', "\\t"))));
    }
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::format(&path, format!("line {}: {msg}", n + 2));
        if cols.len() != 4 {
            return Err(bad("expected 4 tab-separated columns"));
        }
        let label = match cols[3].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(&format!("label `{other}` is not 0 or 1"))),
        };
        out.push(IndexEntry { id: cols[0].to_string(), image: dir.join(cols[1]), mask: dir.join(cols[2]), label });
    }
    Ok(out)
}

pub fn load_dataset<T: Scalar>(dir: &Path) -> Result<Vec<AnnotatedImage<T>>> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    read_index(dir)?
        .into_iter()
        .map(|e| {
            let image = read_image(&e.image)?;
            let mask = read_mask(&e.mask)?;
            if image.shape() != mask.shape() {
                return Err(Error::format(&e.mask, format!("mask {:?} vs image {:?}", mask.shape(), image.shape())));
            }
            Ok(AnnotatedImage { id: e.id, image, mask, label: e.label })
        })
        .collect()
}

pub trait Identified {
    fn id(&self) -> &str;
}

impl<T: Scalar> Identified for AnnotatedImage<T> {
    fn id(&self) -> &str {
        &self.id
    }
}

impl<T: Scalar> Identified for RoiSample<T> {
    fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<S> {
    pub train: Vec<S>,
    pub test: Vec<S>,
    pub seed: u64,
}

/// Sorts by id, shuffles with `rng` and puts the first `⌊ratio·n⌋` items
/// in the training split.
pub fn split_dataset<S: Identified>(mut items: Vec<S>, ratio: f64, rng: &Rng) -> Result<DatasetSplit<S>> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config(format!("split ratio {ratio} must be in (0, 1)")));
    }
    items.sort_by(|a, b| a.id().cmp(b.id()));
    if items.windows(2).any(|w| w[0].id() == w[1].id()) {
        return Err(Error::Contract("duplicate sample ids".into()));
    }
    rng.derive(&[0x5e11]).shuffle(&mut items);
    let n_train = (ratio * items.len() as f64).floor() as usize;
    let test = items.split_off(n_train);
    Ok(DatasetSplit { train: items, test, seed: rng.seed() })
}

/// Holds a split and refuses test-split reads while locked.
#[derive(Debug)]
pub struct SplitGuard<S> {
    train: Vec<S>,
    test: Vec<S>,
    locked: Cell<bool>,
    test_reads: Cell<usize>,
}

impl<S> SplitGuard<S> {
    pub fn new(split: DatasetSplit<S>) -> Self {
        SplitGuard { train: split.train, test: split.test, locked: Cell::new(false), test_reads: Cell::new(0) }
    }

    pub fn train(&self) -> &[S] {
        &self.train
    }

    pub fn test(&self) -> Result<&[S]> {
        if self.locked.get() {
            return Err(Error::SplitAccess);
        }
        self.test_reads.set(self.test_reads.get() + 1);
        Ok(&self.test)
    }

    pub fn lock(&self) {
        self.locked.set(true);
    }

    pub fn unlock(&self) {
        self.locked.set(false);
    }

    pub fn is_locked(&self) -> bool {
        self.locked.get()
    }

    /// Successful test-split reads so far.
    pub fn test_reads(&self) -> usize {
        self.test_reads.get()
    }
}

fn cache_dir(dataset: &Path, g: &RoiGeometry) -> PathBuf {
    dataset.join("cache").join(format!("b{}-c{}-m{}", g.bbox, g.context, g.mask))
}

/// Writes each sample's crops as `DCT1` tensors under
/// `cache/b<bbox>-c<context>-m<mask>/`.
pub fn save_roi_cache<T: Scalar>(dataset: &Path, g: &RoiGeometry, samples: &[RoiSample<T>]) -> Result<()> {
    let dir = cache_dir(dataset, g);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for s in samples {
        s.bbox_roi.save(&dir.join(format!("{}.bbox.dct", s.id)))?;
        s.context_roi.save(&dir.join(format!("{}.context.dct", s.id)))?;
        s.mask_roi.save(&dir.join(format!("{}.mask.dct", s.id)))?;
    }
    Ok(())
}

/// Reads cached crops for every index entry, or `None` if any is missing.
pub fn load_roi_cache<T: Scalar>(dataset: &Path, g: &RoiGeometry) -> Result<Option<Vec<RoiSample<T>>>> {
    let dir = cache_dir(dataset, g);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut out = Vec::new();
    for e in read_index(dataset)? {
        let paths = ["bbox", "context", "mask"].map(|k| dir.join(format!("{}.{k}.dct", e.id)));
        if !paths.iter().all(|p| p.is_file()) {
            return Ok(None);
        }
        let [bbox_roi, context_roi, mask_roi] = [&paths[0], &paths[1], &paths[2]].map(|p| Tensor::load(p));
        let s =
            RoiSample { id: e.id, bbox_roi: bbox_roi?, context_roi: context_roi?, mask_roi: mask_roi?, label: e.label };
        s.validate(g)?;
        out.push(s);
    }
    Ok(Some(out))
}
