//! COCO-style annotation ingestion, few-shot split files, and the
//! missing-rate audit.
//!
//! The missing rate of a split is measured on its *training images*: every
//! image that hosts at least one split annotation. All in-scope annotations on
//! those images are "present"; the split annotations among them are
//! "labeled"; the rest are missing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`
    pub bbox: [f64; 4],
    #[serde(default, deserialize_with = "flag_from_int")]
    pub iscrowd: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

fn flag_from_int<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Int(i64),
        Bool(bool),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::Int(v) => v != 0,
        Flag::Bool(b) => b,
    })
}

#[derive(Deserialize)]
struct RawCoco {
    #[serde(default)]
    images: Vec<ImageInfo>,
    #[serde(default)]
    annotations: Vec<Annotation>,
    #[serde(default)]
    categories: Vec<Category>,
}

#[derive(Serialize)]
struct CocoOut<'a> {
    images: Vec<&'a ImageInfo>,
    annotations: Vec<AnnotationOut<'a>>,
    categories: Vec<&'a Category>,
}

#[derive(Serialize)]
struct AnnotationOut<'a> {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: &'a [f64; 4],
    iscrowd: u8,
}

/// A fully resolved annotation file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotationSet {
    pub images: BTreeMap<u64, ImageInfo>,
    pub annotations: BTreeMap<u64, Annotation>,
    pub categories: BTreeMap<u64, Category>,
}

impl AnnotationSet {
    /// Builds a set and checks referential integrity.
    pub fn from_parts(images: Vec<ImageInfo>, annotations: Vec<Annotation>, categories: Vec<Category>) -> Result<Self> {
        let mut problems = Vec::new();
        let mut set = AnnotationSet::default();
        for img in images {
            if set.images.contains_key(&img.id) {
                problems.push(format!("duplicate image id {}", img.id));
            }
            set.images.insert(img.id, img);
        }
        for cat in categories {
            if set.categories.contains_key(&cat.id) {
                problems.push(format!("duplicate category id {}", cat.id));
            }
            set.categories.insert(cat.id, cat);
        }
        for ann in annotations {
            if set.annotations.contains_key(&ann.id) {
                problems.push(format!("duplicate annotation id {}", ann.id));
            }
            if !set.images.contains_key(&ann.image_id) {
                problems.push(format!(
                    "annotation {} references missing image {}",
                    ann.id, ann.image_id
                ));
            }
            if !set.categories.contains_key(&ann.category_id) {
                problems.push(format!(
                    "annotation {} references missing category {}",
                    ann.id, ann.category_id
                ));
            }
            let [_, _, w, h] = ann.bbox;
            if !(w >= 0.0 && h >= 0.0) || ann.bbox.iter().any(|v| !v.is_finite()) {
                problems.push(format!("annotation {} has invalid bbox {:?}", ann.id, ann.bbox));
            }
            set.annotations.insert(ann.id, ann);
        }
        if problems.is_empty() {
            Ok(set)
        } else {
            Err(Error::Integrity(problems))
        }
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        (self.images.len(), self.annotations.len(), self.categories.len())
    }

    /// Merges another file into this one (e.g. COCO train + val).
    pub fn merge(&mut self, other: AnnotationSet) -> Result<()> {
        let mut problems = Vec::new();
        for (id, img) in other.images {
            match self.images.get(&id) {
                Some(existing) if existing != &img => problems.push(format!("conflicting image id {id}")),
                _ => {
                    self.images.insert(id, img);
                }
            }
        }
        for (id, cat) in other.categories {
            match self.categories.get(&id) {
                Some(existing) if existing != &cat => problems.push(format!("conflicting category id {id}")),
                _ => {
                    self.categories.insert(id, cat);
                }
            }
        }
        for (id, ann) in other.annotations {
            match self.annotations.get(&id) {
                Some(existing) if existing != &ann => problems.push(format!("conflicting annotation id {id}")),
                _ => {
                    self.annotations.insert(id, ann);
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity(problems))
        }
    }

    pub fn to_json(&self) -> String {
        let out = CocoOut {
            images: self.images.values().collect(),
            annotations: self
                .annotations
                .values()
                .map(|a| AnnotationOut {
                    id: a.id,
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: &a.bbox,
                    iscrowd: u8::from(a.iscrowd),
                })
                .collect(),
            categories: self.categories.values().collect(),
        };
        serde_json::to_string_pretty(&out).expect("annotation set serializes")
    }
}

/// Parses COCO-style annotation text. `source` names the input in errors.
pub fn parse_annotations_str(text: &str, source: &str) -> Result<AnnotationSet> {
    let raw: RawCoco = serde_json::from_str(text).map_err(|e| Error::from_json(source, e))?;
    AnnotationSet::from_parts(raw.images, raw.annotations, raw.categories)
}

pub fn parse_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_annotations_str(&text, &path.display().to_string())
}

/// The labeled shots of a few-shot split, grouped by category.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSpec {
    pub shots: usize,
    pub per_category: BTreeMap<u64, Vec<u64>>,
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawSplit {
    shots: usize,
    per_category: BTreeMap<String, Vec<u64>>,
}

impl SplitSpec {
    /// Validates the split against its annotation file.
    pub fn new(shots: usize, per_category: BTreeMap<u64, Vec<u64>>, anns: &AnnotationSet) -> Result<Self> {
        let mut problems = Vec::new();
        let mut warnings = Vec::new();
        let mut seen = BTreeSet::new();
        for (&cat, ids) in &per_category {
            if ids.is_empty() {
                warnings.push(format!("category {cat} has no shots"));
            }
            for id in ids {
                match anns.annotations.get(id) {
                    None => problems.push(format!("split references unknown annotation {id}")),
                    Some(a) if a.category_id != cat => problems.push(format!(
                        "annotation {id} listed under category {cat} but has category {}",
                        a.category_id
                    )),
                    Some(_) => {}
                }
                if !seen.insert(*id) {
                    problems.push(format!("annotation {id} listed more than once"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Integrity(problems));
        }
        Ok(SplitSpec {
            shots,
            per_category,
            warnings,
        })
    }

    pub fn annotation_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.per_category.values().flatten().copied()
    }

    pub fn to_json(&self) -> String {
        let raw = RawSplit {
            shots: self.shots,
            per_category: self
                .per_category
                .iter()
                .map(|(k, v)| (k.to_string(), v.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&raw).expect("split serializes")
    }
}

/// Parses a split in the canonical `{"shots": K, "per_category": {...}}` form.
pub fn parse_split_str(text: &str, source: &str, anns: &AnnotationSet) -> Result<SplitSpec> {
    let raw: RawSplit = serde_json::from_str(text).map_err(|e| Error::from_json(source, e))?;
    let mut per_category = BTreeMap::new();
    for (key, ids) in raw.per_category {
        let cat: u64 = key
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{source}: category key {key:?} is not an integer id")))?;
        per_category.insert(cat, ids);
    }
    SplitSpec::new(raw.shots, per_category, anns)
}

pub fn parse_split(path: impl AsRef<Path>, anns: &AnnotationSet) -> Result<SplitSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_split_str(&text, &path.display().to_string(), anns)
}

/// Builds a split from TFA-style per-class shot files: COCO-format documents
/// whose `annotations` arrays hold the selected shots with their original
/// annotation ids. Each entry is `(source name, file text)`.
pub fn split_from_shot_files(files: &[(String, String)], shots: usize, anns: &AnnotationSet) -> Result<SplitSpec> {
    #[derive(Deserialize)]
    struct ShotFile {
        #[serde(default)]
        annotations: Vec<ShotAnn>,
    }
    #[derive(Deserialize)]
    struct ShotAnn {
        id: u64,
        category_id: u64,
    }
    let mut per_category: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for (source, text) in files {
        let f: ShotFile = serde_json::from_str(text).map_err(|e| Error::from_json(source, e))?;
        for a in f.annotations {
            let ids = per_category.entry(a.category_id).or_default();
            if !ids.contains(&a.id) {
                ids.push(a.id);
            }
        }
    }
    SplitSpec::new(shots, per_category, anns)
}

/// Loads a split file, accepting either the canonical form or one or more
/// TFA-style shot files.
pub fn load_split_files<P: AsRef<Path>>(
    paths: &[P],
    anns: &AnnotationSet,
    shots_hint: Option<usize>,
) -> Result<SplitSpec> {
    let mut texts = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        texts.push((p.display().to_string(), std::fs::read_to_string(p)?));
    }
    if let [(source, text)] = texts.as_slice() {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::from_json(source, e))?;
        if value.get("per_category").is_some() {
            return parse_split_str(text, source, anns);
        }
    }
    let shots = match shots_hint {
        Some(k) => k,
        None => infer_shots(paths)
            .ok_or_else(|| Error::invalid("cannot infer the shot count from shot-file names; pass it explicitly"))?,
    };
    split_from_shot_files(&texts, shots, anns)
}

// "full_box_10shot_person_trainval.json" -> 10
fn infer_shots<P: AsRef<Path>>(paths: &[P]) -> Option<usize> {
    let name = paths.first()?.as_ref().file_name()?.to_str()?;
    let idx = name.find("shot")?;
    let digits: String = name[..idx].chars().rev().take_while(|c| c.is_ascii_digit()).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScopeKind {
    /// Few-shot setting: only novel classes count.
    NovelOnly,
    /// Generalized few-shot setting: base and novel classes count.
    BasePlusNovel,
}

impl ScopeKind {
    pub fn label(&self) -> &'static str {
        match self {
            ScopeKind::NovelOnly => "fsod",
            ScopeKind::BasePlusNovel => "gfsod",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassScope {
    pub kind: ScopeKind,
    pub base: BTreeSet<u64>,
    pub novel: BTreeSet<u64>,
}

impl ClassScope {
    pub fn new(kind: ScopeKind, base: BTreeSet<u64>, novel: BTreeSet<u64>) -> Result<Self> {
        if let Some(c) = base.intersection(&novel).next() {
            return Err(Error::invalid(format!("category {c} is both base and novel")));
        }
        Ok(ClassScope { kind, base, novel })
    }

    pub fn contains(&self, category: u64) -> bool {
        self.novel.contains(&category) || (self.kind == ScopeKind::BasePlusNovel && self.base.contains(&category))
    }

    pub fn categories(&self) -> BTreeSet<u64> {
        match self.kind {
            ScopeKind::NovelOnly => self.novel.clone(),
            ScopeKind::BasePlusNovel => self.novel.union(&self.base).copied().collect(),
        }
    }
}

/// How a training image hosting shots of several categories is counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageCounting {
    /// Each training image contributes its instances once.
    #[default]
    Once,
    /// Each image contributes once per distinct shot category it hosts.
    PerShotCategory,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RateOptions {
    pub include_crowd: bool,
    pub image_counting: ImageCounting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryRate {
    pub present: usize,
    pub labeled: usize,
    /// `None` when no instance of the category sits on a training image.
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageCount {
    pub image_id: u64,
    pub present: usize,
    pub labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRateReport {
    pub present: usize,
    pub labeled: usize,
    pub rate: f64,
    pub per_category: BTreeMap<u64, CategoryRate>,
    pub per_image: Vec<ImageCount>,
}

/// Assembles a report from per-image tallies of `(category, labeled)` pairs.
pub(crate) fn tally_report(
    scope_categories: &BTreeSet<u64>,
    images: impl IntoIterator<Item = (u64, usize, Vec<(u64, bool)>)>,
) -> Result<MissingRateReport> {
    let mut per_category: BTreeMap<u64, (usize, usize)> = scope_categories.iter().map(|&c| (c, (0, 0))).collect();
    let mut per_image = Vec::new();
    let (mut present, mut labeled) = (0usize, 0usize);
    for (image_id, weight, instances) in images {
        let mut img = ImageCount {
            image_id,
            present: 0,
            labeled: 0,
        };
        for (cat, is_labeled) in instances {
            let Some(entry) = per_category.get_mut(&cat) else {
                continue;
            };
            entry.0 += weight;
            img.present += weight;
            if is_labeled {
                entry.1 += weight;
                img.labeled += weight;
            }
        }
        present += img.present;
        labeled += img.labeled;
        per_image.push(img);
    }
    if present == 0 {
        return Err(Error::UndefinedRate(
            "no in-scope instances on the training images".into(),
        ));
    }
    Ok(MissingRateReport {
        present,
        labeled,
        rate: (present - labeled) as f64 / present as f64,
        per_category: per_category
            .into_iter()
            .map(|(c, (p, l))| {
                let rate = (p > 0).then(|| (p - l) as f64 / p as f64);
                (
                    c,
                    CategoryRate {
                        present: p,
                        labeled: l,
                        rate,
                    },
                )
            })
            .collect(),
        per_image,
    })
}

/// Missing rate of `split` on `anns` restricted to `scope`.
pub fn compute_missing_rate(
    anns: &AnnotationSet,
    split: &SplitSpec,
    scope: &ClassScope,
    opts: RateOptions,
) -> Result<MissingRateReport> {
    let scope_categories = scope.categories();
    let unknown: Vec<String> = scope_categories
        .iter()
        .filter(|c| !anns.categories.contains_key(c))
        .map(|c| format!("scope category {c} not in annotation file"))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Integrity(unknown));
    }

    let labeled_ids: BTreeSet<u64> = split.annotation_ids().collect();
    let mut shot_categories: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for id in &labeled_ids {
        let a = anns
            .annotations
            .get(id)
            .ok_or_else(|| Error::Integrity(vec![format!("split references unknown annotation {id}")]))?;
        shot_categories.entry(a.image_id).or_default().insert(a.category_id);
    }

    let mut by_image: BTreeMap<u64, Vec<(u64, bool)>> = shot_categories.keys().map(|&i| (i, Vec::new())).collect();
    for a in anns.annotations.values() {
        if a.iscrowd && !opts.include_crowd {
            continue;
        }
        if let Some(list) = by_image.get_mut(&a.image_id) {
            if scope.contains(a.category_id) {
                list.push((a.category_id, labeled_ids.contains(&a.id)));
            }
        }
    }

    let images = by_image.into_iter().map(|(image_id, list)| {
        let weight = match opts.image_counting {
            ImageCounting::Once => 1,
            ImageCounting::PerShotCategory => shot_categories[&image_id].len(),
        };
        (image_id, weight, list)
    });
    tally_report(&scope_categories, images)
}
