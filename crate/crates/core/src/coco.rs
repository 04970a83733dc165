//! COCO-format annotation ingestion.
//!
//! Reads the standard `images` / `annotations` / `categories` sections and a
//! sidecar JSON object mapping annotation ids to raw feature vectors
//! (`{"17": [0.1, ...], ...}`). A category is matched to a taxonomy leaf by
//! name: either a `/`-separated name path (with or without the root name)
//! or, failing that, a leaf name that is unique in the taxonomy.

use std::collections::{BTreeMap, HashMap};

use serde::Deserialize;

use crate::data::{Dataset, LabeledExample, SourceTag, SplitTag};
use crate::error::{Error, Result};
use crate::taxonomy::{NodeId, Taxonomy};

#[derive(Debug, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub file_name: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
}

#[derive(Debug, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Debug)]
pub struct CocoImport {
    pub dataset: Dataset,
    /// Category names with no matching leaf (non-strict mode only).
    pub unmatched_categories: Vec<String>,
    pub skipped_annotations: usize,
}

/// Raw vectors keyed by annotation id.
pub type FeatureSource = BTreeMap<u64, Vec<f64>>;

pub fn parse_feature_source(text: &str) -> Result<FeatureSource> {
    let raw: BTreeMap<String, Vec<f64>> =
        serde_json::from_str(text).map_err(|e| Error::MalformedDocument(format!("feature file: {e}")))?;
    raw.into_iter()
        .map(|(k, v)| {
            k.parse::<u64>()
                .map(|id| (id, v))
                .map_err(|_| Error::MalformedDocument(format!("feature key {k:?} is not an annotation id")))
        })
        .collect()
}

fn match_category(t: &Taxonomy, name: &str) -> Option<NodeId> {
    if name.contains('/') {
        let parts: Vec<&str> = name.split('/').map(str::trim).collect();
        let root = t.nodes()[t.root().0].name.as_str();
        let mut full = vec![root];
        full.extend(&parts);
        return t
            .find_by_name_path(&full)
            .or_else(|| t.find_by_name_path(&parts))
            .filter(|&id| t.is_leaf(id));
    }
    let mut hits = t.leaves().into_iter().filter(|&l| t.nodes()[l.0].name == name);
    match (hits.next(), hits.next()) {
        (Some(id), None) => Some(id),
        _ => None,
    }
}

pub fn load_coco_annotations(document: &str, t: &Taxonomy, features: &FeatureSource, strict: bool) -> Result<CocoImport> {
    let doc: CocoDocument =
        serde_json::from_str(document).map_err(|e| Error::MalformedDocument(format!("COCO: {e}")))?;
    let images: HashMap<u64, &CocoImage> = doc.images.iter().map(|i| (i.id, i)).collect();
    let mut category_leaf: HashMap<u64, Option<NodeId>> = HashMap::new();
    let mut unmatched = Vec::new();
    for c in &doc.categories {
        let leaf = match_category(t, &c.name);
        if leaf.is_none() {
            if strict {
                return Err(Error::UnmappedCategory(c.name.clone()));
            }
            unmatched.push(c.name.clone());
        }
        if category_leaf.insert(c.id, leaf).is_some() {
            return Err(Error::MalformedDocument(format!("duplicate category id {}", c.id)));
        }
    }
    let mut input_dim = None;
    let mut examples = Vec::new();
    let mut skipped = 0;
    for a in &doc.annotations {
        if !images.contains_key(&a.image_id) {
            return Err(Error::MalformedDocument(format!("annotation {} references unknown image {}", a.id, a.image_id)));
        }
        let leaf = match category_leaf.get(&a.category_id) {
            Some(Some(leaf)) => *leaf,
            Some(None) => {
                skipped += 1;
                continue;
            }
            None => {
                return Err(Error::MalformedDocument(format!(
                    "annotation {} references unknown category {}",
                    a.id, a.category_id
                )))
            }
        };
        let raw = features.get(&a.id).ok_or(Error::MissingFeature(a.id))?;
        let dim = *input_dim.get_or_insert(raw.len());
        if raw.len() != dim {
            return Err(Error::Dimension { expected: dim, got: raw.len() });
        }
        examples.push(LabeledExample { id: a.id, raw: raw.clone(), leaf, split: SplitTag::Train, source: SourceTag::Ingested });
    }
    Ok(CocoImport {
        dataset: Dataset { taxonomy_fingerprint: t.fingerprint(), input_dim: input_dim.unwrap_or(0), examples },
        unmatched_categories: unmatched,
        skipped_annotations: skipped,
    })
}
