//! Group prototypes from an anchor prompt and its paraphrases.
//!
//! Each group's prototype is the spherical mean (normalized sum) of the anchor
//! embedding and the embeddings of all its variant phrasings. Texts are carried
//! as metadata; embeddings are looked up by the SHA-256 of the text.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{check_unit, Embedding, GroupPrototype};
use crate::linalg::{norm, scale};

/// Below this norm the summed direction is considered meaningless.
pub const SUM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptVariantSet {
    pub group: String,
    pub anchor_text: String,
    pub variant_texts: Vec<String>,
    pub anchor_embedding: Vec<f64>,
    pub variant_embeddings: Vec<Vec<f64>>,
}

/// Normalized sum of the anchor and all variants.
pub fn spherical_mean(anchor: &[f64], variants: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = anchor.len();
    check_unit(anchor)?;
    let mut sum = anchor.to_vec();
    for v in variants {
        if v.len() != d {
            return Err(Error::dim(d, v.len()));
        }
        check_unit(v)?;
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = norm(&sum);
    if n <= SUM_EPSILON {
        return Err(Error::AntipodalCollapse {
            group: None,
            norm: n,
        });
    }
    Ok(scale(&sum, 1.0 / n))
}

pub fn build_prototypes(sets: &[PromptVariantSet]) -> Result<Vec<GroupPrototype>> {
    let mut seen = BTreeSet::new();
    let d = sets.first().map(|s| s.anchor_embedding.len());
    sets.iter()
        .map(|set| {
            if !seen.insert(set.group.as_str()) {
                return Err(Error::DuplicateGroup(set.group.clone()));
            }
            if let Some(d) = d {
                if set.anchor_embedding.len() != d {
                    return Err(Error::dim(d, set.anchor_embedding.len()));
                }
            }
            let vector = spherical_mean(&set.anchor_embedding, &set.variant_embeddings).map_err(
                |e| match e {
                    Error::AntipodalCollapse { norm, .. } => Error::AntipodalCollapse {
                        group: Some(set.group.clone()),
                        norm,
                    },
                    other => other,
                },
            )?;
            Ok(GroupPrototype {
                group: set.group.clone(),
                vector,
            })
        })
        .collect()
}

/// Identifier of a text in an embedding file: lowercase hex SHA-256 of its
/// UTF-8 bytes.
pub fn text_id(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// On-disk description of prompt variants for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSetFile {
    pub attribute: String,
    pub groups: Vec<VariantGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantGroup {
    pub name: String,
    pub anchor: String,
    #[serde(default)]
    pub variants: Vec<String>,
}

impl VariantSetFile {
    /// Resolves every text to its embedding by `text_id`.
    pub fn resolve(&self, embeddings: &[Embedding]) -> Result<Vec<PromptVariantSet>> {
        let index: HashMap<&str, &Embedding> =
            embeddings.iter().map(|e| (e.id.as_str(), e)).collect();
        let lookup = |text: &str| -> Result<Vec<f64>> {
            let id = text_id(text);
            index
                .get(id.as_str())
                .map(|e| e.vector.clone())
                .ok_or_else(|| Error::UnknownId(format!("{id} (text {text:?})")))
        };
        self.groups
            .iter()
            .map(|g| {
                Ok(PromptVariantSet {
                    group: g.name.clone(),
                    anchor_text: g.anchor.clone(),
                    variant_texts: g.variants.clone(),
                    anchor_embedding: lookup(&g.anchor)?,
                    variant_embeddings: g
                        .variants
                        .iter()
                        .map(|t| lookup(t))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    }
}
