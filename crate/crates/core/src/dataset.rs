//! Line-delimited JSON datasets.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::orderparse::parse_appearance_order;
use crate::scene::{ClassVocab, Point, Proposal, Relation, Scene, Vec3};
use crate::synthgen::{oracle_resolve_chain, WarmupSample};

/// Centers stored in a record may differ from the recomputed bounding-box
/// center by at most this much.
pub const CENTER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("record {scene_id:?}: {msg}")]
    Invalid { scene_id: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub id: usize,
    pub class: String,
    pub center: Vec3,
    pub points: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub scene_id: String,
    pub proposals: Vec<ProposalRecord>,
    pub description: String,
    pub order: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_ids: Option<Vec<usize>>,
    pub target_id: usize,
    /// Relation of each hop, when the record came from the generator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<Vec<Relation>>,
}

/// A validated record bound to a class vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub scene: Scene,
    pub description: String,
    pub order: Vec<String>,
    pub anchor_ids: Option<Vec<usize>>,
    pub target_id: usize,
    pub relations: Option<Vec<Relation>>,
}

impl From<WarmupSample> for GroundingSample {
    fn from(s: WarmupSample) -> Self {
        Self {
            target_id: s.target_id(),
            scene: s.scene,
            description: s.description,
            order: s.order,
            anchor_ids: Some(s.anchor_target_ids),
            relations: Some(s.relations),
        }
    }
}

impl DatasetRecord {
    /// Record for a generated sample; `with_anchors` controls whether the
    /// anchor ids are kept.
    pub fn from_sample(s: &WarmupSample, with_anchors: bool) -> Self {
        Self {
            scene_id: s.scene.scene_id.clone(),
            proposals: s
                .scene
                .proposals()
                .iter()
                .map(|p| ProposalRecord {
                    id: p.id,
                    class: s.scene.class_name(p.id).to_string(),
                    center: p.center,
                    points: p.points.clone(),
                })
                .collect(),
            description: s.description.clone(),
            order: s.order.clone(),
            anchor_ids: with_anchors.then(|| s.anchor_target_ids.clone()),
            target_id: s.target_id(),
            relations: Some(s.relations.clone()),
        }
    }

    fn invalid(&self, msg: impl Into<String>) -> DatasetError {
        DatasetError::Invalid {
            scene_id: self.scene_id.clone(),
            msg: msg.into(),
        }
    }

    /// Checks the record and resolves class names against `vocab`.
    pub fn to_sample(&self, vocab: &Arc<ClassVocab>) -> Result<GroundingSample, DatasetError> {
        if self.order.is_empty() {
            return Err(self.invalid("empty order"));
        }
        if self.target_id >= self.proposals.len() {
            return Err(self.invalid(format!("target {} is not a proposal id", self.target_id)));
        }
        if let Some(a) = &self.anchor_ids {
            if a.len() != self.order.len() || a.last() != Some(&self.target_id) {
                return Err(self.invalid("anchor_ids must match the order and end at the target"));
            }
        }
        if let Some(r) = &self.relations {
            if r.len() + 1 != self.order.len() {
                return Err(self.invalid("relations must have one entry per hop"));
            }
        }
        let mut proposals = Vec::with_capacity(self.proposals.len());
        for p in &self.proposals {
            let class = vocab
                .id_of(&p.class)
                .ok_or_else(|| self.invalid(format!("unknown class {:?}", p.class)))?;
            let prop = Proposal::new(p.id, class, p.points.clone()).map_err(|e| self.invalid(e.to_string()))?;
            if (0..3).any(|c| (prop.center[c] - p.center[c]).abs() > CENTER_TOLERANCE) {
                return Err(self.invalid(format!("proposal {} center does not match its points", p.id)));
            }
            proposals.push(prop);
        }
        let scene =
            Scene::new(self.scene_id.clone(), vocab.clone(), proposals).map_err(|e| self.invalid(e.to_string()))?;
        Ok(GroundingSample {
            scene,
            description: self.description.clone(),
            order: self.order.clone(),
            anchor_ids: self.anchor_ids.clone(),
            target_id: self.target_id,
            relations: self.relations.clone(),
        })
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VerifyError {
    #[error("record has no relations to resolve")]
    NoRelations,
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("oracle chain {oracle:?} differs from stored ids {stored:?}")]
    Chain { oracle: Vec<usize>, stored: Vec<usize> },
    #[error("parsed order {parsed:?} differs from stored order {stored:?}")]
    Order { parsed: Vec<String>, stored: Vec<String> },
    #[error("parse: {0}")]
    Parse(String),
}

/// Re-resolves the chain with the exhaustive oracle and re-parses the
/// description with the rule parser; both must reproduce the record.
pub fn verify_sample(s: &GroundingSample) -> Result<(), VerifyError> {
    let relations = s.relations.as_ref().ok_or(VerifyError::NoRelations)?;
    let chain = oracle_resolve_chain(&s.scene, &s.order, relations).map_err(|e| VerifyError::Oracle(e.to_string()))?;
    let stored = s.anchor_ids.clone().unwrap_or_else(|| vec![s.target_id]);
    let compared = &chain[chain.len() - stored.len().min(chain.len())..];
    if compared != stored.as_slice() {
        return Err(VerifyError::Chain { oracle: chain, stored });
    }
    let parsed = parse_appearance_order(&s.description, s.scene.vocab())
        .map_err(|e| VerifyError::Parse(e.to_string()))?
        .names;
    if parsed != s.order {
        return Err(VerifyError::Order {
            parsed,
            stored: s.order.clone(),
        });
    }
    Ok(())
}

pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| DatasetError::Json { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_path(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>, DatasetError> {
    let f = std::fs::File::open(path)?;
    read_records(std::io::BufReader::new(f))
}

/// Reads and validates every record of a file.
pub fn load_samples(path: impl AsRef<Path>, vocab: &Arc<ClassVocab>) -> Result<Vec<GroundingSample>, DatasetError> {
    read_path(path)?.iter().map(|r| r.to_sample(vocab)).collect()
}

pub fn write_record<W: Write>(writer: &mut W, record: &DatasetRecord) -> Result<(), DatasetError> {
    serde_json::to_writer(&mut *writer, record).map_err(std::io::Error::from)?;
    writer.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{default_vocab, generate_entry, GenConfig, Style};

    #[test]
    fn round_trip_through_json() {
        let cfg = GenConfig {
            order_len: 3,
            ..GenConfig::default()
        };
        let sample = generate_entry(&cfg, 0).unwrap();
        let rec = DatasetRecord::from_sample(&sample, true);
        let mut buf = Vec::new();
        write_record(&mut buf, &rec).unwrap();
        let back = read_records(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec.clone()]);
        let gs = back[0].to_sample(&default_vocab()).unwrap();
        assert_eq!(gs, GroundingSample::from(sample));
    }

    #[test]
    fn natural_records_without_anchors() {
        let cfg = GenConfig {
            style: Style::Natural,
            ..GenConfig::default()
        };
        let sample = generate_entry(&cfg, 3).unwrap();
        let rec = DatasetRecord::from_sample(&sample, false);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(!json.contains("anchor_ids"));
        let gs = rec.to_sample(&default_vocab()).unwrap();
        assert_eq!(gs.anchor_ids, None);
        assert_eq!(gs.target_id, sample.target_id());
    }

    #[test]
    fn generated_samples_verify() {
        for style in [Style::Template, Style::Natural] {
            let cfg = GenConfig {
                num_scenes: 30,
                style,
                ..GenConfig::default()
            };
            for s in crate::synthgen::generate_dataset(&cfg) {
                let s = s.unwrap();
                let rec = DatasetRecord::from_sample(&s, style == Style::Template);
                verify_sample(&rec.to_sample(&default_vocab()).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn tampered_samples_fail_verification() {
        let s = GroundingSample::from(generate_entry(&GenConfig::default(), 2).unwrap());
        let mut wrong = s.clone();
        wrong.target_id = (s.target_id + 1) % s.scene.len();
        wrong.anchor_ids = None;
        assert!(matches!(verify_sample(&wrong), Err(VerifyError::Chain { .. })));
        let mut swapped = s.clone();
        swapped.description = swapped
            .description
            .replacen("There is a", "Beyond a chair, there is a", 1);
        if !swapped.order.contains(&"chair".to_string()) {
            assert!(matches!(verify_sample(&swapped), Err(VerifyError::Order { .. })));
        }
        let mut bare = s;
        bare.relations = None;
        assert_eq!(verify_sample(&bare), Err(VerifyError::NoRelations));
    }

    #[test]
    fn invalid_records_are_rejected() {
        let sample = generate_entry(&GenConfig::default(), 1).unwrap();
        let good = DatasetRecord::from_sample(&sample, true);
        let vocab = default_vocab();

        let mut r = good.clone();
        r.target_id = 99;
        assert!(matches!(r.to_sample(&vocab), Err(DatasetError::Invalid { .. })));
        let mut r = good.clone();
        r.order.clear();
        assert!(r.to_sample(&vocab).is_err());
        let mut r = good.clone();
        r.anchor_ids.as_mut().unwrap().pop();
        assert!(r.to_sample(&vocab).is_err());
        let mut r = good.clone();
        r.proposals[0].class = "spaceship".into();
        assert!(r.to_sample(&vocab).is_err());
        let mut r = good.clone();
        r.proposals[0].center[0] += 0.5;
        assert!(r.to_sample(&vocab).is_err());

        assert!(matches!(
            read_records("{not json}\n".as_bytes()),
            Err(DatasetError::Json { line: 1, .. })
        ));
    }
}
