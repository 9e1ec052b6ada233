//! Scenes, object proposals, class vocabulary and the relevance mask.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SceneError {
    #[error("proposal has no points")]
    EmptyPoints,
    #[error("non-finite coordinate in proposal points")]
    NonFinite,
    #[error("class vocabulary is empty")]
    EmptyVocab,
    #[error("duplicate class name {0:?}")]
    DuplicateClass(String),
    #[error("unknown class {0:?}")]
    UnknownClass(String),
    #[error("class id {0} out of range")]
    ClassOutOfRange(usize),
    #[error("proposal ids must be 0..K-1 in order, found {found} at position {position}")]
    BadProposalId { position: usize, found: usize },
    #[error("no proposal of class {0} in scene")]
    NoCandidate(String),
}

/// Lowercased, trimmed, inner whitespace collapsed.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Ordered set of class names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocab {
    names: Vec<String>,
}

impl ClassVocab {
    pub fn new<I, S>(names: I) -> Result<Self, SceneError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let names: Vec<String> = names.into_iter().map(|n| normalize_name(n.as_ref())).collect();
        if names.is_empty() || names.iter().any(String::is_empty) {
            return Err(SceneError::EmptyVocab);
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(SceneError::DuplicateClass(n.clone()));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        let n = normalize_name(name);
        self.names.iter().position(|x| *x == n)
    }
}

impl TryFrom<Vec<String>> for ClassVocab {
    type Error = SceneError;

    fn try_from(v: Vec<String>) -> Result<Self, SceneError> {
        Self::new(v)
    }
}

impl From<ClassVocab> for Vec<String> {
    fn from(v: ClassVocab) -> Self {
        v.names
    }
}

/// `[x, y, z, r, g, b]`: meters, then color in `[0, 1]`.
pub type Point = [f64; 6];
pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl BBox {
    pub fn center(&self) -> Vec3 {
        [0, 1, 2].map(|k| (self.min[k] + self.max[k]) / 2.0)
    }
}

/// Axis-aligned box of the points and its midpoint.
pub fn compute_center_bbox(points: &[Point]) -> Result<(Vec3, BBox), SceneError> {
    if points.is_empty() {
        return Err(SceneError::EmptyPoints);
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for p in points {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(SceneError::NonFinite);
        }
        for k in 0..3 {
            min[k] = min[k].min(p[k]);
            max[k] = max[k].max(p[k]);
        }
    }
    let bbox = BBox { min, max };
    Ok((bbox.center(), bbox))
}

pub fn distance(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub id: usize,
    pub class_id: usize,
    pub points: Vec<Point>,
    pub center: Vec3,
    pub bbox: BBox,
}

impl Proposal {
    pub fn new(id: usize, class_id: usize, points: Vec<Point>) -> Result<Self, SceneError> {
        let (center, bbox) = compute_center_bbox(&points)?;
        Ok(Self {
            id,
            class_id,
            points,
            center,
            bbox,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    proposals: Vec<Proposal>,
    vocab: Arc<ClassVocab>,
}

impl Scene {
    pub fn new(
        scene_id: impl Into<String>,
        vocab: Arc<ClassVocab>,
        proposals: Vec<Proposal>,
    ) -> Result<Self, SceneError> {
        for (position, p) in proposals.iter().enumerate() {
            if p.id != position {
                return Err(SceneError::BadProposalId { position, found: p.id });
            }
            if p.class_id >= vocab.len() {
                return Err(SceneError::ClassOutOfRange(p.class_id));
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            proposals,
            vocab,
        })
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn vocab(&self) -> &Arc<ClassVocab> {
        &self.vocab
    }

    /// Class id of every proposal, in id order.
    pub fn labels(&self) -> Vec<usize> {
        self.proposals.iter().map(|p| p.class_id).collect()
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.proposals.iter().map(|p| p.center).collect()
    }

    pub fn class_name(&self, id: usize) -> &str {
        self.vocab.name(self.proposals[id].class_id)
    }

    pub fn count_class(&self, class_id: usize) -> usize {
        self.proposals.iter().filter(|p| p.class_id == class_id).count()
    }

    /// Keeps proposals for which `keep` holds and renumbers ids densely.
    /// Returns the old id of every surviving proposal.
    pub fn retain(&mut self, mut keep: impl FnMut(&Proposal) -> bool) -> Vec<usize> {
        let mut old_ids = Vec::new();
        self.proposals.retain(|p| {
            let k = keep(p);
            if k {
                old_ids.push(p.id);
            }
            k
        });
        for (i, p) in self.proposals.iter_mut().enumerate() {
            p.id = i;
        }
        old_ids
    }

    /// Reorders proposals so that new proposal `i` is old proposal `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Scene {
        let proposals = perm
            .iter()
            .enumerate()
            .map(|(i, &src)| Proposal {
                id: i,
                ..self.proposals[src].clone()
            })
            .collect();
        Scene {
            scene_id: self.scene_id.clone(),
            proposals,
            vocab: self.vocab.clone(),
        }
    }
}

/// Binary per-proposal mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RelevanceMask(Vec<bool>);

impl RelevanceMask {
    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Elementwise `self <= other`.
    pub fn is_subset_of(&self, other: &RelevanceMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| !a || *b)
    }
}

impl From<Vec<bool>> for RelevanceMask {
    fn from(bits: Vec<bool>) -> Self {
        Self(bits)
    }
}

/// Bit `j` is set iff the class name of `labels[j]` occurs in `order_suffix`.
///
/// Names are compared after normalization; names outside `vocab` are
/// ignored with a warning.
pub fn build_mask(labels: &[usize], order_suffix: &[String], vocab: &ClassVocab) -> RelevanceMask {
    let mut wanted = HashSet::new();
    for name in order_suffix {
        match vocab.id_of(name) {
            Some(id) => {
                wanted.insert(id);
            }
            None => log::warn!("order name {name:?} is not in the class vocabulary; ignored"),
        }
    }
    RelevanceMask(labels.iter().map(|l| wanted.contains(l)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Farthest,
    Nearest,
}

impl Relation {
    pub fn word(self) -> &'static str {
        match self {
            Relation::Farthest => "farthest",
            Relation::Nearest => "nearest",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl std::str::FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_lowercase().as_str() {
            "farthest" => Ok(Relation::Farthest),
            "nearest" => Ok(Relation::Nearest),
            other => Err(format!("unknown relation {other:?} (expected farthest|nearest)")),
        }
    }
}

/// Proposal of `class_id` whose center is farthest from / nearest to
/// `ref_center`. Ties go to the lowest id.
pub fn relation_select(
    scene: &Scene,
    class_id: usize,
    ref_center: &Vec3,
    relation: Relation,
) -> Result<usize, SceneError> {
    let mut best: Option<(usize, f64)> = None;
    for p in scene.proposals().iter().filter(|p| p.class_id == class_id) {
        let d = distance(&p.center, ref_center);
        let better = match best {
            None => true,
            Some((_, bd)) => match relation {
                Relation::Farthest => d > bd,
                Relation::Nearest => d < bd,
            },
        };
        if better {
            best = Some((p.id, d));
        }
    }
    best.map(|(id, _)| id).ok_or_else(|| {
        let name = if class_id < scene.vocab().len() {
            scene.vocab().name(class_id).to_string()
        } else {
            class_id.to_string()
        };
        SceneError::NoCandidate(name)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Arc<ClassVocab> {
        Arc::new(ClassVocab::new(["chair", "table", "door", "bed"]).unwrap())
    }

    fn at(id: usize, class_id: usize, c: Vec3) -> Proposal {
        Proposal::new(id, class_id, vec![[c[0], c[1], c[2], 0.5, 0.5, 0.5]]).unwrap()
    }

    #[test]
    fn center_bbox_examples() {
        let p = [1.5, -2.0, 0.25, 0.0, 0.0, 0.0];
        let (c, b) = compute_center_bbox(&[p]).unwrap();
        assert_eq!(c, [1.5, -2.0, 0.25]);
        assert_eq!(b.min, b.max);

        let (c, _) = compute_center_bbox(&[[0.0; 6], [2.0, 2.0, 2.0, 1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(c, [1.0, 1.0, 1.0]);
        assert_eq!(compute_center_bbox(&[]), Err(SceneError::EmptyPoints));
    }

    #[test]
    fn center_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point> = (0..100)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-5.0..5.0)))
            .collect();
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        for p in &pts {
            for k in 0..3 {
                if p[k] < lo[k] {
                    lo[k] = p[k];
                }
                if p[k] > hi[k] {
                    hi[k] = p[k];
                }
            }
        }
        let (c, _) = compute_center_bbox(&pts).unwrap();
        assert_eq!(c, [0, 1, 2].map(|k| (lo[k] + hi[k]) / 2.0));
    }

    #[test]
    fn mask_examples() {
        let v = vocab();
        // chair, table, chair, door
        let labels = [0, 1, 0, 2];
        let suffix = vec!["table".to_string(), "door".to_string()];
        assert_eq!(build_mask(&labels, &suffix, &v).bits(), &[false, true, false, true]);

        let all = vec!["chair".into(), "table".into(), "door".into()];
        assert_eq!(build_mask(&labels, &all, &v).count_ones(), 4);
        assert_eq!(build_mask(&labels, &[], &v).count_ones(), 0);

        let noisy = vec![" Table ".into(), "spaceship".into()];
        assert_eq!(build_mask(&labels, &noisy, &v).bits(), &[false, true, false, false]);
    }

    #[test]
    fn vocab_rejects_duplicates_and_empty() {
        assert_eq!(
            ClassVocab::new(["Chair", "chair "]),
            Err(SceneError::DuplicateClass("chair".into()))
        );
        assert_eq!(ClassVocab::new(Vec::<String>::new()), Err(SceneError::EmptyVocab));
    }

    #[test]
    fn relation_select_examples() {
        let v = vocab();
        let scene = Scene::new(
            "s",
            v.clone(),
            vec![at(0, 2, [0.0; 3]), at(1, 1, [1.0, 0.0, 0.0]), at(2, 1, [5.0, 0.0, 0.0])],
        )
        .unwrap();
        let door = scene.proposals()[0].center;
        assert_eq!(relation_select(&scene, 1, &door, Relation::Farthest).unwrap(), 2);
        assert_eq!(relation_select(&scene, 1, &door, Relation::Nearest).unwrap(), 1);
        for rel in [Relation::Farthest, Relation::Nearest] {
            assert_eq!(relation_select(&scene, 2, &[9.0; 3], rel).unwrap(), 0);
        }
        assert_eq!(
            relation_select(&scene, 3, &door, Relation::Farthest),
            Err(SceneError::NoCandidate("bed".into()))
        );
    }

    #[test]
    fn relation_select_ties_go_to_lowest_id() {
        let scene = Scene::new(
            "s",
            vocab(),
            vec![at(0, 1, [1.0, 0.0, 0.0]), at(1, 1, [-1.0, 0.0, 0.0])],
        )
        .unwrap();
        assert_eq!(relation_select(&scene, 1, &[0.0; 3], Relation::Farthest).unwrap(), 0);
        assert_eq!(relation_select(&scene, 1, &[0.0; 3], Relation::Nearest).unwrap(), 0);
    }

    #[test]
    fn relation_select_agrees_with_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = vocab();
        for _ in 0..1000 {
            let props: Vec<Proposal> = (0..50)
                .map(|i| {
                    at(
                        i,
                        rng.gen_range(0..4),
                        std::array::from_fn(|_| rng.gen_range(0.0..10.0)),
                    )
                })
                .collect();
            let scene = Scene::new("s", v.clone(), props).unwrap();
            let class = rng.gen_range(0..4);
            let r: Vec3 = std::array::from_fn(|_| rng.gen_range(0.0..10.0));
            let ds: Vec<(usize, f64)> = scene
                .proposals()
                .iter()
                .filter(|p| p.class_id == class)
                .map(|p| (p.id, distance(&p.center, &r)))
                .collect();
            if ds.is_empty() {
                continue;
            }
            let far = ds.iter().fold(ds[0], |acc, x| if x.1 > acc.1 { *x } else { acc }).0;
            let near = ds.iter().fold(ds[0], |acc, x| if x.1 < acc.1 { *x } else { acc }).0;
            assert_eq!(relation_select(&scene, class, &r, Relation::Farthest).unwrap(), far);
            assert_eq!(relation_select(&scene, class, &r, Relation::Nearest).unwrap(), near);
        }
    }

    #[test]
    fn retain_renumbers_ids() {
        let mut scene = Scene::new(
            "s",
            vocab(),
            vec![at(0, 0, [0.0; 3]), at(1, 1, [1.0; 3]), at(2, 0, [2.0; 3])],
        )
        .unwrap();
        let old = scene.retain(|p| p.id != 1);
        assert_eq!(old, vec![0, 2]);
        assert_eq!(scene.proposals()[1].id, 1);
        assert_eq!(scene.proposals()[1].center, [2.0; 3]);
    }

    proptest! {
        #[test]
        fn mask_is_set_semantic_and_suffix_monotone(
            labels in prop::collection::vec(0usize..4, 1..12),
            order in prop::collection::vec(0usize..4, 1..6),
            shuffle_seed in any::<u64>(),
        ) {
            let v = vocab();
            let names: Vec<String> = order.iter().map(|&c| v.name(c).to_string()).collect();
            for i in 0..names.len() {
                let outer = build_mask(&labels, &names[i..], &v);
                let inner = build_mask(&labels, &names[i + 1..], &v);
                prop_assert!(inner.is_subset_of(&outer));
            }
            let base = build_mask(&labels, &names, &v);
            let mut shuffled = names.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            for k in (1..shuffled.len()).rev() {
                shuffled.swap(k, rng.gen_range(0..=k));
            }
            shuffled.extend(names.iter().cloned());
            prop_assert_eq!(build_mask(&labels, &shuffled, &v), base);
        }
    }
}
