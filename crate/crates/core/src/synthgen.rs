//! Synthetic scenes and order-aware warm-up samples.
//!
//! A warm-up sample picks `B` distinct classes present in a scene, keeps a
//! single proposal of the first class, and resolves every later object as
//! the farthest (or nearest) proposal of its class from the previous one.
//! The description is rendered from the order, so the order is correct by
//! construction. [`oracle_resolve`] re-derives the chain independently.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{distance, relation_select, ClassVocab, Point, Proposal, Relation, Scene, SceneError, Vec3};

/// Placement attempts per scene before giving up.
pub const REJECTION_BUDGET: usize = 1000;
/// Scene resamples per dataset entry when a scene cannot host a sample.
pub const SKIP_BUDGET: usize = 100;
/// Distances closer than this are treated as ties by the oracle.
pub const TIE_EPS: f64 = 1e-9;

pub const DEFAULT_CLASSES: [&str; 12] = [
    "chair",
    "table",
    "door",
    "bed",
    "pillow",
    "lamp",
    "window",
    "cabinet",
    "sofa",
    "desk",
    "trash can",
    "easy chair",
];

pub fn default_vocab() -> Arc<ClassVocab> {
    Arc::new(ClassVocab::new(DEFAULT_CLASSES).expect("static vocabulary is valid"))
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("could not place {placed} of {wanted} proposals within {REJECTION_BUDGET} tries; use a larger room or smaller separation")]
    RejectionBudget { placed: usize, wanted: usize },
    #[error("scene cannot host this sample: {0}")]
    Skip(String),
    #[error("order needs at least {min} names, got {got}")]
    OrderTooShort { min: usize, got: usize },
    #[error("no usable scene after {SKIP_BUDGET} resamples: {0}")]
    SkipBudget(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("ambiguous reference: {0}")]
    Ambiguity(String),
    #[error("malformed sample: {0}")]
    Malformed(String),
}

/// How descriptions are worded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    /// The fixed warm-up template with one relation word.
    #[default]
    Template,
    /// Reworded clauses, per-hop relation mixes, extra distractors and
    /// variable order length. Held out from warm-up.
    Natural,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub num_scenes: usize,
    pub min_proposals: usize,
    pub max_proposals: usize,
    pub points_per_proposal: usize,
    /// Side length of the square floor, meters.
    pub room_extent: f64,
    pub vocab: Arc<ClassVocab>,
    pub order_len: usize,
    pub relation: Relation,
    /// Minimum gap between any two pairwise center distances, meters.
    pub min_separation: f64,
    pub seed: u64,
    pub style: Style,
    /// Inclusive order-length range for [`Style::Natural`].
    pub natural_len: (usize, usize),
    pub max_extra_distractors: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_scenes: 100,
            min_proposals: 6,
            max_proposals: 10,
            points_per_proposal: 16,
            room_extent: 6.0,
            vocab: default_vocab(),
            order_len: 4,
            relation: Relation::Farthest,
            min_separation: 0.01,
            seed: 0,
            style: Style::Template,
            natural_len: (2, 5),
            max_extra_distractors: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.min_proposals == 0 || self.min_proposals > self.max_proposals {
            return bad("need 1 <= min_proposals <= max_proposals");
        }
        if self.min_separation <= 0.0 || !self.min_separation.is_finite() {
            return bad("min_separation must be > 0");
        }
        if self.room_extent <= 0.0 || !self.room_extent.is_finite() {
            return bad("room_extent must be > 0");
        }
        if self.order_len < 2 {
            return bad("order length must be >= 2");
        }
        if self.points_per_proposal == 0 {
            return bad("points_per_proposal must be >= 1");
        }
        let (lo, hi) = self.natural_len;
        if lo == 0 || lo > hi {
            return bad("natural order length range must satisfy 1 <= min <= max");
        }
        Ok(())
    }
}

/// A description with its ground-truth order and resolved objects.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupSample {
    /// Scene after pruning.
    pub scene: Scene,
    pub description: String,
    /// Class names, first anchor first, target last.
    pub order: Vec<String>,
    /// Proposal id of each order entry.
    pub anchor_target_ids: Vec<usize>,
    /// Relation of each hop: `relations[i]` links `order[i]` to `order[i + 1]`.
    pub relations: Vec<Relation>,
}

impl WarmupSample {
    pub fn target_id(&self) -> usize {
        *self.anchor_target_ids.last().expect("orders are nonempty")
    }
}

/// Fixed per-class appearance: base color and half extents.
pub fn class_appearance(class_id: usize, num_classes: usize) -> ([f64; 3], [f64; 3]) {
    let hue = class_id as f64 / num_classes.max(1) as f64 * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let rgb = match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    };
    let half = [
        0.15 + 0.1 * (class_id % 4) as f64,
        0.15 + 0.08 * (class_id % 3) as f64,
        0.2 + 0.15 * (class_id % 5) as f64,
    ];
    (rgb, half)
}

/// Points of one object whose bounding-box center is exactly `center`
/// (up to rounding).
fn object_points<R: Rng>(class_id: usize, num_classes: usize, center: Vec3, count: usize, rng: &mut R) -> Vec<Point> {
    let (rgb, half) = class_appearance(class_id, num_classes);
    let offsets: Vec<[f64; 3]> = (0..count)
        .map(|_| std::array::from_fn(|k| rng.gen_range(-half[k]..=half[k])))
        .collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for o in &offsets {
        for k in 0..3 {
            lo[k] = lo[k].min(o[k]);
            hi[k] = hi[k].max(o[k]);
        }
    }
    let mid: [f64; 3] = std::array::from_fn(|k| (lo[k] + hi[k]) / 2.0);
    offsets
        .iter()
        .map(|o| {
            let mut p = [0.0; 6];
            for k in 0..3 {
                p[k] = center[k] + o[k] - mid[k];
                p[3 + k] = (rgb[k] + rng.gen_range(-0.05..=0.05)).clamp(0.0, 1.0);
            }
            p
        })
        .collect()
}

/// Tracks placed centers so that every pairwise center distance differs
/// from every other by at least `gap`.
struct Placer {
    gap: f64,
    centers: Vec<Vec3>,
    distances: Vec<f64>,
}

impl Placer {
    fn new(gap: f64, existing: &[Vec3]) -> Self {
        let mut p = Self {
            gap,
            centers: Vec::new(),
            distances: Vec::new(),
        };
        for c in existing {
            p.force(*c);
        }
        p
    }

    fn force(&mut self, c: Vec3) {
        for o in &self.centers {
            self.distances.push(distance(o, &c));
        }
        self.centers.push(c);
    }

    fn fits(&self, c: &Vec3) -> bool {
        let fresh: Vec<f64> = self.centers.iter().map(|o| distance(o, c)).collect();
        for (i, d) in fresh.iter().enumerate() {
            if self.distances.iter().any(|e| (e - d).abs() < self.gap) {
                return false;
            }
            if fresh[..i].iter().any(|e| (e - d).abs() < self.gap) {
                return false;
            }
        }
        true
    }
}

fn random_center<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Vec3 {
    [
        rng.gen_range(0.0..cfg.room_extent),
        rng.gen_range(0.0..cfg.room_extent),
        rng.gen_range(0.0..2.0),
    ]
}

/// Places `class_ids` into a scene that already holds `existing`,
/// respecting the distance-gap rule. Returns the new proposals with ids
/// continuing after `existing`.
fn place<R: Rng>(
    cfg: &GenConfig,
    existing: &[Proposal],
    class_ids: &[usize],
    rng: &mut R,
) -> Result<Vec<Proposal>, GenError> {
    let centers: Vec<Vec3> = existing.iter().map(|p| p.center).collect();
    let mut placer = Placer::new(cfg.min_separation, &centers);
    let mut out = Vec::with_capacity(class_ids.len());
    let mut tries = 0;
    for &class_id in class_ids {
        loop {
            tries += 1;
            if tries > REJECTION_BUDGET {
                return Err(GenError::RejectionBudget {
                    placed: out.len(),
                    wanted: class_ids.len(),
                });
            }
            let c = random_center(cfg, rng);
            let pts = object_points(class_id, cfg.vocab.len(), c, cfg.points_per_proposal, rng);
            let proposal = Proposal::new(existing.len() + out.len(), class_id, pts)?;
            // The realized bbox center can differ from `c` by rounding.
            if placer.fits(&proposal.center) {
                placer.force(proposal.center);
                out.push(proposal);
                break;
            }
        }
    }
    Ok(out)
}

/// Random scene with `K ~ U[min, max]` proposals, classes drawn uniformly
/// with replacement.
pub fn sample_scene<R: Rng>(cfg: &GenConfig, scene_id: &str, rng: &mut R) -> Result<Scene, GenError> {
    cfg.validate()?;
    let k = rng.gen_range(cfg.min_proposals..=cfg.max_proposals);
    let classes: Vec<usize> = (0..k).map(|_| rng.gen_range(0..cfg.vocab.len())).collect();
    let proposals = place(cfg, &[], &classes, rng)?;
    Ok(Scene::new(scene_id, cfg.vocab.clone(), proposals)?)
}

/// Renders the warm-up template for `order` with one relation word.
pub fn render_description(order: &[String], relation: Relation) -> Result<String, GenError> {
    if order.len() < 2 {
        return Err(GenError::OrderTooShort {
            min: 2,
            got: order.len(),
        });
    }
    let rel = relation.word();
    let last = order.len() - 1;
    let mut s = format!("There is a {} in the room, ", order[0]);
    for i in 1..last {
        if i == 1 {
            s.push_str(&format!("find the {} {rel} to it, ", order[1]));
        } else {
            s.push_str(&format!(
                "and then find the {} {rel} to that {}, ",
                order[i],
                order[i - 1]
            ));
        }
    }
    s.push_str(&format!(
        "finally you can see the {} {rel} to that {}.",
        order[last],
        order[last - 1]
    ));
    Ok(s)
}

fn relation_phrase<R: Rng>(relation: Relation, rng: &mut R) -> &'static str {
    let options: [&str; 2] = match relation {
        Relation::Farthest => ["farthest from", "furthest from"],
        Relation::Nearest => ["nearest to", "closest to"],
    };
    options[rng.gen_range(0..2)]
}

/// Reworded description for held-out "natural-style" data. Class names
/// still appear in order, first anchor first.
pub fn render_natural<R: Rng>(order: &[String], relations: &[Relation], rng: &mut R) -> String {
    if order.len() == 1 {
        let forms = [
            "Find the {0} in the room.",
            "Look for the only {0} here.",
            "Please pick the {0}.",
        ];
        return forms[rng.gen_range(0..forms.len())].replace("{0}", &order[0]);
    }
    // (opening, middle hop, final hop)
    let forms: [(&str, &str, &str); 3] = [
        (
            "Start at the {cur}.",
            " Go to the {cur} {rel} it.",
            " The target is the {cur} {rel} that {prev}.",
        ),
        (
            "Look at the {cur}",
            ", then the {cur} {rel} that {prev}",
            "; the one I mean is the {cur} {rel} that {prev}.",
        ),
        (
            "Begin with the {cur} in this room.",
            " Next pick the {cur} {rel} the {prev}.",
            " Finally choose the {cur} {rel} the {prev}.",
        ),
    ];
    let (open, middle, last) = forms[rng.gen_range(0..forms.len())];
    let mut s = open.replace("{cur}", &order[0]);
    for i in 1..order.len() {
        let tpl = if i + 1 == order.len() { last } else { middle };
        let rel = relation_phrase(relations[i - 1], rng);
        s.push_str(
            &tpl.replace("{cur}", &order[i])
                .replace("{prev}", &order[i - 1])
                .replace("{rel}", rel),
        );
    }
    s
}

fn distinct_classes(scene: &Scene) -> Vec<usize> {
    scene
        .proposals()
        .iter()
        .map(|p| p.class_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Picks `len` distinct classes, prunes the first class to one proposal and
/// resolves the chain. Returns (pruned scene, class ids, object ids).
fn pick_and_resolve<R: Rng>(
    mut scene: Scene,
    len: usize,
    relations: &[Relation],
    rng: &mut R,
) -> Result<(Scene, Vec<usize>, Vec<usize>), GenError> {
    let mut classes = distinct_classes(&scene);
    if classes.len() < len {
        return Err(GenError::Skip(format!(
            "{} distinct classes, need {len}",
            classes.len()
        )));
    }
    classes.shuffle(rng);
    classes.truncate(len);

    let first: Vec<usize> = scene
        .proposals()
        .iter()
        .filter(|p| p.class_id == classes[0])
        .map(|p| p.id)
        .collect();
    let keep = first[rng.gen_range(0..first.len())];
    scene.retain(|p| p.class_id != classes[0] || p.id == keep);

    let ids = resolve_chain(&scene, &classes, relations)?;
    Ok((scene, classes, ids))
}

fn resolve_chain(scene: &Scene, classes: &[usize], relations: &[Relation]) -> Result<Vec<usize>, GenError> {
    let mut ids = vec![scene
        .proposals()
        .iter()
        .find(|p| p.class_id == classes[0])
        .map(|p| p.id)
        .ok_or_else(|| SceneError::NoCandidate(scene.vocab().name(classes[0]).into()))?];
    for (i, &class_id) in classes.iter().enumerate().skip(1) {
        let prev = scene.proposals()[ids[i - 1]].center;
        ids.push(relation_select(scene, class_id, &prev, relations[i - 1])?);
    }
    Ok(ids)
}

/// Warm-up sample from `scene` following the fixed template.
pub fn synth_warmup_sample<R: Rng>(
    scene: Scene,
    order_len: usize,
    relation: Relation,
    rng: &mut R,
) -> Result<WarmupSample, GenError> {
    if order_len < 2 {
        return Err(GenError::OrderTooShort { min: 2, got: order_len });
    }
    let relations = vec![relation; order_len - 1];
    let (scene, classes, ids) = pick_and_resolve(scene, order_len, &relations, rng)?;
    let order: Vec<String> = classes.iter().map(|&c| scene.vocab().name(c).to_string()).collect();
    let description = render_description(&order, relation)?;
    Ok(WarmupSample {
        scene,
        description,
        order,
        anchor_target_ids: ids,
        relations,
    })
}

/// Natural-style sample: variable length, mixed relations, reworded text
/// and extra proposals sharing the target's class.
pub fn synth_natural_sample<R: Rng>(scene: Scene, cfg: &GenConfig, rng: &mut R) -> Result<WarmupSample, GenError> {
    let len = rng.gen_range(cfg.natural_len.0..=cfg.natural_len.1);
    let relations: Vec<Relation> = (1..len)
        .map(|_| {
            if rng.gen_bool(0.5) {
                Relation::Farthest
            } else {
                Relation::Nearest
            }
        })
        .collect();
    let (mut scene, classes, _) = pick_and_resolve(scene, len, &relations, rng)?;
    let target_class = *classes.last().expect("len >= 1");
    if len > 1 && cfg.max_extra_distractors > 0 {
        let extra = rng.gen_range(0..=cfg.max_extra_distractors);
        if extra > 0 {
            // Distractors are best effort; a crowded scene keeps its count.
            if let Ok(added) = place(cfg, scene.proposals(), &vec![target_class; extra], rng) {
                let mut all = scene.proposals().to_vec();
                all.extend(added);
                scene = Scene::new(scene.scene_id.clone(), scene.vocab().clone(), all)?;
            }
        }
    }
    let ids = resolve_chain(&scene, &classes, &relations)?;
    let order: Vec<String> = classes.iter().map(|&c| scene.vocab().name(c).to_string()).collect();
    let description = render_natural(&order, &relations, rng);
    Ok(WarmupSample {
        scene,
        description,
        order,
        anchor_target_ids: ids,
        relations,
    })
}

/// Re-derives the object chain from `(scene, order, relations)` by
/// exhaustive distance scans, refusing ambiguous references.
pub fn oracle_resolve_chain(
    scene: &Scene,
    order: &[String],
    relations: &[Relation],
) -> Result<Vec<usize>, OracleError> {
    if order.is_empty() {
        return Err(OracleError::Malformed("empty order".into()));
    }
    if relations.len() + 1 != order.len() {
        return Err(OracleError::Malformed(format!(
            "{} relations for an order of {}",
            relations.len(),
            order.len()
        )));
    }
    let candidates = |name: &str| -> Result<Vec<usize>, OracleError> {
        let class = scene
            .vocab()
            .id_of(name)
            .ok_or_else(|| OracleError::Malformed(format!("unknown class {name:?}")))?;
        Ok(scene
            .proposals()
            .iter()
            .filter(|p| p.class_id == class)
            .map(|p| p.id)
            .collect())
    };
    let first = candidates(&order[0])?;
    if first.len() != 1 {
        return Err(OracleError::Ambiguity(format!(
            "{} proposals of first class {:?}",
            first.len(),
            order[0]
        )));
    }
    let mut chain = vec![first[0]];
    for (i, name) in order.iter().enumerate().skip(1) {
        let from = scene.proposals()[chain[i - 1]].center;
        let mut scored: Vec<(usize, f64)> = candidates(name)?
            .into_iter()
            .map(|id| {
                let c = scene.proposals()[id].center;
                let d = ((c[0] - from[0]).powi(2) + (c[1] - from[1]).powi(2) + (c[2] - from[2]).powi(2)).sqrt();
                (id, d)
            })
            .collect();
        if scored.is_empty() {
            return Err(OracleError::Malformed(format!("no proposal of class {name:?}")));
        }
        match relations[i - 1] {
            Relation::Farthest => scored.sort_by(|a, b| b.1.total_cmp(&a.1)),
            Relation::Nearest => scored.sort_by(|a, b| a.1.total_cmp(&b.1)),
        }
        if scored.len() > 1 && (scored[0].1 - scored[1].1).abs() <= TIE_EPS {
            return Err(OracleError::Ambiguity(format!(
                "proposals {} and {} of class {name:?} tie",
                scored[0].0, scored[1].0
            )));
        }
        chain.push(scored[0].0);
    }
    Ok(chain)
}

pub fn oracle_resolve(sample: &WarmupSample) -> Result<Vec<usize>, OracleError> {
    oracle_resolve_chain(&sample.scene, &sample.order, &sample.relations)
}

/// Generator for entry `index` of a dataset: one ChaCha stream per entry,
/// so entries can be produced independently.
pub fn entry_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One dataset entry, resampling scenes that cannot host a sample.
pub fn generate_entry(cfg: &GenConfig, index: usize) -> Result<WarmupSample, GenError> {
    let mut rng = entry_rng(cfg.seed, index);
    let mut last = String::new();
    for _ in 0..SKIP_BUDGET {
        let scene = sample_scene(cfg, &format!("synth-{}-{index}", cfg.seed), &mut rng)?;
        let sample = match cfg.style {
            Style::Template => synth_warmup_sample(scene, cfg.order_len, cfg.relation, &mut rng),
            Style::Natural => synth_natural_sample(scene, cfg, &mut rng),
        };
        match sample {
            Ok(s) => return Ok(s),
            Err(GenError::Skip(why)) => last = why,
            Err(e) => return Err(e),
        }
    }
    Err(GenError::SkipBudget(last))
}

/// `cfg.num_scenes` samples, deterministic in `cfg.seed`.
pub fn generate_dataset(cfg: &GenConfig) -> impl Iterator<Item = Result<WarmupSample, GenError>> + '_ {
    (0..cfg.num_scenes).map(move |i| generate_entry(cfg, i))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn point_at(c: Vec3) -> Vec<Point> {
        vec![[c[0], c[1], c[2], 0.2, 0.2, 0.2]]
    }

    fn line_scene(items: &[(usize, f64)]) -> Scene {
        let props = items
            .iter()
            .enumerate()
            .map(|(i, &(class, x))| Proposal::new(i, class, point_at([x, 0.0, 0.0])).unwrap())
            .collect();
        Scene::new("hand", default_vocab(), props).unwrap()
    }

    #[test]
    fn single_proposal_scene() {
        let cfg = GenConfig {
            min_proposals: 1,
            max_proposals: 1,
            ..GenConfig::default()
        };
        let scene = sample_scene(&cfg, "s", &mut entry_rng(1, 0)).unwrap();
        assert_eq!(scene.len(), 1);
    }

    #[test]
    fn scenes_respect_distance_gaps() {
        let cfg = GenConfig::default();
        for i in 0..50 {
            let scene = sample_scene(&cfg, "s", &mut entry_rng(9, i)).unwrap();
            let c = scene.centers();
            let mut ds = Vec::new();
            for a in 0..c.len() {
                for b in a + 1..c.len() {
                    ds.push(distance(&c[a], &c[b]));
                }
            }
            ds.sort_by(f64::total_cmp);
            assert!(ds.windows(2).all(|w| w[1] - w[0] >= cfg.min_separation));
            for p in scene.proposals() {
                assert_eq!(p.points.len(), cfg.points_per_proposal);
                assert_eq!(p.center, p.bbox.center());
            }
        }
    }

    #[test]
    fn impossible_separation_exhausts_budget() {
        let cfg = GenConfig {
            min_proposals: 10,
            max_proposals: 10,
            room_extent: 0.5,
            min_separation: 0.5,
            ..GenConfig::default()
        };
        assert!(matches!(
            sample_scene(&cfg, "s", &mut entry_rng(0, 0)),
            Err(GenError::RejectionBudget { .. })
        ));
    }

    #[test]
    fn scene_sampling_is_deterministic() {
        let cfg = GenConfig::default();
        let a = sample_scene(&cfg, "s", &mut entry_rng(42, 3)).unwrap();
        let b = sample_scene(&cfg, "s", &mut entry_rng(42, 3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn template_rendering() {
        assert_eq!(
            render_description(&names(&["door", "table"]), Relation::Farthest).unwrap(),
            "There is a door in the room, finally you can see the table farthest to that door."
        );
        let three = render_description(&names(&["a", "b", "c"]), Relation::Farthest).unwrap();
        assert!(three.contains("find the b farthest to it"));
        assert!(three.contains("finally you can see the c farthest to that b"));
        assert_eq!(
            render_description(&names(&["door", "bed", "lamp", "sofa"]), Relation::Nearest).unwrap(),
            "There is a door in the room, find the bed nearest to it, and then find the lamp \
             nearest to that bed, finally you can see the sofa nearest to that lamp."
        );
        assert_eq!(
            render_description(&names(&["x"]), Relation::Farthest),
            Err(GenError::OrderTooShort { min: 2, got: 1 })
        );
    }

    #[test]
    fn door_and_two_tables() {
        // door at 0, tables at 3 and 9: the farthest table is the one at 9.
        let scene = line_scene(&[(2, 0.0), (1, 3.0), (1, 9.0)]);
        let order = names(&["door", "table"]);
        let chain = oracle_resolve_chain(&scene, &order, &[Relation::Farthest]).unwrap();
        assert_eq!(chain, vec![0, 2]);
        let chain = oracle_resolve_chain(&scene, &order, &[Relation::Nearest]).unwrap();
        assert_eq!(chain, vec![0, 1]);

        // Generator on the same scene: only door and table exist, so the
        // order is forced up to its first element.
        for seed in 0..20 {
            let mut rng = entry_rng(seed, 0);
            let s = synth_warmup_sample(scene.clone(), 2, Relation::Farthest, &mut rng).unwrap();
            if s.order == order {
                assert_eq!(s.anchor_target_ids, vec![0, 2]);
            } else {
                // table first: one table is pruned, the door is unique.
                assert_eq!(s.scene.len(), 2);
                assert_eq!(s.scene.class_name(s.target_id()), "door");
            }
            assert_eq!(oracle_resolve(&s).unwrap(), s.anchor_target_ids);
        }
    }

    #[test]
    fn hand_built_three_hop_chain() {
        // bed at 0; lamps at 2 and 5; chairs at 4 and 10.
        // farthest lamp from bed: 5; farthest chair from lamp@5: |4-5|=1 vs |10-5|=5 -> 10
        let scene = line_scene(&[(3, 0.0), (5, 2.0), (5, 5.0), (0, 4.0), (0, 10.0)]);
        let order = names(&["bed", "lamp", "chair"]);
        let far = oracle_resolve_chain(&scene, &order, &[Relation::Farthest; 2]).unwrap();
        assert_eq!(far, vec![0, 2, 4]);
        // nearest lamp from bed: 2; nearest chair from lamp@2: |4-2|=2 vs 8 -> 4
        let near = oracle_resolve_chain(&scene, &order, &[Relation::Nearest; 2]).unwrap();
        assert_eq!(near, vec![0, 1, 3]);
    }

    #[test]
    fn unique_classes_force_ids() {
        let scene = line_scene(&[(0, 0.0), (1, 2.0), (2, 7.0)]);
        for rel in [Relation::Farthest, Relation::Nearest] {
            let s = synth_warmup_sample(scene.clone(), 2, rel, &mut entry_rng(3, 0)).unwrap();
            let expected: Vec<usize> = s
                .order
                .iter()
                .map(|n| {
                    scene
                        .proposals()
                        .iter()
                        .find(|p| scene.class_name(p.id) == n)
                        .unwrap()
                        .id
                })
                .collect();
            assert_eq!(s.anchor_target_ids, expected);
        }
    }

    #[test]
    fn oracle_detects_ties_and_duplicate_first_class() {
        let tie = line_scene(&[(2, 0.0), (1, -3.0), (1, 3.0)]);
        assert!(matches!(
            oracle_resolve_chain(&tie, &names(&["door", "table"]), &[Relation::Farthest]),
            Err(OracleError::Ambiguity(_))
        ));
        let dup = line_scene(&[(2, 0.0), (2, 1.0), (1, 3.0)]);
        assert!(matches!(
            oracle_resolve_chain(&dup, &names(&["door", "table"]), &[Relation::Farthest]),
            Err(OracleError::Ambiguity(_))
        ));
    }

    #[test]
    fn too_few_classes_is_a_skip() {
        let scene = line_scene(&[(0, 0.0), (0, 2.0)]);
        assert!(matches!(
            synth_warmup_sample(scene, 2, Relation::Farthest, &mut entry_rng(0, 0)),
            Err(GenError::Skip(_))
        ));
    }

    #[test]
    fn empty_and_repeatable_datasets() {
        let cfg = GenConfig {
            num_scenes: 0,
            ..GenConfig::default()
        };
        assert_eq!(generate_dataset(&cfg).count(), 0);
        let cfg = GenConfig {
            num_scenes: 5,
            seed: 17,
            ..GenConfig::default()
        };
        let a: Vec<_> = generate_dataset(&cfg).collect();
        let b: Vec<_> = generate_dataset(&cfg).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_samples_satisfy_invariants() {
        for style in [Style::Template, Style::Natural] {
            let cfg = GenConfig {
                num_scenes: 200,
                seed: 4,
                style,
                ..GenConfig::default()
            };
            for s in generate_dataset(&cfg) {
                let s = s.unwrap();
                assert_eq!(s.order.len(), s.anchor_target_ids.len());
                assert_eq!(s.relations.len() + 1, s.order.len());
                let first = s.scene.vocab().id_of(&s.order[0]).unwrap();
                assert_eq!(s.scene.count_class(first), 1);
                let distinct: BTreeSet<_> = s.anchor_target_ids.iter().collect();
                assert_eq!(distinct.len(), s.order.len());
                assert_eq!(oracle_resolve(&s).unwrap(), s.anchor_target_ids);
                if style == Style::Template {
                    assert_eq!(s.order.len(), cfg.order_len);
                }
            }
        }
    }
}
