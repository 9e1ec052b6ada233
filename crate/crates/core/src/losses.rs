//! Training objectives and their per-stage composition.

use serde::{Deserialize, Serialize};

use crate::scene::{RelevanceMask, Vec3};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Synthetic samples: every anchor and the target are supervised.
    Warmup,
    /// Target-only supervision.
    Main,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub reference: f64,
    pub mask: f64,
    pub text: f64,
    pub coord: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reference: 1.0,
            mask: 1.0,
            text: 1.0,
            coord: 1.0,
        }
    }
}

/// Component values of one composed loss. Components a stage does not use
/// are `None`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ref: Option<f64>,
    pub l_mask: Option<f64>,
    pub l_text: Option<f64>,
    pub l_crd: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Adds `other` component-wise, for batch accumulation.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        fn add(a: &mut Option<f64>, b: Option<f64>) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        }
        add(&mut self.l_ref, other.l_ref);
        add(&mut self.l_mask, other.l_mask);
        add(&mut self.l_text, other.l_text);
        add(&mut self.l_crd, other.l_crd);
        self.total += other.total;
    }

    pub fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            l_ref: self.l_ref.map(|v| v * c),
            l_mask: self.l_mask.map(|v| v * c),
            l_text: self.l_text.map(|v| v * c),
            l_crd: self.l_crd.map(|v| v * c),
            total: self.total * c,
        }
    }
}

fn contract(msg: String) -> TensorError {
    TensorError::Contract { op: "losses", msg }
}

fn mean(tape: &mut Tape, terms: &[Var]) -> Result<Var, TensorError> {
    let mut acc = *terms.first().ok_or_else(|| contract("no terms to average".into()))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Referential cross-entropy. Warm-up averages block `i`'s scores against
/// `ids[i]`; the main stage uses the last block against the last id.
pub fn loss_ref(tape: &mut Tape, block_scores: &[Var], ids: &[usize], stage: Stage) -> Result<Var, TensorError> {
    match stage {
        Stage::Warmup => {
            if ids.len() != block_scores.len() {
                return Err(contract(format!(
                    "{} supervision ids for {} blocks",
                    ids.len(),
                    block_scores.len()
                )));
            }
            let terms = block_scores
                .iter()
                .zip(ids)
                .map(|(&s, &id)| tape.cross_entropy(s, id))
                .collect::<Result<Vec<_>, _>>()?;
            mean(tape, &terms)
        }
        Stage::Main => {
            let (Some(&s), Some(&id)) = (block_scores.last(), ids.last()) else {
                return Err(contract("no scores or no target".into()));
            };
            tape.cross_entropy(s, id)
        }
    }
}

/// Mean over blocks of per-proposal binary cross-entropy against `M_i`.
pub fn loss_mask(tape: &mut Tape, mask_logits: &[Var], masks: &[RelevanceMask]) -> Result<Var, TensorError> {
    if mask_logits.len() != masks.len() {
        return Err(contract(format!(
            "{} mask heads for {} masks",
            mask_logits.len(),
            masks.len()
        )));
    }
    let terms = mask_logits
        .iter()
        .zip(masks)
        .map(|(&l, m)| tape.bce_with_logits(l, &m.as_f64()))
        .collect::<Result<Vec<_>, _>>()?;
    mean(tape, &terms)
}

/// `V - 1·v`: every center relative to `centers[anchor]`.
pub fn relative_centers(centers: &[Vec3], anchor: usize) -> Tensor {
    let a = centers[anchor];
    let data = centers
        .iter()
        .flat_map(|c| [c[0] - a[0], c[1] - a[1], c[2] - a[2]])
        .collect();
    Tensor::new(centers.len(), 3, data).expect("sized by construction")
}

/// Mean over blocks of the squared error between block `i`'s coordinate
/// predictions and the centers relative to proposal `ids[i]`.
pub fn loss_crd(tape: &mut Tape, coord_preds: &[Var], centers: &[Vec3], ids: &[usize]) -> Result<Var, TensorError> {
    if coord_preds.len() != ids.len() {
        return Err(contract(format!(
            "{} coordinate heads for {} ids",
            coord_preds.len(),
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= centers.len()) {
        return Err(contract(format!(
            "id {bad} out of range for {} proposals",
            centers.len()
        )));
    }
    let terms = coord_preds
        .iter()
        .zip(ids)
        .map(|(&p, &id)| tape.mse(p, &relative_centers(centers, id)))
        .collect::<Result<Vec<_>, _>>()?;
    mean(tape, &terms)
}

/// Cross-entropy of the sentence-level class logits.
pub fn loss_text(tape: &mut Tape, text_logits: Var, target_class: usize) -> Result<Var, TensorError> {
    tape.cross_entropy(text_logits, target_class)
}

/// Loss components on the tape, before composition.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub l_ref: Option<Var>,
    pub l_mask: Option<Var>,
    pub l_text: Option<Var>,
    pub l_crd: Option<Var>,
}

/// Weighted sum of the components a stage uses. Warm-up needs all four;
/// the main stage needs reference, mask and text and refuses coordinates.
pub fn compose(
    tape: &mut Tape,
    stage: Stage,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown), TensorError> {
    let need = |v: Option<Var>, name: &str| v.ok_or_else(|| contract(format!("{stage:?} stage requires {name}")));
    let mut parts = vec![
        (need(terms.l_ref, "l_ref")?, weights.reference),
        (need(terms.l_mask, "l_mask")?, weights.mask),
        (need(terms.l_text, "l_text")?, weights.text),
    ];
    match stage {
        Stage::Warmup => parts.push((need(terms.l_crd, "l_crd")?, weights.coord)),
        Stage::Main => {
            if terms.l_crd.is_some() {
                return Err(contract("main stage does not supervise coordinates".into()));
            }
        }
    }
    let mut total: Option<Var> = None;
    for &(v, w) in &parts {
        let weighted = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, weighted)?,
            None => weighted,
        });
    }
    let total = total.expect("at least three parts");
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item());
    let breakdown = LossBreakdown {
        l_ref: value(terms.l_ref),
        l_mask: value(terms.l_mask),
        l_text: value(terms.l_text),
        l_crd: value(terms.l_crd),
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ce_oracle(logits: &[f64], target: usize) -> f64 {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        -(logits[target] - m - z.ln())
    }

    fn bce_oracle(z: f64, y: f64) -> f64 {
        let p = 1.0 / (1.0 + (-z).exp());
        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
    }

    fn row(tape: &mut Tape, v: &[f64]) -> Var {
        tape.leaf(Tensor::row(v.to_vec()))
    }

    #[test]
    fn closed_forms() {
        let mut tape = Tape::new();
        let s = row(&mut tape, &[0.0; 4]);
        let l = loss_ref(&mut tape, &[s, s], &[1, 3], Stage::Warmup).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() <= 1e-12);

        let z = tape.leaf(Tensor::zeros(6, 1));
        let m = RelevanceMask::from(vec![true, false, true, true, false, false]);
        let l = loss_mask(&mut tape, &[z], &[m]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() <= 1e-12);

        let t = row(&mut tape, &[0.0; 20]);
        let l = loss_text(&mut tape, t, 7).unwrap();
        assert!((tape.value(l).item() - 20f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn confident_limits_vanish() {
        let mut tape = Tape::new();
        let s = row(&mut tape, &[-50.0, 50.0, -50.0]);
        let l = loss_ref(&mut tape, &[s], &[1], Stage::Main).unwrap();
        assert!(tape.value(l).item() < 1e-40);
        let m = RelevanceMask::from(vec![true, false]);
        let z = tape.leaf(Tensor::new(2, 1, vec![60.0, -60.0]).unwrap());
        let l = loss_mask(&mut tape, &[z], &[m]).unwrap();
        assert!(tape.value(l).item() < 1e-25);
    }

    #[test]
    fn out_of_range_ids_are_contract_errors() {
        let mut tape = Tape::new();
        let s = row(&mut tape, &[0.0; 3]);
        assert!(loss_ref(&mut tape, &[s], &[3], Stage::Main).is_err());
        assert!(loss_ref(&mut tape, &[s, s], &[0], Stage::Warmup).is_err());
        assert!(loss_text(&mut tape, s, 9).is_err());
        let c = tape.leaf(Tensor::zeros(2, 3));
        assert!(loss_crd(&mut tape, &[c], &[[0.0; 3], [1.0; 3]], &[2]).is_err());
    }

    #[test]
    fn main_stage_uses_last_block_only() {
        let mut tape = Tape::new();
        let a = row(&mut tape, &[5.0, 0.0, 0.0]);
        let b = row(&mut tape, &[1.0, 2.0, 0.5]);
        let l = loss_ref(&mut tape, &[a, b], &[0, 1], Stage::Main).unwrap();
        assert!((tape.value(l).item() - ce_oracle(&[1.0, 2.0, 0.5], 1)).abs() <= 1e-12);
    }

    #[test]
    fn exact_coordinates_give_zero() {
        let centers = vec![[1.0, 2.0, 0.5], [-1.0, 0.0, 0.2], [3.0, -2.0, 0.9]];
        let mut tape = Tape::new();
        let p0 = tape.leaf(relative_centers(&centers, 2));
        let p1 = tape.leaf(relative_centers(&centers, 0));
        let l = loss_crd(&mut tape, &[p0, p1], &centers, &[2, 0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let rel = relative_centers(&centers, 1);
        assert_eq!(rel.row_slice(1), &[0.0, 0.0, 0.0]);
    }

    fn terms(tape: &mut Tape, vals: [f64; 4]) -> LossTerms {
        let mut v = vals.map(|x| Some(tape.leaf(Tensor::scalar(x))));
        v[3] = v[3].filter(|_| vals[3] >= 0.0);
        LossTerms {
            l_ref: v[0],
            l_mask: v[1],
            l_text: v[2],
            l_crd: v[3],
        }
    }

    #[test]
    fn composition_rules() {
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let t = terms(&mut tape, [0.0; 4]);
        let (_, b) = compose(&mut tape, Stage::Warmup, &t, &w).unwrap();
        assert_eq!(b.total, 0.0);

        let t = terms(&mut tape, [0.3, 0.2, 0.1, 0.7]);
        let (_, b) = compose(&mut tape, Stage::Warmup, &t, &w).unwrap();
        assert!((b.total - (0.3 + 0.2 + 0.1 + 0.7)).abs() <= 1e-12);
        assert!(compose(&mut tape, Stage::Main, &t, &w).is_err());

        let t = terms(&mut tape, [0.3, 0.2, 0.1, -1.0]);
        assert!(t.l_crd.is_none());
        let (_, b) = compose(&mut tape, Stage::Main, &t, &w).unwrap();
        assert_eq!(b.l_crd, None);
        assert!((b.total - 0.6).abs() <= 1e-12);
        assert!(compose(&mut tape, Stage::Warmup, &t, &w).is_err());
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let k = 5;
        let scores = [
            store.insert_glorot("s0", 1, k, &mut rng),
            store.insert_glorot("s1", 1, k, &mut rng),
        ];
        let masks = [
            store.insert_glorot("m0", k, 1, &mut rng),
            store.insert_glorot("m1", k, 1, &mut rng),
        ];
        let coords = [
            store.insert_glorot("c0", k, 3, &mut rng),
            store.insert_glorot("c1", k, 3, &mut rng),
        ];
        let text = store.insert_glorot("t", 1, 4, &mut rng);
        let centers: Vec<Vec3> = (0..k).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let m = [
            RelevanceMask::from(vec![true, true, false, true, false]),
            RelevanceMask::from(vec![false, true, false, true, false]),
        ];
        let report = grad_check(&store, |tape, p| {
            let s = [p[scores[0]], p[scores[1]]];
            let lt = LossTerms {
                l_ref: Some(loss_ref(tape, &s, &[1, 3], Stage::Warmup)?),
                l_mask: Some(loss_mask(tape, &[p[masks[0]], p[masks[1]]], &m)?),
                l_text: Some(loss_text(tape, p[text], 2)?),
                l_crd: Some(loss_crd(tape, &[p[coords[0]], p[coords[1]]], &centers, &[1, 3])?),
            };
            Ok(compose(tape, Stage::Warmup, &lt, &LossWeights::default())?.0)
        })
        .unwrap();
        assert!(report.passed(1e-6), "{:?}", report.worst());
    }

    proptest! {
        #[test]
        fn match_scalar_oracles(
            logits in prop::collection::vec(-8.0f64..8.0, 2..9),
            target_seed in 0usize..100,
            bits in prop::collection::vec(any::<bool>(), 2..9),
            raw in prop::collection::vec(-5.0f64..5.0, 27),
        ) {
            let mut tape = Tape::new();
            let target = target_seed % logits.len();
            let s = row(&mut tape, &logits);
            let l = loss_ref(&mut tape, &[s], &[target], Stage::Main).unwrap();
            prop_assert!((tape.value(l).item() - ce_oracle(&logits, target)).abs() <= 1e-12);
            let l = loss_text(&mut tape, s, target).unwrap();
            prop_assert!((tape.value(l).item() - ce_oracle(&logits, target)).abs() <= 1e-12);

            let z: Vec<f64> = raw[..bits.len()].to_vec();
            let zv = tape.leaf(Tensor::new(bits.len(), 1, z.clone()).unwrap());
            let m = RelevanceMask::from(bits.clone());
            let l = loss_mask(&mut tape, &[zv], &[m]).unwrap();
            let oracle = z.iter().zip(&bits).map(|(&z, &b)| bce_oracle(z, b as u8 as f64)).sum::<f64>() / z.len() as f64;
            prop_assert!((tape.value(l).item() - oracle).abs() <= 1e-12);
            prop_assert!(tape.value(l).item() >= 0.0);

            // Three proposals: centers from raw[0..9], predictions raw[9..18].
            let centers: Vec<Vec3> = (0..3).map(|i| [raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]]).collect();
            let pred = Tensor::new(3, 3, raw[9..18].to_vec()).unwrap();
            let pv = tape.leaf(pred.clone());
            let anchor = target_seed % 3;
            let l = loss_crd(&mut tape, &[pv], &centers, &[anchor]).unwrap();
            let mut oracle = 0.0;
            for (i, center) in centers.iter().enumerate() {
                for c in 0..3 {
                    let want = center[c] - centers[anchor][c];
                    oracle += (pred.get(i, c) - want).powi(2);
                }
            }
            prop_assert!((tape.value(l).item() - oracle / 9.0).abs() <= 1e-12);

            // Translating every center by t leaves the loss unchanged.
            let t = [raw[18], raw[19], raw[20]];
            let shifted: Vec<Vec3> = centers.iter().map(|c| [c[0] + t[0], c[1] + t[1], c[2] + t[2]]).collect();
            let l2 = loss_crd(&mut tape, &[pv], &shifted, &[anchor]).unwrap();
            let (a, b) = (tape.value(l).item(), tape.value(l2).item());
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }
    }
}
