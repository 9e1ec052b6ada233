//! The grounding network.
//!
//! A small text encoder and a per-proposal point encoder feed `B` stacked
//! referring blocks. Block `i` sees the proposal features `F_i`, the
//! relevance mask built from the order suffix starting at entry `i`, and the
//! text features, and produces `F_{i+1}`. Four heads read the results:
//! per-proposal scores, mask logits, relative coordinates, and the target
//! class from the sentence feature.
//!
//! Nothing indexes proposals by position, so permuting the proposals of a
//! scene permutes every per-proposal output the same way.

pub mod words;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scene::{build_mask, ClassVocab, RelevanceMask, Scene};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

pub use words::{WordVocab, UNK};

/// Self-attention layers in the text encoder.
pub const TEXT_LAYERS: usize = 2;
/// Per-point input: offset from the proposal center, then color.
pub const POINT_FEATURES: usize = 6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("model input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width shared by every block.
    pub d: usize,
    /// Number of referring blocks, equal to the order length.
    pub blocks: usize,
    pub n_heads: usize,
    pub word_vocab_size: usize,
    pub num_classes: usize,
    /// Points per proposal fed to the object encoder.
    pub points_per_proposal: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(words: &WordVocab, classes: &ClassVocab) -> Self {
        Self {
            d: 32,
            blocks: 4,
            n_heads: 4,
            word_vocab_size: words.len(),
            num_classes: classes.len(),
            points_per_proposal: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d = {} must be a positive multiple of n_heads = {}",
                self.d, self.n_heads
            ));
        }
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.points_per_proposal == 0 || self.num_classes == 0 || self.word_vocab_size == 0 {
            return bad("points per proposal and vocabulary sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    self_attn: Attn,
    self_norm: Norm,
    lower: Attn,
    upper: Attn,
    fusion: Attn,
    out_norm: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: ParamId,
    text_layers: Vec<(Attn, Norm)>,
    point1: Linear,
    point2: Linear,
    center: Linear,
    object_proj: Linear,
    blocks: Vec<Block>,
    score_head: Mlp,
    mask_head: Mlp,
    coord_head: Mlp,
    text_head: Mlp,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.insert_glorot(name, rows, cols, &mut self.rng)
    }

    fn linear(&mut self, name: &str, rows: usize, cols: usize, bias: bool) -> Linear {
        let w = self.matrix(format!("{name}.w"), rows, cols);
        let b = bias.then(|| self.store.insert(format!("{name}.b"), Tensor::zeros(1, cols)));
        Linear { w, b }
    }

    fn attn(&mut self, name: &str, d: usize) -> Attn {
        Attn {
            q: self.matrix(format!("{name}.q"), d, d),
            k: self.matrix(format!("{name}.k"), d, d),
            v: self.matrix(format!("{name}.v"), d, d),
            o: self.matrix(format!("{name}.o"), d, d),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.insert(format!("{name}.gain"), Tensor::filled(1, d, 1.0)),
            bias: self.store.insert(format!("{name}.bias"), Tensor::zeros(1, d)),
        }
    }

    fn mlp(&mut self, name: &str, d: usize, out: usize, out_bias: bool) -> Mlp {
        Mlp {
            hidden: self.linear(&format!("{name}.hidden"), d, d, true),
            out: self.linear(&format!("{name}.out"), d, out, out_bias),
        }
    }
}

fn build_layout(cfg: &ModelConfig, store: &mut ParamStore) -> Layout {
    let d = cfg.d;
    let mut b = Builder {
        store,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let embed = b.matrix("text.embed".into(), cfg.word_vocab_size, d);
    let text_layers = (0..TEXT_LAYERS)
        .map(|l| {
            (
                b.attn(&format!("text.{l}.attn"), d),
                b.norm(&format!("text.{l}.norm"), d),
            )
        })
        .collect();
    let point1 = b.linear("object.point1", POINT_FEATURES, d, true);
    let point2 = b.linear("object.point2", d, d, true);
    let center = b.linear("object.center", 3, d, true);
    let object_proj = b.linear("object.proj", 2 * d, d, true);
    let blocks = (0..cfg.blocks)
        .map(|i| Block {
            self_attn: b.attn(&format!("block.{i}.self"), d),
            self_norm: b.norm(&format!("block.{i}.self_norm"), d),
            lower: b.attn(&format!("block.{i}.lower"), d),
            upper: b.attn(&format!("block.{i}.upper"), d),
            fusion: b.attn(&format!("block.{i}.fusion"), d),
            out_norm: b.norm(&format!("block.{i}.out_norm"), d),
        })
        .collect();
    // Softmax ignores a shared offset, so the score head has no output bias.
    let score_head = b.mlp("head.score", d, 1, false);
    let mask_head = b.mlp("head.mask", d, 1, true);
    let coord_head = b.mlp("head.coord", d, 3, true);
    let text_head = b.mlp("head.text", d, cfg.num_classes, true);
    Layout {
        embed,
        text_layers,
        point1,
        point2,
        center,
        object_proj,
        blocks,
        score_head,
        mask_head,
        coord_head,
        text_head,
    }
}

/// Sinusoidal position table, `len × d`.
pub fn sinusoid(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for c in 0..d {
            let angle = pos as f64 / 10000f64.powf((c - c % 2) as f64 / d as f64);
            data.push(if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(len, d, data).expect("sized by construction")
}

/// One grounding query.
#[derive(Clone, Copy, Debug)]
pub struct GroundingInput<'a> {
    pub scene: &'a Scene,
    /// Class id per proposal (ground truth or noisy).
    pub labels: &'a [usize],
    /// Exactly `B` class names, target last.
    pub order: &'a [String],
    pub description: &'a str,
}

/// Text features on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatures {
    /// `(|D| + 1) × d`: sentence feature, then one row per word.
    pub text: Var,
    /// `B × d`, one row per order entry.
    pub order: Var,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub text: TextFeatures,
    /// `F_1..F_{B+1}`, each `K × d`.
    pub features: Vec<Var>,
    /// `M_1..M_B`.
    pub masks: Vec<RelevanceMask>,
    /// `1 × K` scores read from each `F_{i+1}`; the last one is the
    /// prediction.
    pub block_scores: Vec<Var>,
    /// `K × 1` per block.
    pub mask_logits: Vec<Var>,
    /// `K × 3` per block.
    pub coord_pred: Vec<Var>,
    /// `1 × C`.
    pub text_logits: Var,
}

impl Forward {
    pub fn scores(&self) -> Var {
        *self.block_scores.last().expect("at least one block")
    }
}

/// Plain values of the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    pub scores: Vec<f64>,
    pub mask_logits: Vec<Vec<f64>>,
    pub coord_pred: Vec<Tensor>,
    pub text_class_logits: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    words: WordVocab,
    classes: Arc<ClassVocab>,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.words == other.words
            && self.classes == other.classes
            && self.params == other.params
    }
}

impl Model {
    /// Freshly initialized parameters, deterministic in `config.seed`.
    pub fn new(config: ModelConfig, words: WordVocab, classes: Arc<ClassVocab>) -> Result<Self> {
        config.validate()?;
        if config.word_vocab_size != words.len() || config.num_classes != classes.len() {
            return Err(ModelError::Config(format!(
                "vocabulary sizes {}/{} do not match config {}/{}",
                words.len(),
                classes.len(),
                config.word_vocab_size,
                config.num_classes
            )));
        }
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut params);
        Ok(Self {
            config,
            words,
            classes,
            params,
            layout,
        })
    }

    /// Rebuilds a model around stored parameters, which must match the
    /// names and shapes implied by `config`.
    pub fn from_parts(
        config: ModelConfig,
        words: WordVocab,
        classes: Arc<ClassVocab>,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = Self::new(config, words, classes)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((want_name, want), (name, got)) in model.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} {} does not match expected {want_name} {}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn words(&self) -> &WordVocab {
        &self.words
    }

    pub fn classes(&self) -> &Arc<ClassVocab> {
        &self.classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn linear(&self, tape: &mut Tape, p: &Bound, l: Linear, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[l.w])?;
        Ok(match l.b {
            Some(b) => tape.add_row(y, p[b])?,
            None => y,
        })
    }

    fn mlp(&self, tape: &mut Tape, p: &Bound, m: Mlp, x: Var) -> Result<Var> {
        let h = self.linear(tape, p, m.hidden, x)?;
        let h = tape.relu(h);
        self.linear(tape, p, m.out, h)
    }

    fn norm(&self, tape: &mut Tape, p: &Bound, n: Norm, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p[n.gain], p[n.bias])?)
    }

    /// Multi-head scaled dot-product attention from `query` rows onto
    /// `context` rows.
    fn attention(&self, tape: &mut Tape, p: &Bound, a: Attn, query: Var, context: Var) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d / heads;
        let q = tape.matmul(query, p[a.q])?;
        let k = tape.matmul(context, p[a.k])?;
        let v = tape.matmul(context, p[a.v])?;
        let kt = tape.transpose(k);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_rows(kt, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let logits = tape.matmul(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let weights = tape.row_softmax(logits)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok(tape.matmul(joined, p[a.o])?)
    }

    fn encode_tokens(&self, tape: &mut Tape, p: &Bound, ids: &[usize]) -> Result<Var> {
        let mut x = tape.gather_rows(p[self.layout.embed], ids)?;
        let pos = tape.constant(sinusoid(ids.len(), self.config.d));
        x = tape.add(x, pos)?;
        for &(attn, norm) in &self.layout.text_layers {
            let a = self.attention(tape, p, attn, x, x)?;
            let r = tape.add(x, a)?;
            x = self.norm(tape, p, norm, r)?;
        }
        Ok(x)
    }

    /// Sentence and word features of `description`, plus one feature per
    /// order entry (the mean of that name's encoded tokens).
    pub fn encode_text(&self, tape: &mut Tape, p: &Bound, description: &str, order: &[String]) -> Result<TextFeatures> {
        let ids = self.words.encode(description);
        if ids.is_empty() {
            return Err(ModelError::Input(format!("description {description:?} has no words")));
        }
        if order.is_empty() {
            return Err(ModelError::Input("empty order".into()));
        }
        let words = self.encode_tokens(tape, p, &ids)?;
        let sentence = tape.mean_rows(words)?;
        let text = tape.concat_rows(&[sentence, words])?;

        let mut cache: Vec<(&str, Var)> = Vec::new();
        let mut rows = Vec::with_capacity(order.len());
        for name in order {
            let row = match cache.iter().find(|(n, _)| *n == name.as_str()) {
                Some(&(_, v)) => v,
                None => {
                    let ids = self.words.encode(name);
                    if ids.is_empty() {
                        return Err(ModelError::Input(format!("class name {name:?} has no words")));
                    }
                    let enc = self.encode_tokens(tape, p, &ids)?;
                    let v = tape.mean_rows(enc)?;
                    cache.push((name, v));
                    v
                }
            };
            rows.push(row);
        }
        let order = tape.concat_rows(&rows)?;
        Ok(TextFeatures { text, order })
    }

    /// `F_1`: one row per proposal, each a function of that proposal alone.
    pub fn encode_objects(&self, tape: &mut Tape, p: &Bound, scene: &Scene) -> Result<Var> {
        if scene.is_empty() {
            return Err(ModelError::Input("scene has no proposals".into()));
        }
        let n = self.config.points_per_proposal;
        let k = scene.len();
        let mut points = Vec::with_capacity(k * n * POINT_FEATURES);
        let mut centers = Vec::with_capacity(k * 3);
        for prop in scene.proposals() {
            let m = prop.points.len();
            for j in 0..n {
                // Repeat points cyclically when short, stride when long.
                let src = &prop.points[if m >= n { j * m / n } else { j % m }];
                points.extend(src[..3].iter().zip(&prop.center).map(|(a, b)| a - b));
                points.extend_from_slice(&src[3..6]);
            }
            centers.extend_from_slice(&prop.center);
        }
        let l = &self.layout;
        let x = tape.constant(Tensor::new(k * n, POINT_FEATURES, points).expect("sized"));
        let h = self.linear(tape, p, l.point1, x)?;
        let h = tape.relu(h);
        let h = self.linear(tape, p, l.point2, h)?;
        let h = tape.relu(h);
        let pooled = tape.segment_max(h, &vec![n; k])?;
        let c = tape.constant(Tensor::new(k, 3, centers).expect("sized"));
        let c = self.linear(tape, p, l.center, c)?;
        let joined = tape.concat_cols(&[pooled, c])?;
        self.linear(tape, p, l.object_proj, joined)
    }

    /// One referring block: `F_i → F_{i+1}`.
    ///
    /// `order_suffix` holds the order features from entry `i` on and
    /// `mask` is the matching relevance mask.
    #[allow(clippy::too_many_arguments)]
    pub fn fe_forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        block: usize,
        f: Var,
        mask: &RelevanceMask,
        text: Var,
        order_suffix: Var,
    ) -> Result<Var> {
        let b = self
            .layout
            .blocks
            .get(block)
            .ok_or_else(|| ModelError::Input(format!("block {block} out of range")))?;
        if mask.len() != tape.shape(f).rows {
            return Err(ModelError::Input(format!(
                "mask of length {} for {} proposals",
                mask.len(),
                tape.shape(f).rows
            )));
        }
        let masked = tape.mask_rows(f, &mask.as_f64())?;

        let sa = self.attention(tape, p, b.self_attn, f, f)?;
        let sa = tape.add(f, sa)?;
        let sa = self.norm(tape, p, b.self_norm, sa)?;

        let lower = self.attention(tape, p, b.lower, order_suffix, masked)?;
        let upper_q = tape.concat_rows(&[order_suffix, text])?;
        let upper = self.attention(tape, p, b.upper, upper_q, sa)?;

        let kv = tape.concat_rows(&[lower, upper])?;
        let fused = self.attention(tape, p, b.fusion, sa, kv)?;
        let out = tape.add(sa, fused)?;
        self.norm(tape, p, b.out_norm, out)
    }

    /// Full forward pass on `tape` with parameters bound as `p`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &GroundingInput) -> Result<Forward> {
        let bcount = self.config.blocks;
        let k = input.scene.len();
        if input.order.len() != bcount {
            return Err(ModelError::Input(format!(
                "order has {} entries, model has {bcount} blocks",
                input.order.len()
            )));
        }
        if input.labels.len() != k {
            return Err(ModelError::Input(format!(
                "{} labels for {k} proposals",
                input.labels.len()
            )));
        }
        let masks: Vec<RelevanceMask> = (0..bcount)
            .map(|i| build_mask(input.labels, &input.order[i..], &self.classes))
            .collect();
        if let Some(i) = (1..bcount).find(|&i| !masks[i].is_subset_of(&masks[i - 1])) {
            return Err(ModelError::Input(format!(
                "mask {} is not contained in mask {i}",
                i + 1
            )));
        }

        let text = self.encode_text(tape, p, input.description, input.order)?;
        let mut features = vec![self.encode_objects(tape, p, input.scene)?];
        let l = &self.layout;
        let (mut block_scores, mut mask_logits, mut coord_pred) = (Vec::new(), Vec::new(), Vec::new());
        for (i, mask) in masks.iter().enumerate() {
            let suffix = tape.slice_rows(text.order, i, bcount - i)?;
            let next = self.fe_forward(tape, p, i, features[i], mask, text.text, suffix)?;
            features.push(next);
            let s = self.mlp(tape, p, l.score_head, next)?;
            block_scores.push(tape.transpose(s));
            mask_logits.push(self.mlp(tape, p, l.mask_head, next)?);
            coord_pred.push(self.mlp(tape, p, l.coord_head, next)?);
        }
        let sentence = tape.slice_rows(text.text, 0, 1)?;
        let text_logits = self.mlp(tape, p, l.text_head, sentence)?;
        Ok(Forward {
            text,
            features,
            masks,
            block_scores,
            mask_logits,
            coord_pred,
            text_logits,
        })
    }

    /// Inference without gradient bookkeeping.
    pub fn predict(&self, input: &GroundingInput) -> Result<HeadOutputs> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, input)?;
        Ok(HeadOutputs {
            scores: tape.value(out.scores()).data().to_vec(),
            mask_logits: out.mask_logits.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
            coord_pred: out.coord_pred.iter().map(|&v| tape.value(v).clone()).collect(),
            text_class_logits: tape.value(out.text_logits).data().to_vec(),
        })
    }

    /// Row norms of `F_1..F_{B+1}`.
    pub fn block_responses(&self, input: &GroundingInput) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &p, input)?;
        Ok(out
            .features
            .iter()
            .map(|&f| {
                let t = tape.value(f);
                (0..t.rows())
                    .map(|r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect()
            })
            .collect())
    }
}
