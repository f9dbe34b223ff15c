//! Training losses: identity classification on both modalities, global
//! image-text association, the bidirectional ranking baseline, local
//! phrase reconstruction through attention, and their weighted sum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::encoders::Lstm;
use crate::error::{Error, Result};

/// Identity classifiers for image features (`[I, d_out]`) and description
/// features (`[I, d]`). No bias.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub image: ParamId,
    pub text: ParamId,
    pub identities: usize,
}

impl ClassifierHead {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        identities: usize,
        d_out: usize,
        d: usize,
    ) -> Result<Self> {
        Ok(Self {
            image: store.add_glorot("head/id_image", &[identities, d_out], d_out, identities, rng)?,
            text: store.add_glorot("head/id_text", &[identities, d], d, identities, rng)?,
            identities,
        })
    }
}

/// Linear projection of a joint representation to one logit.
#[derive(Debug, Clone)]
pub struct ScalarHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl ScalarHead {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut impl Rng, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            w: store.add_glorot(&format!("{name}/w"), &[d], d, 1, rng)?,
            b: store.add_zeros(&format!("{name}/b"), &[1])?,
        })
    }

    /// Rewrites `w` to `-gain * |w|`, so larger squared differences start
    /// out as lower logits.
    pub fn make_distance_like<S: Real>(&self, store: &mut ParamStore<S>, gain: f64) {
        for x in store.value_mut(self.w).data_mut() {
            *x = -x.abs() * S::lit(gain);
        }
    }

    fn logit<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> NodeId {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let z = g.dot(w, x);
        g.add(z, b)
    }

    /// Row-wise logits for a `[K, d]` matrix.
    fn row_logits<S: Real>(&self, g: &mut Graph<S>, store: &ParamStore<S>, rows: NodeId) -> NodeId {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let z = g.matvec(rows, w);
        g.add_scalar(z, b)
    }
}

/// Head scoring how well an image and a description belong together.
pub type ScoreHead = ScalarHead;
/// Head producing attention logits over feature-map bins.
pub type AttentionHead = ScalarHead;

/// Phrase decoder: its own LSTM, an input projection from the visual feature
/// size to the embedding size, and output maps from hidden state and word
/// embedding to vocabulary logits.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub lstm: Lstm,
    w_in: ParamId,
    b_in: ParamId,
    w_oh: ParamId,
    w_oe: ParamId,
    pub vocab_size: usize,
}

impl Decoder {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        vocab_size: usize,
        d_in: usize,
        d_e: usize,
        d_h: usize,
    ) -> Result<Self> {
        Ok(Self {
            lstm: Lstm::new(store, rng, "decoder/lstm", d_e, d_h)?,
            w_in: store.add_glorot("decoder/in/w", &[d_e, d_in], d_in, d_e, rng)?,
            b_in: store.add_zeros("decoder/in/b", &[d_e])?,
            w_oh: store.add_glorot("decoder/out_h", &[vocab_size, d_h], d_h, vocab_size, rng)?,
            w_oe: store.add_glorot("decoder/out_e", &[vocab_size, d_e], d_e, vocab_size, rng)?,
            vocab_size,
        })
    }

    /// Multiplies the input projection by `gain`.
    pub fn scale_input<S: Real>(&self, store: &mut ParamStore<S>, gain: f64) {
        for x in store.value_mut(self.w_in).data_mut() {
            *x *= S::lit(gain);
        }
    }

    pub fn output_maps(&self) -> (ParamId, ParamId) {
        (self.w_oh, self.w_oe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_dis: f64,
    pub lambda_rec: f64,
    /// Ranking margin, used by the rank modes only.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_t: 0.1,
            lambda_dis: 1.0,
            lambda_rec: 1.0,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_t", self.lambda_t),
            ("lambda_dis", self.lambda_dis),
            ("lambda_rec", self.lambda_rec),
            ("margin", self.margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which positives the ranking loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankVariant {
    /// Only the image and description of the same tuple.
    IntraTuple,
    /// Every image-description combination of the same identity.
    SameIdentity,
}

/// Loss configuration of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "basel")]
    Basel,
    #[serde(rename = "rank1")]
    Rank1,
    #[serde(rename = "rank2")]
    Rank2,
    #[serde(rename = "GDA")]
    Gda,
    #[serde(rename = "LRA")]
    Lra,
    #[serde(rename = "proposed")]
    Proposed,
}

impl Mode {
    /// Table order used in ablation summaries.
    pub const ALL: [Mode; 6] = [Mode::Basel, Mode::Rank1, Mode::Rank2, Mode::Gda, Mode::Lra, Mode::Proposed];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Basel => "basel",
            Mode::Rank1 => "rank1",
            Mode::Rank2 => "rank2",
            Mode::Gda => "GDA",
            Mode::Lra => "LRA",
            Mode::Proposed => "proposed",
        }
    }

    pub fn uses_text_id(self) -> bool {
        matches!(self, Mode::Rank1 | Mode::Rank2 | Mode::Gda | Mode::Proposed)
    }

    pub fn uses_dis(self) -> bool {
        matches!(self, Mode::Gda | Mode::Proposed)
    }

    pub fn uses_rec(self) -> bool {
        matches!(self, Mode::Lra | Mode::Proposed)
    }

    pub fn rank_variant(self) -> Option<RankVariant> {
        match self {
            Mode::Rank1 => Some(RankVariant::IntraTuple),
            Mode::Rank2 => Some(RankVariant::SameIdentity),
            _ => None,
        }
    }

    /// Whether any term needs description features.
    pub fn uses_text(self) -> bool {
        self != Mode::Basel
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}` (expected basel, rank1, rank2, GDA, LRA or proposed)"
                ))
            })
    }
}

fn mean_of<S: Real>(g: &mut Graph<S>, terms: &[NodeId]) -> NodeId {
    let total = g.add_n(terms);
    g.scale(total, S::lit(1.0 / terms.len() as f64))
}

/// Mean softmax cross-entropy of `classifier · feature` over the batch.
pub fn id_loss<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    classifier: ParamId,
    features: &[NodeId],
    labels: &[usize],
) -> Result<NodeId> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "id loss needs one label per feature, got {} features and {} labels",
            features.len(),
            labels.len()
        )));
    }
    let classes = store.value(classifier).shape()[0];
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let w = g.param(store, classifier);
    let terms: Vec<NodeId> = features
        .iter()
        .zip(labels)
        .map(|(&f, &l)| {
            let logits = g.matvec(w, f);
            g.cross_entropy(logits, l)
        })
        .collect();
    Ok(mean_of(g, &terms))
}

pub fn id_loss_image<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    head: &ClassifierHead,
    phi: &[NodeId],
    labels: &[usize],
) -> Result<NodeId> {
    id_loss(g, store, head.image, phi, labels)
}

pub fn id_loss_text<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    head: &ClassifierHead,
    theta: &[NodeId],
    labels: &[usize],
) -> Result<NodeId> {
    id_loss(g, store, head.text, theta, labels)
}

/// Element-wise squared difference.
pub fn joint_rep<S: Real>(g: &mut Graph<S>, visual: NodeId, text: NodeId) -> NodeId {
    let diff = g.sub(visual, text);
    g.mul(diff, diff)
}

/// Logistic relevance score of a joint representation.
pub fn relevance_score<S: Real>(g: &mut Graph<S>, store: &ParamStore<S>, head: &ScoreHead, joint: NodeId) -> NodeId {
    let z = head.logit(g, store, joint);
    g.sigmoid(z)
}

/// Binary cross-entropy over `(ψ̄, θᵍ, same identity)` pairs, averaged over
/// pairs. Computed from logits for stability.
pub fn loss_dis<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    head: &ScoreHead,
    pairs: &[(NodeId, NodeId, bool)],
) -> Result<NodeId> {
    if pairs.is_empty() {
        return Err(Error::NoPairs);
    }
    let terms: Vec<NodeId> = pairs
        .iter()
        .map(|&(v, t, positive)| {
            let joint = joint_rep(g, v, t);
            let z = head.logit(g, store, joint);
            let signed = if positive { z } else { g.scale(z, S::lit(-1.0)) };
            g.log_sigmoid(signed)
        })
        .collect();
    let m = mean_of(g, &terms);
    Ok(g.scale(m, S::lit(-1.0)))
}

/// Hinge ranking loss on a precomputed similarity matrix, `sim[i][j]`
/// between image `i` and description `j`. For every positive `(a, b)` and
/// every description `j` / image `j` of another identity, adds
/// `max(0, sim[a][j] − sim[a][b] + α) + max(0, sim[j][b] − sim[a][b] + α)`,
/// averaged over the number of `(positive, negative)` combinations.
pub fn rank_from_similarities<S: Real>(
    g: &mut Graph<S>,
    sim: &[Vec<NodeId>],
    identities: &[usize],
    variant: RankVariant,
    margin: f64,
) -> Result<NodeId> {
    if margin < 0.0 || !margin.is_finite() {
        return Err(Error::InvalidArgument(format!("ranking margin must be >= 0, got {margin}")));
    }
    let n = identities.len();
    if sim.len() != n || sim.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidArgument("similarity matrix must be n x n".into()));
    }
    let alpha = g.constant(Tensor::scalar(S::lit(margin)));
    let mut terms = Vec::new();
    for a in 0..n {
        for b in 0..n {
            let positive = match variant {
                RankVariant::IntraTuple => a == b,
                RankVariant::SameIdentity => identities[a] == identities[b],
            };
            if !positive {
                continue;
            }
            let base = g.sub(alpha, sim[a][b]);
            for j in (0..n).filter(|&j| identities[j] != identities[a]) {
                let img_side = g.add(sim[a][j], base);
                let txt_side = g.add(sim[j][b], base);
                let h1 = g.relu(img_side);
                let h2 = g.relu(txt_side);
                terms.push(g.add(h1, h2));
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::NoPairs);
    }
    Ok(mean_of(g, &terms))
}

/// Ranking loss on cosine similarities of `ψ̄` and `θᵍ`.
pub fn loss_rank<S: Real>(
    g: &mut Graph<S>,
    images: &[NodeId],
    texts: &[NodeId],
    identities: &[usize],
    variant: RankVariant,
    margin: f64,
) -> Result<NodeId> {
    if images.len() != identities.len() || texts.len() != identities.len() {
        return Err(Error::InvalidArgument("ranking loss needs one image and text per tuple".into()));
    }
    let eps = S::lit(1e-8);
    let imgs: Vec<NodeId> = images.iter().map(|&v| g.l2_normalize(v, eps)).collect();
    let txts: Vec<NodeId> = texts.iter().map(|&t| g.l2_normalize(t, eps)).collect();
    let sim: Vec<Vec<NodeId>> = imgs
        .iter()
        .map(|&v| txts.iter().map(|&t| g.dot(v, t)).collect())
        .collect();
    rank_from_similarities(g, &sim, identities, variant, margin)
}

/// Softmax attention over the bins of a pooled `[K′, d]` map, driven by the
/// squared difference between each bin and a phrase feature.
pub fn attention_weights<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    head: &AttentionHead,
    pooled: NodeId,
    phrase: NodeId,
) -> NodeId {
    let diff = g.sub_row(pooled, phrase);
    let sq = g.mul(diff, diff);
    let logits = head.row_logits(g, store, sq);
    g.softmax(logits)
}

/// `Σ_k r_k ψ_k`. Weights must sum to one.
pub fn aggregate_feature<S: Real>(g: &mut Graph<S>, pooled: NodeId, weights: NodeId) -> Result<NodeId> {
    let total: f64 = g.value(weights).data().iter().map(|w| w.as_f64()).sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::WeightsNotNormalized(total));
    }
    Ok(g.weighted_rows(weights, pooled))
}

/// Teacher-forced negative log-likelihood of `<start> w… <end>` given an
/// aggregated visual feature, summed over the predicted words.
pub fn decode_phrase_nll<S: Real>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    decoder: &Decoder,
    embed: ParamId,
    visual: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    if targets.len() < 3 {
        return Err(Error::EmptySequence);
    }
    let (w_in, b_in) = (g.param(store, decoder.w_in), g.param(store, decoder.b_in));
    let x0 = g.affine(w_in, visual, b_in);
    let (h0, c0) = decoder.lstm.zero_state(g);
    let (mut h, mut c) = decoder.lstm.step(g, store, x0, h0, c0);
    let table = g.param(store, embed);
    let (w_oh, w_oe) = (g.param(store, decoder.w_oh), g.param(store, decoder.w_oe));
    let mut nlls = Vec::with_capacity(targets.len() - 1);
    for m in 0..targets.len() - 1 {
        let e = g.embedding(table, targets[m]);
        (h, c) = decoder.lstm.step(g, store, e, h, c);
        let from_h = g.matvec(w_oh, h);
        let from_e = g.matvec(w_oe, e);
        let logits = g.add(from_h, from_e);
        nlls.push(g.cross_entropy(logits, targets[m + 1]));
    }
    Ok(g.add_n(&nlls))
}

/// Average over tuples of the mean per-phrase NLL; phrase-free tuples are
/// left out of the average. Returns a zero constant when every tuple is
/// phrase-free.
pub fn loss_rec<S: Real>(g: &mut Graph<S>, per_tuple: &[Vec<NodeId>]) -> NodeId {
    let tuple_means: Vec<NodeId> = per_tuple
        .iter()
        .filter(|nlls| !nlls.is_empty())
        .map(|nlls| mean_of(g, nlls))
        .collect();
    if tuple_means.is_empty() {
        log::warn!("no phrases in batch; reconstruction loss is 0");
        return g.constant(Tensor::scalar(S::zero()));
    }
    mean_of(g, &tuple_means)
}

/// Individual loss terms of one step. Terms a mode does not use are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub id_image: Option<NodeId>,
    pub id_text: Option<NodeId>,
    pub dis: Option<NodeId>,
    pub rec: Option<NodeId>,
    pub rank: Option<NodeId>,
}

/// Scalar values of the loss terms; unused terms are 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub id_image: f64,
    pub id_text: f64,
    pub dis: f64,
    pub rec: f64,
    pub rank: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Weighted sum of the parts under `mode`, for consistency checks.
    pub fn recombine(&self, weights: &LossWeights, mode: Mode) -> f64 {
        let mut t = self.id_image;
        if mode.uses_text_id() {
            t += weights.lambda_t * self.id_text;
        }
        if mode.uses_dis() {
            t += weights.lambda_dis * self.dis;
        }
        if mode.uses_rec() {
            t += weights.lambda_rec * self.rec;
        }
        if mode.rank_variant().is_some() {
            t += self.rank;
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        [self.id_image, self.id_text, self.dis, self.rec, self.rank, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn require(term: Option<NodeId>, name: &str, mode: Mode) -> Result<NodeId> {
    term.ok_or_else(|| Error::InvalidArgument(format!("mode {mode} needs the {name} term")))
}

/// Combines the terms selected by `mode`:
/// basel `L_I`; rank modes `L_I + λ_T L_T + L_rank`; GDA
/// `L_I + λ_T L_T + λ_dis L_dis`; LRA `L_I + λ_rec L_rec`; proposed all four.
pub fn total_loss<S: Real>(
    g: &mut Graph<S>,
    terms: &LossTerms,
    weights: &LossWeights,
    mode: Mode,
) -> Result<(NodeId, LossBreakdown)> {
    weights.validate()?;
    let id_image = require(terms.id_image, "image id", mode)?;
    let mut parts = vec![id_image];
    let mut bd = LossBreakdown {
        id_image: g.item(id_image).as_f64(),
        ..Default::default()
    };
    if mode.uses_text_id() {
        let t = require(terms.id_text, "text id", mode)?;
        bd.id_text = g.item(t).as_f64();
        parts.push(g.scale(t, S::lit(weights.lambda_t)));
    }
    if mode.uses_dis() {
        let t = require(terms.dis, "association", mode)?;
        bd.dis = g.item(t).as_f64();
        parts.push(g.scale(t, S::lit(weights.lambda_dis)));
    }
    if mode.uses_rec() {
        let t = require(terms.rec, "reconstruction", mode)?;
        bd.rec = g.item(t).as_f64();
        parts.push(g.scale(t, S::lit(weights.lambda_rec)));
    }
    if mode.rank_variant().is_some() {
        let t = require(terms.rank, "ranking", mode)?;
        bd.rank = g.item(t).as_f64();
        parts.push(t);
    }
    let total = g.add_n(&parts);
    bd.total = g.item(total).as_f64();
    Ok((total, bd))
}
