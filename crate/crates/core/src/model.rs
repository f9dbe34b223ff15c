//! The full network: visual and text encoders plus all loss heads, and the
//! per-batch loss computation used by training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::association::{
    aggregate_feature, attention_weights, decode_phrase_nll, id_loss_image, id_loss_text, joint_rep, loss_dis,
    loss_rank, loss_rec, total_loss, AttentionHead, ClassifierHead, Decoder, LossBreakdown, LossTerms, LossWeights,
    Mode, ScoreHead,
};
use crate::datagen::{BatchPlan, DataTuple};
use crate::diffcore::{graph, Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::encoders::{pool_neighbors, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::textpipe::{tokenize, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub conv_widths: [usize; 3],
    /// Feature-map channels; also the description and phrase feature size.
    pub d: usize,
    /// Identity feature size used for retrieval.
    pub d_out: usize,
    pub d_e: usize,
    pub d_h: usize,
    pub pool_window: (usize, usize),
    pub vocab_size: usize,
    pub identities: usize,
    /// Initial forget-gate bias of both LSTMs.
    pub forget_bias: f64,
    /// Multiplier on the Glorot bound of the word embeddings.
    pub embed_gain: f64,
    /// Score-head weights start at `-score_gain * |w|`; 0 keeps plain Glorot.
    pub score_gain: f64,
    /// Same for the attention head.
    pub attention_gain: f64,
    /// Multiplier on the decoder input projection.
    pub decoder_in_gain: f64,
    /// Learning-rate multiplier for the language side: text encoder, text
    /// classifier, score and attention heads, decoder.
    pub language_lr: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 32),
            conv_widths: [8, 16, 32],
            d: 64,
            d_out: 64,
            d_e: 32,
            d_h: 32,
            pool_window: (2, 2),
            vocab_size: 3,
            identities: 1,
            forget_bias: 1.0,
            embed_gain: 6.0,
            score_gain: 30.0,
            attention_gain: 1.0,
            decoder_in_gain: 4.0,
            language_lr: 1.0,
        }
    }
}

fn is_language_param(name: &str) -> bool {
    ["text/", "decoder/", "head/id_text", "head/score", "head/attention"]
        .iter()
        .any(|p| name.starts_with(p))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub classifier: ClassifierHead,
    pub score: ScoreHead,
    pub attention: AttentionHead,
    pub decoder: Decoder,
}

/// Word indices of a description and of its phrases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedText {
    pub words: Vec<usize>,
    /// Phrase words, for the phrase encoder.
    pub phrases: Vec<Vec<usize>>,
    /// `<start> phrase <end>`, for the decoder.
    pub targets: Vec<Vec<usize>>,
}

impl PreparedText {
    pub fn new(text: &str, phrases: &[Vec<String>], vocab: &Vocab) -> Self {
        Self {
            words: vocab.encode(&tokenize(text)),
            phrases: phrases.iter().map(|p| vocab.encode(p)).collect(),
            targets: phrases.iter().map(|p| vocab.encode_with_bounds(p)).collect(),
        }
    }

    pub fn from_tuple(t: &DataTuple, vocab: &Vocab) -> Self {
        let phrases: Vec<Vec<String>> = t
            .phrases
            .iter()
            .map(|p| p.words().map(str::to_string).collect())
            .collect();
        Self::new(&t.text, &phrases, vocab)
    }
}

/// Training tuples converted once to tensors and word indices.
#[derive(Debug, Clone)]
pub struct PreparedSplit<S: Real> {
    pub images: Vec<Tensor<S>>,
    pub texts: Vec<PreparedText>,
    pub labels: Vec<usize>,
}

impl<S: Real> PreparedSplit<S> {
    pub fn new(tuples: &[DataTuple], vocab: &Vocab) -> Self {
        Self {
            images: tuples.iter().map(|t| t.image.to_tensor()).collect(),
            texts: tuples.iter().map(|t| PreparedText::from_tuple(t, vocab)).collect(),
            labels: tuples.iter().map(|t| t.label).collect(),
        }
    }
}

impl Model {
    /// Registers every parameter, in a fixed order, whatever the mode.
    pub fn new<S: Real>(config: ModelConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        if config.identities == 0 || config.vocab_size < 3 {
            return Err(Error::Config("model needs at least one identity and a vocabulary".into()));
        }
        let visual = VisualEncoder::new(store, rng, config.image_size, config.conv_widths, config.d, config.d_out)?;
        let (gh, gw) = visual.grid;
        if config.pool_window.0 > gh || config.pool_window.1 > gw || config.pool_window.0 * config.pool_window.1 == 0 {
            return Err(Error::Config(format!(
                "pooling window {:?} does not fit the {gh}x{gw} feature grid",
                config.pool_window
            )));
        }
        let text = TextEncoder::new(store, rng, config.vocab_size, config.d_e, config.d_h, config.d)?;
        let classifier = ClassifierHead::new(store, rng, config.identities, config.d_out, config.d)?;
        let score = ScoreHead::new(store, rng, "head/score", config.d)?;
        let attention = AttentionHead::new(store, rng, "head/attention", config.d)?;
        let decoder = Decoder::new(store, rng, config.vocab_size, config.d, config.d_e, config.d_h)?;
        text.lstm.set_forget_bias(store, config.forget_bias);
        decoder.lstm.set_forget_bias(store, config.forget_bias);
        for x in store.value_mut(text.embed).data_mut() {
            *x *= S::lit(config.embed_gain);
        }
        if config.score_gain != 0.0 {
            score.make_distance_like(store, config.score_gain);
        }
        if config.attention_gain != 0.0 {
            attention.make_distance_like(store, config.attention_gain);
        }
        decoder.scale_input(store, config.decoder_in_gain);
        let language: Vec<ParamId> = store.ids().filter(|&id| is_language_param(store.name(id))).collect();
        for id in language {
            store.set_lr_scale(id, config.language_lr);
        }
        Ok(Self {
            config,
            visual,
            text,
            classifier,
            score,
            attention,
            decoder,
        })
    }

    /// Builds all loss terms `mode` needs for one batch and combines them.
    pub fn batch_loss<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        data: &PreparedSplit<S>,
        plan: &BatchPlan,
        mode: Mode,
        weights: &LossWeights,
    ) -> Result<(NodeId, LossBreakdown)> {
        let terms = self.batch_terms(g, store, data, plan, mode, weights.margin)?;
        total_loss(g, &terms, weights, mode)
    }

    /// The individual loss terms `mode` needs for one batch, unweighted.
    pub fn batch_terms<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        data: &PreparedSplit<S>,
        plan: &BatchPlan,
        mode: Mode,
        margin: f64,
    ) -> Result<LossTerms> {
        let labels: Vec<usize> = plan.tuples.iter().map(|&t| data.labels[t]).collect();
        let visual = plan
            .tuples
            .iter()
            .map(|&t| self.visual.forward(g, store, &data.images[t]))
            .collect::<Result<Vec<_>>>()?;
        let phi: Vec<NodeId> = visual.iter().map(|v| v.phi).collect();
        let psi_bar: Vec<NodeId> = visual.iter().map(|v| v.psi_bar).collect();

        let mut terms = LossTerms {
            id_image: Some(id_loss_image(g, store, &self.classifier, &phi, &labels)?),
            ..Default::default()
        };

        let needs_global = mode.uses_text_id() || mode.uses_dis() || mode.rank_variant().is_some();
        if needs_global {
            let text_count = if mode.uses_dis() { plan.texts.len() } else { plan.tuples.len() };
            let theta = plan.texts[..text_count]
                .iter()
                .map(|&t| self.text.encode_text(g, store, &data.texts[t].words))
                .collect::<Result<Vec<_>>>()?;
            let own = &theta[..plan.tuples.len()];
            if mode.uses_text_id() {
                terms.id_text = Some(id_loss_text(g, store, &self.classifier, own, &labels)?);
            }
            if mode.uses_dis() {
                let pairs: Vec<(NodeId, NodeId, bool)> = plan
                    .pairs
                    .iter()
                    .map(|p| (psi_bar[p.image], theta[p.text], p.positive))
                    .collect();
                terms.dis = Some(loss_dis(g, store, &self.score, &pairs)?);
            }
            if let Some(variant) = mode.rank_variant() {
                terms.rank = Some(loss_rank(g, &psi_bar, own, &labels, variant, margin)?);
            }
        }

        if mode.uses_rec() {
            let mut per_tuple = Vec::with_capacity(plan.tuples.len());
            for (slot, &t) in plan.tuples.iter().enumerate() {
                let text = &data.texts[t];
                let mut nlls = Vec::with_capacity(text.phrases.len());
                if !text.phrases.is_empty() {
                    let v = &visual[slot];
                    let (pooled, _) = pool_neighbors(g, v.psi, v.grid, self.config.pool_window)?;
                    for (words, targets) in text.phrases.iter().zip(&text.targets) {
                        let theta_l = self.text.encode_phrase(g, store, words)?;
                        let r = attention_weights(g, store, &self.attention, pooled, theta_l);
                        let agg = aggregate_feature(g, pooled, r)?;
                        nlls.push(decode_phrase_nll(g, store, &self.decoder, self.text.embed, agg, targets)?);
                    }
                }
                per_tuple.push(nlls);
            }
            terms.rec = Some(loss_rec(g, &per_tuple));
        }
        Ok(terms)
    }

    /// Identity feature `φ` of one image; the only path used for re-id.
    pub fn image_feature<S: Real>(&self, store: &ParamStore<S>, image: &Tensor<S>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.visual.forward(&mut g, store, image)?;
        Ok(g.value(out.phi).to_f64())
    }

    /// Bin mean `ψ̄` of one image.
    pub fn image_global<S: Real>(&self, store: &ParamStore<S>, image: &Tensor<S>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.visual.forward(&mut g, store, image)?;
        Ok(g.value(out.psi_bar).to_f64())
    }

    /// Description feature `θᵍ`.
    pub fn text_feature<S: Real>(&self, store: &ParamStore<S>, words: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let t = self.text.encode_text(&mut g, store, words)?;
        Ok(g.value(t).to_f64())
    }

    /// Relevance score `s(I, T)` from precomputed `ψ̄` and `θᵍ`.
    pub fn relevance<S: Real>(&self, store: &ParamStore<S>, psi_bar: &[f64], theta: &[f64]) -> f64 {
        let w = store.value(self.score.w).to_f64();
        let b = store.value(self.score.b).to_f64()[0];
        let z: f64 = psi_bar
            .iter()
            .zip(theta)
            .zip(&w)
            .map(|((a, t), w)| w * (a - t) * (a - t))
            .sum::<f64>()
            + b;
        graph::sigmoid(z)
    }

    /// Attention weights of a phrase over the pooled bins of an image, with
    /// the pooled grid shape.
    pub fn phrase_attention<S: Real>(
        &self,
        store: &ParamStore<S>,
        image: &Tensor<S>,
        phrase: &[usize],
    ) -> Result<(Vec<f64>, (usize, usize))> {
        let mut g = Graph::new();
        let v = self.visual.forward(&mut g, store, image)?;
        let (pooled, grid) = pool_neighbors(&mut g, v.psi, v.grid, self.config.pool_window)?;
        let theta_l = self.text.encode_phrase(&mut g, store, phrase)?;
        let r = attention_weights(&mut g, store, &self.attention, pooled, theta_l);
        Ok((g.value(r).to_f64(), grid))
    }

    /// Pixel rectangle covered by each pooled bin, row-major. Trailing
    /// feature rows and columns merge into the last bin, and trailing pixel
    /// rows and columns into the last feature cell.
    pub fn pooled_bin_pixels(&self) -> Vec<((usize, usize), (usize, usize))> {
        let (h, w) = self.config.image_size;
        let (gh, gw) = self.visual.grid;
        let (wh, ww) = self.config.pool_window;
        let (ph, pw) = (gh / wh, gw / ww);
        let cell_h = h / gh;
        let cell_w = w / gw;
        let span = |i: usize, n: usize, win: usize, cell: usize, total: usize| {
            let start = i * win * cell;
            let end = if i + 1 == n { total } else { (i + 1) * win * cell };
            (start, end)
        };
        let mut out = Vec::with_capacity(ph * pw);
        for r in 0..ph {
            for c in 0..pw {
                out.push((span(r, ph, wh, cell_h, h), span(c, pw, ww, cell_w, w)));
            }
        }
        out
    }
}

/// Free-standing joint representation on plain vectors, for inspection.
pub fn joint_representation(psi_bar: &[f64], theta: &[f64]) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(psi_bar.to_vec()));
    let b = g.constant(Tensor::vector(theta.to_vec()));
    let j = joint_rep(&mut g, a, b);
    g.value(j).data().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{compose_batch, gen_dataset, BatchConfig, DataConfig};
    use crate::textpipe::Lexicon;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (crate::datagen::Dataset, ModelConfig) {
        let ds = gen_dataset(
            &DataConfig {
                n_train_ids: 6,
                n_test_ids: 2,
                images_per_id: 2,
                ..Default::default()
            },
            &Lexicon::default(),
        )
        .unwrap();
        let cfg = ModelConfig {
            conv_widths: [2, 3, 4],
            d: 4,
            d_out: 3,
            d_e: 3,
            d_h: 3,
            vocab_size: ds.vocab.len(),
            identities: 6,
            ..Default::default()
        };
        (ds, cfg)
    }

    #[test]
    fn same_seed_same_init() {
        let (_, cfg) = tiny();
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        Model::new(cfg, &mut a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Model::new(cfg, &mut b, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn init_adjustments_applied() {
        let (_, cfg) = tiny();
        let cfg = ModelConfig {
            forget_bias: 1.5,
            language_lr: 3.0,
            ..cfg
        };
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let h = cfg.d_h;
        for name in ["text/lstm/b", "decoder/lstm/b"] {
            let b = store.value(store.find(name).unwrap()).data().to_vec();
            assert!(b[..h].iter().chain(&b[2 * h..]).all(|&x| x == 0.0));
            assert!(b[h..2 * h].iter().all(|&x| x == 1.5));
        }
        assert!(store.value(model.score.w).data().iter().all(|&x| x <= 0.0));
        assert!(store.value(model.attention.w).data().iter().all(|&x| x <= 0.0));
        for p in store.iter() {
            let expected = if p.name.starts_with("visual/") || p.name == "head/id_image" { 1.0 } else { 3.0 };
            assert_eq!(p.lr_scale, expected, "{}", p.name);
        }
    }

    #[test]
    fn every_mode_yields_consistent_breakdown() {
        let (ds, cfg) = tiny();
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let data = PreparedSplit::<f64>::new(&ds.train, &ds.vocab);
        let plan = compose_batch(
            &data.labels,
            &BatchConfig {
                persons: 3,
                tuples_per_person: 2,
                negs_per_image: 3,
            },
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let w = LossWeights::default();
        for mode in Mode::ALL {
            let mut g = Graph::new();
            let (loss, bd) = model.batch_loss(&mut g, &store, &data, &plan, mode, &w).unwrap();
            assert!((g.item(loss) - bd.total).abs() < 1e-9);
            assert!((bd.recombine(&w, mode) - bd.total).abs() < 1e-9);
            assert_eq!(bd.id_text != 0.0, mode.uses_text_id(), "{mode}");
            assert_eq!(bd.dis != 0.0, mode.uses_dis(), "{mode}");
            assert_eq!(bd.rec != 0.0, mode.uses_rec(), "{mode}");
            g.backward(loss).unwrap();
        }
    }

    #[test]
    fn pooled_bins_tile_the_image() {
        let (_, cfg) = tiny();
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let bins = model.pooled_bin_pixels();
        assert_eq!(bins.len(), 8);
        assert_eq!(bins[0], ((0, 16), (0, 16)));
        assert_eq!(bins[7], ((48, 64), (16, 32)));
        let area: usize = bins.iter().map(|(r, c)| (r.1 - r.0) * (c.1 - c.0)).sum();
        assert_eq!(area, 64 * 32);
    }

    #[test]
    fn relevance_matches_graph_score() {
        let (ds, cfg) = tiny();
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let t = &ds.train[0];
        let img = t.image.to_tensor::<f64>();
        let words = PreparedText::from_tuple(t, &ds.vocab).words;
        let psi = model.image_global(&store, &img).unwrap();
        let theta = model.text_feature(&store, &words).unwrap();
        let fast = model.relevance(&store, &psi, &theta);

        let mut g = Graph::new();
        let v = model.visual.forward(&mut g, &store, &img).unwrap();
        let th = model.text.encode_text(&mut g, &store, &words).unwrap();
        let j = joint_rep(&mut g, v.psi_bar, th);
        let s = crate::association::relevance_score(&mut g, &store, &model.score, j);
        assert!((g.item(s) - fast).abs() < 1e-12);
    }
}
