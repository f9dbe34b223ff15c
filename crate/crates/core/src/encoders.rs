//! Visual encoder (conv stack → feature map Ψ → ψ̄ → φ) and the LSTM text
//! encoder producing description and phrase features.

use rand::Rng;

use crate::diffcore::{Conv2dSpec, Graph, NodeId, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

const CONV: Conv2dSpec = Conv2dSpec { stride: 2, pad: 1 };

/// Three 3×3 stride-2 tanh conv blocks, a 1×1 conv to `d` channels giving the
/// feature map, and a linear projection of the bin mean.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    blocks: Vec<(ParamId, ParamId)>,
    psi: (ParamId, ParamId),
    phi: (ParamId, ParamId),
    pub image_size: (usize, usize),
    pub grid: (usize, usize),
    pub d: usize,
    pub d_out: usize,
}

/// Nodes produced by [`VisualEncoder::forward`].
#[derive(Debug, Clone, Copy)]
pub struct VisualOutput {
    /// `[K, d]`, bins in row-major grid order.
    pub psi: NodeId,
    pub grid: (usize, usize),
    /// `[d]`, mean over bins.
    pub psi_bar: NodeId,
    /// `[d_out]`.
    pub phi: NodeId,
}

impl VisualEncoder {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        image_size: (usize, usize),
        widths: [usize; 3],
        d: usize,
        d_out: usize,
    ) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut c_in = 3;
        let (mut h, mut w) = image_size;
        for (i, &c) in widths.iter().enumerate() {
            let wid = store.add_glorot(&format!("visual/conv{}/w", i + 1), &[c, c_in, 3, 3], c_in * 9, c * 9, rng)?;
            let bid = store.add_zeros(&format!("visual/conv{}/b", i + 1), &[c])?;
            blocks.push((wid, bid));
            c_in = c;
            (h, w) = crate::diffcore::graph::conv_out_dims(h, w, 3, 3, CONV);
        }
        let psi = (
            store.add_glorot("visual/psi/w", &[d, c_in, 1, 1], c_in, d, rng)?,
            store.add_zeros("visual/psi/b", &[d])?,
        );
        let phi = (
            store.add_glorot("visual/phi/w", &[d_out, d], d, d_out, rng)?,
            store.add_zeros("visual/phi/b", &[d_out])?,
        );
        if h * w < 4 {
            return Err(Error::Config(format!(
                "image {image_size:?} yields a {h}x{w} feature grid; need at least 4 bins"
            )));
        }
        Ok(Self {
            blocks,
            psi,
            phi,
            image_size,
            grid: (h, w),
            d,
            d_out,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `image` is `[H, W, 3]` with values in `[0, 1]`.
    pub fn forward<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        image: &Tensor<S>,
    ) -> Result<VisualOutput> {
        let (h, w) = self.image_size;
        if image.shape() != [h, w, 3] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured [{h}, {w}, 3]",
                image.shape()
            )));
        }
        let mut chw = vec![S::zero(); 3 * h * w];
        for (i, px) in image.data().chunks(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + i] = px[c];
            }
        }
        let mut x = g.constant(Tensor::new(vec![3, h, w], chw));
        for &(wid, bid) in &self.blocks {
            let wn = g.param(store, wid);
            let bn = g.param(store, bid);
            let y = g.conv2d(x, wn, bn, CONV);
            x = g.tanh(y);
        }
        let (pw, pb) = (g.param(store, self.psi.0), g.param(store, self.psi.1));
        let maps = g.conv2d(x, pw, pb, Conv2dSpec { stride: 1, pad: 0 });
        let k = self.num_bins();
        let flat = g.reshape(maps, &[self.d, k]);
        let psi = g.transpose(flat);
        let psi_bar = g.mean_rows(psi);
        let (fw, fb) = (g.param(store, self.phi.0), g.param(store, self.phi.1));
        let phi = g.affine(fw, psi_bar, fb);
        Ok(VisualOutput {
            psi,
            grid: self.grid,
            psi_bar,
            phi,
        })
    }
}

/// Averages neighbouring bins of a feature map. Returns the pooled map and
/// its grid.
pub fn pool_neighbors<S: Real>(
    g: &mut Graph<S>,
    psi: NodeId,
    grid: (usize, usize),
    window: (usize, usize),
) -> Result<(NodeId, (usize, usize))> {
    if window.0 == 0 || window.1 == 0 || window.0 > grid.0 || window.1 > grid.1 {
        return Err(Error::Config(format!(
            "pooling window {window:?} does not fit grid {grid:?}"
        )));
    }
    let out = (grid.0 / window.0, grid.1 / window.1);
    Ok((g.pool_bins(psi, grid, window), out))
}

/// Standard LSTM cell; gate order in the stacked weights is input, forget,
/// candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    w_x: ParamId,
    w_h: ParamId,
    b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        prefix: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_x: store.add_glorot(&format!("{prefix}/w_x"), &[4 * hidden, input], input, 4 * hidden, rng)?,
            w_h: store.add_glorot(&format!("{prefix}/w_h"), &[4 * hidden, hidden], hidden, 4 * hidden, rng)?,
            b: store.add_zeros(&format!("{prefix}/b"), &[4 * hidden])?,
            input,
            hidden,
        })
    }

    /// Sets the forget-gate bias, the second block of `b`.
    pub fn set_forget_bias<S: Real>(&self, store: &mut ParamStore<S>, value: f64) {
        for x in &mut store.value_mut(self.b).data_mut()[self.hidden..2 * self.hidden] {
            *x = S::lit(value);
        }
    }

    pub fn zero_state<S: Real>(&self, g: &mut Graph<S>) -> (NodeId, NodeId) {
        let h = g.constant(Tensor::zeros(&[self.hidden]));
        let c = g.constant(Tensor::zeros(&[self.hidden]));
        (h, c)
    }

    pub fn step<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: NodeId,
        h: NodeId,
        c: NodeId,
    ) -> (NodeId, NodeId) {
        let n = self.hidden;
        let (wx, wh, b) = (g.param(store, self.w_x), g.param(store, self.w_h), g.param(store, self.b));
        let zx = g.matvec(wx, x);
        let zh = g.matvec(wh, h);
        let z = g.add_n(&[zx, zh, b]);
        let zi = g.slice(z, 0, n);
        let zf = g.slice(z, n, n);
        let zg = g.slice(z, 2 * n, n);
        let zo = g.slice(z, 3 * n, n);
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}

/// Shared word embedding + LSTM with separate projections for whole
/// descriptions (`θᵍ`) and phrases (`θˡ`).
#[derive(Debug, Clone)]
pub struct TextEncoder {
    /// `[D, d_e]`; row `i` is the embedding of word `i`.
    pub embed: ParamId,
    pub lstm: Lstm,
    w_g: ParamId,
    b_g: ParamId,
    w_l: ParamId,
    b_l: ParamId,
    pub d: usize,
}

impl TextEncoder {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
        vocab_size: usize,
        d_e: usize,
        d_h: usize,
        d: usize,
    ) -> Result<Self> {
        let embed = store.add_glorot("text/embed", &[vocab_size, d_e], vocab_size, d_e, rng)?;
        let lstm = Lstm::new(store, rng, "text/lstm", d_e, d_h)?;
        Ok(Self {
            embed,
            lstm,
            w_g: store.add_glorot("text/global/w", &[d, d_h], d_h, d, rng)?,
            b_g: store.add_zeros("text/global/b", &[d])?,
            w_l: store.add_glorot("text/local/w", &[d, d_h], d_h, d, rng)?,
            b_l: store.add_zeros("text/local/b", &[d])?,
            d,
        })
    }

    /// Final LSTM hidden state over the word sequence.
    pub fn final_hidden<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        words: &[usize],
    ) -> Result<NodeId> {
        if words.is_empty() {
            return Err(Error::EmptySequence);
        }
        let table = g.param(store, self.embed);
        let (mut h, mut c) = self.lstm.zero_state(g);
        for &w in words {
            let e = g.embedding(table, w);
            (h, c) = self.lstm.step(g, store, e, h, c);
        }
        Ok(h)
    }

    /// `θᵍ(T) = W_g h_F(T) + b_g`.
    pub fn encode_text<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        words: &[usize],
    ) -> Result<NodeId> {
        let h = self.final_hidden(g, store, words)?;
        let (w, b) = (g.param(store, self.w_g), g.param(store, self.b_g));
        Ok(g.affine(w, h, b))
    }

    /// `θˡ(P) = W_l h_F(P) + b_l`.
    pub fn encode_phrase<S: Real>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        words: &[usize],
    ) -> Result<NodeId> {
        let h = self.final_hidden(g, store, words)?;
        let (w, b) = (g.param(store, self.w_l), g.param(store, self.b_l));
        Ok(g.affine(w, h, b))
    }

    pub fn global_projection(&self) -> (ParamId, ParamId) {
        (self.w_g, self.b_g)
    }

    pub fn local_projection(&self) -> (ParamId, ParamId) {
        (self.w_l, self.b_l)
    }
}
