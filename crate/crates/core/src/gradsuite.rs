//! Double-precision gradient verification: every graph op on random inputs,
//! and every training loss through the full model on random micro-batches.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::association::{LossTerms, Mode};
use crate::datagen::{compose_batch, gen_dataset, BatchConfig, DataConfig, RenderConfig};
use crate::diffcore::{grad_check, grad_check_params, Conv2dSpec, Graph, NodeId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PreparedSplit};
use crate::textpipe::Lexicon;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LossKind {
    IdImage,
    IdText,
    Dis,
    Rank,
    Rec,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::IdImage,
        LossKind::IdText,
        LossKind::Dis,
        LossKind::Rank,
        LossKind::Rec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::IdImage => "L_I",
            LossKind::IdText => "L_T",
            LossKind::Dis => "L_dis",
            LossKind::Rank => "L_rank",
            LossKind::Rec => "L_rec",
        }
    }

    /// A mode whose terms include this loss.
    fn mode(self) -> Mode {
        match self {
            LossKind::Rank => Mode::Rank2,
            _ => Mode::Proposed,
        }
    }

    fn pick(self, terms: &LossTerms) -> Option<NodeId> {
        match self {
            LossKind::IdImage => terms.id_image,
            LossKind::IdText => terms.id_text,
            LossKind::Dis => terms.dis,
            LossKind::Rank => terms.rank,
            LossKind::Rec => terms.rec,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteConfig {
    /// Random micro-batches per loss.
    pub batches: usize,
    /// Random input points per op.
    pub op_trials: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            batches: 10,
            op_trials: 20,
            eps: 1e-5,
            tolerance: TOLERANCE,
            coords_per_param: 6,
            seed: 0,
        }
    }
}

/// Worst relative error of one checked item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    /// Parameter or batch where the worst error occurred.
    pub location: String,
    pub checks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub ops: Vec<CheckResult>,
    pub losses: Vec<CheckResult>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.ops
            .iter()
            .chain(&self.losses)
            .filter(|r| !(r.worst <= self.tolerance))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (title, rows) in [("op", &self.ops), ("loss", &self.losses)] {
            for r in rows {
                let verdict = if r.worst <= self.tolerance { "ok" } else { "FAIL" };
                s.push_str(&format!(
                    "{title:<5} {:<16} worst {:.3e} over {:>3} checks ({}) {verdict}\n",
                    r.name, r.worst, r.checks, r.location
                ));
            }
        }
        s.push_str(&format!(
            "{} failure(s) at tolerance {:.0e} in {:.1}s\n",
            self.failures().len(),
            self.tolerance,
            self.seconds
        ));
        s
    }
}

type OpFn = fn(&mut Graph<f64>, NodeId) -> NodeId;

fn weighted_sum(g: &mut Graph<f64>, y: NodeId) -> NodeId {
    // Non-uniform weights so that errors cannot cancel in a plain sum.
    let n = g.value(y).len();
    let w = Tensor::from_f64(&[n], &(0..n).map(|i| 0.3 + 0.7 * ((i * 7919) % 13) as f64 / 13.0).collect::<Vec<_>>());
    let flat = g.reshape(y, &[n]);
    let w = g.constant(w);
    g.dot(flat, w)
}

/// Each op takes a flat 24-vector and returns a scalar built from it.
fn op_cases() -> Vec<(&'static str, OpFn)> {
    vec![
        ("add", |g, x| {
            let a = g.slice(x, 0, 12);
            let b = g.slice(x, 12, 12);
            let y = g.add(a, b);
            weighted_sum(g, y)
        }),
        ("sub", |g, x| {
            let a = g.slice(x, 0, 12);
            let b = g.slice(x, 12, 12);
            let y = g.sub(a, b);
            weighted_sum(g, y)
        }),
        ("mul", |g, x| {
            let a = g.slice(x, 0, 12);
            let b = g.slice(x, 12, 12);
            let y = g.mul(a, b);
            weighted_sum(g, y)
        }),
        ("scale", |g, x| {
            let y = g.scale(x, -1.7);
            weighted_sum(g, y)
        }),
        ("add_scalar", |g, x| {
            let a = g.slice(x, 0, 23);
            let s = g.slice(x, 23, 1);
            let y = g.add_scalar(a, s);
            weighted_sum(g, y)
        }),
        ("add_n", |g, x| {
            let parts: Vec<NodeId> = (0..3).map(|i| g.slice(x, i * 8, 8)).collect();
            let y = g.add_n(&parts);
            weighted_sum(g, y)
        }),
        ("sum_mean", |g, x| {
            let a = g.sum(x);
            let b = g.mean(x);
            let p = g.mul(a, b);
            g.add(p, a)
        }),
        ("dot", |g, x| {
            let a = g.slice(x, 0, 12);
            let b = g.slice(x, 12, 12);
            g.dot(a, b)
        }),
        ("matvec_affine", |g, x| {
            let w = g.slice(x, 0, 15);
            let w = g.reshape(w, &[3, 5]);
            let v = g.slice(x, 15, 5);
            let b = g.slice(x, 20, 3);
            let y = g.affine(w, v, b);
            weighted_sum(g, y)
        }),
        ("weighted_rows", |g, x| {
            let w = g.slice(x, 0, 4);
            let r = g.slice(x, 4, 20);
            let r = g.reshape(r, &[4, 5]);
            let y = g.weighted_rows(w, r);
            weighted_sum(g, y)
        }),
        ("mean_rows", |g, x| {
            let r = g.reshape(x, &[6, 4]);
            let y = g.mean_rows(r);
            weighted_sum(g, y)
        }),
        ("sub_row", |g, x| {
            let r = g.slice(x, 0, 20);
            let r = g.reshape(r, &[5, 4]);
            let v = g.slice(x, 20, 4);
            let y = g.sub_row(r, v);
            let sq = g.mul(y, y);
            weighted_sum(g, sq)
        }),
        ("embedding", |g, x| {
            let t = g.reshape(x, &[6, 4]);
            let a = g.embedding(t, 2);
            let b = g.embedding(t, 5);
            let c = g.embedding(t, 2);
            let y = g.add_n(&[a, b, c]);
            weighted_sum(g, y)
        }),
        ("transpose_reshape", |g, x| {
            let m = g.reshape(x, &[4, 6]);
            let t = g.transpose(m);
            let r = g.reshape(t, &[3, 8]);
            let s = g.slice(r, 0, 8);
            weighted_sum(g, s)
        }),
        ("conv2d", |g, x| {
            let img = g.slice(x, 0, 12);
            let img = g.reshape(img, &[1, 3, 4]);
            let k = g.slice(x, 12, 9);
            let k = g.reshape(k, &[1, 1, 3, 3]);
            let b = g.slice(x, 21, 1);
            let y = g.conv2d(img, k, b, Conv2dSpec { stride: 2, pad: 1 });
            let t = g.tanh(y);
            weighted_sum(g, t)
        }),
        ("pool_bins", |g, x| {
            let r = g.reshape(x, &[6, 4]);
            let y = g.pool_bins(r, (3, 2), (2, 2));
            let sq = g.mul(y, y);
            weighted_sum(g, sq)
        }),
        ("tanh", |g, x| {
            let y = g.tanh(x);
            weighted_sum(g, y)
        }),
        ("sigmoid", |g, x| {
            let y = g.sigmoid(x);
            weighted_sum(g, y)
        }),
        ("log_sigmoid", |g, x| {
            let y = g.log_sigmoid(x);
            weighted_sum(g, y)
        }),
        ("relu", |g, x| {
            let y = g.relu(x);
            weighted_sum(g, y)
        }),
        ("softmax", |g, x| {
            let y = g.softmax(x);
            weighted_sum(g, y)
        }),
        ("log_softmax_pick", |g, x| {
            let y = g.log_softmax(x);
            let a = g.pick(y, 3);
            let b = g.pick(y, 17);
            g.add(a, b)
        }),
        ("l2_normalize", |g, x| {
            let y = g.l2_normalize(x, 1e-12);
            weighted_sum(g, y)
        }),
        ("cross_entropy", |g, x| g.cross_entropy(x, 5)),
    ]
}

fn check_ops(cfg: &SuiteConfig) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    op_cases()
        .into_iter()
        .map(|(name, f)| {
            let mut worst = (0.0f64, 0usize);
            for trial in 0..cfg.op_trials {
                // Keep clear of the relu kink so central differences are valid.
                let point: Vec<f64> = (0..24)
                    .map(|_| {
                        let v: f64 = rng.gen_range(0.05..1.5);
                        if rng.gen_bool(0.5) {
                            -v
                        } else {
                            v
                        }
                    })
                    .collect();
                let err = grad_check(f, &Tensor::from_f64(&[24], &point), cfg.eps);
                if !(err <= worst.0) {
                    worst = (err, trial);
                }
            }
            CheckResult {
                name: name.to_string(),
                worst: worst.0,
                location: format!("trial {}", worst.1),
                checks: cfg.op_trials,
            }
        })
        .collect()
}

/// A tiny model and training split for one micro-batch.
struct MicroBatch {
    model: Model,
    store: ParamStore<f64>,
    data: PreparedSplit<f64>,
    plan: crate::datagen::BatchPlan,
}

fn micro_batch(seed: u64) -> Result<MicroBatch> {
    let data_cfg = DataConfig {
        n_train_ids: 4,
        n_test_ids: 2,
        images_per_id: 2,
        seed,
        render: RenderConfig {
            height: 32,
            width: 16,
            ..Default::default()
        },
        ..Default::default()
    };
    let ds = gen_dataset(&data_cfg, &Lexicon::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        image_size: ds.image_size(),
        conv_widths: [2, 3, 3],
        d: 4,
        d_out: 3,
        d_e: 3,
        d_h: 3,
        pool_window: (2, 2),
        vocab_size: ds.vocab.len(),
        identities: ds.num_train_identities(),
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Model::new(config, &mut store, &mut rng)?;
    // Non-zero biases and larger weights keep every path active.
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = if *v == 0.0 {
                rng.gen_range(-0.5..0.5)
            } else {
                *v * 2.0
            };
        }
    }
    let data = PreparedSplit::new(&ds.train, &ds.vocab);
    let batch = BatchConfig {
        persons: 2,
        tuples_per_person: 2,
        negs_per_image: 2,
    };
    let plan = compose_batch(&data.labels, &batch, &mut rng)?;
    Ok(MicroBatch {
        model,
        store,
        data,
        plan,
    })
}

fn check_loss(kind: LossKind, cfg: &SuiteConfig) -> Result<CheckResult> {
    let mut worst = (0.0f64, String::from("-"));
    for b in 0..cfg.batches {
        let seed = cfg.seed.wrapping_mul(1000) + b as u64 + 1;
        let MicroBatch {
            model,
            mut store,
            data,
            plan,
        } = micro_batch(seed)?;
        let report = grad_check_params(
            &mut store,
            |g, st| {
                let terms = model.batch_terms(g, st, &data, &plan, kind.mode(), 0.2)?;
                kind.pick(&terms)
                    .ok_or_else(|| Error::InvalidArgument(format!("{} not built", kind.name())))
            },
            cfg.eps,
            Some(cfg.coords_per_param),
        )?;
        if let Some((param, err)) = report.worst_param() {
            if !(*err <= worst.0) {
                worst = (*err, format!("batch {b}, {param}"));
            }
        }
    }
    Ok(CheckResult {
        name: kind.name().to_string(),
        worst: worst.0,
        location: worst.1,
        checks: cfg.batches,
    })
}

/// Runs the op checks and the per-loss model checks.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let start = Instant::now();
    let ops = check_ops(cfg);
    let losses = LossKind::ALL
        .iter()
        .map(|&k| check_loss(k, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        tolerance: cfg.tolerance,
        ops,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}
