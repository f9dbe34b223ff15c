//! Image-only evaluation must never touch description text.

use std::cell::Cell;

use lingrid::config::RunConfig;
use lingrid::datagen::{gen_dataset, DataConfig, Image, Split, TupleSource};
use lingrid::pipeline::{evaluate, init_model, RunManifest};
use lingrid::textpipe::Lexicon;
use lingrid::Result;

struct Counting<'a> {
    inner: &'a dyn TupleSource,
    images: Cell<usize>,
    texts: Cell<usize>,
}

impl TupleSource for Counting<'_> {
    fn indices(&self, split: Split) -> Vec<usize> {
        self.inner.indices(split)
    }

    fn label(&self, index: usize) -> usize {
        self.inner.label(index)
    }

    fn image(&self, index: usize) -> Result<Image> {
        self.images.set(self.images.get() + 1);
        self.inner.image(index)
    }

    fn text(&self, index: usize) -> Result<String> {
        self.texts.set(self.texts.get() + 1);
        self.inner.text(index)
    }
}

fn small_config() -> RunConfig {
    RunConfig {
        data: DataConfig {
            n_train_ids: 8,
            n_test_ids: 4,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn evaluation_reads_images_but_no_text() {
    let cfg = small_config();
    let ds = gen_dataset(&cfg.data, &Lexicon::default()).unwrap();
    let run = init_model(&cfg, &ds).unwrap();
    let counting = Counting {
        inner: &ds,
        images: Cell::new(0),
        texts: Cell::new(0),
    };
    evaluate(&run, &counting).unwrap();
    assert_eq!(counting.images.get(), ds.query.len() + ds.gallery.len());
    assert_eq!(counting.texts.get(), 0);
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let manifest = RunManifest {
        config: cfg.to_map(),
        dataset_hash: "ab".repeat(32),
        seed: 3,
        mode: cfg.mode,
        metrics: None,
        wall_clock_secs: 1.25,
    };
    let path = dir.path().join("manifest.json");
    manifest.save(&path).unwrap();
    assert_eq!(RunManifest::load(&path).unwrap(), manifest);
}
