#![allow(dead_code)]

use std::collections::BTreeMap;

use fsied::corpus::{build_manifest, materialize_splits, rank_classes, DatasetManifest, ManifestConfig, Splits};
use fsied::encoders::{Dims, TextBackend};
use fsied::knowledge::{resolve_all, Frame, FrameStore};
use fsied::protocol::{Ablation, TrainingConfig, Variant};
use fsied::synthetic::{desk_layout, generate, SyntheticSpec};

pub struct Desk {
    pub manifest: DatasetManifest,
    pub splits: Splits,
    pub frames: BTreeMap<String, Frame>,
}

pub fn desk(seed: u64, classes: usize, per_class: usize, layout: &ManifestConfig) -> Desk {
    let corpus = generate(&SyntheticSpec::small(classes, per_class, seed));
    let ranked = rank_classes(&corpus.mentions);
    let manifest = build_manifest(&ranked, layout, seed).unwrap();
    let splits = materialize_splits(&corpus.mentions, &manifest).unwrap();
    let store = FrameStore::from_frames(corpus.frames).unwrap();
    let labels: Vec<String> = ranked.iter().map(|(l, _)| l.clone()).collect();
    let frames = resolve_all(&labels, &store, &corpus.curated).into_iter().map(|(l, (f, _))| (l, f)).collect();
    Desk { manifest, splits, frames }
}

pub fn five_way(seed: u64) -> Desk {
    desk(seed, 32, 40, &desk_layout(5, 5))
}

pub fn config(variant: Variant, flags: Ablation, seed: u64, epochs: usize, d: usize) -> TrainingConfig {
    let mut c = TrainingConfig::for_variant(variant, flags);
    c.seed = seed;
    c.epochs = epochs;
    c.dims = Dims { d_ctx: d, d };
    c
}

pub fn backend(c: &TrainingConfig) -> TextBackend {
    TextBackend::toy(c.seed, c.dims.d_ctx)
}
