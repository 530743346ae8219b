#![allow(dead_code)]

use std::path::{Path, PathBuf};

use csegg::dataset::Dataset;
use csegg::protocols::{build_scenario, ScenarioKind, ScenarioManifest};
use csegg::runner::RunConfig;
use csegg::synth::{generate, SynthConfig};

pub struct Fixture {
    pub dataset: Dataset,
    pub dataset_dir: PathBuf,
    pub scenario: PathBuf,
}

/// Writes a synthetic dataset and one scenario manifest under `dir`.
pub fn fixture(dir: &Path, synth: &SynthConfig, kind: ScenarioKind, seed: u64) -> Fixture {
    let dataset = generate(synth);
    let dataset_dir = dir.join("data");
    dataset.write(&dataset_dir).unwrap();
    let scenario = build_scenario(&dataset, kind, seed).unwrap();
    let path = dir.join(format!("{kind}.json"));
    ScenarioManifest::from_scenario(&scenario, &dataset.vocab).write(&path).unwrap();
    Fixture { dataset, dataset_dir, scenario: path }
}

pub fn small(images: usize) -> SynthConfig {
    SynthConfig { images, ..Default::default() }
}

pub fn config(f: &Fixture, strategy: &str, predictor: &str) -> RunConfig {
    RunConfig {
        dataset: f.dataset_dir.clone(),
        scenario: f.scenario.clone(),
        strategy: strategy.parse().unwrap(),
        predictor: predictor.into(),
        ks: vec![20],
        ..Default::default()
    }
}
