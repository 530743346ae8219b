//! Long-tail rebalancing: LVIS repeat-factor oversampling, bi-level
//! sampling (BLS), and the triplet-level LTD dropout used by RAS.
//!
//! Categories for the image-level samplers are predicate classes.

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exemplar::{ExemplarItem, ExemplarSet};
use crate::graph::{Predicate, SceneGraph, TripletLabel};
use crate::ras::TripletUniverse;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("triplet universe is empty")]
    EmptyUniverse,
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
}

impl SamplingError {
    pub fn code(&self) -> &'static str {
        match self {
            SamplingError::EmptyUniverse => "EmptyUniverse",
            SamplingError::EmptyBuffer => "EmptyBuffer",
            SamplingError::InvalidAlpha(_) => "InvalidAlpha",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtdConfig {
    pub alpha: f64,
}

impl Default for LtdConfig {
    fn default() -> Self {
        Self { alpha: 0.7 }
    }
}

/// Per-label dropout rates, in universe order.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutTable {
    pub rates: IndexMap<TripletLabel, f64>,
}

impl DropoutTable {
    pub fn rate(&self, label: &TripletLabel) -> f64 {
        self.rates.get(label).copied().unwrap_or(0.0)
    }

    pub fn sum(&self) -> f64 {
        self.rates.values().sum()
    }
}

/// `d_k = f_k / sum(f) * alpha`.
pub fn ltd_rates(u: &TripletUniverse, cfg: &LtdConfig) -> Result<DropoutTable, SamplingError> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(SamplingError::InvalidAlpha(cfg.alpha));
    }
    if u.is_empty() {
        return Err(SamplingError::EmptyUniverse);
    }
    let total: u64 = u.iter().map(|(_, e)| e.frequency).sum();
    let rates = u.iter().map(|(l, e)| (*l, scaled_share(e.frequency, cfg.alpha, total))).collect();
    Ok(DropoutTable { rates })
}

/// `alpha` as `num / 10^k` from its shortest decimal rendering.
fn decimal_fraction(alpha: f64) -> Option<(u128, u128)> {
    let text = format!("{alpha}");
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    if frac.len() > 18 || int.starts_with('-') {
        return None;
    }
    let num: u128 = format!("{int}{frac}").parse().ok()?;
    Some((num, 10u128.pow(frac.len() as u32)))
}

/// `f * alpha / total`, rounded once. With alpha read as its decimal
/// fraction the numerator and denominator are exact integers; when they
/// fit in 53 bits a single float division rounds the exact quotient.
fn scaled_share(f: u64, alpha: f64, total: u64) -> f64 {
    const EXACT: u128 = 1 << 53;
    if let Some((num, den)) = decimal_fraction(alpha) {
        let (n, d) = (f as u128 * num, total as u128 * den);
        if n < EXACT && d < EXACT {
            return n as f64 / d as f64;
        }
    }
    f as f64 * alpha / total as f64
}

/// Keeps each label independently with probability `1 - d_k`. Output is in
/// universe order.
pub fn ltd_sample<R: Rng + ?Sized>(u: &TripletUniverse, rates: &DropoutTable, rng: &mut R) -> Vec<TripletLabel> {
    u.labels().filter(|l| rng.gen::<f64>() >= rates.rate(l)).copied().collect()
}

/// `r(I) = max over predicates c in I of max(1, sqrt(t / f_c))`, with `f_c`
/// the fraction of images containing `c`.
pub fn lvis_repeat_factors(graphs: &[SceneGraph], threshold: f64) -> Vec<f64> {
    let mut images_with: HashMap<Predicate, usize> = HashMap::new();
    let per_image: Vec<HashSet<Predicate>> =
        graphs.iter().map(|g| g.relations.iter().map(|r| r.predicate).collect()).collect();
    for set in &per_image {
        for p in set {
            *images_with.entry(*p).or_insert(0) += 1;
        }
    }
    let n = graphs.len().max(1) as f64;
    per_image
        .iter()
        .map(|set| {
            set.iter()
                .map(|p| (threshold / (images_with[p] as f64 / n)).sqrt().max(1.0))
                .fold(1.0, f64::max)
        })
        .collect()
}

/// Expands repeat factors into source indices: `floor(r)` copies plus one
/// more with probability `frac(r)`.
pub fn repeat_indices<R: Rng + ?Sized>(factors: &[f64], rng: &mut R) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &r) in factors.iter().enumerate() {
        let whole = r.floor();
        let mut copies = whole as usize;
        if rng.gen::<f64>() < r - whole {
            copies += 1;
        }
        out.extend(std::iter::repeat_n(i, copies));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvisParams {
    pub threshold: f64,
}

impl Default for LvisParams {
    fn default() -> Self {
        Self { threshold: 0.07 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlsParams {
    pub threshold: f64,
    pub gamma_d: f64,
    pub p_max: f64,
}

impl Default for BlsParams {
    fn default() -> Self {
        Self { threshold: 0.07, gamma_d: 0.05, p_max: 0.7 }
    }
}

/// Edge-drop probability per predicate:
/// `clamp(gamma_d * (f_c / f_median - 1), 0, p_max)` over instance counts.
pub fn bls_drop_probabilities(graphs: &[SceneGraph], params: &BlsParams) -> HashMap<Predicate, f64> {
    let mut counts: HashMap<Predicate, u64> = HashMap::new();
    for g in graphs {
        for r in &g.relations {
            *counts.entry(r.predicate).or_insert(0) += 1;
        }
    }
    let mut sorted: Vec<u64> = counts.values().copied().collect();
    sorted.sort_unstable();
    let median = match sorted.len() {
        0 => return HashMap::new(),
        n if n % 2 == 1 => sorted[n / 2] as f64,
        n => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
    };
    counts
        .into_iter()
        .map(|(p, c)| (p, (params.gamma_d * (c as f64 / median - 1.0)).clamp(0.0, params.p_max)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Resampler {
    Lvis(LvisParams),
    Bls(BlsParams),
}

/// Resampled graphs tagged with the index of their source graph. BLS
/// copies that lose every edge are dropped.
pub fn resample<R: Rng + ?Sized>(graphs: &[SceneGraph], method: &Resampler, rng: &mut R) -> Vec<(usize, SceneGraph)> {
    match method {
        Resampler::Lvis(p) => {
            let f = lvis_repeat_factors(graphs, p.threshold);
            repeat_indices(&f, rng).into_iter().map(|i| (i, graphs[i].clone())).collect()
        }
        Resampler::Bls(p) => {
            let f = lvis_repeat_factors(graphs, p.threshold);
            let drop = bls_drop_probabilities(graphs, p);
            let mut out = Vec::new();
            for i in repeat_indices(&f, rng) {
                let g = &graphs[i];
                let mut keep = Vec::with_capacity(g.relations.len());
                for r in &g.relations {
                    let pd = drop.get(&r.predicate).copied().unwrap_or(0.0);
                    keep.push(pd == 0.0 || rng.gen::<f64>() >= pd);
                }
                if keep.iter().all(|k| *k) {
                    out.push((i, g.clone()));
                } else if keep.iter().any(|k| *k) {
                    let mut g = g.clone();
                    let mut it = keep.into_iter();
                    g.relations.retain(|_| it.next().expect("one flag per edge"));
                    out.push((i, g));
                }
            }
            out
        }
    }
}

pub fn lvis_sample<R: Rng + ?Sized>(graphs: &[SceneGraph], params: &LvisParams, rng: &mut R) -> Vec<SceneGraph> {
    resample(graphs, &Resampler::Lvis(*params), rng).into_iter().map(|(_, g)| g).collect()
}

pub fn bls_sample<R: Rng + ?Sized>(graphs: &[SceneGraph], params: &BlsParams, rng: &mut R) -> Vec<SceneGraph> {
    resample(graphs, &Resampler::Bls(*params), rng).into_iter().map(|(_, g)| g).collect()
}

/// Runs a resampler with the buffer as the population.
pub fn apply_to_buffer<R: Rng + ?Sized>(
    e: &ExemplarSet,
    method: &Resampler,
    rng: &mut R,
) -> Result<ExemplarSet, SamplingError> {
    if e.is_empty() {
        return Err(SamplingError::EmptyBuffer);
    }
    let graphs: Vec<SceneGraph> = e.graphs().cloned().collect();
    let items = resample(&graphs, method, rng)
        .into_iter()
        .map(|(i, graph)| ExemplarItem { graph, ..e.items[i].clone() })
        .collect();
    Ok(ExemplarSet { items })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BBox, ObjectClass, ObjectNode, RelationEdge};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn universe(freqs: &[u64]) -> TripletUniverse {
        let mut u = TripletUniverse::new();
        for (i, &f) in freqs.iter().enumerate() {
            u.add(TripletLabel::new(i as u32, 0, i as u32 + 1), f, 1);
        }
        u
    }

    fn graph(id: usize, preds: &[u32]) -> SceneGraph {
        let objects = (0..=preds.len() as u32)
            .map(|n| ObjectNode {
                node_id: n,
                class: ObjectClass(0),
                bbox: BBox::new(n as f64, 0., 5., 5.).unwrap(),
            })
            .collect();
        let relations = preds
            .iter()
            .enumerate()
            .map(|(i, &p)| RelationEdge { subject: i as u32, predicate: Predicate(p), object: i as u32 + 1 })
            .collect();
        SceneGraph::new(format!("g{id}"), 100, 100, objects, relations).unwrap()
    }

    #[test]
    fn ltd_rate_examples() {
        let r = ltd_rates(&universe(&[90, 10]), &LtdConfig::default()).unwrap();
        let v: Vec<f64> = r.rates.values().copied().collect();
        assert_eq!(v, vec![0.63, 0.07]);
        let r = ltd_rates(&universe(&[5]), &LtdConfig::default()).unwrap();
        assert_eq!(r.rates.values().copied().collect::<Vec<_>>(), vec![0.7]);
        let r = ltd_rates(&universe(&[3; 8]), &LtdConfig::default()).unwrap();
        assert!(r.rates.values().all(|d| (d - 0.7 / 8.0).abs() < 1e-15));
        assert_eq!(ltd_rates(&TripletUniverse::new(), &LtdConfig::default()), Err(SamplingError::EmptyUniverse));
        assert_eq!(ltd_rates(&universe(&[1]), &LtdConfig { alpha: 1.5 }), Err(SamplingError::InvalidAlpha(1.5)));
    }

    #[test]
    fn decimal_alpha() {
        assert_eq!(decimal_fraction(0.7), Some((7, 10)));
        assert_eq!(decimal_fraction(1.0), Some((1, 1)));
        assert_eq!(decimal_fraction(0.125), Some((125, 1000)));
        assert_eq!(scaled_share(1, 0.7, 3), 7.0 / 30.0);
    }

    #[test]
    fn ltd_zero_rates_keep_everything() {
        let u = universe(&[4, 7, 1]);
        let r = ltd_rates(&u, &LtdConfig { alpha: 0.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(ltd_sample(&u, &r, &mut rng), u.labels().copied().collect::<Vec<_>>());
    }

    #[test]
    fn ltd_retention_matches_expectation() {
        let u = universe(&[90, 10]);
        let r = ltd_rates(&u, &LtdConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut kept = [0u32; 2];
        for _ in 0..10_000 {
            for l in ltd_sample(&u, &r, &mut rng) {
                kept[u.index_of(&l).unwrap()] += 1;
            }
        }
        assert!((kept[0] as f64 / 1e4 - 0.37).abs() < 0.02);
        assert!((kept[1] as f64 / 1e4 - 0.93).abs() < 0.02);
        let a: Vec<_> = (0..5).map(|_| ltd_sample(&u, &r, &mut ChaCha8Rng::seed_from_u64(4))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }

    proptest! {
        #[test]
        fn ltd_rates_sum_to_alpha(freqs in prop::collection::vec(1u64..10_000, 1..60), alpha in 0.0f64..=1.0) {
            let r = ltd_rates(&universe(&freqs), &LtdConfig { alpha }).unwrap();
            prop_assert!((r.sum() - alpha).abs() < 1e-9);
            prop_assert!(r.rates.values().all(|d| *d >= 0.0 && *d <= alpha + 1e-15));
        }

        #[test]
        fn ltd_rate_increases_with_frequency(freqs in prop::collection::vec(1u64..1000, 2..20), bump in 1u64..1000) {
            let base = ltd_rates(&universe(&freqs), &LtdConfig::default()).unwrap();
            let mut more = freqs.clone();
            more[0] += bump;
            let bumped = ltd_rates(&universe(&more), &LtdConfig::default()).unwrap();
            prop_assert!(bumped.rates[0] > base.rates[0]);
        }

        #[test]
        fn repeat_factors_at_least_one(preds in prop::collection::vec(prop::collection::vec(0u32..6, 1..4), 1..30), t in 0.0f64..1.0) {
            let graphs: Vec<SceneGraph> = preds.iter().enumerate().map(|(i, p)| graph(i, p)).collect();
            let f = lvis_repeat_factors(&graphs, t);
            prop_assert!(f.iter().all(|r| *r >= 1.0));
        }
    }

    #[test]
    fn ltd_lowers_head_to_tail_ratio() {
        let u = universe(&[80, 20]);
        let r = ltd_rates(&u, &LtdConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut kept = [0f64; 2];
        for _ in 0..5000 {
            for l in ltd_sample(&u, &r, &mut rng) {
                kept[u.index_of(&l).unwrap()] += u.frequency(&l) as f64;
            }
        }
        assert!(kept[0] / kept[1] < 80.0 / 20.0);
    }

    #[test]
    fn lvis_factor_examples() {
        // predicate 1 in 1 of 40 images: f = 0.025 = 0.1 / 4
        let mut graphs: Vec<SceneGraph> = (0..39).map(|i| graph(i, &[0])).collect();
        graphs.push(graph(39, &[1]));
        let f = lvis_repeat_factors(&graphs, 0.1);
        assert!((f[39] - 2.0).abs() < 1e-12);
        assert!(f[..39].iter().all(|r| *r == 1.0));
        assert!(lvis_repeat_factors(&graphs, 0.02).iter().all(|r| *r == 1.0));
    }

    #[test]
    fn fractional_repeat_averages_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n: usize = (0..4000).map(|_| repeat_indices(&[2.5], &mut rng).len()).sum();
        assert!((n as f64 / 4000.0 - 2.5).abs() < 0.1);
    }

    #[test]
    fn bls_drop_rule() {
        // predicate 0 has 10x the median count of the other classes
        let mut graphs = vec![graph(0, &[0; 10])];
        for p in 1..=4 {
            graphs.push(graph(p as usize, &[p]));
        }
        let d = bls_drop_probabilities(&graphs, &BlsParams::default());
        assert!((d[&Predicate(0)] - 0.45).abs() < 1e-12);
        assert_eq!(d[&Predicate(1)], 0.0);
    }

    #[test]
    fn uniform_population_is_identity() {
        let graphs: Vec<SceneGraph> = (0..9).map(|i| graph(i, &[(i % 3) as u32])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(bls_sample(&graphs, &BlsParams::default(), &mut rng), graphs);
        assert_eq!(lvis_sample(&graphs, &LvisParams::default(), &mut rng), graphs);
    }

    #[test]
    fn bls_is_seeded() {
        let mut graphs: Vec<SceneGraph> = (0..30).map(|i| graph(i, &[0, 0, 1])).collect();
        graphs.push(graph(30, &[2]));
        let a = bls_sample(&graphs, &BlsParams::default(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = bls_sample(&graphs, &BlsParams::default(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    fn buffer(graphs: Vec<SceneGraph>) -> ExemplarSet {
        ExemplarSet {
            items: graphs
                .into_iter()
                .map(|g| ExemplarItem { image_id: g.image_id.clone(), image_path: None, graph: g, provenance: None, bytes: 1 })
                .collect(),
        }
    }

    #[test]
    fn buffer_resampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let uniform = buffer((0..6).map(|i| graph(i, &[(i % 2) as u32])).collect());
        assert_eq!(apply_to_buffer(&uniform, &Resampler::Lvis(LvisParams::default()), &mut rng).unwrap(), uniform);

        let mut g: Vec<SceneGraph> = (0..49).map(|i| graph(i, &[0])).collect();
        g.push(graph(49, &[1]));
        let tailed = buffer(g);
        for method in [
            Resampler::Lvis(LvisParams { threshold: 0.2 }),
            Resampler::Bls(BlsParams { threshold: 0.2, ..Default::default() }),
        ] {
            let out = apply_to_buffer(&tailed, &method, &mut rng).unwrap();
            let tail = out.items.iter().filter(|i| i.image_id == "g49").count();
            assert!(tail > 1, "{method:?}");
        }
        assert_eq!(
            apply_to_buffer(&ExemplarSet::default(), &Resampler::Lvis(LvisParams::default()), &mut rng),
            Err(SamplingError::EmptyBuffer)
        );
    }
}
