//! Randomized decision forest over patch features.
//!
//! Trees are grown without bagging; each tree draws candidate features and
//! thresholds from its own ChaCha stream derived from `(seed, tree index)`.
//! Leaves keep the normalized label histogram and prediction averages the
//! reached leaves.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cloud::{CloudError, Label, NUM_CLASSES};
use crate::features::{FeatureVector, FEATURE_CONTRACT_VERSION, FEATURE_DIM};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Probability per trainable label, indexed by [`Label::class_index`].
pub type LabelDistribution = [f64; NUM_CLASSES];

const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training sample {0} has a non-trainable label")]
    UntrainableLabel(usize),
    #[error("training sample {0} has a non-finite feature")]
    NonFiniteFeature(usize),
    #[error("invalid forest parameter: {0}")]
    Parameter(String),
    #[error("feature {0} is not finite")]
    NonFiniteInput(usize),
    #[error("model uses feature contract {model}, this build computes {current}")]
    ContractMismatch { model: u32, current: u32 },
    #[error("model load error: {0}")]
    Load(String),
    #[error(transparent)]
    Io(#[from] CloudError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub num_trees: usize,
    pub max_depth: usize,
    pub candidates_per_node: usize,
    pub thresholds_per_candidate: usize,
    pub min_samples_split: usize,
    /// Weight samples by inverse class frequency in the gain computation.
    pub class_weighting: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            num_trees: 8,
            max_depth: 8,
            candidates_per_node: 4,
            thresholds_per_candidate: 10,
            min_samples_split: 2,
            class_weighting: false,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), ForestError> {
        let fail = |m: &str| Err(ForestError::Parameter(m.to_string()));
        if self.num_trees == 0 {
            return fail("num_trees must be >= 1");
        }
        if self.candidates_per_node == 0 || self.candidates_per_node > FEATURE_DIM {
            return fail("candidates_per_node must be in 1..=14");
        }
        if self.thresholds_per_candidate == 0 {
            return fail("thresholds_per_candidate must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Split,
    Leaf,
}

/// One entry of a tree's flat node array. Split nodes also carry the label
/// histogram of the samples that reached them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub kind: NodeKind,
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub distribution: LabelDistribution,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, x: &[f64; FEATURE_DIM]) -> &Node {
        let mut node = &self.nodes[0];
        while node.kind == NodeKind::Split {
            node = if x[node.feature] < node.threshold {
                &self.nodes[node.left]
            } else {
                &self.nodes[node.right]
            };
        }
        node
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &Tree, i: usize) -> usize {
            let n = &t.nodes[i];
            match n.kind {
                NodeKind::Leaf => 0,
                NodeKind::Split => 1 + rec(t, n.left).max(rec(t, n.right)),
            }
        }
        rec(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub dataset_sha256: String,
    pub num_samples: usize,
    pub params: ForestParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForestModel {
    pub format_version: u32,
    pub feature_contract_version: u32,
    pub labels: Vec<String>,
    pub num_trees: usize,
    pub max_depth: usize,
    pub trees: Vec<Tree>,
    pub training_meta: TrainingMeta,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<(FeatureVector, Label)>,
}

impl TrainingSet {
    pub fn new(samples: Vec<(FeatureVector, Label)>) -> Self {
        TrainingSet { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct Sample {
    x: [f64; FEATURE_DIM],
    class: usize,
}

fn entropy(hist: &[f64; NUM_CLASSES], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&h| h > 0.0)
        .map(|&h| {
            let p = h / total;
            -p * p.log2()
        })
        .sum()
}

struct TreeBuilder<'a> {
    samples: &'a [Sample],
    weights: [f64; NUM_CLASSES],
    params: &'a ForestParams,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn histogram(&self, idx: &[usize]) -> [f64; NUM_CLASSES] {
        let mut h = [0.0; NUM_CLASSES];
        for &i in idx {
            h[self.samples[i].class] += 1.0;
        }
        h
    }

    fn weighted(&self, counts: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
        let mut w = *counts;
        for (c, v) in w.iter_mut().enumerate() {
            *v *= self.weights[c];
        }
        w
    }

    /// Best `(gain, feature, threshold)` among the sampled candidates.
    fn best_split(&mut self, idx: &[usize], counts: &[f64; NUM_CLASSES]) -> Option<(f64, usize, f64)> {
        // Only features that vary in this node can split it.
        let mut ranges = Vec::new();
        for f in 0..FEATURE_DIM {
            let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = self.samples[i].x[f];
                (lo.min(v), hi.max(v))
            });
            if lo < hi {
                ranges.push((f, lo, hi));
            }
        }
        if ranges.is_empty() {
            return None;
        }
        let k = self.params.candidates_per_node.min(ranges.len());
        let mut picked: Vec<usize> = sample(&mut self.rng, ranges.len(), k).into_vec();
        picked.sort_unstable();

        let parent = self.weighted(counts);
        let total: f64 = parent.iter().sum();
        let h_parent = entropy(&parent, total);
        let mut best: Option<(f64, usize, f64)> = None;
        for p in picked {
            let (f, lo, hi) = ranges[p];
            let mut thresholds: Vec<f64> = (0..self.params.thresholds_per_candidate)
                .map(|_| self.rng.random_range(lo..hi))
                .collect();
            thresholds.sort_by(f64::total_cmp);
            for t in thresholds {
                let mut left = [0.0; NUM_CLASSES];
                for &i in idx {
                    let s = &self.samples[i];
                    if s.x[f] < t {
                        left[s.class] += 1.0;
                    }
                }
                let mut right = *counts;
                for c in 0..NUM_CLASSES {
                    right[c] -= left[c];
                }
                let (lw, rw) = (self.weighted(&left), self.weighted(&right));
                let (ls, rs): (f64, f64) = (lw.iter().sum(), rw.iter().sum());
                if ls <= 0.0 || rs <= 0.0 {
                    continue;
                }
                let gain = h_parent - (ls / total) * entropy(&lw, ls) - (rs / total) * entropy(&rw, rs);
                if best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, t));
                }
            }
        }
        best.filter(|&(g, _, _)| g > MIN_GAIN)
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let counts = self.histogram(&idx);
        let n = idx.len();
        let distribution = counts.map(|c| c / n as f64);
        let id = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf,
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            distribution,
            support: n,
        });
        let pure = counts.iter().filter(|&&c| c > 0.0).count() <= 1;
        if depth >= self.params.max_depth || n < self.params.min_samples_split.max(2) || pure {
            return id;
        }
        let Some((_, feature, threshold)) = self.best_split(&idx, &counts) else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.samples[i].x[feature] < threshold);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        let node = &mut self.nodes[id];
        node.kind = NodeKind::Split;
        node.feature = feature;
        node.threshold = threshold;
        node.left = left;
        node.right = right;
        id
    }
}

fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        for v in s.x {
            h.update(v.to_le_bytes());
        }
        h.update([s.class as u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains a forest. Sample order does not affect the result.
pub fn train_forest(data: &TrainingSet, params: &ForestParams) -> Result<ForestModel, ForestError> {
    params.validate()?;
    if data.is_empty() {
        return Err(ForestError::EmptyTrainingSet);
    }
    let mut samples = Vec::with_capacity(data.len());
    for (i, (x, label)) in data.samples.iter().enumerate() {
        let class = label.class_index().ok_or(ForestError::UntrainableLabel(i))?;
        if x.0.iter().any(|v| !v.is_finite()) {
            return Err(ForestError::NonFiniteFeature(i));
        }
        samples.push(Sample { x: x.0, class });
    }
    samples.sort_by(|a, b| {
        a.class.cmp(&b.class).then_with(|| {
            a.x.iter()
                .zip(&b.x)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });

    let mut weights = [1.0; NUM_CLASSES];
    if params.class_weighting {
        let mut counts = [0usize; NUM_CLASSES];
        for s in &samples {
            counts[s.class] += 1;
        }
        let present = counts.iter().filter(|&&c| c > 0).count() as f64;
        for c in 0..NUM_CLASSES {
            if counts[c] > 0 {
                weights[c] = samples.len() as f64 / (present * counts[c] as f64);
            }
        }
    }

    let trees: Vec<Tree> = (0..params.num_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let mut builder = TreeBuilder {
                samples: &samples,
                weights,
                params,
                rng,
                nodes: Vec::new(),
            };
            builder.build((0..samples.len()).collect(), 0);
            Tree { nodes: builder.nodes }
        })
        .collect();

    Ok(ForestModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_contract_version: FEATURE_CONTRACT_VERSION,
        labels: Label::TRAINABLE.iter().map(|l| l.name().to_string()).collect(),
        num_trees: params.num_trees,
        max_depth: params.max_depth,
        trees,
        training_meta: TrainingMeta {
            seed: params.seed,
            dataset_sha256: dataset_hash(&samples),
            num_samples: samples.len(),
            params: *params,
        },
    })
}

impl ForestModel {
    pub fn predict(&self, x: &FeatureVector) -> Result<LabelDistribution, ForestError> {
        if self.feature_contract_version != FEATURE_CONTRACT_VERSION {
            return Err(ForestError::ContractMismatch {
                model: self.feature_contract_version,
                current: FEATURE_CONTRACT_VERSION,
            });
        }
        if let Some(i) = x.0.iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFiniteInput(i));
        }
        let mut out = [0.0; NUM_CLASSES];
        for tree in &self.trees {
            let leaf = tree.leaf_for(&x.0);
            for c in 0..NUM_CLASSES {
                out[c] += leaf.distribution[c];
            }
        }
        let n = self.trees.len() as f64;
        Ok(out.map(|v| v / n))
    }

    pub fn predict_batch(&self, xs: &[FeatureVector]) -> Result<Vec<LabelDistribution>, ForestError> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ForestError> {
        // Check versions before the full parse so the error names them.
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ForestError::Load(e.to_string()))?;
        let version = |field: &str| -> Result<u64, ForestError> {
            raw.get(field)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| ForestError::Load(format!("missing or invalid field `{field}`")))
        };
        let fv = version("format_version")?;
        if fv != u64::from(MODEL_FORMAT_VERSION) {
            return Err(ForestError::Load(format!(
                "field `format_version` is {fv}, expected {MODEL_FORMAT_VERSION}"
            )));
        }
        let cv = version("feature_contract_version")?;
        if cv != u64::from(FEATURE_CONTRACT_VERSION) {
            return Err(ForestError::Load(format!(
                "field `feature_contract_version` is {cv}, expected {FEATURE_CONTRACT_VERSION}"
            )));
        }
        let model: ForestModel =
            serde_json::from_str(text).map_err(|e| ForestError::Load(e.to_string()))?;
        model.check_structure()?;
        Ok(model)
    }

    fn check_structure(&self) -> Result<(), ForestError> {
        let err = |m: String| Err(ForestError::Load(m));
        if self.trees.is_empty() || self.trees.len() != self.num_trees {
            return err(format!("field `trees` has {} entries, expected num_trees = {}", self.trees.len(), self.num_trees));
        }
        if self.labels.len() != NUM_CLASSES {
            return err(format!("field `labels` must list {NUM_CLASSES} labels"));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            if tree.nodes.is_empty() {
                return err(format!("trees[{t}].nodes is empty"));
            }
            for (i, n) in tree.nodes.iter().enumerate() {
                let here = format!("trees[{t}].nodes[{i}]");
                match n.kind {
                    NodeKind::Split => {
                        if n.feature >= FEATURE_DIM {
                            return err(format!("{here}.feature out of range"));
                        }
                        // Children come after their parent; this also rules out cycles.
                        if n.left <= i || n.right <= i || n.left >= tree.nodes.len() || n.right >= tree.nodes.len() {
                            return err(format!("{here}.left/right invalid"));
                        }
                    }
                    NodeKind::Leaf => {
                        let sum: f64 = n.distribution.iter().sum();
                        if n.distribution.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                            return err(format!("{here}.distribution is not normalized"));
                        }
                        if n.support == 0 {
                            return err(format!("{here}.support must be >= 1"));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ForestError> {
        fs::write(path, self.to_json()).map_err(|e| ForestError::Io(CloudError::io(path, e)))
    }

    pub fn load(path: &Path) -> Result<Self, ForestError> {
        let text = fs::read_to_string(path).map_err(|e| ForestError::Io(CloudError::io(path, e)))?;
        Self::from_json(&text)
    }
}

pub fn save_model(model: &ForestModel, path: &Path) -> Result<(), ForestError> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<ForestModel, ForestError> {
    ForestModel::load(path)
}

/// Index of the most probable label; ties go to the lower label id.
pub fn argmax(dist: &LabelDistribution) -> usize {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if dist[c] > dist[best] {
            best = c;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn fv(values: &[(usize, f64)]) -> FeatureVector {
        let mut v = [0.0; FEATURE_DIM];
        for &(i, x) in values {
            v[i] = x;
        }
        FeatureVector(v)
    }

    fn noisy_dataset(seed: u64, n: usize) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let class = rng.random_range(0..NUM_CLASSES);
                let mut v = [0.0; FEATURE_DIM];
                for (k, x) in v.iter_mut().enumerate() {
                    *x = rng.random::<f64>() + if k % 3 == class % 3 { class as f64 * 0.3 } else { 0.0 };
                }
                (FeatureVector(v), Label::TRAINABLE[class])
            })
            .collect();
        TrainingSet::new(samples)
    }

    fn leaf_model(leaves: &[LabelDistribution]) -> ForestModel {
        let data = TrainingSet::new(vec![(fv(&[]), Label::Floor)]);
        let mut m = train_forest(&data, &ForestParams { num_trees: leaves.len(), ..Default::default() }).unwrap();
        for (t, d) in m.trees.iter_mut().zip(leaves) {
            t.nodes[0].distribution = *d;
        }
        m
    }

    #[test]
    fn single_label_gives_single_leaves() {
        let data = TrainingSet::new(
            (0..50).map(|i| (fv(&[(0, i as f64), (5, -(i as f64))]), Label::Floor)).collect(),
        );
        let m = train_forest(&data, &ForestParams::default()).unwrap();
        for t in &m.trees {
            assert_eq!(t.nodes.len(), 1);
            assert_eq!(t.nodes[0].distribution, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn separable_by_height_at_depth_one() {
        let mut samples = Vec::new();
        for i in 0..100 {
            let h = i as f64 / 100.0;
            // Classes separated at 0.5 with a margin.
            let (x, label) = if i < 50 { (h * 0.8, Label::Floor) } else { (0.2 + h * 0.8, Label::Table) };
            samples.push((fv(&[(3, x)]), label));
        }
        let data = TrainingSet::new(samples.clone());
        let m = train_forest(&data, &ForestParams { max_depth: 1, ..Default::default() }).unwrap();
        for t in &m.trees {
            assert!(t.depth() <= 1);
        }
        for (x, label) in &samples {
            let d = m.predict(x).unwrap();
            assert_eq!(argmax(&d), label.class_index().unwrap());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = noisy_dataset(1, 300);
        let p = ForestParams { seed: 42, ..Default::default() };
        let a = train_forest(&data, &p).unwrap().to_json();
        let b = train_forest(&data, &p).unwrap().to_json();
        assert_eq!(a, b);
        let c = train_forest(&data, &ForestParams { seed: 43, ..p }).unwrap().to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn leaf_averaging() {
        let single = leaf_model(&[[0.2, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(single.predict(&fv(&[])).unwrap(), [0.2, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let pair = leaf_model(&[
            [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        assert_eq!(pair.predict(&fv(&[])).unwrap(), [0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bad_inputs() {
        let m = leaf_model(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!(matches!(m.predict(&fv(&[(2, f64::NAN)])), Err(ForestError::NonFiniteInput(2))));
        let mut old = m.clone();
        old.feature_contract_version += 1;
        assert!(matches!(old.predict(&fv(&[])), Err(ForestError::ContractMismatch { .. })));
        assert!(matches!(train_forest(&TrainingSet::default(), &ForestParams::default()), Err(ForestError::EmptyTrainingSet)));
        let unknown = TrainingSet::new(vec![(fv(&[]), Label::Unknown)]);
        assert!(matches!(train_forest(&unknown, &ForestParams::default()), Err(ForestError::UntrainableLabel(0))));
    }

    #[test]
    fn save_load_round_trip() {
        let data = noisy_dataset(2, 200);
        let m = train_forest(&data, &ForestParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&m, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, m);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = FeatureVector(std::array::from_fn(|_| rng.random_range(-1.0..3.0)));
            assert_eq!(m.predict(&x).unwrap(), loaded.predict(&x).unwrap());
        }
    }

    #[test]
    fn load_rejects_version_and_truncation() {
        let m = train_forest(&noisy_dataset(3, 50), &ForestParams::default()).unwrap();
        let mut bumped = m.clone();
        bumped.feature_contract_version += 1;
        match ForestModel::from_json(&bumped.to_json()) {
            Err(ForestError::Load(msg)) => assert!(msg.contains("feature_contract_version")),
            other => panic!("{other:?}"),
        }
        let text = m.to_json();
        match ForestModel::from_json(&text[..text.len() / 2]) {
            Err(ForestError::Load(msg)) => assert!(msg.contains("line"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn predictions_are_distributions(seed in any::<u64>(), n in 1usize..120, trees in 1usize..6) {
            let data = noisy_dataset(seed, n);
            let m = train_forest(&data, &ForestParams { num_trees: trees, seed, ..Default::default() }).unwrap();
            for t in &m.trees {
                prop_assert!(t.depth() <= m.max_depth);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            for _ in 0..20 {
                let x = FeatureVector(std::array::from_fn(|_| rng.random_range(-1.0..3.0)));
                let d = m.predict(&x).unwrap();
                prop_assert!(d.iter().all(|&p| p >= 0.0));
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn sample_order_does_not_matter(seed in any::<u64>(), n in 2usize..100) {
            let data = noisy_dataset(seed, n);
            let mut shuffled = data.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            use rand::seq::SliceRandom;
            shuffled.samples.shuffle(&mut rng);
            let p = ForestParams { seed, num_trees: 3, ..Default::default() };
            prop_assert_eq!(train_forest(&data, &p).unwrap(), train_forest(&shuffled, &p).unwrap());
        }
    }
}
