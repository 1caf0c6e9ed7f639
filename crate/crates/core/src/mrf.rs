//! Pairwise Potts MRF over patches and min-sum loopy belief propagation.
//!
//! Energy of a labeling `y`:
//!
//! ```text
//! E(y) = Σ_i φ_i(y_i) + Σ_{(i,j)} w_ij [y_i ≠ y_j]
//! φ_i(y) = λ (1 − p(y | x_i))        w_ij = exp(−‖c_i − c_j‖ / σ)
//! ```
//!
//! Each undirected edge contributes once.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Label, NUM_CLASSES};
use crate::forest::LabelDistribution;
use crate::overseg::PatchGraph;

pub const MAX_BRUTEFORCE_NODES: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum MrfError {
    #[error("patch {0} has no label distribution")]
    MissingPrediction(usize),
    #[error("invalid MRF parameter: {0}")]
    Parameter(String),
    #[error("brute force supports at most {MAX_BRUTEFORCE_NODES} nodes, got {0}")]
    TooManyNodes(usize),
    #[error("malformed problem: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MrfParams {
    /// Unary weight λ.
    pub lambda: f64,
    /// Edge-weight length scale σ in meters.
    pub sigma: f64,
}

impl Default for MrfParams {
    fn default() -> Self {
        MrfParams { lambda: 1.0, sigma: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LbpParams {
    pub max_iters: usize,
    /// Weight of the previous message in the damped update.
    pub damping: f64,
    pub tol: f64,
}

impl Default for LbpParams {
    fn default() -> Self {
        LbpParams { max_iters: 50, damping: 0.5, tol: 1e-5 }
    }
}

/// Unary costs per node plus weighted Potts edges. Nodes are indexed
/// `0..n`; for problems built from a patch graph node `i` is patch `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MrfProblem {
    pub num_labels: usize,
    pub unary: Vec<Vec<f64>>,
    /// `(i, j, w_ij)` with `i < j`, each pair at most once.
    pub edges: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Labeling {
    /// Label index per node.
    pub assignment: Vec<usize>,
    pub energy: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl Labeling {
    /// Assignment as labels, for problems over the trainable label set.
    pub fn labels(&self) -> Vec<Label> {
        self.assignment.iter().map(|&c| Label::TRAINABLE[c]).collect()
    }
}

impl MrfProblem {
    pub fn new(num_labels: usize, unary: Vec<Vec<f64>>, edges: Vec<(usize, usize, f64)>) -> Result<Self, MrfError> {
        let p = MrfProblem { num_labels, unary, edges };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<(), MrfError> {
        let bad = |m: String| Err(MrfError::Malformed(m));
        if self.num_labels == 0 {
            return bad("no labels".into());
        }
        for (i, u) in self.unary.iter().enumerate() {
            if u.len() != self.num_labels || u.iter().any(|c| !c.is_finite()) {
                return bad(format!("unary {i} malformed"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(i, j, w) in &self.edges {
            if i >= j || j >= self.unary.len() || !(w.is_finite() && w >= 0.0) || !seen.insert((i, j)) {
                return bad(format!("edge ({i}, {j}, {w}) malformed"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    pub fn energy(&self, assignment: &[usize]) -> f64 {
        let unary: f64 = assignment.iter().enumerate().map(|(i, &y)| self.unary[i][y]).sum();
        let pairwise: f64 = self
            .edges
            .iter()
            .filter(|&&(i, j, _)| assignment[i] != assignment[j])
            .map(|&(_, _, w)| w)
            .sum();
        unary + pairwise
    }

    /// Per-node unary argmin, lowest label on ties.
    pub fn unary_argmin(&self) -> Vec<usize> {
        self.unary.iter().map(|u| argmin(u)).collect()
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = k;
        }
    }
    best
}

/// Builds the MRF for a patch graph. `probs` holds `(patch id, p(y|x))`
/// pairs and must cover every patch.
pub fn build_problem(
    graph: &PatchGraph,
    probs: &[(usize, LabelDistribution)],
    params: &MrfParams,
) -> Result<MrfProblem, MrfError> {
    if !(params.lambda > 0.0 && params.lambda.is_finite()) {
        return Err(MrfError::Parameter("lambda must be > 0".into()));
    }
    if !(params.sigma > 0.0 && params.sigma.is_finite()) {
        return Err(MrfError::Parameter("sigma must be > 0".into()));
    }
    let mut by_patch: Vec<Option<&LabelDistribution>> = vec![None; graph.len()];
    for (id, p) in probs {
        if let Some(slot) = by_patch.get_mut(*id) {
            *slot = Some(p);
        }
    }
    let mut unary = Vec::with_capacity(graph.len());
    for (id, p) in by_patch.into_iter().enumerate() {
        let p = p.ok_or(MrfError::MissingPrediction(id))?;
        unary.push(p.iter().map(|&q| params.lambda * (1.0 - q.clamp(0.0, 1.0))).collect());
    }
    let edges = graph
        .adjacency
        .iter()
        .map(|&(a, b)| {
            let d = (graph.patches[a].centroid - graph.patches[b].centroid).norm();
            (a, b, (-d / params.sigma).exp())
        })
        .collect();
    MrfProblem::new(NUM_CLASSES, unary, edges)
}

struct Incidence {
    neighbor: usize,
    /// Message index neighbor → self.
    incoming: usize,
    /// Message index self → neighbor.
    outgoing: usize,
    weight: f64,
}

fn incidence(problem: &MrfProblem) -> Vec<Vec<Incidence>> {
    let mut inc: Vec<Vec<Incidence>> = (0..problem.len()).map(|_| Vec::new()).collect();
    for (e, &(i, j, w)) in problem.edges.iter().enumerate() {
        // Message 2e goes i → j, message 2e + 1 goes j → i.
        inc[i].push(Incidence { neighbor: j, incoming: 2 * e + 1, outgoing: 2 * e, weight: w });
        inc[j].push(Incidence { neighbor: i, incoming: 2 * e, outgoing: 2 * e + 1, weight: w });
    }
    inc
}

fn beliefs(problem: &MrfProblem, inc: &[Vec<Incidence>], msgs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..problem.len())
        .map(|i| {
            let mut b = problem.unary[i].clone();
            for e in &inc[i] {
                for (bk, mk) in b.iter_mut().zip(&msgs[e.incoming]) {
                    *bk += mk;
                }
            }
            b
        })
        .collect()
}

/// Decodes nodes in index order, conditioning each on already decoded
/// neighbors and using messages from the rest. Exact on trees once the
/// messages have converged, even when several optimal labelings tie.
fn conditional_decode(problem: &MrfProblem, inc: &[Vec<Incidence>], msgs: &[Vec<f64>]) -> Vec<usize> {
    let mut out: Vec<Option<usize>> = vec![None; problem.len()];
    for i in 0..problem.len() {
        let mut cost = problem.unary[i].clone();
        for e in &inc[i] {
            match out[e.neighbor] {
                Some(yn) => {
                    for (k, c) in cost.iter_mut().enumerate() {
                        if k != yn {
                            *c += e.weight;
                        }
                    }
                }
                None => {
                    for (c, m) in cost.iter_mut().zip(&msgs[e.incoming]) {
                        *c += m;
                    }
                }
            }
        }
        out[i] = Some(argmin(&cost));
    }
    out.into_iter().map(|y| y.expect("decoded")).collect()
}

/// Approximate MAP labeling by synchronous, damped min-sum belief
/// propagation. The result is never worse than the unary argmin labeling.
pub fn solve_map_lbp(problem: &MrfProblem, params: &LbpParams) -> Labeling {
    let l = problem.num_labels;
    let inc = incidence(problem);
    let mut msgs = vec![vec![0.0; l]; 2 * problem.edges.len()];
    let mut next = msgs.clone();
    let mut converged = problem.edges.is_empty();
    let mut iterations = 0;
    let mut h = vec![0.0; l];

    while !converged && iterations < params.max_iters {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for (i, node) in inc.iter().enumerate() {
            for out in node {
                // h(y_i) = unary + all incoming except from the target.
                h.copy_from_slice(&problem.unary[i]);
                for e in node {
                    if e.neighbor != out.neighbor {
                        for (hk, mk) in h.iter_mut().zip(&msgs[e.incoming]) {
                            *hk += mk;
                        }
                    }
                }
                let hmin = h.iter().copied().fold(f64::INFINITY, f64::min);
                let computed: Vec<f64> = h.iter().map(|&v| v.min(hmin + out.weight) - hmin).collect();
                let old = &msgs[out.outgoing];
                let mut blended: Vec<f64> = old
                    .iter()
                    .zip(&computed)
                    .map(|(&o, &c)| params.damping * o + (1.0 - params.damping) * c)
                    .collect();
                let bmin = blended.iter().copied().fold(f64::INFINITY, f64::min);
                for v in &mut blended {
                    *v -= bmin;
                }
                for (o, b) in old.iter().zip(&blended) {
                    max_change = max_change.max((o - b).abs());
                }
                next[out.outgoing] = blended;
            }
        }
        std::mem::swap(&mut msgs, &mut next);
        if max_change < params.tol {
            converged = true;
        }
    }

    let belief_assignment: Vec<usize> = beliefs(problem, &inc, &msgs).iter().map(|b| argmin(b)).collect();
    let candidates = [
        belief_assignment,
        conditional_decode(problem, &inc, &msgs),
        problem.unary_argmin(),
    ];
    let mut best: Option<(f64, &Vec<usize>)> = None;
    for c in &candidates {
        let e = problem.energy(c);
        if best.is_none_or(|(be, _)| e < be) {
            best = Some((e, c));
        }
    }
    let (energy, assignment) = best.expect("three candidates");
    Labeling { assignment: assignment.clone(), energy, converged, iterations }
}

/// Exact MAP by depth-first branch and bound over labelings in
/// lexicographic order; the lexicographically first minimizer wins.
pub fn exact_map_bruteforce(problem: &MrfProblem) -> Result<Labeling, MrfError> {
    let n = problem.len();
    if n > MAX_BRUTEFORCE_NODES {
        return Err(MrfError::TooManyNodes(n));
    }
    let l = problem.num_labels;
    // Edges indexed by their higher endpoint, so they are charged once both
    // ends are assigned.
    let mut back: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(i, j, w) in &problem.edges {
        back[j].push((i, w));
    }
    // suffix_min[i] = Σ_{k ≥ i} min_y φ_k(y), an admissible bound.
    let mut suffix_min = vec![0.0; n + 1];
    for i in (0..n).rev() {
        suffix_min[i] = suffix_min[i + 1] + problem.unary[i].iter().copied().fold(f64::INFINITY, f64::min);
    }

    struct Search<'a> {
        problem: &'a MrfProblem,
        back: &'a [Vec<(usize, f64)>],
        suffix_min: &'a [f64],
        l: usize,
        current: Vec<usize>,
        best: Vec<usize>,
        best_energy: f64,
    }
    impl Search<'_> {
        fn go(&mut self, i: usize, partial: f64) {
            if i == self.current.len() {
                if partial < self.best_energy {
                    self.best_energy = partial;
                    self.best.clone_from(&self.current);
                }
                return;
            }
            for y in 0..self.l {
                let mut e = partial + self.problem.unary[i][y];
                for &(k, w) in &self.back[i] {
                    if self.current[k] != y {
                        e += w;
                    }
                }
                if e + self.suffix_min[i + 1] > self.best_energy + 1e-9 {
                    continue;
                }
                self.current[i] = y;
                self.go(i + 1, e);
            }
        }
    }

    let start = problem.unary_argmin();
    let mut search = Search {
        problem,
        back: &back,
        suffix_min: &suffix_min,
        l,
        current: vec![0; n],
        best: start.clone(),
        best_energy: f64::INFINITY,
    };
    search.go(0, 0.0);
    let assignment = search.best;
    Ok(Labeling {
        energy: problem.energy(&assignment),
        assignment,
        converged: true,
        iterations: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Vec3;
    use crate::overseg::Patch;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn patch(id: usize, centroid: Vec3) -> Patch {
        Patch {
            id,
            point_indices: vec![id],
            centroid,
            mean_normal: Vec3::z(),
            mean_color_lab: [0.0; 3],
        }
    }

    /// Plain enumeration of every labeling, for small problems.
    fn enumerate_min(problem: &MrfProblem) -> f64 {
        let n = problem.len();
        let total = problem.num_labels.pow(n as u32);
        let mut best = f64::INFINITY;
        let mut a = vec![0; n];
        for mut code in 0..total {
            for slot in a.iter_mut() {
                *slot = code % problem.num_labels;
                code /= problem.num_labels;
            }
            best = best.min(problem.energy(&a));
        }
        best
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize, l: usize) -> MrfProblem {
        let unary = (0..n).map(|_| (0..l).map(|_| rng.random::<f64>()).collect()).collect();
        let edges = (1..n).map(|j| (rng.random_range(0..j), j, rng.random::<f64>())).collect();
        MrfProblem::new(l, unary, edges).unwrap()
    }

    #[test]
    fn unary_and_edge_weights() {
        let mut graph = PatchGraph {
            patches: vec![patch(0, Vec3::zeros()), patch(1, Vec3::zeros()), patch(2, Vec3::new(0.1, 0.0, 0.0))],
            adjacency: [(0, 1), (0, 2)].into_iter().collect(),
        };
        let mut sure = [0.0; NUM_CLASSES];
        sure[2] = 1.0;
        let probs: Vec<_> = (0..3).map(|i| (i, sure)).collect();
        let p = build_problem(&graph, &probs, &MrfParams::default()).unwrap();
        assert_eq!(p.unary[0], vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(p.edges[0], (0, 1, 1.0));
        assert!((p.edges[1].2 - 0.367_879).abs() < 1e-6);

        assert_eq!(
            build_problem(&graph, &probs[..2], &MrfParams::default()),
            Err(MrfError::MissingPrediction(2))
        );
        graph.adjacency.clear();
        assert!(matches!(
            build_problem(&graph, &probs, &MrfParams { sigma: 0.0, ..Default::default() }),
            Err(MrfError::Parameter(_))
        ));
    }

    #[test]
    fn single_node() {
        let p = MrfProblem::new(3, vec![vec![0.3, 0.1, 0.2]], vec![]).unwrap();
        let lbp = solve_map_lbp(&p, &LbpParams::default());
        assert_eq!(lbp.assignment, vec![1]);
        assert!((lbp.energy - 0.1).abs() < 1e-12);
        assert_eq!(exact_map_bruteforce(&p).unwrap().assignment, vec![1]);
    }

    #[test]
    fn two_node_chain_prefers_disagreement() {
        let mut u0 = vec![1.0; NUM_CLASSES];
        let mut u1 = vec![1.0; NUM_CLASSES];
        u0[0] = 0.0;
        u1[1] = 0.0;
        let p = MrfProblem::new(NUM_CLASSES, vec![u0, u1], vec![(0, 1, 0.1)]).unwrap();
        assert!((enumerate_min(&p) - 0.1).abs() < 1e-12);
        let lbp = solve_map_lbp(&p, &LbpParams::default());
        assert_eq!(lbp.assignment, vec![0, 1]);
        assert!((lbp.energy - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_without_edges_is_unary_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let unary: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.random()).collect()).collect();
        let p = MrfProblem::new(5, unary, vec![]).unwrap();
        assert_eq!(exact_map_bruteforce(&p).unwrap().assignment, p.unary_argmin());
    }

    #[test]
    fn bruteforce_limits() {
        let p = MrfProblem::new(2, vec![vec![0.0, 1.0]; 13], vec![]).unwrap();
        assert_eq!(exact_map_bruteforce(&p), Err(MrfError::TooManyNodes(13)));
    }

    #[test]
    fn bruteforce_beats_random_labelings() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let unary = (0..8).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let mut edges = Vec::new();
            for i in 0..8 {
                for j in i + 1..8 {
                    if rng.random_bool(0.5) {
                        edges.push((i, j, rng.random::<f64>()));
                    }
                }
            }
            let p = MrfProblem::new(4, unary, edges).unwrap();
            let exact = exact_map_bruteforce(&p).unwrap();
            assert!((exact.energy - enumerate_min(&p)).abs() < 1e-12);
            for _ in 0..1000 {
                let a: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
                assert!(exact.energy <= p.energy(&a) + 1e-12);
            }
        }
    }

    #[test]
    fn lbp_is_exact_on_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..=10);
            let p = random_tree(&mut rng, n, NUM_CLASSES);
            let lbp = solve_map_lbp(&p, &LbpParams::default());
            let exact = exact_map_bruteforce(&p).unwrap();
            assert!((lbp.energy - exact.energy).abs() < 1e-9, "{} vs {}", lbp.energy, exact.energy);
        }
    }

    #[test]
    fn lbp_ties_on_trees_are_resolved_consistently() {
        // Symmetric chain: all-0 and all-1 tie; mixing beliefs would cost an edge.
        let p = MrfProblem::new(2, vec![vec![0.0, 0.0]; 4], vec![(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap();
        let lbp = solve_map_lbp(&p, &LbpParams::default());
        assert_eq!(lbp.energy, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn energy_is_consistent_and_never_worse_than_unary(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let unary = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
            let mut edges = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.5) {
                        edges.push((i, j, rng.random::<f64>()));
                    }
                }
            }
            let p = MrfProblem::new(4, unary, edges).unwrap();
            let lbp = solve_map_lbp(&p, &LbpParams::default());
            prop_assert!((lbp.energy - p.energy(&lbp.assignment)).abs() < 1e-9);
            prop_assert!(lbp.energy <= p.energy(&p.unary_argmin()) + 1e-12);
            let exact = exact_map_bruteforce(&p).unwrap();
            prop_assert!(exact.energy <= lbp.energy + 1e-12);
        }

        #[test]
        fn scaling_preserves_the_minimizer(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_tree(&mut rng, 6, 3);
            let scaled = MrfProblem::new(
                3,
                p.unary.iter().map(|u| u.iter().map(|c| c * scale).collect()).collect(),
                p.edges.iter().map(|&(i, j, w)| (i, j, w * scale)).collect(),
            ).unwrap();
            let a = exact_map_bruteforce(&p).unwrap();
            let b = exact_map_bruteforce(&scaled).unwrap();
            prop_assert!((scaled.energy(&a.assignment) - b.energy).abs() < 1e-9 * scale.max(1.0));
        }
    }
}
