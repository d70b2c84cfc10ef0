//! Loopy sum-product belief propagation over the cascade factor graph.
//!
//! Messages live in the linear domain with a `1e-300` floor before each
//! normalization, a damping mix `damping * old + (1 - damping) * new`, and a
//! synchronous schedule: every variable-to-factor message is computed from
//! the previous round's factor-to-variable messages, then every factor
//! updates, then every belief. Each butterfly factor update costs `O(q^2)`
//! rather than `O(q^4)` because the Gentleman–Sande constraint determines
//! both outputs from the two inputs; the kernel walks the `q x q` input grid
//! once and accumulates all four outgoing messages in the same pass.
//!
//! Alongside the engine: observation bundles, MAP extraction, per-trial
//! metrics, a best-first key-rank search with a bounded frontier, and a
//! brute-force posterior oracle for instances small enough to enumerate.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::field::LayeredTrace;
use crate::graph::{FactorGraph, ObservationTopology, VarId};
use crate::par;
use crate::stats::entropy_bits;

/// Linear-domain probability floor applied before normalization.
pub const PROB_FLOOR: f64 = 1e-300;

/// Noisy observations of a cascade run: raw values per observed layer, plus
/// the channel that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationSet {
    pub channel: ChannelParams,
    /// Observed layer (1..=K) -> one observation per position.
    pub observations: BTreeMap<usize, Vec<f64>>,
}

impl ObservationSet {
    /// No observations at all (every belief will stay at its prior).
    pub fn empty(channel: ChannelParams) -> Self {
        Self {
            channel,
            observations: BTreeMap::new(),
        }
    }

    /// Observe the trace on every layer in `topology`, drawing layers in
    /// ascending order and positions in ascending order within a layer — the
    /// fixed stream order that makes trials reproducible from their seed.
    pub fn generate(
        topology: &ObservationTopology,
        channel: &ChannelParams,
        trace: &LayeredTrace,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let levels = trace.levels.len();
        if topology.layers_total + 1 != levels {
            return Err(Error::InvalidInput(format!(
                "topology covers {} layers but trace has {}",
                topology.layers_total,
                levels - 1
            )));
        }
        let mut observations = BTreeMap::new();
        for &layer in &topology.observed {
            let row = &trace.levels[layer];
            let ys: Vec<f64> = row.iter().map(|&x| channel.observe(x, rng)).collect();
            observations.insert(layer, ys);
        }
        Ok(Self {
            channel: *channel,
            observations,
        })
    }
}

/// Local evidence per variable: observed variables carry their normalized
/// likelihood vector, unobserved ones a uniform prior. Shared by the BP
/// engine and the exact oracle so both weigh evidence identically.
fn build_potentials(graph: &FactorGraph, obs: &ObservationSet) -> Result<Vec<f64>> {
    let q = graph.params.q as usize;
    let n = graph.params.n;
    let layers = graph.params.layers;
    if obs.channel.q != graph.params.q {
        return Err(Error::InvalidInput(format!(
            "channel modulus {} does not match graph modulus {}",
            obs.channel.q, graph.params.q
        )));
    }
    let mut pot = vec![1.0 / q as f64; graph.var_count() * q];
    for (&layer, ys) in &obs.observations {
        if layer == 0 {
            return Err(Error::InvalidInput(
                "level 0 is the masked input and cannot be observed".into(),
            ));
        }
        if layer > layers {
            return Err(Error::InvalidInput(format!(
                "observed layer {layer} exceeds cascade depth {layers}"
            )));
        }
        if ys.len() != n {
            return Err(Error::InvalidInput(format!(
                "layer {layer} has {} observations for {} positions",
                ys.len(),
                n
            )));
        }
        for (pos, &y) in ys.iter().enumerate() {
            let slot = (layer * n + pos) * q;
            obs.channel.likelihood_into(y, &mut pot[slot..slot + q]);
        }
    }
    Ok(pot)
}

/// Floor then normalize one message/belief row in place.
/// A non-finite or non-positive sum is a numerical fault.
fn floor_normalize(row: &mut [f64]) -> Result<()> {
    let mut sum = 0.0;
    for x in row.iter_mut() {
        if *x < PROB_FLOOR {
            *x = PROB_FLOOR;
        }
        sum += *x;
    }
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(Error::Numerical(format!("message sum degenerate: {sum}")));
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// Scratch buffers for one butterfly-factor update (reused across factors;
/// one per worker thread).
pub struct KernelScratch {
    /// `d` permuted by the twiddle: `dp[t] = d[zeta*t mod q]`.
    dp: Vec<f64>,
    /// `c` tiled twice so `c2[u + v]` needs no reduction.
    c2: Vec<f64>,
    /// `dp` tiled twice so `dp2[q - u + v]` needs no reduction.
    dp2: Vec<f64>,
    out_c2: Vec<f64>,
    out_dp2: Vec<f64>,
    /// The four computed outgoing messages, port order `[u_in, v_in, u_out, v_out]`.
    pub out: [Vec<f64>; 4],
}

impl KernelScratch {
    pub fn new(q: usize) -> Self {
        Self {
            dp: vec![0.0; q],
            c2: vec![0.0; 2 * q],
            dp2: vec![0.0; 2 * q],
            out_c2: vec![0.0; 2 * q],
            out_dp2: vec![0.0; 2 * q],
            out: std::array::from_fn(|_| vec![0.0; q]),
        }
    }
}

/// Compute all four outgoing messages of one butterfly factor from its four
/// incoming messages `[a, b, c, d]` (ports `[u_in, v_in, u_out, v_out]`).
///
/// The constraint is `u_out = u + v`, `v_out = zeta * (v - u)`; `perm` must
/// hold `zeta * t mod q` for every `t`. For each grid cell `(u, v)` the
/// product of the three other incoming messages is accumulated into the
/// remaining port, giving every output in one `O(q^2)` sweep with stride-1
/// inner loops (the `u_out`/`v_out` accumulators use length-`2q` tiles that
/// are folded and, for `v_out`, scattered through `perm` afterwards).
pub fn butterfly_messages(q: usize, incoming: [&[f64]; 4], perm: &[u32], s: &mut KernelScratch) {
    let [a, b, c, d] = incoming;
    debug_assert!(a.len() == q && b.len() == q && c.len() == q && d.len() == q);
    debug_assert_eq!(perm.len(), q);
    for t in 0..q {
        s.dp[t] = d[perm[t] as usize];
    }
    s.c2[..q].copy_from_slice(c);
    s.c2[q..].copy_from_slice(c);
    s.dp2[..q].copy_from_slice(&s.dp);
    let (lo, hi) = s.dp2.split_at_mut(q);
    hi.copy_from_slice(lo);
    s.out_c2.fill(0.0);
    s.out_dp2.fill(0.0);
    let [out_a, out_b, out_c, out_d] = &mut s.out;
    out_b.fill(0.0);

    for u in 0..q {
        let au = a[u];
        let c2row = &s.c2[u..u + q];
        let dp2row = &s.dp2[q - u..2 * q - u];
        let oc2row = &mut s.out_c2[u..u + q];
        let odp2row = &mut s.out_dp2[q - u..2 * q - u];
        let mut acc = 0.0;
        for v in 0..q {
            let bv = b[v];
            let cc = c2row[v];
            let dd = dp2row[v];
            let cd = cc * dd;
            let ab = au * bv;
            acc += bv * cd;
            out_b[v] += au * cd;
            oc2row[v] += ab * dd;
            odp2row[v] += ab * cc;
        }
        out_a[u] = acc;
    }

    // Fold the 2q-length tiles back onto Z_q; v_out additionally scatters
    // through the twiddle permutation (cell (u,v) accumulated at t = v - u,
    // but the message index is zeta*t).
    for x in 0..q {
        out_c[x] = s.out_c2[x] + s.out_c2[x + q];
    }
    for t in 0..q {
        out_d[perm[t] as usize] = s.out_dp2[t] + s.out_dp2[t + q];
    }
}

/// Tuning knobs for one BP run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BpConfig {
    pub iterations: usize,
    /// Damping in `[0, 1)`: weight kept on the previous message.
    pub damping: f64,
    /// Stop once the max per-entry belief change drops below this.
    pub early_stop_tol: Option<f64>,
    /// Single-layer MI (bits) for the BP-gain ratio, when known.
    pub mi_1_bits: Option<f64>,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            damping: 0.5,
            early_stop_tol: Some(1e-8),
            mi_1_bits: None,
        }
    }
}

/// All mutable state of one BP run over one factor graph.
pub struct BpState<'g> {
    pub graph: &'g FactorGraph,
    q: usize,
    /// Local evidence, flat `var * q`.
    potentials: Vec<f64>,
    /// Factor memberships per variable: `(factor, port)`, at most two.
    var_factors: Vec<Vec<(u32, u8)>>,
    /// Twiddle permutation per factor (shared per distinct zeta).
    perms: BTreeMap<u32, Vec<u32>>,
    /// Factor->variable messages, flat `factor * 4 * q`.
    fv: Vec<f64>,
    /// Variable->factor messages, same layout as `fv`.
    vf: Vec<f64>,
    /// Current beliefs, flat `var * q`.
    beliefs: Vec<f64>,
    pub iteration: usize,
}

/// Initialize messages to uniform and beliefs to the local evidence.
pub fn init_state<'g>(graph: &'g FactorGraph, obs: &ObservationSet) -> Result<BpState<'g>> {
    let q = graph.params.q as usize;
    let potentials = build_potentials(graph, obs)?;
    let mut var_factors = vec![Vec::new(); graph.var_count()];
    let mut perms = BTreeMap::new();
    for (fi, f) in graph.factors.iter().enumerate() {
        for (port, v) in f.ports().into_iter().enumerate() {
            var_factors[graph.var_index(v)].push((fi as u32, port as u8));
        }
        perms.entry(f.zeta).or_insert_with(|| {
            (0..q as u64)
                .map(|t| ((f.zeta as u64 * t) % q as u64) as u32)
                .collect()
        });
    }
    debug_assert!(var_factors.iter().all(|m| m.len() <= 2));
    let uniform = 1.0 / q as f64;
    let mut beliefs = potentials.clone();
    par::for_each_chunk(&mut beliefs, q, |_, row| {
        floor_normalize(row).expect("potentials are normalized");
    });
    Ok(BpState {
        graph,
        q,
        potentials,
        var_factors,
        perms,
        fv: vec![uniform; graph.factor_count() * 4 * q],
        vf: vec![uniform; graph.factor_count() * 4 * q],
        beliefs,
        iteration: 0,
    })
}

impl<'g> BpState<'g> {
    pub fn belief(&self, v: VarId) -> &[f64] {
        let i = self.graph.var_index(v) * self.q;
        &self.beliefs[i..i + self.q]
    }

    /// Clone of the level-0 (secret) beliefs, one vector per position.
    pub fn level0_beliefs(&self) -> Vec<Vec<f64>> {
        (0..self.graph.params.n)
            .map(|pos| self.belief(VarId { level: 0, pos }).to_vec())
            .collect()
    }

    /// Mean belief entropy (bits) over the level-0 variables.
    pub fn mean_level0_entropy(&self) -> f64 {
        let n = self.graph.params.n;
        (0..n)
            .map(|pos| entropy_bits(self.belief(VarId { level: 0, pos })))
            .sum::<f64>()
            / n as f64
    }

    /// Largest |sum - 1| over every belief and message row (test hygiene).
    pub fn worst_normalization_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for row in self
            .beliefs
            .chunks(self.q)
            .chain(self.fv.chunks(self.q))
            .chain(self.vf.chunks(self.q))
        {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst
    }

    /// One synchronous round. Returns the max per-entry belief change.
    pub fn iterate(&mut self, damping: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&damping) {
            return Err(Error::InvalidParams(format!(
                "damping must lie in [0, 1), got {damping}"
            )));
        }
        let q = self.q;
        let row4 = 4 * q;

        // Phase A: variable -> factor messages from the previous round's
        // factor -> variable messages. Each factor owns its own 4-row chunk.
        {
            let fv = &self.fv;
            let potentials = &self.potentials;
            let var_factors = &self.var_factors;
            let graph = self.graph;
            let fault = AtomicU64::new(0);
            par::for_each_chunk(&mut self.vf, row4, |fi, chunk| {
                let f = &graph.factors[fi];
                for (port, v) in f.ports().into_iter().enumerate() {
                    let vi = graph.var_index(v);
                    let row = &mut chunk[port * q..(port + 1) * q];
                    row.copy_from_slice(&potentials[vi * q..(vi + 1) * q]);
                    for &(of, op) in &var_factors[vi] {
                        if of as usize == fi && op as usize == port {
                            continue;
                        }
                        let m = &fv[(of as usize * 4 + op as usize) * q..][..q];
                        for (r, &mx) in row.iter_mut().zip(m) {
                            *r *= mx;
                        }
                    }
                    if floor_normalize(row).is_err() {
                        fault.store(1, Ordering::Relaxed);
                    }
                }
            });
            if fault.load(Ordering::Relaxed) != 0 {
                return Err(Error::Numerical("variable message degenerated".into()));
            }
        }

        // Phase B: factor updates, damped in place per factor chunk.
        {
            let vf = &self.vf;
            let perms = &self.perms;
            let graph = self.graph;
            let fault = AtomicU64::new(0);
            par::for_each_chunk_init(
                &mut self.fv,
                row4,
                || KernelScratch::new(q),
                |scratch, fi, chunk| {
                    let f = &graph.factors[fi];
                    let base = fi * row4;
                    let incoming = std::array::from_fn(|p| &vf[base + p * q..base + (p + 1) * q]);
                    butterfly_messages(q, incoming, &perms[&f.zeta], scratch);
                    for (port, computed) in scratch.out.iter_mut().enumerate() {
                        if floor_normalize(computed).is_err() {
                            fault.store(1, Ordering::Relaxed);
                            return;
                        }
                        let row = &mut chunk[port * q..(port + 1) * q];
                        for (r, &cx) in row.iter_mut().zip(computed.iter()) {
                            *r = damping * *r + (1.0 - damping) * cx;
                        }
                        if floor_normalize(row).is_err() {
                            fault.store(1, Ordering::Relaxed);
                            return;
                        }
                    }
                },
            );
            if fault.load(Ordering::Relaxed) != 0 {
                return Err(Error::Numerical("factor message degenerated".into()));
            }
        }

        // Phase C: beliefs = evidence times all incoming messages. The max
        // change uses an atomic f64 max, which is order-independent.
        let max_change = {
            let fv = &self.fv;
            let potentials = &self.potentials;
            let var_factors = &self.var_factors;
            let change_bits = AtomicU64::new(0.0f64.to_bits());
            let fault = AtomicU64::new(0);
            par::for_each_chunk(&mut self.beliefs, q, |vi, row| {
                let mut local = 0.0f64;
                let old: Vec<f64> = row.to_vec();
                row.copy_from_slice(&potentials[vi * q..(vi + 1) * q]);
                for &(of, op) in &var_factors[vi] {
                    let m = &fv[(of as usize * 4 + op as usize) * q..][..q];
                    for (r, &mx) in row.iter_mut().zip(m) {
                        *r *= mx;
                    }
                }
                if floor_normalize(row).is_err() {
                    fault.store(1, Ordering::Relaxed);
                    return;
                }
                for (&o, &n) in old.iter().zip(row.iter()) {
                    local = local.max((o - n).abs());
                }
                let mut cur = change_bits.load(Ordering::Relaxed);
                while f64::from_bits(cur) < local {
                    match change_bits.compare_exchange_weak(
                        cur,
                        local.to_bits(),
                        Ordering::Relaxed,
                        Ordering::Relaxed,
                    ) {
                        Ok(_) => break,
                        Err(actual) => cur = actual,
                    }
                }
            });
            if fault.load(Ordering::Relaxed) != 0 {
                return Err(Error::Numerical("belief degenerated".into()));
            }
            f64::from_bits(change_bits.load(Ordering::Relaxed))
        };

        self.iteration += 1;
        Ok(max_change)
    }

    /// MAP estimate of the level-0 coefficients (ties break toward the
    /// smallest residue).
    pub fn map_estimate(&self) -> Vec<u32> {
        (0..self.graph.params.n)
            .map(|pos| argmax_smallest(self.belief(VarId { level: 0, pos })))
            .collect()
    }
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax_smallest(p: &[f64]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best as u32
}

/// Per-trial outcome metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    /// Fraction of level-0 coefficients whose MAP matches the truth.
    pub bsr: f64,
    pub full_key: bool,
    /// Mean level-0 entropy (bits) before iterating and after each round.
    pub entropy_trajectory: Vec<f64>,
    /// `log2(q)` minus the final mean level-0 entropy.
    pub mi_bp: f64,
    /// `mi_bp / MI_1` when the single-layer MI was supplied.
    pub bp_gain: Option<f64>,
    pub iterations_run: usize,
    pub early_stopped: bool,
    pub seed: u64,
    /// The MAP decode of the secret, for rank checks and reports.
    pub map_l0: Vec<u32>,
}

/// Run BP against a known truth and score the outcome. The state is returned
/// alongside the metrics so callers can rank keys or inspect beliefs.
pub fn run_bp_full<'g>(
    graph: &'g FactorGraph,
    obs: &ObservationSet,
    config: &BpConfig,
    truth: &LayeredTrace,
    seed: u64,
) -> Result<(TrialResult, BpState<'g>)> {
    let mut state = init_state(graph, obs)?;
    let mut trajectory = vec![state.mean_level0_entropy()];
    let mut early_stopped = false;
    for _ in 0..config.iterations {
        let change = state.iterate(config.damping)?;
        trajectory.push(state.mean_level0_entropy());
        if let Some(tol) = config.early_stop_tol {
            if change < tol {
                early_stopped = true;
                break;
            }
        }
    }
    let map_l0 = state.map_estimate();
    let truth_l0 = &truth.levels[0];
    if truth_l0.len() != map_l0.len() {
        return Err(Error::InvalidInput("truth length mismatch".into()));
    }
    let correct = map_l0
        .iter()
        .zip(truth_l0)
        .filter(|(m, t)| *m == *t)
        .count();
    let n = map_l0.len();
    let final_h = *trajectory.last().expect("trajectory non-empty");
    let mi_bp = (state.q as f64).log2() - final_h;
    let result = TrialResult {
        bsr: correct as f64 / n as f64,
        full_key: correct == n,
        entropy_trajectory: trajectory,
        mi_bp,
        bp_gain: config.mi_1_bits.map(|mi1| mi_bp / mi1),
        iterations_run: state.iteration,
        early_stopped,
        seed,
        map_l0,
    };
    Ok((result, state))
}

/// [`run_bp_full`] without keeping the state.
pub fn run_bp(
    graph: &FactorGraph,
    obs: &ObservationSet,
    config: &BpConfig,
    truth: &LayeredTrace,
    seed: u64,
) -> Result<TrialResult> {
    run_bp_full(graph, obs, config, truth, seed).map(|(r, _)| r)
}

/// Key-rank search outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyRank {
    /// 1-based rank of the truth under descending product-of-marginals order
    /// (counting only strictly better assignments).
    Exact(u64),
    /// The search hit its pop budget or frontier cap first.
    ExceedsBudget { explored: u64 },
}

/// Rank of the true key under the product-of-marginals ordering, by
/// best-first search over per-coefficient sorted marginals.
///
/// Candidates scoring no better than the truth are pruned at generation,
/// so the frontier only ever holds assignments that would lower the rank.
/// Scores are accumulated incrementally in log domain (ties at the exact
/// floating-point score count as not-better). The frontier is bounded:
/// exceeding `budget` pops or the node cap returns the exceeded marker.
pub fn key_rank(beliefs: &[Vec<f64>], truth: &[u32], budget: u64) -> Result<KeyRank> {
    if beliefs.is_empty() || beliefs.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} belief vectors for {} truth coefficients",
            beliefs.len(),
            truth.len()
        )));
    }
    if budget == 0 {
        return Err(Error::InvalidParams("budget must be >= 1".into()));
    }
    let n = beliefs.len();
    // Per coefficient: log-probs sorted descending, value order breaking ties.
    let mut sorted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut truth_score = 0.0f64;
    for (i, (b, &t)) in beliefs.iter().zip(truth).enumerate() {
        if (t as usize) >= b.len() {
            return Err(Error::InvalidInput(format!(
                "truth value {t} outside belief support at coefficient {i}"
            )));
        }
        let mut logs: Vec<f64> = b.iter().map(|&p| p.max(PROB_FLOOR).ln()).collect();
        truth_score += logs[t as usize];
        logs.sort_by(|x, y| y.total_cmp(x));
        sorted.push(logs);
    }

    // Arena node: which coordinate the parent incremented, to what index.
    struct Node {
        parent: u32,
        pos: u32,
        idx: u32,
        ptr: u32,
    }
    let node_cap = (budget.saturating_mul(8)).min(1 << 24) as usize;
    let root_score: f64 = sorted.iter().map(|s| s[0]).sum();
    if root_score <= truth_score {
        return Ok(KeyRank::Exact(1));
    }
    let mut arena = vec![Node {
        parent: u32::MAX,
        pos: 0,
        idx: 0,
        ptr: 0,
    }];

    #[derive(PartialEq)]
    struct Entry {
        score: f64,
        node: u32,
    }
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.score
                .total_cmp(&other.score)
                .then(other.node.cmp(&self.node))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut heap = std::collections::BinaryHeap::new();
    heap.push(Entry {
        score: root_score,
        node: 0,
    });
    // Coordinates reconstructed per expansion via the parent chain; the
    // generation stamp avoids clearing the whole array each time.
    let mut coords = vec![0u32; n];
    let mut stamp = vec![0u64; n];
    let mut generation = 0u64;
    let mut pops = 0u64;

    while let Some(Entry { score, node }) = heap.pop() {
        pops += 1;
        if pops > budget {
            return Ok(KeyRank::ExceedsBudget { explored: budget });
        }
        generation += 1;
        let mut cursor = node;
        while cursor != 0 {
            let nd = &arena[cursor as usize];
            let p = nd.pos as usize;
            if stamp[p] != generation {
                stamp[p] = generation;
                coords[p] = nd.idx;
            }
            cursor = nd.parent;
        }
        let ptr = arena[node as usize].ptr;
        for j in ptr as usize..n {
            let cur = if stamp[j] == generation { coords[j] } else { 0 };
            let next = cur + 1;
            if (next as usize) >= sorted[j].len() {
                continue;
            }
            let child_score = score - sorted[j][cur as usize] + sorted[j][next as usize];
            if child_score > truth_score {
                if arena.len() >= node_cap {
                    return Ok(KeyRank::ExceedsBudget { explored: pops });
                }
                arena.push(Node {
                    parent: node,
                    pos: j as u32,
                    idx: next,
                    ptr: j as u32,
                });
                heap.push(Entry {
                    score: child_score,
                    node: (arena.len() - 1) as u32,
                });
            }
        }
    }
    Ok(KeyRank::Exact(pops + 1))
}

/// Exact per-variable posteriors by brute-force enumeration.
///
/// Variables not produced by any included factor are free; each connected
/// component is enumerated over its free variables (guarded to at most 10^7
/// assignments), with every other variable determined in layer order.
/// Isolated variables simply return their normalized local evidence.
pub fn exact_posterior_oracle(graph: &FactorGraph, obs: &ObservationSet) -> Result<Vec<Vec<f64>>> {
    const MAX_ENUM: f64 = 1e7;
    let q = graph.params.q as usize;
    let vc = graph.var_count();
    let potentials = build_potentials(graph, obs)?;

    // Union-find over variables joined by the included factors.
    let mut parent: Vec<usize> = (0..vc).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    let mut produced_by: Vec<Option<usize>> = vec![None; vc];
    for (fi, f) in graph.factors.iter().enumerate() {
        let ports = f.ports().map(|v| graph.var_index(v));
        for w in ports.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a] = b;
            }
        }
        produced_by[ports[2]] = Some(fi);
        produced_by[ports[3]] = Some(fi);
    }

    let mut marginals: Vec<Vec<f64>> = vec![vec![0.0; q]; vc];
    let mut component_vars: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut in_component = vec![false; vc];
    for (fi, f) in graph.factors.iter().enumerate() {
        let _ = fi;
        for v in f.ports() {
            let vi = graph.var_index(v);
            if !in_component[vi] {
                in_component[vi] = true;
                let root = find(&mut parent, vi);
                component_vars.entry(root).or_default().push(vi);
            }
        }
    }

    // Isolated variables: normalized local evidence.
    for vi in 0..vc {
        if !in_component[vi] {
            let mut row = potentials[vi * q..(vi + 1) * q].to_vec();
            floor_normalize(&mut row)?;
            marginals[vi] = row;
        }
    }

    let mut values = vec![0u32; vc];
    for (_root, vars) in component_vars {
        let free: Vec<usize> = vars
            .iter()
            .copied()
            .filter(|&vi| produced_by[vi].is_none())
            .collect();
        let assignments = (q as f64).powi(free.len() as i32);
        if assignments > MAX_ENUM {
            return Err(Error::InvalidParams(format!(
                "oracle enumeration of {q}^{} assignments exceeds 10^7",
                free.len()
            )));
        }
        // Included factors touching this component, in layer order.
        let comp_factors: Vec<usize> = (0..graph.factors.len())
            .filter(|&fi| {
                let vi = graph.var_index(graph.factors[fi].u_in);
                vars.binary_search(&vi).is_ok() || vars.contains(&vi)
            })
            .collect();
        let mut counter = vec![0u32; free.len()];
        loop {
            for (slot, &vi) in counter.iter().zip(&free) {
                values[vi] = *slot;
            }
            for &fi in &comp_factors {
                let f = &graph.factors[fi];
                let (uo, vo) = crate::field::gs_butterfly(
                    values[graph.var_index(f.u_in)],
                    values[graph.var_index(f.v_in)],
                    f.zeta,
                    graph.params.q,
                );
                values[graph.var_index(f.u_out)] = uo;
                values[graph.var_index(f.v_out)] = vo;
            }
            let mut weight = 1.0f64;
            for &vi in &vars {
                weight *= potentials[vi * q + values[vi] as usize];
            }
            if weight > 0.0 {
                for &vi in &vars {
                    marginals[vi][values[vi] as usize] += weight;
                }
            }
            // Mixed-radix increment over the free variables.
            let mut k = 0;
            loop {
                if k == counter.len() {
                    break;
                }
                counter[k] += 1;
                if (counter[k] as usize) < q {
                    break;
                }
                counter[k] = 0;
                k += 1;
            }
            if k == counter.len() {
                break;
            }
        }
        for &vi in &vars {
            floor_normalize(&mut marginals[vi])?;
        }
    }
    Ok(marginals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::channel_from_snr_n;
    use crate::field::{intt_layers, random_poly, FieldParams};
    use crate::graph::build_graph;
    use crate::stats::total_variation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_setup(
        snr_n: f64,
        layers: &[usize],
        seed: u64,
    ) -> (FactorGraph, ObservationSet, LayeredTrace) {
        let params = FieldParams::toy(17, 4, 2).unwrap();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(17, snr_n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let secret = random_poly(&params, &mut rng);
        let trace = intt_layers(&params, &secret).unwrap();
        let topo = ObservationTopology::new(layers.iter().copied(), 2).unwrap();
        let obs = ObservationSet::generate(&topo, &channel, &trace, &mut rng).unwrap();
        (graph, obs, trace)
    }

    #[test]
    fn no_observations_is_uniform_fixed_point() {
        let params = FieldParams::toy(17, 4, 2).unwrap();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(17, 100.0).unwrap();
        let mut state = init_state(&graph, &ObservationSet::empty(channel)).unwrap();
        assert!((state.mean_level0_entropy() - 17f64.log2()).abs() < 1e-12);
        for _ in 0..3 {
            let change = state.iterate(0.5).unwrap();
            assert!(change < 1e-12, "uniform state moved by {change}");
        }
        for pos in 0..4 {
            for &p in state.belief(VarId { level: 0, pos }) {
                assert!((p - 1.0 / 17.0).abs() < 1e-12);
            }
        }
        assert!(state.worst_normalization_error() < 1e-9);
    }

    #[test]
    fn observed_beliefs_start_at_likelihoods() {
        let (graph, obs, trace) = toy_setup(1e9, &[1, 2], 3);
        let state = init_state(&graph, &obs).unwrap();
        // Near-noiseless: initial observed beliefs are deltas at the truth.
        for level in 1..=2 {
            for pos in 0..4 {
                let b = state.belief(VarId { level, pos });
                let truth = trace.value(level, pos) as usize;
                assert!(b[truth] > 0.999, "level {level} pos {pos}");
            }
        }
    }

    #[test]
    fn level0_observation_rejected() {
        let params = FieldParams::toy(17, 4, 2).unwrap();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(17, 100.0).unwrap();
        let mut obs = ObservationSet::empty(channel);
        obs.observations.insert(0, vec![1.0; 4]);
        assert!(init_state(&graph, &obs).is_err());
        let mut obs = ObservationSet::empty(channel);
        obs.observations.insert(3, vec![1.0; 4]);
        assert!(init_state(&graph, &obs).is_err(), "layer beyond K rejected");
        let mut obs = ObservationSet::empty(channel);
        obs.observations.insert(1, vec![1.0; 3]);
        assert!(init_state(&graph, &obs).is_err(), "length mismatch rejected");
    }

    #[test]
    fn single_butterfly_matches_oracle() {
        let params = FieldParams::toy(17, 2, 1).unwrap();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(17, 30.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let secret = random_poly(&params, &mut rng);
        let trace = intt_layers(&params, &secret).unwrap();
        let topo = ObservationTopology::new([1], 1).unwrap();
        let obs = ObservationSet::generate(&topo, &channel, &trace, &mut rng).unwrap();

        let oracle = exact_posterior_oracle(&graph, &obs).unwrap();
        let mut state = init_state(&graph, &obs).unwrap();
        for _ in 0..4 {
            state.iterate(0.0).unwrap();
        }
        for vi in 0..graph.var_count() {
            let v = VarId {
                level: vi / 2,
                pos: vi % 2,
            };
            let b = state.belief(v);
            for x in 0..17 {
                assert!(
                    (b[x] - oracle[vi][x]).abs() < 1e-9,
                    "var {v:?} entry {x}: bp {} oracle {}",
                    b[x],
                    oracle[vi][x]
                );
            }
        }
    }

    #[test]
    fn acyclic_subgraph_matches_oracle() {
        let (graph, obs, _) = toy_setup(25.0, &[1, 2], 29);
        // Dropping one layer-2 factor breaks the toy graph's single cycle.
        let tree = graph.subgraph(&[0, 1, 2]).unwrap();
        let oracle = exact_posterior_oracle(&tree, &obs).unwrap();
        let mut state = init_state(&tree, &obs).unwrap();
        for _ in 0..10 {
            state.iterate(0.0).unwrap();
        }
        for vi in 0..tree.var_count() {
            let v = VarId {
                level: vi / 4,
                pos: vi % 4,
            };
            let b = state.belief(v);
            for x in 0..17 {
                assert!(
                    (b[x] - oracle[vi][x]).abs() < 1e-9,
                    "var {v:?} entry {x} off by {}",
                    (b[x] - oracle[vi][x]).abs()
                );
            }
        }
        assert!(state.worst_normalization_error() < 1e-9);
    }

    #[test]
    fn loopy_bp_tracks_oracle_map() {
        let mut matches = 0;
        let mut worst_tv = 0.0f64;
        for seed in 0..10 {
            let (graph, obs, trace) = toy_setup(40.0, &[1, 2], 100 + seed);
            let config = BpConfig::default();
            let (result, state) = run_bp_full(&graph, &obs, &config, &trace, seed).unwrap();
            let oracle = exact_posterior_oracle(&graph, &obs).unwrap();
            let oracle_map: Vec<u32> = (0..4).map(|pos| argmax_smallest(&oracle[pos])).collect();
            if result.map_l0 == oracle_map {
                matches += 1;
            }
            for pos in 0..4 {
                let tv = total_variation(state.belief(VarId { level: 0, pos }), &oracle[pos]);
                worst_tv = worst_tv.max(tv);
            }
        }
        assert!(matches >= 6, "loopy MAP matched oracle on {matches}/10");
        assert!(worst_tv <= 1.0);
    }

    #[test]
    fn noiseless_full_observation_pins_key() {
        let params = FieldParams::toy(17, 4, 2).unwrap();
        let graph = build_graph(&params);
        let channel = ChannelParams::with_sigma(17, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let secret = random_poly(&params, &mut rng);
        let trace = intt_layers(&params, &secret).unwrap();
        let topo = ObservationTopology::new([1, 2], 2).unwrap();
        let obs = ObservationSet::generate(&topo, &channel, &trace, &mut rng).unwrap();
        let config = BpConfig {
            iterations: 2,
            early_stop_tol: None,
            ..BpConfig::default()
        };
        let (result, _) = run_bp_full(&graph, &obs, &config, &trace, 5).unwrap();
        assert!(result.full_key, "bsr was {}", result.bsr);
        assert_eq!(result.map_l0, secret);
        assert!(result.entropy_trajectory.last().unwrap() < &0.01);
        assert_eq!(result.entropy_trajectory.len(), result.iterations_run + 1);
    }

    #[test]
    fn trial_is_deterministic_and_early_stops() {
        let (graph, obs, trace) = toy_setup(1e6, &[1, 2], 77);
        let config = BpConfig::default();
        let a = run_bp(&graph, &obs, &config, &trace, 77).unwrap();
        let b = run_bp(&graph, &obs, &config, &trace, 77).unwrap();
        assert_eq!(a, b);
        assert!(a.early_stopped, "high-SNR toy run should converge early");
        assert!(a.iterations_run < config.iterations);
        assert!(a.mi_bp <= 17f64.log2() + 1e-12);
        // Serde round trip keeps the record intact.
        let json = serde_json::to_string(&a).unwrap();
        let back: TrialResult = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn bp_gain_uses_supplied_single_layer_mi() {
        let (graph, obs, trace) = toy_setup(1e6, &[1, 2], 13);
        let config = BpConfig {
            mi_1_bits: Some(2.0),
            ..BpConfig::default()
        };
        let r = run_bp(&graph, &obs, &config, &trace, 13).unwrap();
        assert!((r.bp_gain.unwrap() - r.mi_bp / 2.0).abs() < 1e-12);
    }

    #[test]
    fn map_tie_breaks_toward_smallest() {
        assert_eq!(argmax_smallest(&[0.25; 4]), 0);
        assert_eq!(argmax_smallest(&[0.1, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax_smallest(&[0.0, 0.0, 1.0]), 2);
    }

    #[test]
    fn oracle_uniform_and_delta_limits() {
        let params = FieldParams::toy(17, 4, 2).unwrap();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(17, 100.0).unwrap();
        let uniform = exact_posterior_oracle(&graph, &ObservationSet::empty(channel)).unwrap();
        for m in &uniform {
            for &p in m {
                assert!((p - 1.0 / 17.0).abs() < 1e-12);
            }
        }

        let exact = ChannelParams::with_sigma(17, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let secret = random_poly(&params, &mut rng);
        let trace = intt_layers(&params, &secret).unwrap();
        let topo = ObservationTopology::new([1, 2], 2).unwrap();
        let obs = ObservationSet::generate(&topo, &exact, &trace, &mut rng).unwrap();
        let posterior = exact_posterior_oracle(&graph, &obs).unwrap();
        for (pos, &s) in secret.iter().enumerate() {
            assert!(posterior[pos][s as usize] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn oracle_guard_rejects_large_instances() {
        let params = FieldParams::ml_kem();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(3329, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let secret = random_poly(&params, &mut rng);
        let trace = intt_layers(&params, &secret).unwrap();
        let topo = ObservationTopology::new(1..=7, 7).unwrap();
        let obs = ObservationSet::generate(&topo, &channel, &trace, &mut rng).unwrap();
        assert!(matches!(
            exact_posterior_oracle(&graph, &obs),
            Err(Error::InvalidParams(_))
        ));
    }

    #[test]
    fn key_rank_trivial_cases() {
        let delta = |x: usize| {
            let mut v = vec![0.0; 17];
            v[x] = 1.0;
            v
        };
        let beliefs = vec![delta(3), delta(7), delta(11), delta(2)];
        let truth = vec![3, 7, 11, 2];
        assert_eq!(key_rank(&beliefs, &truth, 100).unwrap(), KeyRank::Exact(1));

        // One coefficient has the truth in second place.
        let mut second = delta(3);
        second[3] = 0.4;
        second[5] = 0.6;
        let beliefs = vec![second, delta(7), delta(11), delta(2)];
        assert_eq!(key_rank(&beliefs, &truth, 100).unwrap(), KeyRank::Exact(2));

        assert!(key_rank(&beliefs, &truth, 0).is_err());
        assert!(key_rank(&beliefs, &[1, 2], 10).is_err());
    }

    #[test]
    fn key_rank_matches_exhaustive_oracle() {
        let q = 17usize;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let beliefs: Vec<Vec<f64>> = (0..4)
                .map(|_| {
                    let mut v: Vec<f64> = (0..q).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = v.iter().sum();
                    v.iter_mut().for_each(|x| *x /= s);
                    v
                })
                .collect();
            let truth: Vec<u32> = (0..4).map(|_| rng.gen_range(0..q as u32)).collect();

            let truth_score: f64 = beliefs
                .iter()
                .zip(&truth)
                .map(|(b, &t)| b[t as usize].max(PROB_FLOOR).ln())
                .sum();
            let mut better = 0u64;
            for a in 0..q {
                for b in 0..q {
                    for c in 0..q {
                        for d in 0..q {
                            let score = beliefs[0][a].max(PROB_FLOOR).ln()
                                + beliefs[1][b].max(PROB_FLOOR).ln()
                                + beliefs[2][c].max(PROB_FLOOR).ln()
                                + beliefs[3][d].max(PROB_FLOOR).ln();
                            if score > truth_score {
                                better += 1;
                            }
                        }
                    }
                }
            }
            let expect = better + 1;
            match key_rank(&beliefs, &truth, 200_000).unwrap() {
                KeyRank::Exact(r) => assert_eq!(r, expect, "seed {seed}"),
                KeyRank::ExceedsBudget { .. } => {
                    assert!(expect > 200_000, "seed {seed} gave up early")
                }
            }
        }
    }

    #[test]
    fn key_rank_budget_marker() {
        // Flat beliefs: astronomically many ties — everything prunes, but a
        // slightly-peaked truthless landscape forces exploration.
        let q = 17usize;
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let beliefs: Vec<Vec<f64>> = (0..6)
            .map(|_| {
                let mut v: Vec<f64> = (0..q).map(|_| rng.gen_range(0.5..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            })
            .collect();
        // Truth at each coefficient's weakest entry: rank near q^6.
        let truth: Vec<u32> = beliefs
            .iter()
            .map(|b| {
                let mut worst = 0usize;
                for (i, &p) in b.iter().enumerate() {
                    if p < b[worst] {
                        worst = i;
                    }
                }
                worst as u32
            })
            .collect();
        match key_rank(&beliefs, &truth, 2_000).unwrap() {
            KeyRank::ExceedsBudget { explored } => assert!(explored <= 2_000),
            KeyRank::Exact(r) => panic!("expected budget exhaustion, got rank {r}"),
        }
    }

    #[test]
    #[ignore = "timing probe for the full-scale kernel; run with --ignored --nocapture"]
    fn full_scale_iteration_timing() {
        let params = FieldParams::ml_kem();
        let graph = build_graph(&params);
        let channel = channel_from_snr_n(3329, 3000.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let secret = random_poly(&params, &mut rng);
        let trace = intt_layers(&params, &secret).unwrap();
        let topo = ObservationTopology::new(1..=7, 7).unwrap();
        let obs = ObservationSet::generate(&topo, &channel, &trace, &mut rng).unwrap();
        let build_start = std::time::Instant::now();
        let mut state = init_state(&graph, &obs).unwrap();
        println!("init: {:?}", build_start.elapsed());
        for i in 0..3 {
            let t = std::time::Instant::now();
            let change = state.iterate(0.5).unwrap();
            println!("iteration {i}: {:?} (max change {change:.3e})", t.elapsed());
        }
        println!("entropy after 3: {:.3}", state.mean_level0_entropy());
    }
}
