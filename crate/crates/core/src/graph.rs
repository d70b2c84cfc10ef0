//! The inverse-NTT cascade as a factor graph, plus observability analysis.
//!
//! Variables are the cascade's intermediate values, addressed by
//! `(level, position)` with level 0 the input and level `K` the final
//! (unscaled) state. Each butterfly of layer `l` becomes one degree-4 factor
//! tying `(l-1, j)` and `(l-1, j+len)` to `(l, j)` and `(l, j+len)`.
//!
//! Observability is described by the set of observed layers (levels `1..=K`;
//! the masked input level 0 is never observable). Four necessary conditions
//! for key recovery are evaluated per layer set:
//!
//! * NC1 — layer 1 observed;
//! * NC2 — the final layer observed;
//! * NC3 — no gap of more than 2 consecutive unobserved layers between
//!   observed ones;
//! * NC4 — at least 4 layers observed.
//!
//! [`gap_masking_complete`] checks the countermeasure built on these: masking
//! three consecutive interior layers leaves every non-empty subset of the
//! still-observable layers in violation of at least one condition.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{gs_butterfly, intt_layers, FieldParams};

/// A variable of the layered model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarId {
    pub level: usize,
    pub pos: usize,
}

/// One Gentleman–Sande butterfly constraint:
/// `u_out = u_in + v_in`, `v_out = zeta * (v_in - u_in)` (mod q).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ButterflyFactor {
    /// Layer `1..=K` this butterfly belongs to.
    pub layer: usize,
    /// Twiddle of the butterfly's schedule group.
    pub zeta: u32,
    pub u_in: VarId,
    pub v_in: VarId,
    pub u_out: VarId,
    pub v_out: VarId,
}

impl ButterflyFactor {
    /// The four incident variables in port order `[u_in, v_in, u_out, v_out]`.
    pub fn ports(&self) -> [VarId; 4] {
        [self.u_in, self.v_in, self.u_out, self.v_out]
    }
}

/// Factor graph over the cascade's variables.
///
/// The variable set is always the full `(K + 1) * n` grid; [`FactorGraph::subgraph`]
/// keeps the grid but restricts the factor set (isolated variables then simply
/// carry their local evidence).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorGraph {
    pub params: FieldParams,
    pub factors: Vec<ButterflyFactor>,
}

/// Build the full factor graph of an instance.
pub fn build_graph(params: &FieldParams) -> FactorGraph {
    let zetas = params.layer_group_zetas();
    let mut factors = Vec::with_capacity(params.factor_count());
    for layer in 1..=params.layers {
        let len = params.len_at_layer(layer);
        for (group, &zeta) in zetas[layer - 1].iter().enumerate() {
            let start = group * 2 * len;
            for j in start..start + len {
                factors.push(ButterflyFactor {
                    layer,
                    zeta,
                    u_in: VarId { level: layer - 1, pos: j },
                    v_in: VarId { level: layer - 1, pos: j + len },
                    u_out: VarId { level: layer, pos: j },
                    v_out: VarId { level: layer, pos: j + len },
                });
            }
        }
    }
    debug_assert_eq!(factors.len(), params.factor_count());
    FactorGraph {
        params: params.clone(),
        factors,
    }
}

impl FactorGraph {
    /// Flat index of a variable: `level * n + pos`.
    pub fn var_index(&self, v: VarId) -> usize {
        debug_assert!(v.level <= self.params.layers && v.pos < self.params.n);
        v.level * self.params.n + v.pos
    }

    /// Total number of variables (`n * (K + 1)`, independent of factor subset).
    pub fn var_count(&self) -> usize {
        self.params.variable_count()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    /// A graph over the same variable grid with only the selected factors.
    pub fn subgraph(&self, factor_indices: &[usize]) -> Result<FactorGraph> {
        let mut factors = Vec::with_capacity(factor_indices.len());
        for &i in factor_indices {
            let f = self.factors.get(i).ok_or_else(|| {
                Error::InvalidInput(format!("factor index {i} out of range"))
            })?;
            factors.push(f.clone());
        }
        Ok(FactorGraph {
            params: self.params.clone(),
            factors,
        })
    }

    /// Run the cascade on `input` and count how many factors the resulting
    /// trace satisfies. Each factor is checked with its **own** stored zeta,
    /// so a corrupted factor is detected. Returns `(satisfied, total)`.
    pub fn validate(&self, input: &[u32]) -> Result<(usize, usize)> {
        let trace = intt_layers(&self.params, input)?;
        let q = self.params.q;
        let mut ok = 0;
        for f in &self.factors {
            let (uo, vo) = gs_butterfly(
                trace.value(f.u_in.level, f.u_in.pos),
                trace.value(f.v_in.level, f.v_in.pos),
                f.zeta,
                q,
            );
            if trace.value(f.u_out.level, f.u_out.pos) == uo
                && trace.value(f.v_out.level, f.v_out.pos) == vo
            {
                ok += 1;
            }
        }
        Ok((ok, self.factors.len()))
    }

    /// Deterministic JSON export (stable field order, factors in layer order).
    pub fn export_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    /// Moralized variable-adjacency: every factor becomes a 4-clique.
    fn moral_adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.var_count()];
        for f in &self.factors {
            let p = f.ports().map(|v| self.var_index(v));
            for a in 0..4 {
                for b in 0..4 {
                    if a != b {
                        adj[p[a]].insert(p[b]);
                    }
                }
            }
        }
        adj
    }
}

/// Greedy elimination upper bound on the treewidth of the moralized variable
/// graph (min-degree order, lowest index on ties — deterministic).
///
/// Isolated variables are eliminated with no neighbors, so a factor-free
/// graph reports 0; a single butterfly reports its 4-clique width of 3.
pub fn treewidth_upper_bound(graph: &FactorGraph) -> usize {
    let adj = graph.moral_adjacency();
    greedy_min_degree_width(adj)
}

fn greedy_min_degree_width(mut adj: Vec<BTreeSet<usize>>) -> usize {
    let n = adj.len();
    let mut alive: Vec<bool> = vec![true; n];
    let mut width = 0;
    for _ in 0..n {
        // Pick the live vertex of minimum degree (lowest index on ties).
        let mut best: Option<(usize, usize)> = None;
        for v in 0..n {
            if alive[v] {
                let d = adj[v].len();
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, v));
                }
            }
        }
        let (deg, v) = best.expect("a live vertex remains");
        width = width.max(deg);
        // Connect v's neighborhood into a clique, then remove v.
        let neigh: Vec<usize> = adj[v].iter().copied().collect();
        for (i, &a) in neigh.iter().enumerate() {
            for &b in &neigh[i + 1..] {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for &a in &neigh {
            adj[a].remove(&v);
        }
        adj[v].clear();
        alive[v] = false;
    }
    width
}

/// A set of observed layers for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationTopology {
    /// Observed layers, each in `1..=layers_total`.
    pub observed: BTreeSet<usize>,
    /// Total layers `K` of the instance.
    pub layers_total: usize,
}

/// Necessary-condition report for one observed-layer set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcReport {
    /// Layer 1 observed.
    pub nc1: bool,
    /// Final layer observed.
    pub nc2: bool,
    /// Maximum run of unobserved layers between observed ones is <= 2.
    pub nc3: bool,
    /// At least 4 layers observed.
    pub nc4: bool,
    pub max_gap: usize,
    pub observed_count: usize,
}

impl NcReport {
    /// True when at least one necessary condition fails.
    pub fn violates_any(&self) -> bool {
        !(self.nc1 && self.nc2 && self.nc3 && self.nc4)
    }
}

impl ObservationTopology {
    pub fn new(layers: impl IntoIterator<Item = usize>, layers_total: usize) -> Result<Self> {
        let observed: BTreeSet<usize> = layers.into_iter().collect();
        if layers_total == 0 {
            return Err(Error::InvalidParams("layers_total must be >= 1".into()));
        }
        if let Some(&l) = observed.iter().find(|&&l| l == 0 || l > layers_total) {
            return Err(Error::InvalidParams(format!(
                "observed layer {l} outside 1..={layers_total} (level 0 is the masked input)"
            )));
        }
        Ok(Self {
            observed,
            layers_total,
        })
    }

    /// Largest run of unobserved layers strictly between consecutive observed
    /// ones. Zero when fewer than two layers are observed.
    pub fn max_gap(&self) -> usize {
        let mut prev: Option<usize> = None;
        let mut gap = 0;
        for &l in &self.observed {
            if let Some(p) = prev {
                gap = gap.max(l - p - 1);
            }
            prev = Some(l);
        }
        gap
    }

    /// Evaluate all four necessary conditions.
    ///
    /// An empty set fails every condition (there is nothing to recover from),
    /// while a singleton passes NC3 vacuously (its `max_gap` is 0).
    pub fn nc_profile(&self) -> NcReport {
        let count = self.observed.len();
        let max_gap = self.max_gap();
        NcReport {
            nc1: self.observed.contains(&1),
            nc2: self.observed.contains(&self.layers_total),
            nc3: count > 0 && max_gap <= 2,
            nc4: count >= 4,
            max_gap,
            observed_count: count,
        }
    }
}

/// Result of a gap-masking completeness check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapMaskingReport {
    /// Masked (unobservable) layers.
    pub masked: Vec<usize>,
    /// Every non-empty subset of the remaining layers with its NC profile.
    pub subsets: Vec<(Vec<usize>, NcReport)>,
    /// True when every subset violates at least one necessary condition.
    pub complete: bool,
}

/// Check that masking the three consecutive layers `mask_start..=mask_start+2`
/// of a `layers_total`-layer cascade denies key recovery: every non-empty
/// subset of the still-observable layers must violate some necessary
/// condition. The mask must be interior (`2 <= mask_start <= layers_total-3`)
/// so that an unobserved stretch of at least three layers splits the cascade.
pub fn gap_masking_complete(mask_start: usize, layers_total: usize) -> Result<GapMaskingReport> {
    if mask_start < 2 || mask_start + 2 >= layers_total {
        return Err(Error::InvalidParams(format!(
            "mask {{{mask_start}..{}}} is not interior to 1..={layers_total}",
            mask_start + 2
        )));
    }
    let masked: Vec<usize> = (mask_start..mask_start + 3).collect();
    let visible: Vec<usize> = (1..=layers_total)
        .filter(|l| !masked.contains(l))
        .collect();
    let mut subsets = Vec::new();
    let mut complete = true;
    for bits in 1u32..(1 << visible.len()) {
        let subset: Vec<usize> = visible
            .iter()
            .enumerate()
            .filter(|(i, _)| bits >> i & 1 == 1)
            .map(|(_, &l)| l)
            .collect();
        let report = ObservationTopology::new(subset.iter().copied(), layers_total)?.nc_profile();
        if !report.violates_any() {
            complete = false;
        }
        subsets.push((subset, report));
    }
    Ok(GapMaskingReport {
        masked,
        subsets,
        complete,
    })
}
