//! The side network run alongside the frozen backbone.
//!
//! Blocks `1..=A` only accumulate down-projected backbone tokens into the
//! side state `X`. Blocks `A+1..=L` accumulate, refine the result over the
//! kNN graph of patch centers, and add an up-projection back into the token
//! stream. Because nothing flows from the accumulation blocks back into the
//! backbone, blocks `1..=A+1` of the backbone never need a gradient.
//!
//! Layer types D (down), G (graph refinement) and U (up) each own a list of
//! parameter groups; a [`SharingMap`] assigns every block instance of a type
//! to one group, and all instances of a group bind the same tape nodes.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, Linear};
use crate::error::{Error, Result};
use crate::geometry::NeighborGraph;
use crate::matrix::Matrix;
use crate::params::{Component, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::{NodeId, Scope, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Std,
    Sl,
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RefineFn {
    EfficientEdgeConv,
    OriginalEdgeConv,
    SimpleGraphConv,
    MaxPool,
}

impl RefineFn {
    pub const ALL: [RefineFn; 4] = [
        RefineFn::MaxPool,
        RefineFn::SimpleGraphConv,
        RefineFn::OriginalEdgeConv,
        RefineFn::EfficientEdgeConv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RefineFn::EfficientEdgeConv => "efficient_edgeconv",
            RefineFn::OriginalEdgeConv => "original_edgeconv",
            RefineFn::SimpleGraphConv => "simple_graph_conv",
            RefineFn::MaxPool => "max_pool",
        }
    }

    /// Parameters of one G group at side width `dp`.
    pub fn group_params(self, dp: usize) -> usize {
        match self {
            RefineFn::EfficientEdgeConv | RefineFn::OriginalEdgeConv => 3 * dp * dp + dp,
            RefineFn::SimpleGraphConv => 2 * dp * dp + dp,
            RefineFn::MaxPool => 0,
        }
    }
}

impl fmt::Display for RefineFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RefineFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RefineFn::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown refinement function `{s}`")))
    }
}

/// Block-index groups (1-based) sharing one parameter set, per layer type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharingMap {
    pub down: Vec<Vec<usize>>,
    pub graph: Vec<Vec<usize>>,
    pub up: Vec<Vec<usize>>,
}

impl SharingMap {
    /// Consecutive runs of `run` instances per layer type; `None` shares one
    /// group across all instances.
    pub fn runs(layers: usize, a_blocks: usize, run: Option<usize>) -> Self {
        let chunk = |blocks: Vec<usize>| -> Vec<Vec<usize>> {
            if blocks.is_empty() {
                return Vec::new();
            }
            match run {
                None | Some(0) => vec![blocks],
                Some(r) => blocks.chunks(r).map(<[usize]>::to_vec).collect(),
            }
        };
        let m_blocks: Vec<usize> = (a_blocks + 1..=layers).collect();
        Self {
            down: chunk((1..=layers).collect()),
            graph: chunk(m_blocks.clone()),
            up: chunk(m_blocks),
        }
    }

    fn check(groups: &[Vec<usize>], expected: &[usize], what: &str) -> Result<Vec<usize>> {
        let max = expected.iter().copied().max().unwrap_or(0);
        let mut owner = vec![usize::MAX; max + 1];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Config(format!("{what} sharing group {g} is empty")));
            }
            for &b in members {
                if !expected.contains(&b) {
                    return Err(Error::Config(format!("{what} sharing map names block {b}, which has no {what} layer")));
                }
                if owner[b] != usize::MAX {
                    return Err(Error::Config(format!("{what} sharing groups overlap at block {b}")));
                }
                owner[b] = g;
            }
        }
        if let Some(&b) = expected.iter().find(|&&b| owner[b] == usize::MAX) {
            return Err(Error::Config(format!("{what} sharing map misses block {b}")));
        }
        Ok(owner)
    }

    /// Per-block group index for each layer type, indexed by block number.
    fn resolve(&self, layers: usize, a_blocks: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        let all: Vec<usize> = (1..=layers).collect();
        let m: Vec<usize> = (a_blocks + 1..=layers).collect();
        Ok((
            Self::check(&self.down, &all, "down")?,
            Self::check(&self.graph, &m, "graph")?,
            Self::check(&self.up, &m, "up")?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagConfig {
    pub d: usize,
    pub d_prime: usize,
    pub layers: usize,
    pub a_blocks: usize,
    pub k: usize,
    pub variant: Variant,
    pub refine: RefineFn,
    pub sharing: SharingMap,
    /// Whether each center counts among its own neighbors.
    pub include_self: bool,
}

impl StagConfig {
    /// `A = L/2`, one shared group per layer type.
    pub fn std(d: usize, layers: usize, k: usize) -> Self {
        let a = layers / 2;
        Self {
            d,
            d_prime: d / 2,
            layers,
            a_blocks: a,
            k,
            variant: Variant::Std,
            refine: RefineFn::EfficientEdgeConv,
            sharing: SharingMap::runs(layers, a, None),
            include_self: false,
        }
    }

    /// `A = L/4`, sharing within consecutive runs of three instances.
    pub fn sl(d: usize, layers: usize, k: usize) -> Self {
        let a = layers / 4;
        Self {
            d,
            d_prime: d / 2,
            layers,
            a_blocks: a,
            k,
            variant: Variant::Sl,
            refine: RefineFn::EfficientEdgeConv,
            sharing: SharingMap::runs(layers, a, Some(3)),
            include_self: false,
        }
    }

    pub fn custom(d: usize, d_prime: usize, layers: usize, a_blocks: usize, k: usize, share_run: Option<usize>) -> Self {
        Self {
            d,
            d_prime,
            layers,
            a_blocks,
            k,
            variant: Variant::Custom,
            refine: RefineFn::EfficientEdgeConv,
            sharing: SharingMap::runs(layers, a_blocks.min(layers), share_run),
            include_self: false,
        }
    }

    pub fn with_refine(mut self, refine: RefineFn) -> Self {
        self.refine = refine;
        self
    }

    pub fn m_blocks(&self) -> usize {
        self.layers.saturating_sub(self.a_blocks)
    }

    pub fn is_m_block(&self, l: usize) -> bool {
        l > self.a_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_blocks > self.layers {
            return Err(Error::Config(format!("A = {} exceeds L = {}", self.a_blocks, self.layers)));
        }
        if self.d == 0 || self.d_prime == 0 {
            return Err(Error::Config("side widths must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        match self.variant {
            Variant::Std => {
                if self.a_blocks != self.layers / 2 {
                    return Err(Error::Config(format!("std variant needs A = L/2 = {}", self.layers / 2)));
                }
                if self.sharing != SharingMap::runs(self.layers, self.a_blocks, None) {
                    return Err(Error::Config("std variant shares one group per layer type".into()));
                }
            }
            Variant::Sl => {
                if self.a_blocks != self.layers / 4 {
                    return Err(Error::Config(format!("sl variant needs A = L/4 = {}", self.layers / 4)));
                }
                if self.sharing != SharingMap::runs(self.layers, self.a_blocks, Some(3)) {
                    return Err(Error::Config("sl variant shares within runs of three".into()));
                }
            }
            Variant::Custom => {}
        }
        self.sharing.resolve(self.layers, self.a_blocks)?;
        Ok(())
    }

    pub fn down_params(&self) -> usize {
        self.d * self.d_prime + self.d_prime
    }

    pub fn graph_params(&self) -> usize {
        self.refine.group_params(self.d_prime)
    }

    pub fn up_params(&self) -> usize {
        self.d_prime * self.d + self.d
    }
}

/// Closed-form tunable parameter count of the side network.
pub fn count_side_params(config: &StagConfig) -> usize {
    config.sharing.down.len() * config.down_params()
        + config.sharing.graph.len() * config.graph_params()
        + config.sharing.up.len() * config.up_params()
}

#[derive(Clone, Debug)]
pub enum GraphParams {
    /// `W′` (self term), `W2` (neighbor term), then `φ`.
    Efficient { w_self: ParamId, w_nbr: ParamId, phi: Linear },
    /// `W ∈ R^{2d′×d′}` on `(h_i ∥ h_j − h_i)`, then `φ`.
    Original { w: ParamId, phi: Linear },
    Simple { w: ParamId, phi: Linear },
    MaxPool,
}

#[derive(Clone, Debug)]
pub struct SideNetwork {
    pub config: StagConfig,
    pub down: Vec<Linear>,
    pub graph: Vec<GraphParams>,
    pub up: Vec<Linear>,
    down_of: Vec<usize>,
    graph_of: Vec<usize>,
    up_of: Vec<usize>,
}

impl SideNetwork {
    /// Registers side parameters: fan-based uniform init for D and G, zeros
    /// for U so that a fresh side network leaves the backbone unchanged.
    pub fn build<T: Real>(config: StagConfig, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (down_of, graph_of, up_of) = config.sharing.resolve(config.layers, config.a_blocks)?;
        let (d, dp) = (config.d, config.d_prime);
        let c = Component::Side;
        let down = (0..config.sharing.down.len())
            .map(|g| Linear::new(store, &format!("side/down.{g}"), d, dp, true, c, rng))
            .collect();
        let graph = (0..config.sharing.graph.len())
            .map(|g| {
                let name = |s: &str| format!("side/graph.{g}.{s}");
                match config.refine {
                    RefineFn::EfficientEdgeConv => GraphParams::Efficient {
                        w_self: store.insert_uniform(name("w_self"), dp, dp, 2 * dp, c, rng),
                        w_nbr: store.insert_uniform(name("w_nbr"), dp, dp, 2 * dp, c, rng),
                        phi: Linear::new(store, &name("phi"), dp, dp, true, c, rng),
                    },
                    RefineFn::OriginalEdgeConv => GraphParams::Original {
                        w: store.insert_uniform(name("w"), 2 * dp, dp, 2 * dp, c, rng),
                        phi: Linear::new(store, &name("phi"), dp, dp, true, c, rng),
                    },
                    RefineFn::SimpleGraphConv => GraphParams::Simple {
                        w: store.insert_uniform(name("w"), dp, dp, dp, c, rng),
                        phi: Linear::new(store, &name("phi"), dp, dp, true, c, rng),
                    },
                    RefineFn::MaxPool => GraphParams::MaxPool,
                }
            })
            .collect();
        let up = (0..config.sharing.up.len())
            .map(|g| Linear::zeros(store, &format!("side/up.{g}"), dp, d, c))
            .collect();
        Ok(Self { config, down, graph, up, down_of, graph_of, up_of })
    }

    pub fn down_for(&self, l: usize) -> &Linear {
        &self.down[self.down_of[l]]
    }

    pub fn graph_for(&self, l: usize) -> &GraphParams {
        &self.graph[self.graph_of[l]]
    }

    pub fn up_for(&self, l: usize) -> &Linear {
        &self.up[self.up_of[l]]
    }

    /// Parameter ids registered by this network, in group order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let lin = |l: &Linear, ids: &mut Vec<ParamId>| {
            ids.push(l.weight);
            ids.extend(l.bias);
        };
        for l in &self.down {
            lin(l, &mut ids);
        }
        for g in &self.graph {
            match g {
                GraphParams::Efficient { w_self, w_nbr, phi } => {
                    ids.extend([*w_self, *w_nbr]);
                    lin(phi, &mut ids);
                }
                GraphParams::Original { w, phi } | GraphParams::Simple { w, phi } => {
                    ids.push(*w);
                    lin(phi, &mut ids);
                }
                GraphParams::MaxPool => {}
            }
        }
        for l in &self.up {
            lin(l, &mut ids);
        }
        ids
    }
}

/// `x_i ← D(t_i) + x_i`, row-wise. Serves both accumulation and the first
/// step of a modulation block.
pub fn accumulate<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    t_prev: NodeId,
    x_prev: NodeId,
    down: &Linear,
) -> Result<NodeId> {
    let projected = down.apply(tape, store, t_prev)?;
    tape.add(projected, x_prev)
}

/// `t_i ← U(x_i) + t_i`.
pub fn modulate<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: NodeId,
    t: NodeId,
    up: &Linear,
) -> Result<NodeId> {
    let lifted = up.apply(tape, store, x)?;
    tape.add(lifted, t)
}

fn self_rows(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

fn check_graph<T: Real>(tape: &Tape<T>, h: NodeId, graph: &NeighborGraph) -> Result<usize> {
    let n = tape.value(h).rows();
    graph.validate(n)?;
    Ok(n)
}

/// `x_i = φ(max_j act(h_i W′ + h_j W2))`: both projections are computed
/// once per node and the neighbor term is gathered.
pub fn refine_efficient_edgeconv<T: Real>(
    tape: &mut Tape<T>,
    h: NodeId,
    graph: &NeighborGraph,
    w_self: NodeId,
    w_nbr: NodeId,
    phi: (NodeId, Option<NodeId>),
) -> Result<NodeId> {
    let n = check_graph(tape, h, graph)?;
    let own = tape.matmul(h, w_self)?;
    let nbr = tape.matmul(h, w_nbr)?;
    let own_e = tape.gather_rows(own, &self_rows(n, graph.k))?;
    let nbr_e = tape.gather_rows(nbr, &graph.indices)?;
    let edges = tape.add(own_e, nbr_e)?;
    let edges = tape.act(edges);
    let pooled = tape.group_max(edges, graph.k)?;
    tape.linear(pooled, phi.0, phi.1)
}

/// `x_i = φ(max_j act((h_i ∥ h_j − h_i) W))`, transforming all `n·k` edge
/// features.
pub fn refine_original_edgeconv<T: Real>(
    tape: &mut Tape<T>,
    h: NodeId,
    graph: &NeighborGraph,
    w: NodeId,
    phi: (NodeId, Option<NodeId>),
) -> Result<NodeId> {
    let n = check_graph(tape, h, graph)?;
    let hi = tape.gather_rows(h, &self_rows(n, graph.k))?;
    let hj = tape.gather_rows(h, &graph.indices)?;
    let diff = tape.sub(hj, hi)?;
    let cat = tape.concat_cols(&[hi, diff])?;
    let edges = tape.matmul(cat, w)?;
    let edges = tape.act(edges);
    let pooled = tape.group_max(edges, graph.k)?;
    tape.linear(pooled, phi.0, phi.1)
}

/// `x_i = φ(max_j act(h_j W))`.
pub fn refine_simple_graph_conv<T: Real>(
    tape: &mut Tape<T>,
    h: NodeId,
    graph: &NeighborGraph,
    w: NodeId,
    phi: (NodeId, Option<NodeId>),
) -> Result<NodeId> {
    check_graph(tape, h, graph)?;
    let projected = tape.matmul(h, w)?;
    let nbr = tape.gather_rows(projected, &graph.indices)?;
    let nbr = tape.act(nbr);
    let pooled = tape.group_max(nbr, graph.k)?;
    tape.linear(pooled, phi.0, phi.1)
}

/// `x_i = max_j h_j`.
pub fn refine_max_pool<T: Real>(tape: &mut Tape<T>, h: NodeId, graph: &NeighborGraph) -> Result<NodeId> {
    check_graph(tape, h, graph)?;
    let nbr = tape.gather_rows(h, &graph.indices)?;
    tape.group_max(nbr, graph.k)
}

pub fn refine<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    h: NodeId,
    graph: &NeighborGraph,
    params: &GraphParams,
) -> Result<NodeId> {
    let bind_phi = |tape: &mut Tape<T>, phi: &Linear| (tape.param(store, phi.weight), phi.bias.map(|b| tape.param(store, b)));
    match params {
        GraphParams::Efficient { w_self, w_nbr, phi } => {
            let ws = tape.param(store, *w_self);
            let wn = tape.param(store, *w_nbr);
            let phi = bind_phi(tape, phi);
            refine_efficient_edgeconv(tape, h, graph, ws, wn, phi)
        }
        GraphParams::Original { w, phi } => {
            let w = tape.param(store, *w);
            let phi = bind_phi(tape, phi);
            refine_original_edgeconv(tape, h, graph, w, phi)
        }
        GraphParams::Simple { w, phi } => {
            let w = tape.param(store, *w);
            let phi = bind_phi(tape, phi);
            refine_simple_graph_conv(tape, h, graph, w, phi)
        }
        GraphParams::MaxPool => refine_max_pool(tape, h, graph),
    }
}

/// Per-block intermediates of one forward pass; index `l` holds block `l`
/// (index 0 is the input state).
#[derive(Clone, Debug, Default)]
pub struct StagTrace {
    pub tokens: Vec<NodeId>,
    pub side: Vec<NodeId>,
    pub hidden: Vec<Option<NodeId>>,
}

impl StagTrace {
    pub fn output(&self) -> NodeId {
        *self.tokens.last().expect("trace holds at least T^0")
    }
}

/// Runs the backbone blocks with the side network attached. With
/// `side = None` this is the bare backbone.
pub fn stag_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    backbone: &Backbone,
    side: Option<&SideNetwork>,
    t0: NodeId,
    pos: NodeId,
    graph: Option<&NeighborGraph>,
) -> Result<StagTrace> {
    let layers = backbone.config.layers;
    let mut trace = StagTrace { tokens: vec![t0], side: Vec::new(), hidden: vec![None] };
    let mut x = None;
    if let Some(side) = side {
        if side.config.layers != layers || side.config.d != backbone.config.d {
            return Err(Error::Config(format!(
                "side network built for L={}, d={} but backbone has L={layers}, d={}",
                side.config.layers, side.config.d, backbone.config.d
            )));
        }
        let n = tape.value(t0).rows();
        let prev = tape.set_scope(Scope::Side(0));
        let zero = tape.constant(Matrix::zeros(n, side.config.d_prime));
        tape.set_scope(prev);
        trace.side.push(zero);
        x = Some(zero);
    }
    let mut t = t0;
    for l in 1..=layers {
        let t_prev = t;
        t = backbone.block(tape, store, l, t_prev, pos)?;
        if let (Some(side), Some(x_prev)) = (side, x) {
            let prev = tape.set_scope(Scope::Side(l));
            let down = side.down_for(l);
            if !side.config.is_m_block(l) {
                let xl = accumulate(tape, store, t_prev, x_prev, down)?;
                x = Some(xl);
                trace.hidden.push(None);
            } else {
                let graph = graph.ok_or_else(|| Error::Graph("modulation blocks need a neighbor graph".into()))?;
                let h = accumulate(tape, store, t_prev, x_prev, down)?;
                let xl = refine(tape, store, h, graph, side.graph_for(l))?;
                t = modulate(tape, store, xl, t, side.up_for(l))?;
                x = Some(xl);
                trace.hidden.push(Some(h));
            }
            trace.side.push(x.expect("side state set above"));
            tape.set_scope(prev);
        } else {
            trace.hidden.push(None);
        }
        trace.tokens.push(t);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_graph() -> NeighborGraph {
        NeighborGraph { k: 1, indices: vec![1, 0, 1] }
    }

    #[test]
    fn full_scale_side_counts() {
        assert_eq!(count_side_params(&StagConfig::std(8, 4, 2)), 128);
        assert_eq!(count_side_params(&StagConfig::std(384, 12, 8)), 258_816);
        let sl = StagConfig::sl(384, 12, 8);
        assert_eq!(sl.a_blocks, 3);
        assert_eq!((sl.sharing.down.len(), sl.sharing.graph.len(), sl.sharing.up.len()), (4, 3, 3));
        assert_eq!(count_side_params(&sl), 850_368);
    }

    #[test]
    fn stored_side_params_match_formula() {
        for cfg in [StagConfig::std(8, 4, 2), StagConfig::sl(8, 12, 2), StagConfig::custom(8, 4, 6, 1, 2, Some(2))] {
            for refine in RefineFn::ALL {
                let cfg = cfg.clone().with_refine(refine);
                let mut store = ParamStore::<f64>::new();
                SideNetwork::build(cfg.clone(), &mut store, &mut RngStream::new(0, "side")).unwrap();
                assert_eq!(store.count_elements(|_| true), count_side_params(&cfg), "{refine}");
            }
        }
    }

    #[test]
    fn up_projection_starts_at_zero() {
        let mut store = ParamStore::<f32>::new();
        let side = SideNetwork::build(StagConfig::std(8, 4, 2), &mut store, &mut RngStream::new(0, "s")).unwrap();
        for up in &side.up {
            assert!(store.value(up.weight).as_slice().iter().all(|&v| v == 0.0));
            assert!(store.value(up.bias.unwrap()).as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn bad_sharing_maps_are_rejected() {
        let mut cfg = StagConfig::custom(8, 4, 4, 2, 2, None);
        cfg.sharing.down = vec![vec![1, 2], vec![2, 3, 4]];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sharing.down = vec![vec![1, 2, 3]];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.sharing.down = vec![vec![1, 2, 3, 4]];
        cfg.sharing.graph = vec![vec![2, 3, 4]];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut std = StagConfig::std(8, 4, 2);
        std.a_blocks = 1;
        assert!(std.validate().is_err());
    }

    #[test]
    fn accumulate_examples() {
        let mut store = ParamStore::<f64>::new();
        let down = Linear {
            weight: store.insert("w", Matrix::from_rows(&[[1.0], [2.0]]), Component::Side),
            bias: Some(store.insert("b", Matrix::zeros(1, 1), Component::Side)),
        };
        let mut tape = Tape::new();
        let t = tape.constant(Matrix::from_rows(&[[3.0, 4.0]]));
        let x = tape.constant(Matrix::from_rows(&[[5.0]]));
        let out = accumulate(&mut tape, &store, t, x, &down).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[16.0]);

        let zero = Linear {
            weight: store.insert("z", Matrix::zeros(2, 1), Component::Side),
            bias: Some(store.insert("zb", Matrix::zeros(1, 1), Component::Side)),
        };
        let out = accumulate(&mut tape, &store, t, x, &zero).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn modulate_examples() {
        let mut store = ParamStore::<f64>::new();
        let up = Linear {
            weight: store.insert("w", Matrix::from_rows(&[[1.0, 2.0]]), Component::Side),
            bias: Some(store.insert("b", Matrix::zeros(1, 2), Component::Side)),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[[3.0]]));
        let t = tape.constant(Matrix::from_rows(&[[10.0, 20.0]]));
        let out = modulate(&mut tape, &store, x, t, &up).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[13.0, 26.0]);

        let zero = Linear::zeros(&mut store, "u0", 1, 2, Component::Side);
        let out = modulate(&mut tape, &store, x, t, &zero).unwrap();
        assert_eq!(tape.value(out), tape.value(t));
    }

    #[test]
    fn refinement_reduces_to_neighbor_max() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Matrix::from_rows(&[[1.0], [5.0], [3.0]]));
        let zero = tape.constant(Matrix::zeros(1, 1));
        let eye = tape.constant(Matrix::identity(1));
        let b0 = tape.constant(Matrix::zeros(1, 1));
        let g = chain_graph();

        let out = refine_efficient_edgeconv(&mut tape, h, &g, zero, eye, (eye, Some(b0))).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[5.0, 1.0, 5.0]);
        let out = refine_max_pool(&mut tape, h, &g).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[5.0, 1.0, 5.0]);
        let out = refine_simple_graph_conv(&mut tape, h, &g, eye, (eye, Some(b0))).unwrap();
        assert_eq!(tape.value(out).as_slice(), &[5.0, 1.0, 5.0]);
    }

    #[test]
    fn original_edgeconv_projections() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Matrix::from_rows(&[[1.0, -2.0], [5.0, 0.5], [-3.0, 2.0]]));
        let g = NeighborGraph { k: 2, indices: vec![1, 2, 0, 2, 1, 0] };
        let eye = tape.constant(Matrix::identity(2));
        let b0 = tape.constant(Matrix::zeros(1, 2));
        let act = |v: f64| if v > 0.0 { v } else { 0.2 * v };

        let upper = tape.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]));
        let out = refine_original_edgeconv(&mut tape, h, &g, upper, (eye, Some(b0))).unwrap();
        let expected = tape.value(h).map(act);
        assert_eq!(tape.value(out), &expected);

        let lower = tape.constant(Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]));
        let out = refine_original_edgeconv(&mut tape, h, &g, lower, (eye, Some(b0))).unwrap();
        let hv = tape.value(h).clone();
        let expected = Matrix::from_fn(3, 2, |i, c| {
            g.row(i).iter().map(|&j| act(hv.get(j, c) - hv.get(i, c))).fold(f64::MIN, f64::max)
        });
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn empty_rows_are_graph_errors() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(Matrix::zeros(3, 1));
        let empty = NeighborGraph { k: 0, indices: vec![] };
        assert!(matches!(refine_max_pool(&mut tape, h, &empty), Err(Error::Graph(_))));
        let bad = NeighborGraph { k: 1, indices: vec![1, 3, 0] };
        assert!(matches!(refine_max_pool(&mut tape, h, &bad), Err(Error::Graph(_))));
    }
}
