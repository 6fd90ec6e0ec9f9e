//! Analytic tunable-parameter, FLOP and training-memory accounting.
//!
//! FLOPs cover matrix products only, one multiply-accumulate counting as two
//! FLOPs. Norms, activations, softmax and the kNN search are not counted.
//! The backward cost of a product is its forward cost times the number of
//! operands that need a gradient, which is exactly what the tape logs, so
//! the analytic counts and a tape tally agree to the FLOP.

use std::fmt::Write as _;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Strategy};
use crate::real::{Precision, Real};
use crate::side::{count_side_params, RefineFn, StagConfig};
use crate::tape::{Scope, Tape};
use crate::train::head::{head_param_count, HEAD_HIDDEN};

/// Everything the accounting needs. `side` is the template from which
/// `stag_std` and `stag_sl` take `d′`, `k` and the refinement function,
/// and which `stag_custom` uses as is.
#[derive(Clone, Debug, PartialEq)]
pub struct CostInputs {
    pub backbone: BackboneConfig,
    pub side: StagConfig,
    pub classes: usize,
    pub precision: Precision,
    pub batch_size: usize,
}

impl CostInputs {
    pub fn model_config(&self, strategy: Strategy) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone,
            side: strategy.side_config(&self.backbone, &self.side),
            classes: self.classes,
            dropout: 0.5,
        }
    }
}

/// One matrix product `(m×k)·(k×n)` of a single-sample forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatmulCost {
    pub scope: Scope,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub lhs_grad: bool,
    pub rhs_grad: bool,
    /// Right operand is a stored parameter rather than an activation.
    pub rhs_param: bool,
    /// A gradient arrives from the loss.
    pub reached: bool,
}

impl MatmulCost {
    pub fn forward_flops(&self) -> u64 {
        2 * (self.m * self.k * self.n) as u64
    }

    pub fn grad_operands(&self) -> u64 {
        if !self.reached {
            return 0;
        }
        u64::from(self.lhs_grad) + u64::from(self.rhs_grad)
    }

    pub fn backward_flops(&self) -> u64 {
        self.forward_flops() * self.grad_operands()
    }

    /// Elements kept from the forward pass for the backward products.
    pub fn saved_elements(&self) -> u64 {
        if !self.reached {
            return 0;
        }
        let mut saved = 0;
        if self.rhs_grad {
            saved += self.m * self.k;
        }
        if self.lhs_grad && !self.rhs_param {
            saved += self.k * self.n;
        }
        saved as u64
    }
}

struct Planner {
    out: Vec<MatmulCost>,
    scope: Scope,
    reached: bool,
}

impl Planner {
    /// Records a product and returns whether its output requires a gradient.
    fn mm(&mut self, m: usize, k: usize, n: usize, lhs_grad: bool, rhs_grad: bool, rhs_param: bool) -> bool {
        self.out.push(MatmulCost { scope: self.scope, m, k, n, lhs_grad, rhs_grad, rhs_param, reached: self.reached });
        lhs_grad || rhs_grad
    }
}

/// Every matrix product of one forward pass, in tape order, with the
/// gradient requirements of its operands under `strategy`.
pub fn matmul_plan(config: &ModelConfig, strategy: Strategy) -> Result<Vec<MatmulCost>> {
    config.validate()?;
    if strategy.uses_side() != config.side.is_some() {
        return Err(Error::Config(format!("strategy {strategy} does not match the side configuration")));
    }
    let bb = &config.backbone;
    let (d, n, dh, hid) = (bb.d, bb.tokens, bb.head_dim(), bb.hidden());
    let tune_bb = strategy == Strategy::Full;
    let tune_side = strategy.uses_side();
    let mut p = Planner { out: Vec::new(), scope: Scope::Tokenizer, reached: true };

    let ng = n * bb.group_size;
    let h = p.mm(ng, 3, d / 2, false, tune_bb, true);
    let mut t = p.mm(ng, d / 2, d, h, tune_bb, true);
    p.scope = Scope::PosEmbed;
    let h = p.mm(n, 3, d, false, tune_bb, true);
    let pos = p.mm(n, d, d, h, tune_bb, true);

    let side = config.side.as_ref();
    let side_reached = side.is_some_and(|s| s.a_blocks < s.layers);
    let mut x = false;
    for l in 1..=bb.layers {
        let t_prev = t;
        p.scope = Scope::Block(l);
        let z = t || pos || tune_bb;
        let qkv = p.mm(n, d, 3 * d, z, tune_bb, true);
        let mut mixed = false;
        for _ in 0..bb.heads {
            p.mm(n, dh, n, qkv, qkv, false);
            mixed |= p.mm(n, n, dh, qkv, qkv, false);
        }
        let attn = p.mm(n, d, d, mixed, tune_bb, true);
        let t1 = t || attn || tune_bb;
        let z2 = t1 || tune_bb;
        let m = p.mm(n, d, hid, z2, tune_bb, true);
        let m = p.mm(n, hid, d, m, tune_bb, true);
        t = t1 || m || tune_bb;

        if let Some(s) = side {
            p.scope = Scope::Side(l);
            p.reached = side_reached;
            let dp = s.d_prime;
            let hidden = p.mm(n, d, dp, t_prev, tune_side, true) || x;
            if !s.is_m_block(l) {
                x = hidden;
            } else {
                let (k, g) = (s.k, tune_side);
                let refined = match s.refine {
                    RefineFn::EfficientEdgeConv => {
                        let a = p.mm(n, dp, dp, hidden, g, true);
                        let b = p.mm(n, dp, dp, hidden, g, true);
                        a || b
                    }
                    RefineFn::OriginalEdgeConv => p.mm(n * k, 2 * dp, dp, hidden, g, true),
                    RefineFn::SimpleGraphConv => p.mm(n, dp, dp, hidden, g, true),
                    RefineFn::MaxPool => hidden,
                };
                x = if s.refine == RefineFn::MaxPool { refined } else { p.mm(n, dp, dp, refined, g, true) };
                t = p.mm(n, dp, d, x, g, true) || t;
            }
            p.reached = true;
        }
    }

    p.scope = Scope::Head;
    let normed = t || tune_bb;
    let h = p.mm(1, 2 * d, HEAD_HIDDEN, normed, true, true);
    let h = p.mm(1, HEAD_HIDDEN, HEAD_HIDDEN, h, true, true);
    p.mm(1, HEAD_HIDDEN, config.classes, h, true, true);
    Ok(p.out)
}

/// Parameter count of the backbone including tokenizer, center embedding
/// and final norm.
pub fn backbone_param_count(bb: &BackboneConfig) -> usize {
    let d = bb.d;
    let hid = bb.hidden();
    let tokenizer = (3 * (d / 2) + d / 2) + (d / 2 * d + d);
    let pos = (3 * d + d) + (d * d + d);
    let block = 4 * d + 3 * d * d + (d * d + d) + (d * hid + hid) + (hid * d + d);
    tokenizer + pos + bb.layers * block + 2 * d
}

pub fn total_param_count(config: &ModelConfig) -> usize {
    backbone_param_count(&config.backbone)
        + config.side.as_ref().map_or(0, count_side_params)
        + head_param_count(config.backbone.d, config.classes)
}

/// Closed-form number of trained parameter elements.
pub fn count_tunable_params(inputs: &CostInputs, strategy: Strategy) -> Result<usize> {
    let config = inputs.model_config(strategy);
    config.validate()?;
    let head = head_param_count(config.backbone.d, config.classes);
    Ok(match strategy {
        Strategy::Full => backbone_param_count(&config.backbone) + head,
        Strategy::HeadOnly => head,
        _ => {
            let side = config.side.as_ref().ok_or_else(|| Error::Config(format!("{strategy} needs a side configuration")))?;
            count_side_params(side) + head
        }
    })
}

/// Forward and backward FLOP totals split by region.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub forward: u64,
    pub backward: u64,
    /// Backbone blocks `1..=L`, index `l − 1`.
    pub backward_by_block: Vec<u64>,
    pub backward_side: u64,
    pub backward_head: u64,
    /// Tokenizer and center embedding.
    pub backward_embed: u64,
}

impl FlopTally {
    fn new(layers: usize) -> Self {
        Self { backward_by_block: vec![0; layers], ..Self::default() }
    }

    fn add_backward(&mut self, scope: Scope, flops: u64) {
        self.backward += flops;
        match scope {
            Scope::Block(l) => self.backward_by_block[l - 1] += flops,
            Scope::Side(_) => self.backward_side += flops,
            Scope::Head => self.backward_head += flops,
            Scope::Tokenizer | Scope::PosEmbed => self.backward_embed += flops,
            Scope::Input | Scope::FinalNorm | Scope::Loss => {}
        }
    }
}

/// Per-sample FLOPs of one forward and one backward pass.
pub fn count_flops(inputs: &CostInputs, strategy: Strategy) -> Result<FlopTally> {
    let config = inputs.model_config(strategy);
    let plan = matmul_plan(&config, strategy)?;
    let mut tally = FlopTally::new(config.backbone.layers);
    for mm in &plan {
        tally.forward += mm.forward_flops();
        tally.add_backward(mm.scope, mm.backward_flops());
    }
    Ok(tally)
}

/// The same totals measured from a tape after `backward`.
pub fn tally_tape<T: Real>(tape: &Tape<T>, layers: usize) -> FlopTally {
    let mut tally = FlopTally::new(layers);
    tally.forward = tape.total_forward_flops();
    for v in tape.visit_log() {
        tally.add_backward(v.scope, v.flops);
    }
    tally
}

/// FLOPs of the edge transform of one refinement call over `n` nodes,
/// excluding φ.
pub fn refine_transform_flops(refine: RefineFn, n: usize, k: usize, d_prime: usize) -> u64 {
    let dp = d_prime as u64;
    let (n, k) = (n as u64, k as u64);
    match refine {
        RefineFn::EfficientEdgeConv => 2 * (2 * n * dp * dp),
        RefineFn::OriginalEdgeConv => 2 * n * k * 2 * dp * dp,
        RefineFn::SimpleGraphConv => 2 * n * dp * dp,
        RefineFn::MaxPool => 0,
    }
}

/// Training memory: every parameter, Adam moments and gradients for the
/// tunable ones, and the activations kept for backward across a batch.
pub fn estimate_memory(inputs: &CostInputs, strategy: Strategy) -> Result<u64> {
    let config = inputs.model_config(strategy);
    let plan = matmul_plan(&config, strategy)?;
    let bytes = inputs.precision.bytes() as u64;
    let params = total_param_count(&config) as u64;
    let tunable = count_tunable_params(inputs, strategy)? as u64;
    let saved: u64 = plan.iter().map(MatmulCost::saved_elements).sum();
    Ok((params + 3 * tunable) * bytes + saved * inputs.batch_size as u64 * bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub strategy: Strategy,
    pub tunable_params: usize,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub backward_flops_by_block: Vec<u64>,
    pub side_backward_flops: u64,
    pub head_backward_flops: u64,
    pub embed_backward_flops: u64,
    pub est_memory_bytes: u64,
}

pub fn cost_report(inputs: &CostInputs, strategy: Strategy) -> Result<CostReport> {
    let flops = count_flops(inputs, strategy)?;
    Ok(CostReport {
        strategy,
        tunable_params: count_tunable_params(inputs, strategy)?,
        forward_flops: flops.forward,
        backward_flops: flops.backward,
        backward_flops_by_block: flops.backward_by_block,
        side_backward_flops: flops.backward_side,
        head_backward_flops: flops.backward_head,
        embed_backward_flops: flops.backward_embed,
        est_memory_bytes: estimate_memory(inputs, strategy)?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostTable {
    pub rows: Vec<CostReport>,
}

pub const CSV_HEADER: &str = "strategy,tunable_params,forward_flops,backward_flops,est_memory_bytes";

impl CostTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.strategy, r.tunable_params, r.forward_flops, r.backward_flops, r.est_memory_bytes
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["strategy", "tunable_params", "forward_GFLOPs", "backward_GFLOPs", "memory_MB"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.strategy.to_string(),
                    r.tunable_params.to_string(),
                    format!("{:.4}", r.forward_flops as f64 / 1e9),
                    format!("{:.4}", r.backward_flops as f64 / 1e9),
                    format!("{:.2}", r.est_memory_bytes as f64 / 1e6),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..5)
            .map(|c| cells.iter().map(|row| row[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let mut s = String::new();
        let line = |s: &mut String, row: [&str; 5]| {
            let _ = write!(s, "{:<w$}", row[0], w = widths[0]);
            for c in 1..5 {
                let _ = write!(s, "  {:>w$}", row[c], w = widths[c]);
            }
            s.push('\n');
        };
        line(&mut s, header);
        for row in &cells {
            line(&mut s, [&row[0], &row[1], &row[2], &row[3], &row[4]].map(String::as_str));
        }
        s
    }
}

pub fn cost_table(inputs: &CostInputs, strategies: &[Strategy]) -> Result<CostTable> {
    let rows = strategies.iter().map(|&s| cost_report(inputs, s)).collect::<Result<_>>()?;
    Ok(CostTable { rows })
}
