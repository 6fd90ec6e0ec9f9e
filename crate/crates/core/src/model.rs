//! Backbone, optional side network and prediction head wired together.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_graph, knn_graph_including_self, knn_group, NeighborGraph, PatchCenters, Patches, PointCloud};
use crate::params::{Component, ParamStore};
use crate::real::Real;
use crate::rng::RngStream;
use crate::side::{stag_forward, SideNetwork, StagConfig, StagTrace};
use crate::tape::{NodeId, Tape};
use crate::train::head::Head;

/// Which parameters are fine-tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Full,
    HeadOnly,
    StagStd,
    StagSl,
    StagCustom,
}

impl Strategy {
    pub const TABLE: [Strategy; 4] = [Strategy::Full, Strategy::HeadOnly, Strategy::StagStd, Strategy::StagSl];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Full => "full",
            Strategy::HeadOnly => "head_only",
            Strategy::StagStd => "stag_std",
            Strategy::StagSl => "stag_sl",
            Strategy::StagCustom => "stag_custom",
        }
    }

    pub fn uses_side(self) -> bool {
        matches!(self, Strategy::StagStd | Strategy::StagSl | Strategy::StagCustom)
    }

    /// Whether parameters of `component` are trained under this strategy.
    pub fn tunes(self, component: Component) -> bool {
        match self {
            Strategy::Full => true,
            Strategy::HeadOnly => component == Component::Head,
            _ => matches!(component, Component::Head | Component::Side),
        }
    }

    /// Side configuration implied by the strategy; `custom` is returned
    /// unchanged for [`Strategy::StagCustom`].
    pub fn side_config(self, backbone: &BackboneConfig, custom: &StagConfig) -> Option<StagConfig> {
        let (d, layers, k) = (backbone.d, backbone.layers, custom.k);
        let mut cfg = match self {
            Strategy::Full | Strategy::HeadOnly => return None,
            Strategy::StagStd => StagConfig::std(d, layers, k),
            Strategy::StagSl => StagConfig::sl(d, layers, k),
            Strategy::StagCustom => return Some(custom.clone()),
        };
        cfg.d_prime = custom.d_prime;
        cfg.refine = custom.refine;
        cfg.include_self = custom.include_self;
        Some(cfg)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Strategy::Full, Strategy::HeadOnly, Strategy::StagStd, Strategy::StagSl, Strategy::StagCustom]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub side: Option<StagConfig>,
    pub classes: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        if let Some(side) = &self.side {
            side.validate()?;
            let n = self.backbone.tokens;
            let available = if side.include_self { n } else { n.saturating_sub(1) };
            if side.a_blocks < side.layers && side.k > available {
                return Err(Error::NeighborhoodTooLarge { k: side.k, available });
            }
        }
        Ok(())
    }
}

/// A cloud reduced to patches, centers and the center graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub centers: PatchCenters,
    pub patches: Patches,
    pub graph: Option<NeighborGraph>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub trace: StagTrace,
    /// `T^L`, before the final norm.
    pub tokens: NodeId,
    pub logits: NodeId,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub side: Option<SideNetwork>,
    pub head: Head,
}

impl<T: Real> Model<T> {
    /// Builds every parameter. The backbone stream alone fixes the frozen
    /// weights, so runs with different training seeds share one backbone.
    pub fn new(config: ModelConfig, backbone_rng: &mut RngStream, train_rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::build(config.backbone, &mut store, backbone_rng)?;
        let side = match &config.side {
            Some(cfg) => Some(SideNetwork::build(cfg.clone(), &mut store, &mut train_rng.derive("side_init"))?),
            None => None,
        };
        let head = Head::build(&mut store, config.backbone.d, config.classes, &mut train_rng.derive("head_init"));
        Ok(Self { config, store, backbone, side, head })
    }

    pub fn apply_strategy(&mut self, strategy: Strategy) -> Result<()> {
        if strategy.uses_side() != self.side.is_some() {
            return Err(Error::Config(format!(
                "strategy {strategy} {} a side network but the model {}",
                if strategy.uses_side() { "needs" } else { "does not use" },
                if self.side.is_some() { "has one" } else { "has none" }
            )));
        }
        self.store.set_tunable_where(|e| strategy.tunes(e.component));
        Ok(())
    }

    /// FPS centers, patches and (when a side network is attached) the kNN graph.
    /// `rng = None` starts FPS at point 0.
    pub fn prepare(&self, cloud: &PointCloud, rng: Option<&mut RngStream>) -> Result<Prepared> {
        let cfg = &self.config.backbone;
        let centers = farthest_point_sample(&cloud.points, cfg.tokens, rng)?;
        let patches = knn_group(&cloud.points, &centers, cfg.group_size)?;
        let graph = match &self.side {
            Some(side) if side.config.a_blocks < side.config.layers => Some(if side.config.include_self {
                knn_graph_including_self(&centers, side.config.k)?
            } else {
                knn_graph(&centers, side.config.k)?
            }),
            _ => None,
        };
        Ok(Prepared { centers, patches, graph })
    }

    /// Tokenizer, blocks (with side network if attached), final norm, head.
    /// `dropout` supplies the mask stream in training mode.
    pub fn forward(&self, tape: &mut Tape<T>, input: &Prepared, dropout: Option<&mut RngStream>) -> Result<Forward> {
        self.forward_with(tape, input, self.side.as_ref(), dropout)
    }

    /// As [`Model::forward`] but with the side network detached.
    pub fn forward_bare(&self, tape: &mut Tape<T>, input: &Prepared) -> Result<Forward> {
        self.forward_with(tape, input, None, None)
    }

    fn forward_with(
        &self,
        tape: &mut Tape<T>,
        input: &Prepared,
        side: Option<&SideNetwork>,
        dropout: Option<&mut RngStream>,
    ) -> Result<Forward> {
        let t0 = self.backbone.tokenize(tape, &self.store, &input.patches)?;
        let pos = self.backbone.positional_embed(tape, &self.store, &input.centers)?;
        let trace = stag_forward(tape, &self.store, &self.backbone, side, t0, pos, input.graph.as_ref())?;
        let tokens = trace.output();
        let normed = self.backbone.final_norm(tape, &self.store, tokens)?;
        let rate = dropout.is_some().then_some(self.config.dropout);
        let logits = self.head.forward(tape, &self.store, normed, rate.zip(dropout))?;
        Ok(Forward { trace, tokens, logits })
    }
}
