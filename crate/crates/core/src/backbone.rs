//! Frozen point-cloud Transformer: mini-PointNet tokenizer, center
//! embedding and pre-norm blocks.

use crate::error::{Error, Result};
use crate::geometry::{Patches, PatchCenters};
use crate::matrix::Matrix;
use crate::params::{Component, ParamId, ParamStore};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tape::{NodeId, Scope, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Token width.
    pub d: usize,
    pub layers: usize,
    /// Number of patches (tokens) per cloud.
    pub tokens: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Points per patch.
    pub group_size: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        Self { d: 32, layers: 4, tokens: 16, heads: 4, mlp_ratio: 4, group_size: 32 }
    }

    pub fn full_scale() -> Self {
        Self { d: 384, layers: 12, tokens: 64, heads: 6, mlp_ratio: 4, group_size: 32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.tokens == 0 || self.heads == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "token width {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !self.d.is_multiple_of(2) {
            return Err(Error::Config(format!("token width {} must be even", self.d)));
        }
        if self.mlp_ratio == 0 || self.group_size == 0 {
            return Err(Error::Config("mlp_ratio and group_size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.d * self.mlp_ratio
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        component: Component,
        rng: &mut RngStream,
    ) -> Self {
        let weight =
            store.insert_uniform(format!("{name}.weight"), fan_in, fan_out, fan_in, component, rng);
        let bias = bias.then(|| {
            store.insert_uniform(format!("{name}.bias"), 1, fan_out, fan_in, component, rng)
        });
        Self { weight, bias }
    }

    pub fn zeros<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        component: Component,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), Matrix::zeros(fan_in, fan_out), component);
        let bias = Some(store.insert(format!("{name}.bias"), Matrix::zeros(1, fan_out), component));
        Self { weight, bias }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, component: Component) -> Self {
        let gamma = store.insert(format!("{name}.weight"), Matrix::filled(1, d, T::one()), component);
        let beta = store.insert(format!("{name}.bias"), Matrix::zeros(1, d), component);
        Self { gamma, beta }
    }

    fn apply<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    /// `d → 3d` query/key/value projection, no bias.
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub tok1: Linear,
    pub tok2: Linear,
    pub pos1: Linear,
    pub pos2: Linear,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

impl Backbone {
    /// Registers randomly initialised backbone parameters in `store`.
    pub fn build<T: Real>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let tok1 = Linear::new(store, "tokenizer.fc1", 3, d / 2, true, Component::Tokenizer, rng);
        let tok2 = Linear::new(store, "tokenizer.fc2", d / 2, d, true, Component::Tokenizer, rng);
        let pos1 = Linear::new(store, "pos_embed.fc1", 3, d, true, Component::PosEmbed, rng);
        let pos2 = Linear::new(store, "pos_embed.fc2", d, d, true, Component::PosEmbed, rng);
        let blocks = (1..=config.layers)
            .map(|l| {
                let c = Component::Block(l);
                let name = |s: &str| format!("blocks.{l}.{s}");
                Block {
                    norm1: Norm::new(store, &name("norm1"), d, c),
                    qkv: Linear::new(store, &name("attn.qkv"), d, 3 * d, false, c, rng),
                    proj: Linear::new(store, &name("attn.proj"), d, d, true, c, rng),
                    norm2: Norm::new(store, &name("norm2"), d, c),
                    fc1: Linear::new(store, &name("mlp.fc1"), d, config.hidden(), true, c, rng),
                    fc2: Linear::new(store, &name("mlp.fc2"), config.hidden(), d, true, c, rng),
                }
            })
            .collect();
        let norm = Norm::new(store, "norm", d, Component::FinalNorm);
        Ok(Self { config, tok1, tok2, pos1, pos2, blocks, norm })
    }

    /// Initial tokens: a shared point-wise `3 → d/2 → d` map followed by a
    /// max over each patch.
    pub fn tokenize<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        patches: &Patches,
    ) -> Result<NodeId> {
        if patches.group_size == 0 || patches.points.is_empty() {
            return Err(Error::Grouping("empty patch".into()));
        }
        let prev = tape.set_scope(Scope::Tokenizer);
        let pts = points_matrix(&patches.points);
        let x = tape.constant(pts);
        let h = self.tok1.apply(tape, store, x)?;
        let h = tape.act(h);
        let h = self.tok2.apply(tape, store, h)?;
        let out = tape.group_max(h, patches.group_size);
        tape.set_scope(prev);
        out
    }

    /// `3 → d → d` embedding of each patch center.
    pub fn positional_embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        centers: &PatchCenters,
    ) -> Result<NodeId> {
        let prev = tape.set_scope(Scope::PosEmbed);
        let c = tape.constant(points_matrix(&centers.centers));
        let h = self.pos1.apply(tape, store, c)?;
        let h = tape.act(h);
        let out = self.pos2.apply(tape, store, h);
        tape.set_scope(prev);
        out
    }

    /// Pre-norm block `l` (1-based):
    /// `T ← T + MHSA(LN(T + pos))`, then `T ← T + MLP(LN(T))`.
    pub fn block<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        l: usize,
        tokens: NodeId,
        pos: NodeId,
    ) -> Result<NodeId> {
        let blk = &self.blocks[l - 1];
        let prev = tape.set_scope(Scope::Block(l));
        let d = self.config.d;
        let dh = self.config.head_dim();
        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();

        let y = tape.add(tokens, pos)?;
        let z = blk.norm1.apply(tape, store, y)?;
        let qkv = blk.qkv.apply(tape, store, z)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = tape.slice_cols(qkv, h * dh, dh)?;
            let k = tape.slice_cols(qkv, d + h * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.row_softmax(scores);
            heads.push(tape.matmul(attn, v)?);
        }
        let mixed = tape.concat_cols(&heads)?;
        let attn_out = blk.proj.apply(tape, store, mixed)?;
        let t1 = tape.add(tokens, attn_out)?;

        let z2 = blk.norm2.apply(tape, store, t1)?;
        let m = blk.fc1.apply(tape, store, z2)?;
        let m = tape.act(m);
        let m = blk.fc2.apply(tape, store, m)?;
        let out = tape.add(t1, m);
        tape.set_scope(prev);
        out
    }

    pub fn final_norm<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let prev = tape.set_scope(Scope::FinalNorm);
        let out = self.norm.apply(tape, store, x);
        tape.set_scope(prev);
        out
    }

    /// Runs blocks `1..=L` with no side network.
    pub fn forward_blocks<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        t0: NodeId,
        pos: NodeId,
    ) -> Result<NodeId> {
        let mut t = t0;
        for l in 1..=self.config.layers {
            t = self.block(tape, store, l, t, pos)?;
        }
        Ok(t)
    }
}

pub(crate) fn points_matrix<T: Real>(points: &[[f64; 3]]) -> Matrix<T> {
    Matrix::from_fn(points.len(), 3, |r, c| T::lit(points[r][c]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (BackboneConfig, ParamStore<f64>, Backbone) {
        let cfg = BackboneConfig { d: 8, layers: 2, tokens: 4, heads: 2, mlp_ratio: 2, group_size: 3 };
        let mut store = ParamStore::new();
        let bb = Backbone::build(cfg, &mut store, &mut RngStream::new(1, "bb")).unwrap();
        (cfg, store, bb)
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let v = store.value_mut(id);
            *v = Matrix::zeros(v.rows(), v.cols());
        }
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Matrix<f64> {
        let mut r = RngStream::new(seed, "tokens");
        Matrix::from_fn(n, d, |_, _| r.uniform(-1.0, 1.0))
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut cfg = BackboneConfig::desk();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_tokenizer_gives_bias_rows() {
        let (_, mut store, bb) = small();
        zero_all(&mut store);
        let b2 = store.find("tokenizer.fc2.bias").unwrap();
        *store.value_mut(b2) = Matrix::from_fn(1, 8, |_, c| c as f64);
        let patches = Patches { group_size: 3, points: vec![[0.3, -0.1, 0.2]; 12] };
        let mut tape = Tape::new();
        let t0 = bb.tokenize(&mut tape, &store, &patches).unwrap();
        for r in 0..4 {
            assert_eq!(tape.value(t0).row(r), store.value(b2).row(0));
        }
    }

    #[test]
    fn tokenizer_is_symmetric_within_a_patch() {
        let (_, store, bb) = small();
        let mut r = RngStream::new(5, "pts");
        let pts: Vec<[f64; 3]> = (0..12).map(|_| [r.normal(), r.normal(), r.normal()]).collect();
        let mut shuffled = pts.clone();
        shuffled[0..3].reverse();
        shuffled.swap(4, 5);
        let mut tape = Tape::new();
        let a = bb.tokenize(&mut tape, &store, &Patches { group_size: 3, points: pts.clone() }).unwrap();
        let b = bb.tokenize(&mut tape, &store, &Patches { group_size: 3, points: shuffled }).unwrap();
        assert_eq!(tape.value(a), tape.value(b));

        // identical points: pooled token equals the per-point map
        let same = Patches { group_size: 3, points: vec![pts[0]; 3] };
        let single = Patches { group_size: 1, points: vec![pts[0]] };
        let a = bb.tokenize(&mut tape, &store, &same).unwrap();
        let b = bb.tokenize(&mut tape, &store, &single).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn positional_embedding_is_row_wise() {
        let (_, store, bb) = small();
        let c = PatchCenters::from_points(vec![
            [0.1, 0.2, 0.3],
            [0.1, 0.2, 0.3],
            [-0.5, 0.0, 0.9],
            [0.7, -0.7, 0.0],
        ]);
        let mut tape = Tape::new();
        let e = bb.positional_embed(&mut tape, &store, &c).unwrap();
        let ev = tape.value(e).clone();
        assert_eq!(ev.row(0), ev.row(1));
        let perm = [3, 0, 2, 1];
        let e2 = bb.positional_embed(&mut tape, &store, &c.permuted(&perm)).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(tape.value(e2).row(i), ev.row(p));
        }

        let (_, mut zs, bb) = small();
        zero_all(&mut zs);
        let mut tape = Tape::new();
        let e = bb.positional_embed(&mut tape, &zs, &c).unwrap();
        assert!(tape.value(e).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_block_is_identity() {
        let (cfg, mut store, bb) = small();
        zero_all(&mut store);
        let mut tape = Tape::new();
        let t = tape.constant(random_tokens(cfg.tokens, cfg.d, 2));
        let pos = tape.constant(random_tokens(cfg.tokens, cfg.d, 3));
        let out = bb.block(&mut tape, &store, 1, t, pos).unwrap();
        assert_eq!(tape.value(out), tape.value(t));
    }

    /// Straightforward second implementation of one block.
    fn reference_block(store: &ParamStore<f64>, cfg: &BackboneConfig, l: usize, t: &Matrix<f64>, pos: &Matrix<f64>) -> Matrix<f64> {
        let get = |n: &str| store.value(store.find(&format!("blocks.{l}.{n}")).unwrap()).clone();
        let (n, d) = (t.rows(), t.cols());
        let dh = d / cfg.heads;
        let ln = |x: &Matrix<f64>, g: &Matrix<f64>, b: &Matrix<f64>| {
            Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                (x.get(r, c) - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c)
            })
        };
        let dense = |x: &Matrix<f64>, w: &Matrix<f64>, b: Option<&Matrix<f64>>| {
            Matrix::from_fn(x.rows(), w.cols(), |r, c| {
                (0..x.cols()).map(|k| x.get(r, k) * w.get(k, c)).sum::<f64>() + b.map_or(0.0, |b| b.get(0, c))
            })
        };
        let y = Matrix::from_fn(n, d, |r, c| t.get(r, c) + pos.get(r, c));
        let z = ln(&y, &get("norm1.weight"), &get("norm1.bias"));
        let qkv = dense(&z, &get("attn.qkv.weight"), None);
        let mut mixed = Matrix::zeros(n, d);
        for h in 0..cfg.heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| qkv.get(i, h * dh + c) * qkv.get(j, d + h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..dh {
                    let v: f64 = (0..n).map(|j| e[j] / tot * qkv.get(j, 2 * d + h * dh + c)).sum();
                    mixed.set(i, h * dh + c, v);
                }
            }
        }
        let a = dense(&mixed, &get("attn.proj.weight"), Some(&get("attn.proj.bias")));
        let t1 = Matrix::from_fn(n, d, |r, c| t.get(r, c) + a.get(r, c));
        let z2 = ln(&t1, &get("norm2.weight"), &get("norm2.bias"));
        let h = dense(&z2, &get("mlp.fc1.weight"), Some(&get("mlp.fc1.bias")))
            .map(|v| if v > 0.0 { v } else { 0.2 * v });
        let m = dense(&h, &get("mlp.fc2.weight"), Some(&get("mlp.fc2.bias")));
        Matrix::from_fn(n, d, |r, c| t1.get(r, c) + m.get(r, c))
    }

    #[test]
    fn block_matches_reference_attention() {
        let (cfg, mut store, bb) = small();
        // non-trivial norm affine parameters
        let mut r = RngStream::new(9, "ln");
        for name in ["blocks.1.norm1.weight", "blocks.1.norm1.bias", "blocks.1.norm2.weight"] {
            let id = store.find(name).unwrap();
            *store.value_mut(id) = Matrix::from_fn(1, cfg.d, |_, _| r.uniform(0.5, 1.5));
        }
        let t = random_tokens(cfg.tokens, cfg.d, 4);
        let pos = random_tokens(cfg.tokens, cfg.d, 5);
        let mut tape = Tape::new();
        let tn = tape.constant(t.clone());
        let pn = tape.constant(pos.clone());
        let out = bb.block(&mut tape, &store, 1, tn, pn).unwrap();
        let expected = reference_block(&store, &cfg, 1, &t, &pos);
        assert!(tape.value(out).max_abs_diff(&expected) < 1e-10);
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let (cfg, store, bb) = small();
        let store32: ParamStore<f32> = {
            let mut s = ParamStore::new();
            for (_, e) in store.iter() {
                s.insert(e.name.clone(), e.value.cast(), e.component);
            }
            s
        };
        let t = random_tokens(cfg.tokens, cfg.d, 6).cast::<f32>();
        let pos = random_tokens(cfg.tokens, cfg.d, 7).cast::<f32>();
        let perm = [2, 0, 3, 1];
        let permute = |m: &Matrix<f32>| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(perm[r], c));
        let mut tape = Tape::new();
        let (tn, pn) = (tape.constant(t.clone()), tape.constant(pos.clone()));
        let out = bb.block(&mut tape, &store32, 1, tn, pn).unwrap();
        let (tp, pp) = (tape.constant(permute(&t)), tape.constant(permute(&pos)));
        let out_p = bb.block(&mut tape, &store32, 1, tp, pp).unwrap();
        assert!(tape.value(out_p).max_abs_diff(&permute(tape.value(out))) < 1e-5);
        assert_eq!(tape.value(out_p).shape(), (cfg.tokens, cfg.d));
    }
}
