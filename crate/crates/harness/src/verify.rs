//! Self-contained property suites run by `stag verify`.
//!
//! Every suite builds its own random instances from a fixed seed, so a
//! failure message carries enough to replay the failing case.

use std::fmt;

use stag_core::accounting::{count_flops, refine_transform_flops, tally_tape, CostInputs};
use stag_core::backbone::BackboneConfig;
use stag_core::geometry::{
    dist2, farthest_point_sample, knn_graph, normalize_cloud, AugmentDraw, NeighborGraph, PatchCenters, Point,
    PointCloud, SCALE_RANGE, SHIFT_RANGE,
};
use stag_core::gradcheck::{finite_diff_grad, relative_error};
use stag_core::matrix::Matrix;
use stag_core::model::{Model, ModelConfig, Strategy};
use stag_core::side::{refine_efficient_edgeconv, refine_original_edgeconv, RefineFn, StagConfig, Variant};
use stag_core::tape::{Scope, Tape};
use stag_core::train::cosine_lr;
use stag_core::{Error, Precision, Real, Result, RngStream};

pub const EQUIVALENCE_TOL_SINGLE: f64 = 1e-5;
pub const EQUIVALENCE_TOL_DOUBLE: f64 = 1e-12;
pub const GRADIENT_REL_TOL: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-6;
pub const NORMALIZE_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub equivalence_instances: usize,
    /// Builds the efficient form with `W′ = W1` instead of `W1 − W2`; the
    /// equivalence suite must then fail.
    pub corrupt_w_prime: bool,
    /// Accumulation-block counts for the elision suite at `L = 4`.
    pub elision_a_blocks: Vec<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { seed: 0, equivalence_instances: 100, corrupt_w_prime: false, elision_a_blocks: vec![0, 1, 2, 3] }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn outcome(name: &'static str, r: Result<String>) -> SuiteOutcome {
    match r {
        Ok(detail) => SuiteOutcome { name, passed: true, detail },
        Err(e) => SuiteOutcome { name, passed: false, detail: e.to_string() },
    }
}

pub fn verify(opts: &VerifyOptions) -> Vec<SuiteOutcome> {
    vec![
        outcome("edgeconv_equivalence_single", edgeconv_equivalence::<f32>(opts.equivalence_instances, opts.seed, opts.corrupt_w_prime).map(|d| format!("max abs diff {d:.3e}"))),
        outcome("edgeconv_equivalence_double", edgeconv_equivalence::<f64>(opts.equivalence_instances, opts.seed, opts.corrupt_w_prime).map(|d| format!("max abs diff {d:.3e}"))),
        outcome("gradient_check", gradient_check(opts.seed).map(|errs| {
            let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
            format!("{} groups, worst relative error {worst:.3e}", errs.len())
        })),
        outcome("init_identity", init_identity::<f32>(opts.seed).and_then(|a| Ok(a + init_identity::<f64>(opts.seed)?)).map(|n| format!("{n} configurations identical"))),
        outcome("elision_tape_agreement", elision(&opts.elision_a_blocks, opts.seed)),
        outcome("flop_ratio", flop_ratio()),
        outcome("lr_endpoints", lr_endpoints()),
        outcome("geometry_bounds", geometry(opts.seed)),
    ]
}

fn tolerance<T: Real>() -> f64 {
    match T::PRECISION {
        Precision::Single => EQUIVALENCE_TOL_SINGLE,
        Precision::Double => EQUIVALENCE_TOL_DOUBLE,
    }
}

fn random_points(n: usize, rng: &mut RngStream) -> Vec<Point> {
    (0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()
}

fn random_matrix(rows: usize, cols: usize, bound: f64, rng: &mut RngStream) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

fn stack_rows<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("same width")
}

/// Original EdgeConv with `W = [W1; W2]` against the efficient form with
/// `W′ = W1 − W2`. Returns the largest element-wise difference.
pub fn edgeconv_equivalence<T: Real>(instances: usize, seed: u64, corrupt: bool) -> Result<f64> {
    let base = RngStream::new(seed, "equivalence");
    let tol = tolerance::<T>();
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = base.derive(i);
        let n = 2 + rng.index(31);
        let dp = 1 + rng.index(16);
        let k = 1 + rng.index(8.min(n - 1));
        let centers = PatchCenters::from_points(random_points(n, &mut rng));
        let graph = knn_graph(&centers, k)?;
        let bound = 1.0 / (2.0 * dp as f64).sqrt();
        let h: Matrix<T> = Matrix::from_fn(n, dp, |_, _| rng.normal()).cast();
        let w1: Matrix<T> = random_matrix(dp, dp, bound, &mut rng).cast();
        let w2: Matrix<T> = random_matrix(dp, dp, bound, &mut rng).cast();
        let phi_w: Matrix<T> = random_matrix(dp, dp, 1.0 / (dp as f64).sqrt(), &mut rng).cast();
        let phi_b: Matrix<T> = random_matrix(1, dp, 1.0 / (dp as f64).sqrt(), &mut rng).cast();
        let w_prime = if corrupt { w1.clone() } else { w1.zip_map(&w2, |a, b| a - b)? };

        let mut tape = Tape::<T>::new();
        let hn = tape.constant(h);
        let phi = (tape.constant(phi_w), Some(tape.constant(phi_b)));
        let w = tape.constant(stack_rows(&w1, &w2));
        let original = refine_original_edgeconv(&mut tape, hn, &graph, w, phi)?;
        let ws = tape.constant(w_prime);
        let wn = tape.constant(w2);
        let efficient = refine_efficient_edgeconv(&mut tape, hn, &graph, ws, wn, phi)?;
        let diff = tape.value(original).max_abs_diff(tape.value(efficient));
        if !(diff <= tol) {
            return Err(Error::Oracle(format!(
                "instance {i} (seed {seed}, n={n}, d'={dp}, k={k}): max abs diff {diff:.3e} > {tol:e}"
            )));
        }
        worst = worst.max(diff);
    }
    Ok(worst)
}

/// The small configuration used for gradient checks: `n = 8`, `d = 8`,
/// `d′ = 4`, `L = 4`, `A = 2`, `k = 2`.
pub fn tiny_config(classes: usize) -> ModelConfig {
    let backbone = BackboneConfig { d: 8, layers: 4, tokens: 8, heads: 2, mlp_ratio: 2, group_size: 4 };
    ModelConfig { backbone, side: Some(StagConfig::std(8, 4, 2)), classes, dropout: 0.5 }
}

fn random_cloud(points: usize, label: usize, rng: &mut RngStream) -> Result<PointCloud> {
    let mut cloud = PointCloud::new(random_points(points, rng));
    cloud.label = Some(label);
    normalize_cloud(&cloud)
}

/// Central differences against the tape for every tunable group of
/// STAG-std on the tiny configuration, in double precision. The side
/// network is randomised first so that the zero up-projection does not
/// hide the other groups.
pub fn gradient_check(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = RngStream::new(seed, "gradient_check");
    let config = tiny_config(3);
    let mut model = Model::<f64>::new(config, &mut rng.derive("backbone"), &rng.derive("init"))?;
    model.apply_strategy(Strategy::StagStd)?;
    for id in model.store.tunable_ids() {
        if model.store.entry(id).component == stag_core::params::Component::Side {
            let m = model.store.value_mut(id);
            for v in m.as_mut_slice() {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
    }
    let cloud = random_cloud(48, 1, &mut rng)?;
    let input = model.prepare(&cloud, None)?;
    let label = 1;
    let loss_of = |model: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &input, None)?;
        let l = tape.cross_entropy(fwd.logits, label)?;
        Ok(tape.value(l).get(0, 0))
    };

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &input, None)?;
    let l = tape.cross_entropy(fwd.logits, label)?;
    tape.backward(l)?;
    let ids = model.store.tunable_ids();
    let analytic: Vec<Matrix<f64>> = ids
        .iter()
        .map(|&id| {
            tape.param_grad(id)
                .cloned()
                .ok_or_else(|| Error::Oracle(format!("no gradient for `{}`", model.store.entry(id).name)))
        })
        .collect::<Result<_>>()?;

    let mut errors = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let original = model.store.value(id).clone();
        let numeric = finite_diff_grad(
            |theta| {
                model.store.value_mut(id).as_mut_slice().copy_from_slice(theta.as_slice());
                loss_of(&model)
            },
            &original,
            GRADIENT_STEP,
        );
        *model.store.value_mut(id) = original;
        let numeric = numeric?;
        let name = model.store.entry(id).name.clone();
        let err = relative_error(grad, &numeric, 1e-10);
        if !(err <= GRADIENT_REL_TOL) {
            return Err(Error::Oracle(format!(
                "group `{name}` (seed {seed}): relative error {err:.3e} > {GRADIENT_REL_TOL:e}"
            )));
        }
        errors.push((name, err));
    }
    Ok(errors)
}

fn desk_side(variant: Variant, refine: RefineFn) -> StagConfig {
    let bb = BackboneConfig::desk();
    let cfg = match variant {
        Variant::Sl => StagConfig::sl(bb.d, bb.layers, 8),
        _ => StagConfig::std(bb.d, bb.layers, 8),
    };
    cfg.with_refine(refine)
}

/// A freshly built side network leaves `T^L` and the logits bit-identical
/// to the bare backbone. Returns the number of configurations checked.
pub fn init_identity<T: Real>(seed: u64) -> Result<usize> {
    let mut rng = RngStream::new(seed, "init_identity");
    let cloud = random_cloud(256, 0, &mut rng)?;
    let mut checked = 0;
    for variant in [Variant::Std, Variant::Sl] {
        for refine in RefineFn::ALL {
            let config = ModelConfig {
                backbone: BackboneConfig::desk(),
                side: Some(desk_side(variant, refine)),
                classes: 4,
                dropout: 0.5,
            };
            let model = Model::<T>::new(config, &mut rng.derive("backbone"), &rng.derive("init"))?;
            let input = model.prepare(&cloud, None)?;
            let mut tape = Tape::new();
            let with = model.forward(&mut tape, &input, None)?;
            let bare = model.forward_bare(&mut tape, &input)?;
            let dt = tape.value(with.tokens).max_abs_diff(tape.value(bare.tokens));
            let dl = tape.value(with.logits).max_abs_diff(tape.value(bare.logits));
            if dt != 0.0 || dl != 0.0 {
                return Err(Error::Oracle(format!(
                    "{variant:?}/{refine} ({}): T^L differs by {dt:e}, logits by {dl:e}",
                    T::PRECISION.as_str()
                )));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn desk_inputs(side: StagConfig) -> CostInputs {
    CostInputs { backbone: BackboneConfig::desk(), side, classes: 4, precision: Precision::Single, batch_size: 16 }
}

/// One backward pass per configuration; the visit log must skip blocks
/// `1..=A` and its FLOP tally must equal the analytic count exactly.
pub fn elision(a_blocks: &[usize], seed: u64) -> Result<String> {
    let mut rng = RngStream::new(seed, "elision");
    let cloud = random_cloud(256, 2, &mut rng)?;
    let bb = BackboneConfig::desk();
    let mut cases: Vec<(Strategy, StagConfig)> = a_blocks
        .iter()
        .map(|&a| (Strategy::StagCustom, StagConfig::custom(bb.d, bb.d / 2, bb.layers, a, 8, None)))
        .collect();
    let template = StagConfig::std(bb.d, bb.layers, 8);
    cases.extend([Strategy::Full, Strategy::HeadOnly, Strategy::StagStd, Strategy::StagSl].map(|s| (s, template.clone())));

    let mut lines = Vec::new();
    let mut custom_backward = Vec::new();
    for (strategy, side) in cases {
        let inputs = desk_inputs(side.clone());
        let config = inputs.model_config(strategy);
        let mut model = Model::<f32>::new(config, &mut rng.derive("backbone"), &rng.derive("init"))?;
        model.apply_strategy(strategy)?;
        let input = model.prepare(&cloud, None)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &input, None)?;
        tape.set_scope(Scope::Loss);
        let l = tape.cross_entropy(fwd.logits, 2)?;
        tape.backward(l)?;
        let measured = tally_tape(&tape, bb.layers);
        let analytic = count_flops(&inputs, strategy)?;
        let label = if strategy == Strategy::StagCustom { format!("A={}", side.a_blocks) } else { strategy.to_string() };
        if measured != analytic {
            return Err(Error::Oracle(format!("{label}: tape tally {measured:?} != analytic {analytic:?}")));
        }
        let visited: Vec<usize> = (1..=bb.layers)
            .filter(|&b| tape.visit_log().iter().any(|v| v.scope == Scope::Block(b)))
            .collect();
        if strategy == Strategy::StagCustom {
            if let Some(&b) = visited.iter().find(|&&b| b <= side.a_blocks) {
                return Err(Error::Oracle(format!("{label}: block {b} visited in backward")));
            }
            custom_backward.push((side.a_blocks, measured.backward));
            lines.push(format!("{label}: {} of blocks 1..=A elided, visited {visited:?}", side.a_blocks));
        }
    }
    custom_backward.sort();
    if let Some(w) = custom_backward.windows(2).find(|w| w[1].1 >= w[0].1) {
        return Err(Error::Oracle(format!(
            "backward FLOPs not strictly decreasing in A: A={} → {}, A={} → {}",
            w[0].0, w[0].1, w[1].0, w[1].1
        )));
    }
    lines.push("tape and analytic FLOPs agree for full, head_only, stag_std, stag_sl".into());
    Ok(lines.join("; "))
}

/// Transform-stage FLOPs of the two EdgeConv forms: analytic ratio `k`,
/// and the tape's forward count equals the analytic count.
pub fn flop_ratio() -> Result<String> {
    let (n, dp) = (32, 4);
    let mut rng = RngStream::new(0, "flop_ratio");
    for k in [2, 4, 8, 16] {
        let eff = refine_transform_flops(RefineFn::EfficientEdgeConv, n, k, dp);
        let orig = refine_transform_flops(RefineFn::OriginalEdgeConv, n, k, dp);
        if orig != eff * k as u64 {
            return Err(Error::Oracle(format!("k={k}: ratio {orig}/{eff} is not {k}")));
        }
        let centers = PatchCenters::from_points(random_points(n, &mut rng));
        let graph = knn_graph(&centers, k)?;
        let phi_flops = 2 * (n * dp * dp) as u64;
        let measure = |efficient: bool| -> Result<u64> {
            let mut tape = Tape::<f64>::new();
            let h = tape.constant(Matrix::filled(n, dp, 0.5));
            let phi = (tape.constant(Matrix::identity(dp)), None);
            if efficient {
                let a = tape.constant(Matrix::identity(dp));
                let b = tape.constant(Matrix::identity(dp));
                refine_efficient_edgeconv(&mut tape, h, &graph, a, b, phi)?;
            } else {
                let w = tape.constant(Matrix::zeros(2 * dp, dp));
                refine_original_edgeconv(&mut tape, h, &graph, w, phi)?;
            }
            Ok(tape.total_forward_flops() - phi_flops)
        };
        let (te, to) = (measure(true)?, measure(false)?);
        if te != eff || to != orig {
            return Err(Error::Oracle(format!("k={k}: tape counts ({te}, {to}) != analytic ({eff}, {orig})")));
        }
    }
    Ok("original/efficient = k for k in {2, 4, 8, 16}; tape counts match".into())
}

pub fn lr_endpoints() -> Result<String> {
    let (hi, lo) = (5e-4, 1e-6);
    for total in [1, 2, 99, 100, 299] {
        let first = cosine_lr(0, total, hi, lo)?;
        let last = cosine_lr(total, total, hi, lo)?;
        if first != hi || last != lo {
            return Err(Error::Oracle(format!("T={total}: endpoints {first:e}, {last:e}")));
        }
    }
    let mid = cosine_lr(50, 100, hi, lo)?;
    if (mid - 2.505e-4).abs() > 1e-15 {
        return Err(Error::Oracle(format!("midpoint {mid:e} != 2.505e-4")));
    }
    if cosine_lr(101, 100, hi, lo).is_ok() {
        return Err(Error::Oracle("t > T accepted".into()));
    }
    Ok("lr(0) = 5e-4 and lr(T) = 1e-6 exactly; midpoint 2.505e-4".into())
}

/// Brute-force kNN rows: every other center sorted by (distance, index).
pub fn brute_force_knn(centers: &[Point], k: usize) -> Vec<Vec<usize>> {
    (0..centers.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> =
                (0..centers.len()).filter(|&j| j != i).map(|j| (dist2(&centers[i], &centers[j]), j)).collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Greedy FPS recomputing every minimum distance from scratch.
pub fn greedy_fps(points: &[Point], n: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < n {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in points.iter().enumerate() {
            let d = chosen.iter().map(|&c| dist2(p, &points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

pub fn geometry(seed: u64) -> Result<String> {
    let mut rng = RngStream::new(seed, "geometry");
    for i in 0..100 {
        let m = 2 + rng.index(300);
        let scale = rng.uniform(0.01, 100.0);
        let offset = [rng.normal() * 10.0, rng.normal() * 10.0, rng.normal() * 10.0];
        let pts = (0..m).map(|_| [0, 1, 2].map(|a| offset[a] + scale * rng.normal())).collect();
        let norm = normalize_cloud(&PointCloud::new(pts))?;
        let c = norm.centroid();
        let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let r = norm.points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        let again = normalize_cloud(&norm)?;
        let drift = norm
            .points
            .iter()
            .zip(&again.points)
            .flat_map(|(a, b)| (0..3).map(move |k| (a[k] - b[k]).abs()))
            .fold(0.0, f64::max);
        if cn > NORMALIZE_TOL || (r - 1.0).abs() > NORMALIZE_TOL || drift > NORMALIZE_TOL {
            return Err(Error::Oracle(format!(
                "normalize instance {i} (m={m}): centroid {cn:e}, radius {r}, idempotence drift {drift:e}"
            )));
        }
    }
    for i in 0..10_000 {
        let d = AugmentDraw::sample(&mut rng);
        let ok = d.scale.iter().all(|s| (SCALE_RANGE.0..SCALE_RANGE.1).contains(s))
            && d.shift.iter().all(|s| (SHIFT_RANGE.0..SHIFT_RANGE.1).contains(s));
        if !ok {
            return Err(Error::Oracle(format!("augmentation draw {i} out of bounds: {d:?}")));
        }
    }
    for i in 0..50 {
        let n = 2 + rng.index(63);
        let k = 1 + rng.index(n - 1);
        let pts = random_points(n, &mut rng);
        let graph = knn_graph(&PatchCenters::from_points(pts.clone()), k)?;
        if graph != NeighborGraph::from_rows(&brute_force_knn(&pts, k))? {
            return Err(Error::Oracle(format!("kNN instance {i} (n={n}, k={k}) disagrees with brute force")));
        }
        let m = n.max(8) + rng.index(64);
        let cloud = random_points(m, &mut rng);
        let take = 1 + rng.index(m);
        let fixed = farthest_point_sample(&cloud, take, None)?;
        let seeded = farthest_point_sample(&cloud, take, Some(&mut rng.derive(i)))?;
        if fixed.indices != greedy_fps(&cloud, take, 0) || seeded.indices != greedy_fps(&cloud, take, seeded.indices[0]) {
            return Err(Error::Oracle(format!("FPS instance {i} (m={m}, n={take}) disagrees with the greedy oracle")));
        }
    }
    Ok("normalization, augmentation bounds, kNN and FPS oracles agree".into())
}
