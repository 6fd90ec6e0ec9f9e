//! Point-cloud preprocessing and neighborhood structure.
//!
//! All nearest-neighbor searches are brute force over squared Euclidean
//! distances, with ties broken by ascending point index.

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type Point = [f64; 3];

pub const SCALE_RANGE: (f64, f64) = (0.67, 1.5);
pub const SHIFT_RANGE: (f64, f64) = (-0.2, 0.2);

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, label: None, source_id: String::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let m = self.points.len().max(1) as f64;
        c.map(|v| v / m)
    }
}

#[inline]
pub fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Moves the centroid to the origin and scales the farthest point onto the
/// unit sphere.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud> {
    let degenerate = || Error::DegenerateCloud { source_id: cloud.source_id.clone() };
    if cloud.points.len() < 2 {
        return Err(degenerate());
    }
    let c = cloud.centroid();
    let mut points: Vec<Point> =
        cloud.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let radius = points.iter().map(norm).fold(0.0, f64::max);
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(degenerate());
    }
    for p in &mut points {
        for v in p.iter_mut() {
            *v /= radius;
        }
    }
    Ok(PointCloud { points, label: cloud.label, source_id: cloud.source_id.clone() })
}

/// Per-axis scale and shift applied by [`augment`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

impl AugmentDraw {
    pub fn sample(rng: &mut RngStream) -> Self {
        let scale = [(); 3].map(|_| rng.uniform(SCALE_RANGE.0, SCALE_RANGE.1));
        let shift = [(); 3].map(|_| rng.uniform(SHIFT_RANGE.0, SHIFT_RANGE.1));
        Self { scale, shift }
    }

    pub fn identity() -> Self {
        Self { scale: [1.0; 3], shift: [0.0; 3] }
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        let points = cloud
            .points
            .iter()
            .map(|p| [0, 1, 2].map(|a| p[a] * self.scale[a] + self.shift[a]))
            .collect();
        PointCloud { points, label: cloud.label, source_id: cloud.source_id.clone() }
    }
}

/// Anisotropic scaling then translation, one independent draw per axis.
pub fn augment(cloud: &PointCloud, rng: &mut RngStream) -> PointCloud {
    AugmentDraw::sample(rng).apply(cloud)
}

/// Patch centers chosen by farthest point sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchCenters {
    pub centers: Vec<Point>,
    /// Index of each center in the source cloud.
    pub indices: Vec<usize>,
}

impl PatchCenters {
    pub fn from_points(centers: Vec<Point>) -> Self {
        let indices = (0..centers.len()).collect();
        Self { centers, indices }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Reorders centers so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            centers: perm.iter().map(|&i| self.centers[i]).collect(),
            indices: perm.iter().map(|&i| self.indices[i]).collect(),
        }
    }
}

/// Greedy farthest point sampling. The seed index is drawn from `rng`, or is
/// 0 when `rng` is `None` (deterministic mode).
pub fn farthest_point_sample(
    points: &[Point],
    n: usize,
    rng: Option<&mut RngStream>,
) -> Result<PatchCenters> {
    let m = points.len();
    if n > m || (n > 0 && m == 0) {
        return Err(Error::SampleSize { requested: n, available: m });
    }
    if n == 0 {
        return Ok(PatchCenters { centers: Vec::new(), indices: Vec::new() });
    }
    let seed = rng.map_or(0, |r| r.index(m));
    let mut chosen = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; m];
    let mut current = seed;
    for _ in 0..n {
        chosen.push(current);
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(PatchCenters { centers: chosen.iter().map(|&i| points[i]).collect(), indices: chosen })
}

/// Indices of the `k` points nearest `query`, skipping `exclude`, ordered by
/// distance then index.
fn nearest(points: &[Point], query: &Point, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| (dist2(p, query), i))
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < order.len() {
        order.select_nth_unstable_by(k, by_key);
        order.truncate(k);
    }
    order.sort_unstable_by(by_key);
    order.into_iter().map(|(_, i)| i).collect()
}

/// `n` groups of `group_size` points around each center, flattened
/// center-major and expressed relative to their center.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub group_size: usize,
    pub points: Vec<Point>,
}

impl Patches {
    pub fn group(&self, i: usize) -> &[Point] {
        &self.points[i * self.group_size..(i + 1) * self.group_size]
    }

    pub fn len(&self) -> usize {
        if self.group_size == 0 {
            0
        } else {
            self.points.len() / self.group_size
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn knn_group(points: &[Point], centers: &PatchCenters, group_size: usize) -> Result<Patches> {
    if group_size == 0 {
        return Err(Error::Grouping("empty patch (group_size = 0)".into()));
    }
    if group_size > points.len() {
        return Err(Error::Grouping(format!(
            "group_size {group_size} exceeds {} points",
            points.len()
        )));
    }
    let mut out = Vec::with_capacity(centers.len() * group_size);
    for c in &centers.centers {
        for i in nearest(points, c, group_size, None) {
            let p = points[i];
            out.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(Patches { group_size, points: out })
}

/// `n×k` table of neighbor indices over patch centers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborGraph {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Graph("ragged neighbor rows".into()));
        }
        Ok(Self { k, indices: rows.concat() })
    }

    pub fn nodes(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.indices.len() / self.k
        }
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Checks every row is non-empty and in range for `n` nodes.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Graph("empty neighbor rows".into()));
        }
        if self.indices.len() != n * self.k {
            return Err(Error::Graph(format!(
                "graph has {} rows, expected {n}",
                self.indices.len() / self.k
            )));
        }
        if let Some(&bad) = self.indices.iter().find(|&&j| j >= n) {
            return Err(Error::Graph(format!("neighbor index {bad} out of range for {n} nodes")));
        }
        Ok(())
    }
}

/// Row `i` holds the `k` nearest centers `j ≠ i`.
pub fn knn_graph(centers: &PatchCenters, k: usize) -> Result<NeighborGraph> {
    build_graph(centers, k, false)
}

/// Variant whose rows may contain the query center itself (at distance 0).
pub fn knn_graph_including_self(centers: &PatchCenters, k: usize) -> Result<NeighborGraph> {
    build_graph(centers, k, true)
}

fn build_graph(centers: &PatchCenters, k: usize, include_self: bool) -> Result<NeighborGraph> {
    let n = centers.len();
    let available = if include_self { n } else { n.saturating_sub(1) };
    if k > available {
        return Err(Error::NeighborhoodTooLarge { k, available });
    }
    if k == 0 {
        return Err(Error::Graph("k must be at least 1".into()));
    }
    let mut indices = Vec::with_capacity(n * k);
    for (i, c) in centers.centers.iter().enumerate() {
        let exclude = if include_self { None } else { Some(i) };
        indices.extend(nearest(&centers.centers, c, k, exclude));
    }
    Ok(NeighborGraph { k, indices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec())
    }

    fn close(a: &Point, b: &Point) -> bool {
        dist2(a, b).sqrt() < 1e-12
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_cloud(&cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])).unwrap();
        assert!(close(&out.points[0], &[-1.0, 0.0, 0.0]));
        assert!(close(&out.points[1], &[1.0, 0.0, 0.0]));

        let out = normalize_cloud(&cloud(&[[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])).unwrap();
        assert!(close(&out.points[0], &[0.0, 0.0, -1.0]));
        assert!(close(&out.points[1], &[0.0, 0.0, 1.0]));

        let same = cloud(&[[0.0; 3]; 5]);
        assert!(matches!(normalize_cloud(&same), Err(Error::DegenerateCloud { .. })));
        assert!(matches!(normalize_cloud(&cloud(&[[1.0; 3]])), Err(Error::DegenerateCloud { .. })));
    }

    #[test]
    fn augment_by_hand() {
        let c = cloud(&[[1.0, 1.0, 1.0]]);
        let draw = AugmentDraw { scale: [0.67, 1.5, 1.0], shift: [0.2, 0.0, -0.2] };
        let out = draw.apply(&c);
        assert!(close(&out.points[0], &[0.87, 1.5, 0.8]));
        assert_eq!(AugmentDraw::identity().apply(&c), c);
    }

    #[test]
    fn fps_examples() {
        let pts: Vec<Point> = [0.0, 1.0, 2.0, 10.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
        let c = farthest_point_sample(&pts, 2, None).unwrap();
        assert_eq!(c.indices, vec![0, 3]);

        let all = farthest_point_sample(&pts, 4, None).unwrap();
        let mut idx = all.indices.clone();
        assert_eq!(idx[0], 0);
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);

        assert!(matches!(
            farthest_point_sample(&pts, 5, None),
            Err(Error::SampleSize { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn group_examples() {
        let pts: Vec<Point> = [0.0, 1.0, 3.0].iter().map(|&x| [x, 0.0, 0.0]).collect();
        let one = PatchCenters { centers: vec![pts[1]], indices: vec![1] };
        let g = knn_group(&pts, &one, 1).unwrap();
        assert_eq!(g.points, vec![[0.0; 3]]);

        let g = knn_group(&pts, &one, 2).unwrap();
        let xs: Vec<f64> = g.points.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, -1.0]);

        assert!(matches!(knn_group(&pts, &one, 4), Err(Error::Grouping(_))));
    }

    #[test]
    fn graph_examples() {
        let c = PatchCenters::from_points(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let g = knn_graph(&c, 1).unwrap();
        assert_eq!(g.indices, vec![1, 0, 1]);

        let c = PatchCenters::from_points(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        assert_eq!(knn_graph(&c, 1).unwrap().row(0), &[1]);

        let two = PatchCenters::from_points(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(
            knn_graph(&two, 8),
            Err(Error::NeighborhoodTooLarge { k: 8, available: 1 })
        ));
        assert_eq!(knn_graph_including_self(&two, 1).unwrap().indices, vec![0, 1]);
    }
}
