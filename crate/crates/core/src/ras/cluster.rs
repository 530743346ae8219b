//! Average-linkage agglomerative clustering on cosine distance.
//!
//! The dendrogram is built with the nearest-neighbor chain algorithm and
//! Lance-Williams updates, O(n^2) time and memory.

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).max(0.0)
}

/// One dendrogram step joining the clusters that contain points `a` and
/// `b` at the given average-linkage distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * (2 * self.n - i - 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

/// Merges in non-decreasing distance order.
pub fn dendrogram(points: &[Vec<f64>]) -> Vec<Merge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut dist = Condensed { n, d: vec![0.0; n * (n - 1) / 2] };
    for i in 0..n {
        for j in i + 1..n {
            dist.set(i, j, cosine_distance(&points[i], &points[j]));
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    for _ in 0..n - 1 {
        if chain.is_empty() {
            chain.push(active.iter().position(|a| *a).expect("two active clusters remain"));
        }
        let (a, b, d) = loop {
            let a = *chain.last().expect("nonempty chain");
            let prev = chain.len().checked_sub(2).map(|i| chain[i]);
            let mut best = prev.map(|p| (p, dist.get(a, p)));
            for c in 0..n {
                if c == a || !active[c] {
                    continue;
                }
                let d = dist.get(a, c);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((c, d));
                }
            }
            let (b, d) = best.expect("another active cluster exists");
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                break (a, b, d);
            }
            chain.push(b);
        };
        let (keep, gone) = if a < b { (a, b) } else { (b, a) };
        merges.push(Merge { a: keep, b: gone, distance: d });
        let (na, nb) = (size[keep] as f64, size[gone] as f64);
        for c in 0..n {
            if active[c] && c != keep && c != gone {
                let v = (na * dist.get(keep, c) + nb * dist.get(gone, c)) / (na + nb);
                dist.set(keep, c, v);
            }
        }
        active[gone] = false;
        size[keep] += size[gone];
    }
    merges.sort_by(|x, y| x.distance.total_cmp(&y.distance));
    merges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
    height: Vec<f64>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), size: vec![1; n], height: vec![0.0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize, h: f64) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return ra;
        }
        let (root, child) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[child] = root;
        self.size[root] += self.size[child];
        self.height[root] = h;
        root
    }
}

/// A flat cluster: member point indices ascending, and the distance of the
/// last merge that formed it (0 for a singleton).
#[derive(Debug, Clone, PartialEq)]
pub struct FlatCluster {
    pub members: Vec<usize>,
    pub merge_distance: f64,
}

fn flatten(uf: &mut UnionFind, n: usize) -> Vec<FlatCluster> {
    let mut by_root: Vec<Option<usize>> = vec![None; n];
    let mut out: Vec<FlatCluster> = Vec::new();
    for i in 0..n {
        let r = uf.find(i);
        match by_root[r] {
            Some(k) => out[k].members.push(i),
            None => {
                by_root[r] = Some(out.len());
                out.push(FlatCluster { members: vec![i], merge_distance: uf.height[r] });
            }
        }
    }
    out
}

/// Applies every merge at or below `threshold`. Clusters are ordered by
/// their smallest member.
pub fn cut(n: usize, merges: &[Merge], threshold: f64) -> Vec<FlatCluster> {
    let mut uf = UnionFind::new(n);
    for m in merges.iter().take_while(|m| m.distance <= threshold) {
        uf.union(m.a, m.b, m.distance);
    }
    flatten(&mut uf, n)
}

/// Continues merging past `threshold` until one cluster reaches
/// `min_size` points, and returns that cluster. `None` when `n < min_size`.
pub fn merge_until(n: usize, merges: &[Merge], threshold: f64, min_size: usize) -> Option<FlatCluster> {
    if n < min_size {
        return None;
    }
    let mut uf = UnionFind::new(n);
    for m in merges {
        let r = uf.union(m.a, m.b, m.distance);
        if m.distance > threshold && uf.size[r] >= min_size {
            return flatten(&mut uf, n).into_iter().find(|c| c.members.contains(&r));
        }
    }
    // reached only when a cluster of `min_size` already existed below the
    // threshold
    flatten(&mut uf, n).into_iter().find(|c| c.members.len() >= min_size)
}

/// Flat clusters of `points` at `threshold`.
pub fn cluster_points(points: &[Vec<f64>], threshold: f64) -> Vec<FlatCluster> {
    cut(points.len(), &dendrogram(points), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Textbook O(n^3) average linkage: merge the closest pair while its
    /// linkage is within the threshold.
    fn naive(points: &[Vec<f64>], threshold: f64) -> Vec<Vec<usize>> {
        let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let mut s = 0.0;
                    for &a in &clusters[i] {
                        for &b in &clusters[j] {
                            s += cosine_distance(&points[a], &points[b]);
                        }
                    }
                    let d = s / (clusters[i].len() * clusters[j].len()) as f64;
                    if best.is_none_or(|(_, _, bd)| d < bd) {
                        best = Some((i, j, d));
                    }
                }
            }
            match best {
                Some((i, j, d)) if d <= threshold => {
                    let moved = clusters.remove(j);
                    clusters[i].extend(moved);
                    clusters[i].sort_unstable();
                }
                _ => break,
            }
        }
        clusters.sort();
        clusters
    }

    fn members(c: Vec<FlatCluster>) -> Vec<Vec<usize>> {
        c.into_iter().map(|c| c.members).collect()
    }

    #[test]
    fn identical_vectors_form_one_cluster() {
        let pts = vec![vec![1.0, 2.0]; 5];
        assert_eq!(members(cluster_points(&pts, 0.6)), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn orthogonal_groups_split() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, 0.0]];
        assert_eq!(members(cluster_points(&pts, 0.6)), vec![vec![0, 2, 4], vec![1, 3]]);
    }

    #[test]
    fn zero_threshold_gives_singletons() {
        let pts = vec![vec![1.0, 0.0], vec![1.0, 0.1], vec![0.0, 1.0]];
        assert_eq!(cluster_points(&pts, 0.0).len(), 3);
        assert!(cluster_points(&pts, 0.0).iter().all(|c| c.merge_distance == 0.0));
    }

    #[test]
    fn fallback_merges_past_threshold() {
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 0.01]];
        let m = dendrogram(&pts);
        assert!(cut(5, &m, 0.6).iter().all(|c| c.members.len() < 4));
        let c = merge_until(5, &m, 0.6, 4).unwrap();
        assert!(c.members.len() >= 4);
        assert!(c.merge_distance > 0.6);
        assert_eq!(merge_until(3, &dendrogram(&pts[..3]), 0.6, 4), None);
    }

    proptest! {
        #[test]
        fn matches_naive_average_linkage(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..14),
            threshold in 0.05f64..1.5,
        ) {
            let fast = members(cluster_points(&pts, threshold));
            let mut fast_sorted = fast.clone();
            fast_sorted.sort();
            prop_assert_eq!(fast_sorted, naive(&pts, threshold));
            // ordered by smallest member
            prop_assert!(fast.windows(2).all(|w| w[0][0] < w[1][0]));
        }

        #[test]
        fn merge_heights_respect_threshold(
            pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 2..20),
            threshold in 0.0f64..1.0,
        ) {
            for c in cluster_points(&pts, threshold) {
                prop_assert!(c.merge_distance <= threshold);
            }
            let m = dendrogram(&pts);
            prop_assert!(m.windows(2).all(|w| w[0].distance <= w[1].distance));
        }
    }
}
