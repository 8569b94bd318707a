// SPDX-License-Identifier: Apache-2.0

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::cloud_io::Point3;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Balanced 3-d tree over the indices of an immutable point set.
///
/// Splits happen at the median of the axis with the widest spread; the median
/// is chosen under the total order `(coordinate, index)` so construction is
/// deterministic for a fixed input order.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(points: &[Point3]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut index = SpatialIndex {
            perm: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !index.points.is_empty() {
            index.build_node(0, index.points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let points = &self.points;
        let slice = &mut self.perm[start..end];
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = points[slice[mid]][axis];
        // Placeholder, patched once both children exist.
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.perm[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    /// Indices `i` with `|p_i - q|^2 <= r^2`, ascending.
    pub fn radius_neighbors(&self, q: &Point3, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_neighbors_into(q, r, &mut out);
        out
    }

    /// Like [`radius_neighbors`](Self::radius_neighbors) but reuses `out`.
    pub fn radius_neighbors_into(&self, q: &Point3, r: f64, out: &mut Vec<usize>) {
        out.clear();
        if self.nodes.is_empty() || r < 0.0 {
            return;
        }
        let q = [q.x, q.y, q.z];
        let r2 = r * r;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for &i in &self.perm[start..end] {
                        if dist2(&self.points[i], &q) <= r2 {
                            out.push(i);
                        }
                    }
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    if q[axis] - r <= value {
                        stack.push(left);
                    }
                    if q[axis] + r >= value {
                        stack.push(right);
                    }
                }
            }
        }
        out.sort_unstable();
    }

    /// Number of points within `r` of `q`, without collecting them.
    pub fn count_within(&self, q: &Point3, r: f64) -> usize {
        if self.nodes.is_empty() || r < 0.0 {
            return 0;
        }
        let q = [q.x, q.y, q.z];
        let r2 = r * r;
        let mut count = 0;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    count += self.perm[start..end]
                        .iter()
                        .filter(|&&i| dist2(&self.points[i], &q) <= r2)
                        .count();
                }
                Node::Split {
                    axis,
                    value,
                    left,
                    right,
                } => {
                    if q[axis] - r <= value {
                        stack.push(left);
                    }
                    if q[axis] + r >= value {
                        stack.push(right);
                    }
                }
            }
        }
        count
    }

    /// The `k` nearest points to `q`, skipping index `exclude` if given.
    ///
    /// Returns `(index, squared distance)` sorted by distance, ties broken by
    /// ascending index.
    pub fn k_nearest(&self, q: &Point3, k: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        if k == 0 || self.nodes.is_empty() {
            return Vec::new();
        }
        let q = [q.x, q.y, q.z];
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.knn_visit(0, &q, k, exclude, &mut heap);
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.index, c.d2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_visit(
        &self,
        node: usize,
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.perm[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(&self.points[i], q),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_visit(near, q, k, exclude, heap);
                if heap.len() < k || diff * diff <= heap.peek().unwrap().d2 {
                    self.knn_visit(far, q, k, exclude, heap);
                }
            }
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Max-heap entry ordered by `(d2, index)`.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    d2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.index.cmp(&other.index))
    }
}
