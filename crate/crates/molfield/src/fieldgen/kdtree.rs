//! Minimal 3D kd-tree for nearest-atom queries.
//!
//! Ties on distance resolve to the lowest original atom index, exactly
//! matching the brute-force scan; the two backends must agree bit for bit.

use crate::geom::{self, Vec3};

struct Node {
    /// Index into `points` of the splitting point stored at this node.
    point: usize,
    axis: usize,
    left: i32,
    right: i32,
}

pub struct KdTree {
    points: Vec<(Vec3, usize)>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree {
    /// `points` carries (position, original index) pairs.
    pub fn build(mut points: Vec<(Vec3, usize)>) -> KdTree {
        let n = points.len();
        let mut tree = KdTree { points: Vec::new(), nodes: Vec::with_capacity(n), root: -1 };
        let mut order: Vec<usize> = (0..n).collect();
        tree.points = std::mem::take(&mut points);
        tree.root = tree.build_range(&mut order, 0);
        tree
    }

    fn build_range(&mut self, order: &mut [usize], depth: usize) -> i32 {
        if order.is_empty() {
            return -1;
        }
        let axis = depth % 3;
        // Sort by coordinate, tie-broken by original index for determinism.
        order.sort_unstable_by(|&a, &b| {
            self.points[a].0[axis]
                .total_cmp(&self.points[b].0[axis])
                .then(self.points[a].1.cmp(&self.points[b].1))
        });
        let mid = order.len() / 2;
        let point = order[mid];
        let node_idx = self.nodes.len() as i32;
        self.nodes.push(Node { point, axis, left: -1, right: -1 });
        let (lo, rest) = order.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_range(lo, depth + 1);
        let right = self.build_range(hi, depth + 1);
        self.nodes[node_idx as usize].left = left;
        self.nodes[node_idx as usize].right = right;
        node_idx
    }

    /// Nearest point to `q`: (position, original index, squared distance).
    pub fn nearest(&self, q: Vec3) -> Option<(Vec3, usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        self.search(self.root, q, &mut best);
        best.map(|(pi, d2)| (self.points[pi].0, self.points[pi].1, d2))
    }

    fn search(&self, node: i32, q: Vec3, best: &mut Option<(usize, f64)>) {
        if node < 0 {
            return;
        }
        let nd = &self.nodes[node as usize];
        let (pos, orig) = self.points[nd.point];
        let d2 = geom::dist2(q, pos);
        let better = match *best {
            None => true,
            Some((bi, bd2)) => d2 < bd2 || (d2 == bd2 && orig < self.points[bi].1),
        };
        if better {
            *best = Some((nd.point, d2));
        }
        let diff = q[nd.axis] - pos[nd.axis];
        let (near, far) = if diff < 0.0 { (nd.left, nd.right) } else { (nd.right, nd.left) };
        self.search(near, q, best);
        // Visit the far side on exact plane ties too, so equal-distance
        // candidates with a lower index are never pruned away.
        if best.map_or(true, |(_, bd2)| diff * diff <= bd2) {
            self.search(far, q, best);
        }
    }
}
