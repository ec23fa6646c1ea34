//! Exact 3D nearest-neighbor search.
//!
//! The tree prunes with squared-distance bounds only, so query results equal
//! a linear scan bit for bit; callers rely on that when they validate against
//! brute-force oracles.

use crate::{Error, Result};

use super::Vec3;

const LEAF_SIZE: usize = 12;

/// Squared Euclidean distance, written out so every search path (tree, leaf
/// scan, plain linear scan) rounds identically.
#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Distance from `point` to its nearest neighbor in `cloud` by linear scan.
pub fn nearest_neighbor_distance(point: &Vec3, cloud: &[Vec3]) -> Result<f64> {
    let mut best: Option<f64> = None;
    for q in cloud {
        let d2 = dist2(point, q);
        if best.is_none_or(|b| d2 < b) {
            best = Some(d2);
        }
    }
    best.map(f64::sqrt).ok_or(Error::EmptyCloud("nearest_neighbor_distance"))
}

enum Node {
    Leaf { lo: u32, hi: u32 },
    Split { axis: u8, value: f64, left: u32, right: u32 },
}

/// Static k-d tree over a point slice. Point indices in query results refer
/// to the original order.
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: Option<u32>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> KdTree {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            root: None,
        };
        if !points.is_empty() {
            let root = tree.build_range(0, points.len());
            tree.root = Some(root);
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_range(&mut self, lo: usize, hi: usize) -> u32 {
        if hi - lo <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { lo: lo as u32, hi: hi as u32 });
            return (self.nodes.len() - 1) as u32;
        }
        // Split on the axis with the largest extent; ties take the lower axis.
        let mut min = self.points[self.order[lo] as usize];
        let mut max = min;
        for &i in &self.order[lo..hi] {
            let p = self.points[i as usize];
            min = min.inf(&p);
            max = max.sup(&p);
        }
        let extent = max - min;
        let mut axis = 0;
        if extent[1] > extent[axis] {
            axis = 1;
        }
        if extent[2] > extent[axis] {
            axis = 2;
        }
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            f64::total_cmp(&points[a as usize][axis], &points[b as usize][axis])
        });
        let value = self.points[self.order[mid] as usize][axis];
        let left = self.build_range(lo, mid);
        let right = self.build_range(mid, hi);
        self.nodes.push(Node::Split { axis: axis as u8, value, left, right });
        (self.nodes.len() - 1) as u32
    }

    /// Index and squared distance of the nearest point to `q`.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        self.nearest_filtered(q, usize::MAX)
    }

    /// Nearest point with original index != `skip`; used for within-cloud
    /// queries where the query point itself is in the tree.
    pub fn nearest_excluding(&self, q: &Vec3, skip: usize) -> Option<(usize, f64)> {
        self.nearest_filtered(q, skip)
    }

    fn nearest_filtered(&self, q: &Vec3, skip: usize) -> Option<(usize, f64)> {
        let root = self.root?;
        let mut best: Option<(usize, f64)> = None;
        self.visit(root, q, skip, &mut best);
        best
    }

    fn visit(&self, node: u32, q: &Vec3, skip: usize, best: &mut Option<(usize, f64)>) {
        match &self.nodes[node as usize] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[*lo as usize..*hi as usize] {
                    let i = i as usize;
                    if i == skip {
                        continue;
                    }
                    let d2 = dist2(&self.points[i], q);
                    if best.is_none_or(|(_, b)| d2 < b) {
                        *best = Some((i, d2));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let delta = q[*axis as usize] - value;
                let (near, far) = if delta < 0.0 { (*left, *right) } else { (*right, *left) };
                self.visit(near, q, skip, best);
                // The far side can only help if the splitting plane is closer
                // than the best match so far.
                if best.is_none_or(|(_, b)| delta * delta < b) {
                    self.visit(far, q, skip, best);
                }
            }
        }
    }
}
