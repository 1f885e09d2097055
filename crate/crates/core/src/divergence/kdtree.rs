//! Static k-d tree answering "distance to the k-th nearest neighbour" queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

#[derive(Debug)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Original index of each reordered point.
    index: Vec<usize>,
    root: Node,
}

#[derive(PartialEq)]
struct Candidate(f64);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl KdTree {
    /// Build from row-major `data` with `dim` columns.
    pub fn build(data: &[f64], dim: usize) -> Self {
        let n = if dim == 0 { 0 } else { data.len() / dim };
        let mut index: Vec<usize> = (0..n).collect();
        let root = Self::build_node(data, dim, &mut index, 0, n);
        let mut points = Vec::with_capacity(n * dim);
        for &i in &index {
            points.extend_from_slice(&data[i * dim..(i + 1) * dim]);
        }
        KdTree { dim, points, index, root }
    }

    fn build_node(data: &[f64], dim: usize, index: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut index[start..end];
        // split on the widest dimension
        let mut best = (0, -1.0);
        for d in 0..dim {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in slice.iter() {
                let v = data[i * dim + d];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (d, hi - lo);
            }
        }
        let split_dim = best.0;
        if best.1 <= 0.0 {
            return Node::Leaf { start, end };
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| data[a * dim + split_dim].total_cmp(&data[b * dim + split_dim]));
        let value = data[slice[mid] * dim + split_dim];
        let left = Self::build_node(data, dim, index, start, start + mid);
        let right = Self::build_node(data, dim, index, start + mid, end);
        Node::Split { dim: split_dim, value, left: Box::new(left), right: Box::new(right) }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Euclidean distance to the `k`-th nearest point, skipping original index `exclude`.
    /// Returns `None` when fewer than `k` points are eligible.
    pub fn kth_distance(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Option<f64> {
        if k == 0 {
            return Some(0.0);
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(&self.root, query, k, exclude, &mut heap);
        if heap.len() < k {
            return None;
        }
        heap.peek().map(|c| c.0.sqrt())
    }

    fn search(&self, node: &Node, query: &[f64], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for p in *start..*end {
                    if Some(self.index[p]) == exclude {
                        continue;
                    }
                    let row = &self.points[p * self.dim..(p + 1) * self.dim];
                    let d2: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                    if heap.len() < k {
                        heap.push(Candidate(d2));
                    } else if d2 < heap.peek().map_or(f64::INFINITY, |c| c.0) {
                        heap.pop();
                        heap.push(Candidate(d2));
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, exclude, heap);
                let bound = heap.peek().map_or(f64::INFINITY, |c| c.0);
                if heap.len() < k || diff * diff <= bound {
                    self.search(far, query, k, exclude, heap);
                }
            }
        }
    }
}
