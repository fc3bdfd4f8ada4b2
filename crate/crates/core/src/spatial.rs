//! Static kd-tree answering axis-aligned box queries over points of a
//! runtime dimension.

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
struct Node {
    /// Bounding box of the points below this node.
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Range into `perm`.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<Vec<f64>>,
    perm: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: Vec<Vec<f64>>) -> Self {
        let dim = points.first().map_or(0, Vec::len);
        assert!(points.iter().all(|p| p.len() == dim), "points must share a dimension");
        let mut tree = Self { dim, perm: (0..points.len()).collect(), points, nodes: Vec::new() };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for &i in &self.perm[start..end] {
            for d in 0..self.dim {
                lo[d] = lo[d].min(self.points[i][d]);
                hi[d] = hi[d].max(self.points[i][d]);
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node { lo: lo.clone(), hi: hi.clone(), start, end, children: None });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let axis = (0..self.dim)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    /// Indices of all points inside the closed box `[lo, hi]`, ascending.
    pub fn query_box(&self, lo: &[f64], hi: &[f64]) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.query_node(0, lo, hi, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn query_node(&self, id: usize, lo: &[f64], hi: &[f64], out: &mut Vec<usize>) {
        let node = &self.nodes[id];
        let disjoint = (0..self.dim).any(|d| node.hi[d] < lo[d] || node.lo[d] > hi[d]);
        if disjoint {
            return;
        }
        let inside = (0..self.dim).all(|d| lo[d] <= node.lo[d] && node.hi[d] <= hi[d]);
        if inside {
            out.extend_from_slice(&self.perm[node.start..node.end]);
            return;
        }
        match node.children {
            Some((l, r)) => {
                self.query_node(l, lo, hi, out);
                self.query_node(r, lo, hi, out);
            }
            None => {
                for &i in &self.perm[node.start..node.end] {
                    let p = &self.points[i];
                    if (0..self.dim).all(|d| lo[d] <= p[d] && p[d] <= hi[d]) {
                        out.push(i);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(points: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| points[i].iter().zip(lo).zip(hi).all(|((p, l), h)| l <= p && p <= h))
            .collect()
    }

    #[test]
    fn empty_tree() {
        let t = KdTree::new(vec![]);
        assert!(t.is_empty());
        assert!(t.query_box(&[0.0], &[1.0]).is_empty());
    }

    #[test]
    fn duplicates_and_boundaries() {
        let pts = vec![vec![0.5, 0.5]; 40];
        let t = KdTree::new(pts.clone());
        assert_eq!(t.query_box(&[0.5, 0.5], &[0.5, 0.5]), (0..40).collect::<Vec<_>>());
        assert!(t.query_box(&[0.6, 0.0], &[1.0, 1.0]).is_empty());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 0..300),
            a in proptest::collection::vec(-1.2f64..1.2, 3),
            b in proptest::collection::vec(-1.2f64..1.2, 3),
        ) {
            let lo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect();
            let hi: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
            let t = KdTree::new(pts.clone());
            prop_assert_eq!(t.query_box(&lo, &hi), brute(&pts, &lo, &hi));
        }
    }
}
