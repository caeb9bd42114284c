//! Regression forest used for feature importance.
//!
//! Bootstrap-sampled CART trees with variance-reduction splits over a random
//! subset of `⌈√d⌉` features per node. Importance of a feature is the total
//! reduction in squared error from splits on it, summed over all trees and
//! normalized to 1.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    /// Candidate features per node; `None` means `⌈√d⌉`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 8,
            max_features: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionForest {
    trees: Vec<Tree>,
    importances: Vec<f64>,
    degenerate: bool,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    params: ForestParams,
    mtry: usize,
    raw_importance: Vec<f64>,
}

fn sse(y: &[f64], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    idx.iter().map(|&i| (y[i] - mean).powi(2)).sum()
}

impl Builder<'_> {
    fn grow(
        &mut self,
        idx: &mut [usize],
        depth: usize,
        nodes: &mut Vec<Node>,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let me = nodes.len();
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        nodes.push(Node::Leaf(mean));
        if depth >= self.params.max_depth || idx.len() < 2 {
            return me;
        }
        let parent_sse = sse(self.y, idx);
        if parent_sse <= 0.0 {
            return me;
        }
        let d = self.x[0].len();
        let features = sample(rng, d, self.mtry.min(d));
        let mut best: Option<(f64, usize, f64)> = None;
        for f in features.iter() {
            idx.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
            let total_sq: f64 = idx.iter().map(|&i| self.y[i] * self.y[i]).sum();
            let n = idx.len() as f64;
            let (mut ls, mut lsq) = (0.0, 0.0);
            for k in 0..idx.len() - 1 {
                let yi = self.y[idx[k]];
                ls += yi;
                lsq += yi * yi;
                let (a, b) = (self.x[idx[k]][f], self.x[idx[k + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = n - nl;
                let left_sse = lsq - ls * ls / nl;
                let right_sse = (total_sq - lsq) - (total - ls).powi(2) / nr;
                let gain = parent_sse - left_sse - right_sse;
                if gain > 1e-12 * parent_sse.max(1e-300) && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, f, 0.5 * (a + b)));
                }
            }
        }
        let Some((gain, feature, threshold)) = best else {
            return me;
        };
        self.raw_importance[feature] += gain.min(parent_sse);
        let mut left_idx: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| self.x[i][feature] <= threshold)
            .collect();
        let mut right_idx: Vec<usize> = idx
            .iter()
            .copied()
            .filter(|&i| self.x[i][feature] > threshold)
            .collect();
        let left = self.grow(&mut left_idx, depth + 1, nodes, rng);
        let right = self.grow(&mut right_idx, depth + 1, nodes, rng);
        nodes[me] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }
}

impl RegressionForest {
    /// `x` is row-major (`n` samples × `d` features).
    pub fn fit(x: &[Vec<f64>], y: &[f64], params: ForestParams, seed: u64) -> Self {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty(), "forest needs at least one sample");
        let d = x[0].len();
        let mtry = params
            .max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .max(1);
        let mut b = Builder {
            x,
            y,
            params,
            mtry,
            raw_importance: vec![0.0; d],
        };
        let n = x.len();
        let trees = (0..params.trees)
            .map(|t| {
                let mut rng = rng_from(seed, &[t as u64]);
                let mut idx: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut nodes = Vec::new();
                b.grow(&mut idx, 0, &mut nodes, &mut rng);
                Tree { nodes }
            })
            .collect();
        let total: f64 = b.raw_importance.iter().sum();
        let degenerate = total.is_nan() || total <= 0.0;
        let importances = if degenerate {
            vec![1.0 / d as f64; d]
        } else {
            b.raw_importance.iter().map(|v| v / total).collect()
        };
        Self {
            trees,
            importances,
            degenerate,
        }
    }

    pub fn importances(&self) -> &[f64] {
        &self.importances
    }

    /// True when no split reduced any variance (e.g. constant target).
    pub fn degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn data(n: usize, seed: u64, f: impl Fn(&[f64]) -> f64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let y = x.iter().map(|r| f(r)).collect();
        (x, y)
    }

    /// Independent oracle: exhaustive best split over all features, no
    /// bootstrap, recursing to a fixed depth; returns the features used by
    /// splits that reduce error.
    #[allow(clippy::needless_range_loop)]
    fn oracle_split_features(
        x: &[Vec<f64>],
        y: &[f64],
        idx: Vec<usize>,
        depth: usize,
        out: &mut Vec<usize>,
    ) {
        if depth == 0 || idx.len() < 2 {
            return;
        }
        let err = |ids: &[usize]| {
            if ids.is_empty() {
                return 0.0;
            }
            let m = ids.iter().map(|&i| y[i]).sum::<f64>() / ids.len() as f64;
            ids.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
        };
        let parent = err(&idx);
        let mut best = (0.0, usize::MAX, 0.0);
        for f in 0..x[0].len() {
            for &t in &idx {
                let thr = x[t][f];
                let l: Vec<usize> = idx.iter().copied().filter(|&i| x[i][f] <= thr).collect();
                let r: Vec<usize> = idx.iter().copied().filter(|&i| x[i][f] > thr).collect();
                let gain = parent - err(&l) - err(&r);
                if gain > best.0 + 1e-12 {
                    best = (gain, f, thr);
                }
            }
        }
        if best.1 == usize::MAX {
            return;
        }
        out.push(best.1);
        let (f, thr) = (best.1, best.2);
        oracle_split_features(
            x,
            y,
            idx.iter().copied().filter(|&i| x[i][f] <= thr).collect(),
            depth - 1,
            out,
        );
        oracle_split_features(
            x,
            y,
            idx.iter().copied().filter(|&i| x[i][f] > thr).collect(),
            depth - 1,
            out,
        );
    }

    #[test]
    fn oracle_agrees_only_x0_is_informative() {
        let (x, y) = data(200, 3, |r| r[0]);
        let mut used = Vec::new();
        oracle_split_features(&x, &y, (0..200).collect(), 4, &mut used);
        assert!(!used.is_empty());
        assert!(used.iter().all(|&f| f == 0));

        let full = RegressionForest::fit(
            &x,
            &y,
            ForestParams {
                trees: 1,
                max_depth: 4,
                max_features: Some(5),
                bootstrap: false,
            },
            0,
        );
        assert!((full.importances()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn importances_are_normalized_and_nonnegative() {
        let (x, y) = data(120, 8, |r| (r[1] * 6.0).sin() + r[3] * r[4]);
        let f = RegressionForest::fit(&x, &y, ForestParams::default(), 5);
        assert!(f.importances().iter().all(|&v| v >= 0.0));
        assert!((f.importances().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_for_seed() {
        let (x, y) = data(80, 1, |r| r[2]);
        let a = RegressionForest::fit(&x, &y, ForestParams::default(), 42);
        let b = RegressionForest::fit(&x, &y, ForestParams::default(), 42);
        assert_eq!(a.importances(), b.importances());
        assert_eq!(a.predict(&x[0]), b.predict(&x[0]));
    }

    #[test]
    fn fits_a_step() {
        let (x, y) = data(200, 2, |r| if r[0] > 0.5 { 1.0 } else { 0.0 });
        let f = RegressionForest::fit(&x, &y, ForestParams::default(), 3);
        assert!(f.predict(&[0.9, 0.5, 0.5, 0.5, 0.5]) > 0.8);
        assert!(f.predict(&[0.1, 0.5, 0.5, 0.5, 0.5]) < 0.2);
    }
}
