#![allow(dead_code)]

use morphrec::eval::KeyedEmbedding;
use morphrec::model::{make_test_basis, Mesh, ModelBasis};

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian
/// method with potentials). Returns the optimal total cost.
pub fn assignment_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

/// Optimal transport cost between two equal-weight samples with |x - y|
/// ground cost. Unequal sizes are brought to a common mass unit by
/// replicating each sample point, which turns the transport LP into an
/// assignment problem with the same optimum.
pub fn transport_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let xs: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
    let ys: Vec<f64> = b.iter().flat_map(|&y| std::iter::repeat_n(y, m)).collect();
    let cost: Vec<Vec<f64>> = xs.iter().map(|x| ys.iter().map(|y| (x - y).abs()).collect()).collect();
    assignment_cost(&cost) / (m * n) as f64
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

/// Recall@k by scoring every render against every photo: a render counts
/// at k when fewer than k photos beat its best same-identity photo, where
/// "beat" means a higher cosine or an equal cosine with a smaller key.
pub fn brute_force_recall(renders: &[KeyedEmbedding<f64>], photos: &[KeyedEmbedding<f64>], ks: &[usize]) -> Vec<f64> {
    let mut hits = vec![0usize; ks.len()];
    for r in renders {
        let rv = r.vector.as_slice().unwrap();
        let scores: Vec<f64> = photos.iter().map(|p| cos(rv, p.vector.as_slice().unwrap())).collect();
        let beats = |i: usize, j: usize| scores[i] > scores[j] || (scores[i] == scores[j] && photos[i].key < photos[j].key);
        let best = (0..photos.len())
            .filter(|&i| photos[i].identity == r.identity)
            .reduce(|a, b| if beats(b, a) { b } else { a })
            .unwrap();
        let rank = (0..photos.len()).filter(|&i| beats(i, best)).count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    hits.iter().map(|&h| h as f64 / renders.len() as f64).collect()
}

/// Mean face of the test basis with an anisotropic, non-symmetric warp so
/// that no rotation other than the identity maps it close to itself.
pub fn warped_face(basis_seed: u64, n_vertices: usize) -> (ModelBasis<f64>, Mesh<f64>) {
    let basis: ModelBasis<f64> = make_test_basis(basis_seed, n_vertices).unwrap();
    let mut mesh = basis.mean_mesh();
    for p in mesh.positions.iter_mut() {
        *p = [p[0] + 0.002 * p[1] * p[1], p[1] * 1.4, p[2] * 0.6 + 0.003 * p[0] * p[0]];
    }
    mesh.normals = None;
    (basis, mesh)
}
