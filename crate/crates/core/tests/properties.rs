use approx::assert_relative_eq;
use proptest::prelude::*;

use hqgae_core::autodiff::{finite_diff_check, Tape, Var};
use hqgae_core::eval::{ari, auc, kmeans, nmi};
use hqgae_core::graph::{generate_sbm, sample_negative_edges, sym_normalize, SbmParams};
use hqgae_core::{Matrix, SparseGraph};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

fn positive_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(0.2f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v))
}

/// Reduces an arbitrary-shaped output to a scalar with non-uniform weights so
/// every coordinate's gradient is exercised.
fn weighted_sum<'a>(t: &mut Tape<'a>, v: Var) -> hqgae_core::autodiff::Result<Var> {
    let (r, c) = t.value(v).shape();
    let w = t.constant(Matrix::from_fn(r, c, |i, j| 0.3 + 0.17 * i as f64 - 0.11 * j as f64))?;
    let p = t.mul(v, w)?;
    t.sum(p)
}

fn check<'g, F>(f: F, params: &[Matrix]) -> f64
where
    F: Fn(&mut Tape<'g>, &[Var]) -> hqgae_core::autodiff::Result<Var>,
{
    finite_diff_check(f, params, 1e-6).unwrap()
}

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_and_transpose(a in matrix(3, 4), b in matrix(4, 2)) {
        let e = check(|t, v| { let m = t.matmul(v[0], v[1])?; let m = t.transpose(m)?; weighted_sum(t, m) }, &[a, b]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn elementwise_binary(a in matrix(3, 3), b in matrix(3, 3), row in matrix(1, 3)) {
        let e = check(|t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[0])?;
            let m = t.mul(d, v[0])?;
            let r = t.add_row(m, v[2])?;
            let r = t.scale(r, 0.7)?;
            let r = t.add_scalar(r, -0.2)?;
            weighted_sum(t, r)
        }, &[a, b, row]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn smooth_maps(a in matrix(4, 3)) {
        let e = check(|t, v| {
            let x = t.exp(v[0])?;
            let s = t.sigmoid(v[0])?;
            let y = t.elu(v[0])?;
            let c = t.concat_cols(&[x, s, y])?;
            weighted_sum(t, c)
        }, &[a]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn log_and_pow(a in positive_matrix(3, 3), p in 1.0f64..3.5) {
        let e = check(|t, v| {
            let l = t.log(v[0])?;
            let q = t.pow(v[0], p)?;
            let c = t.concat_rows(&[l, q])?;
            weighted_sum(t, c)
        }, &[a]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn piecewise_linear(a in matrix(3, 4), slope in matrix(1, 4)) {
        // keep inputs away from kinks so central differences are valid
        let a = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        let a = a.map(|x| if (x - 1.0).abs() < 0.05 || (x + 1.0).abs() < 0.05 { x + 0.1 } else { x });
        let e = check(|t, v| {
            let p = t.prelu(v[0], v[1])?;
            let l = t.leaky_relu(v[0], 0.2)?;
            let c = t.clamp(v[0], -1.0, 1.0)?;
            let all = t.concat_cols(&[p, l, c])?;
            weighted_sum(t, all)
        }, &[a, slope]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn row_ops(a in matrix(4, 3), b in matrix(4, 3), temp in 0.2f64..5.0) {
        let e = check(|t, v| {
            let s = t.softmax_rows(v[0], temp)?;
            let n = t.row_normalize(v[1])?;
            let d = t.row_dot(s, n)?;
            let g = t.gather_rows(v[0], &[3, 0, 0, 2])?;
            let m = t.mean(g)?;
            let total = t.sum(d)?;
            t.add(total, m)
        }, &[a, b]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn graph_ops(x in matrix(5, 2), scores in matrix(13, 1)) {
        let g = SparseGraph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (0, 3)], Matrix::zeros(5, 1), None, None).0;
        let adj = sym_normalize(&g);
        let offsets = adj.offsets.clone();
        let e = check(|t, v| {
            let y = t.sparse_matmul(&adj, v[0])?;
            let w = t.segment_softmax(v[1], &offsets)?;
            let z = t.edge_aggregate(w, y, &adj)?;
            weighted_sum(t, z)
        }, &[x, scores]);
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn sorted_auc_equals_pairwise_count(
        items in proptest::collection::vec((any::<bool>(), 0u8..20), 2..500),
    ) {
        let labels: Vec<bool> = items.iter().map(|i| i.0).collect();
        let scores: Vec<f64> = items.iter().map(|i| i.1 as f64 / 10.0).collect();
        let p = labels.iter().filter(|&&l| l).count();
        prop_assume!(p > 0 && p < labels.len());
        let mut twice = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    twice += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        let brute = twice as f64 / 2.0 / (p as f64 * (labels.len() - p) as f64);
        prop_assert_eq!(auc(&labels, &scores).unwrap(), brute);
    }

    #[test]
    fn cluster_scores_ignore_label_names(
        pairs in proptest::collection::vec((0usize..4, 0usize..3), 2..40),
        shift in 1usize..10,
    ) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let renamed: Vec<usize> = a.iter().map(|&x| (3 - x) * 7 + shift).collect();
        prop_assert_eq!(nmi(&a, &b).to_bits(), nmi(&renamed, &b).to_bits());
        prop_assert!((ari(&a, &b) - ari(&renamed, &b)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ari(&a, &b)));
        prop_assert!((0.0..=1.0).contains(&nmi(&a, &b)));
    }

    #[test]
    fn negatives_never_hit_edges(seed in any::<u64>(), frac in 0.05f64..1.0) {
        let g = generate_sbm(&SbmParams {
            blocks: 2, nodes_per_block: 8, p_in: 0.5, p_out: 0.1, feature_dim: 2, feature_noise: 0.0,
        }, seed).unwrap();
        let available = 16 * 15 / 2 - g.num_edges();
        let count = ((available as f64) * frac) as usize;
        let neg = sample_negative_edges(&g, count, seed ^ 1, &[]).unwrap();
        prop_assert_eq!(neg.len(), count);
        let mut seen = std::collections::HashSet::new();
        for &(a, b) in &neg {
            prop_assert!(a < b && !g.has_edge(a, b));
            prop_assert!(seen.insert((a, b)));
        }
    }
}

#[test]
fn sbm_edge_count_matches_binomial() {
    for seed in 0..20 {
        let p = 0.07;
        let g = generate_sbm(
            &SbmParams {
                blocks: 3,
                nodes_per_block: 40,
                p_in: p,
                p_out: p,
                feature_dim: 3,
                feature_noise: 0.1,
            },
            seed,
        )
        .unwrap();
        let pairs = (120 * 119 / 2) as f64;
        let mean = pairs * p;
        let sd = (pairs * p * (1.0 - p)).sqrt();
        let m = g.num_edges() as f64;
        assert!((m - mean).abs() < 5.0 * sd, "seed {seed}: {m} edges vs {mean} ± {sd}");
        g.check_invariants().unwrap();
    }
}

#[test]
fn duplicated_points_keep_centroids() {
    let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.2], vec![5.0, 5.0], vec![5.5, 4.0], vec![9.0, 0.0]]);
    let mut doubled = x.as_slice().to_vec();
    doubled.extend_from_slice(x.as_slice());
    let x2 = Matrix::from_vec(10, 2, doubled);
    let a = kmeans(&x, 3, 4, 10).unwrap();
    let b = kmeans(&x2, 3, 4, 10).unwrap();
    let sort = |m: &Matrix| {
        let mut rows: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        rows.sort_by(|p, q| p.partial_cmp(q).unwrap());
        rows
    };
    for (p, q) in sort(&a.centroids).iter().zip(sort(&b.centroids).iter()) {
        for (u, v) in p.iter().zip(q) {
            assert_relative_eq!(u, v, epsilon = 1e-12);
        }
    }
    assert_relative_eq!(b.inertia, 2.0 * a.inertia, epsilon = 1e-12);
}
