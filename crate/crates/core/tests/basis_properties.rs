use fedsim_core::basis::{
    basis_angle, build_heterophily_bases, build_homophily_bases, client_signatures, svd_signature,
    BasisSet,
};
use fedsim_core::graph::{propagation_matrix, Graph, Masks};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, d: usize, p: f64, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
    Graph::new(2, edges, x, vec![0; n], Masks::empty(n)).unwrap()
}

#[test]
fn fixed_angle_on_random_graphs() {
    let mut checked = 0;
    for seed in 0..40u64 {
        let n = if seed % 2 == 0 { 10 } else { 30 };
        let d = if seed % 4 < 2 { 3 } else { 8 };
        let order = (seed % 9) as usize;
        let hhat = [0.25, 0.5, 0.75][(seed % 3) as usize];
        let g = random_graph(n, d, 0.3, seed);
        let het = build_heterophily_bases(&g, order, hhat).unwrap();
        for u in &het.bases {
            assert!((u.norm() - 1.0).abs() < 1e-9);
        }
        if het.clamp_flags.iter().any(|&f| f) {
            continue;
        }
        checked += 1;
        let cos = het.theta.cos();
        for i in 0..het.bases.len() {
            for j in 0..i {
                let ip = het.bases[i].dot(&het.bases[j]);
                assert!(
                    (ip - cos).abs() < 1e-6,
                    "seed {seed}: <U{i},U{j}> = {ip}, cos = {cos}"
                );
            }
        }
    }
    assert!(checked >= 20, "only {checked} clamp-free runs");
}

#[test]
fn full_homophily_estimate_gives_near_zero_angle() {
    let g = random_graph(20, 4, 0.3, 11);
    let het = build_heterophily_bases(&g, 4, 1.0).unwrap();
    assert_eq!(het.theta, basis_angle(0.99));
    for i in 0..het.bases.len() {
        for j in 0..i {
            let ip = het.bases[i].dot(&het.bases[j]);
            assert!((ip - 1.0).abs() < 1e-3, "{ip}");
            if !het.clamp_flags.iter().any(|&f| f) {
                assert!((ip - het.theta.cos()).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn homophily_recurrence_holds() {
    for seed in 0..10 {
        let g = random_graph(10 + seed as usize, 5, 0.25, seed);
        let p = propagation_matrix(&g).to_dense();
        let h = build_homophily_bases(&g, 6);
        assert_eq!(h[0], *g.features());
        for k in 1..h.len() {
            let expected = &p * &h[k - 1];
            assert!((&h[k] - expected).abs().max() <= 1e-12);
        }
    }
}

/// Independent route: eigenvectors of `B^T B` give the right singular vectors.
fn eigen_signature(b: &DMatrix<f64>, t: usize) -> Vec<f64> {
    let eig = (b.transpose() * b).symmetric_eigen();
    let mut order: Vec<usize> = (0..b.ncols()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let sigma: Vec<f64> = order
        .iter()
        .map(|&i| eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    let total = sigma.iter().map(|s| s * s).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for (rank, &i) in order.iter().take(t).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let mut best = 0;
        for k in 1..v.len() {
            if v[k].abs() > v[best].abs() {
                best = k;
            }
        }
        if v[best] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        out.extend(v.iter().map(|x| x * sigma[rank] / total));
    }
    out
}

#[test]
fn signature_matches_eigen_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = DMatrix::from_fn(8, 4, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let ours = svd_signature(&b, 2).unwrap();
        let oracle = eigen_signature(&b, 2);
        for (a, o) in ours.iter().zip(&oracle) {
            assert!((a - o).abs() < 1e-8, "seed {seed}: {ours:?} vs {oracle:?}");
        }
    }
}

#[test]
fn signature_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let b = DMatrix::from_fn(7, 3, |_, _| rng.random::<f64>() - 0.5);
        let alpha = 0.01 + rng.random::<f64>() * 50.0;
        let s1 = svd_signature(&b, 2).unwrap();
        let s2 = svd_signature(&(&b * alpha), 2).unwrap();
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn identical_clients_give_identical_bundles() {
    let g = random_graph(15, 4, 0.3, 3);
    let a = client_signatures(&BasisSet::build(&g, 3).unwrap(), 1).unwrap();
    let b = client_signatures(&BasisSet::build(&g.clone(), 3).unwrap(), 1).unwrap();
    assert_eq!(a, b);
    assert!(a
        .p_hat()
        .iter()
        .chain(a.q_hat().iter())
        .all(|x| x.is_finite()));
}
