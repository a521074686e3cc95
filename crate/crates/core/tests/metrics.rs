use nalgebra::DMatrix;
use oqc_core::metrics::{
    centered, effective_rank, entropy_rank, participation_ratio, separation_score, Features,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Entropy rank of the centered matrix from nalgebra's SVD.
fn oracle_effective_rank(data: &[f64], n: usize, d: usize) -> f64 {
    let c = centered(Features::new(data, d));
    let m = DMatrix::from_row_slice(n, d, &c);
    let s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    let total: f64 = s.iter().sum();
    let h: f64 = s
        .iter()
        .map(|v| v / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h.exp()
}

/// (Σλ)² / Σλ² over covariance eigenvalues.
fn oracle_participation_ratio(data: &[f64], n: usize, d: usize) -> f64 {
    let c = centered(Features::new(data, d));
    let m = DMatrix::from_row_slice(n, d, &c);
    let cov = m.transpose() * &m / (n as f64 - 1.0);
    let ev = cov.symmetric_eigenvalues();
    let s: f64 = ev.iter().sum();
    let s2: f64 = ev.iter().map(|l| l * l).sum();
    s * s / s2
}

#[test]
fn random_64x16_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let x = gaussian(&mut rng, 64 * 16);
    let ours = effective_rank(Features::new(&x, 16)).unwrap();
    let oracle = oracle_effective_rank(&x, 64, 16);
    assert!(rel(ours, oracle) < 1e-8, "{ours} vs {oracle}");
    // Gaussian data of this shape is close to, but below, full rank.
    assert!(ours > 12.0 && ours < 16.0, "{ours}");
}

#[test]
fn fifty_random_matrices_match_both_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for case in 0..50 {
        let n = rng.random_range(8..40);
        let d = rng.random_range(2..12);
        // Anisotropic columns so the spectra are not flat.
        let mut x = gaussian(&mut rng, n * d);
        for row in x.chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= 1.0 + j as f64;
            }
        }
        let er = effective_rank(Features::new(&x, d)).unwrap();
        let pr = participation_ratio(Features::new(&x, d)).unwrap();
        let er_o = oracle_effective_rank(&x, n, d);
        let pr_o = oracle_participation_ratio(&x, n, d);
        assert!(rel(er, er_o) < 1e-8, "case {case}: erank {er} vs {er_o}");
        assert!(rel(pr, pr_o) < 1e-8, "case {case}: pr {pr} vs {pr_o}");
    }
}

#[test]
fn isotropic_and_rank_one_extremes() {
    // Rows ±e_j: centered covariance is a multiple of the identity.
    let d = 7;
    let mut x = Vec::new();
    for j in 0..d {
        for s in [1.0, -1.0] {
            let mut row = vec![0.0; d];
            row[j] = s;
            x.extend(row);
        }
    }
    let f = Features::new(&x, d);
    assert!((effective_rank(f).unwrap() - d as f64).abs() < 1e-12);
    assert!((participation_ratio(f).unwrap() - d as f64).abs() < 1e-12);

    let dir = [0.5, -1.0, 2.0, 0.25];
    let coeffs = [-1.5, 0.2, 3.0, 1.1, -0.7];
    let x: Vec<f64> = coeffs.iter().flat_map(|c| dir.iter().map(move |v| c * v)).collect();
    let f = Features::new(&x, 4);
    assert!((effective_rank(f).unwrap() - 1.0).abs() < 1e-10);
    assert!((participation_ratio(f).unwrap() - 1.0).abs() < 1e-10);
}

#[test]
fn entropy_rank_of_flat_spectrum_is_its_length() {
    assert!((entropy_rank(&[2.0; 9]) - 9.0).abs() < 1e-12);
    assert!((entropy_rank(&[3.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
}

#[test]
fn separation_grows_with_class_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sep = |gap: f64, rng: &mut ChaCha8Rng| {
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = i % 3;
            for j in 0..4 {
                let centre = if j == c { gap } else { 0.0 };
                x.push(centre + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(c);
        }
        separation_score(Features::new(&x, 4), &labels).unwrap()
    };
    let near = sep(0.5, &mut rng);
    let far = sep(8.0, &mut rng);
    assert!(far > 3.0 * near, "{near} {far}");
}
