use maskflow::analysis::{noise_perturb, pca_one_component, probe_fit, AnalysisMatrix};
use maskflow::tensor::{Prng, Tensor};

fn matrix(x: Vec<f64>, labels: Vec<u8>, d: usize) -> AnalysisMatrix {
    let rows = labels.len();
    AnalysisMatrix { x, labels, d, n: rows, h: 1, w: 1 }
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot.abs() / (na * nb)).min(1.0).acos()
}

fn covariance(x: &[f64], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut mean = vec![0.0; d];
    for r in x.chunks(d) {
        for j in 0..d {
            mean[j] += r[j] / rows as f64;
        }
    }
    let mut c = vec![0.0; d * d];
    for r in x.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (rows as f64 - 1.0);
            }
        }
    }
    c
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<f64>, n: usize) -> Vec<f64> {
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

#[test]
fn jacobi_oracle_on_known_matrix() {
    let mut ev = jacobi_eigenvalues(vec![2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 5.0], 3);
    ev.sort_by(f64::total_cmp);
    for (got, want) in ev.iter().zip([1.0, 3.0, 5.0]) {
        assert!((got - want).abs() < 1e-10, "{ev:?}");
    }
}

#[test]
fn rank_one_direction_is_recovered() {
    let d = 16;
    let mut prng = Prng::new(4, 1);
    let v: Vec<f64> = (0..d).map(|_| prng.normal()).collect();
    let rows = 500;
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..rows {
        let s = prng.normal();
        x.extend(v.iter().map(|c| s * c));
        labels.push((s > 0.0) as u8);
    }
    let (dir, scores) = pca_one_component(&matrix(x, labels, d)).unwrap();
    assert!(angle(&dir.w, &v) < 1e-5);
    let norm: f64 = dir.w.iter().map(|w| w * w).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);
    assert!((dir.explained - 1.0).abs() < 1e-9);
    assert_eq!(scores.len(), rows);
}

#[test]
fn isotropic_explained_variance_matches_oracle() {
    let (d, rows) = (16, 20_000);
    let mut prng = Prng::new(8, 2);
    let x: Vec<f64> = (0..rows * d).map(|_| prng.normal()).collect();
    let labels = (0..rows).map(|i| (i % 2) as u8).collect();
    let cov = covariance(&x, d);
    let ev = jacobi_eigenvalues(cov, d);
    let top = ev.iter().copied().fold(f64::MIN, f64::max);
    let oracle = top / ev.iter().sum::<f64>();
    let (dir, _) = pca_one_component(&matrix(x, labels, d)).unwrap();
    assert!((dir.explained - oracle).abs() < 1e-6, "{} vs {oracle}", dir.explained);
    // Top eigenvalue of a white sample covariance sits at (1 + sqrt(d/n))^2.
    let edge = (1.0 + (d as f64 / rows as f64).sqrt()).powi(2) / d as f64;
    let se = (2.0 / rows as f64).sqrt() / d as f64;
    assert!(dir.explained >= 1.0 / d as f64);
    assert!((dir.explained - edge).abs() < 3.0 * se + 1e-3 / d as f64, "{} vs {edge}", dir.explained);
}

#[test]
fn direction_invariant_under_row_permutation() {
    let d = 6;
    let mut prng = Prng::new(2, 2);
    let scale = [3.0, 1.5, 1.0, 0.8, 0.5, 0.2];
    let rows = 400;
    let x: Vec<f64> = (0..rows * d).map(|i| scale[i % d] * prng.normal()).collect();
    let labels: Vec<u8> = (0..rows).map(|i| (x[i * d] > 0.0) as u8).collect();
    let (a, _) = pca_one_component(&matrix(x.clone(), labels.clone(), d)).unwrap();
    let mut order: Vec<usize> = (0..rows).collect();
    prng.shuffle(&mut order);
    let px: Vec<f64> = order.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
    let pl: Vec<u8> = order.iter().map(|&i| labels[i]).collect();
    let (b, _) = pca_one_component(&matrix(px, pl, d)).unwrap();
    assert!(angle(&a.w, &b.w) < 1e-5);
    let fg: f64 = a.w[0];
    assert!(fg > 0.0, "sign follows the labels");
}

#[test]
fn probe_on_independent_labels_is_at_chance() {
    let (d, rows) = (16, 10_000);
    let mut prng = Prng::new(6, 6);
    let make = |prng: &mut Prng| {
        let x: Vec<f64> = (0..rows * d).map(|_| prng.normal()).collect();
        let labels = (0..rows).map(|i| (i % 2) as u8).collect();
        matrix(x, labels, d)
    };
    let train = make(&mut prng);
    let val = make(&mut prng);
    let probe = probe_fit(&train, 1e-3).unwrap();
    let acc = probe.accuracy(&val);
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

#[test]
fn separable_data_is_fit_exactly() {
    let mut prng = Prng::new(1, 9);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200 {
        let y = (i % 2) as u8;
        let off = if y == 1 { 2.0 } else { -2.0 };
        x.push(off + 0.5 * prng.normal());
        x.push(prng.normal());
        labels.push(y);
    }
    let m = matrix(x, labels, 2);
    let probe = probe_fit(&m, 1e-6).unwrap();
    assert_eq!(probe.accuracy(&m), 1.0);
}

#[test]
fn duplicating_every_row_keeps_the_probe() {
    let (d, rows) = (4, 300);
    let mut prng = Prng::new(3, 3);
    let x: Vec<f64> = (0..rows * d).map(|_| prng.normal()).collect();
    let labels: Vec<u8> = (0..rows).map(|i| (x[i * d] + 0.3 * x[i * d + 1] > 0.0) as u8).collect();
    let a = probe_fit(&matrix(x.clone(), labels.clone(), d), 1e-2).unwrap();
    let x2: Vec<f64> = x.iter().chain(&x).copied().collect();
    let l2: Vec<u8> = labels.iter().chain(&labels).copied().collect();
    let b = probe_fit(&matrix(x2, l2, d), 1e-2).unwrap();
    for (u, v) in a.w.iter().zip(&b.w) {
        assert!((u - v).abs() < 1e-6);
    }
    assert!((a.b - b.b).abs() < 1e-6);
}

#[test]
fn probe_requires_positive_ridge() {
    let m = matrix(vec![0.0, 1.0, 2.0, 3.0], vec![0, 1, 0, 1], 1);
    assert!(probe_fit(&m, 0.0).is_err());
}

#[test]
fn noise_path_endpoints() {
    let mut prng = Prng::new(5, 5);
    let latent = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut prng);
    let eps = Tensor::randn(&[2, 3, 3, 4], 1.0, &mut prng);
    assert_eq!(noise_perturb(&latent, 0.0, &eps).unwrap(), latent);
    assert_eq!(noise_perturb(&latent, 1.0, &eps).unwrap(), eps);
    let half = noise_perturb(&Tensor::zeros(&[2, 3, 3, 4]), 0.5, &eps).unwrap();
    assert_eq!(half, eps.map(|e| 0.5 * e));
    assert!(noise_perturb(&latent, 1.5, &eps).is_err());
}
