use bszo::harness::verify::MeanVar;
use bszo::optimizer::one_sided_difference;
use bszo::perturbation::{derive_seed, GaussianStream};
use bszo::{
    GradientNoise, MinibatchId, Objective, PerturbationSeed, SubspaceBasis, SyntheticObjective,
};

#[test]
fn sampled_noise_trace_matches_configuration() {
    let n = 40;
    let variances: Vec<f64> = (0..n).map(|j| 1e-3 * (1.0 + j as f64)).collect();
    let trace: f64 = variances.iter().sum();
    let obj = SyntheticObjective::isotropic_quadratic(n)
        .unwrap()
        .with_noise(GradientNoise::Diagonal { variances }, 5)
        .unwrap();
    assert!((obj.noise_trace() - trace).abs() < 1e-12);
    let samples = 100_000u64;
    let mut sum_sq = 0.0;
    let mut mean = MeanVar::new(n);
    for b in 0..samples {
        let zeta = obj.noise_sample(MinibatchId(b));
        sum_sq += zeta.iter().map(|z| z * z).sum::<f64>();
        mean.push(&zeta);
    }
    let measured = sum_sq / samples as f64;
    assert!(
        (measured - trace).abs() / trace < 0.05,
        "{measured} vs {trace}"
    );
    // averaging over batches recovers the true gradient
    assert!(mean.max_z(&vec![0.0; n]) < 4.5);
}

#[test]
fn isserlis_second_moment() {
    // E[‖z‖² zᵀΣz] = (n + 2) tr(Σ) for z ~ N(0, I)
    let n = 100;
    let sigma: Vec<f64> = (0..n).map(|j| 0.5 + (j % 7) as f64 * 0.3).collect();
    let trace: f64 = sigma.iter().sum();
    let samples = 1_000_000;
    let mut g = GaussianStream::new(PerturbationSeed(2718));
    let mut z = vec![0.0; n];
    let mut total = 0.0;
    for _ in 0..samples {
        g.fill(&mut z);
        let norm_sq: f64 = z.iter().map(|x| x * x).sum();
        let quad: f64 = z.iter().zip(&sigma).map(|(x, s)| s * x * x).sum();
        total += norm_sq * quad;
    }
    let estimate = total / samples as f64;
    let exact = (n as f64 + 2.0) * trace;
    assert!(
        (estimate - exact).abs() / exact < 0.02,
        "{estimate} vs {exact}"
    );
}

#[test]
fn directional_derivative_variance_is_the_noise_trace() {
    // at the minimizer ŷ(e₁) = zᵀζ + O(ε), so its variance over bases and
    // batches is tr(Σ)
    let n = 2000;
    let trace = 0.5;
    let obj = SyntheticObjective::isotropic_quadratic(n)
        .unwrap()
        .with_noise(GradientNoise::with_trace(trace, n), 8)
        .unwrap();
    let mut theta = vec![0.0; n];
    let samples = 20_000u64;
    let mut acc = MeanVar::new(1);
    for t in 0..samples {
        let batch = MinibatchId(t);
        let basis = SubspaceBasis::from_step_seed(derive_seed(99, t), 1);
        let f0 = obj.evaluate(&theta, batch, 0).unwrap();
        let y = one_sided_difference(&obj, &mut theta, &basis, &[1.0], 1e-4, f0, batch, 0).unwrap();
        acc.push(&[y]);
    }
    let var = acc.std_err()[0].powi(2) * samples as f64;
    assert!((var - trace).abs() / trace < 0.10, "{var} vs {trace}");
}
