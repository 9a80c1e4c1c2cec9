use erba::dataset::parse_dataset;
use erba::synth::{gen_synth, radius_of_gyration, write_synth, SynthSpec};

/// R² of the least-squares line through `(x, y)`.
fn linear_r2(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - my - slope * (a - mx)).powi(2)).sum();
    1.0 - sse / syy
}

fn rg_and_targets(spec: &SynthSpec, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let data = gen_synth(spec, seed).unwrap();
    let rg = data.records.iter().map(|r| radius_of_gyration(&r.coords)).collect();
    let z = data.records.iter().map(|r| r.target()).collect();
    (rg, z, data.regimes)
}

#[test]
fn same_seed_same_data() {
    let spec = SynthSpec {
        samples: 30,
        ..SynthSpec::default()
    };
    assert_eq!(gen_synth(&spec, 7).unwrap(), gen_synth(&spec, 7).unwrap());
    assert_ne!(gen_synth(&spec, 7).unwrap().records, gen_synth(&spec, 8).unwrap().records);
}

#[test]
fn single_regime_without_noise_is_linear_in_gyration_radius() {
    let spec = SynthSpec {
        samples: 300,
        regimes: 1,
        bilinear: 0.0,
        noise: 0.0,
        ..SynthSpec::default()
    };
    let (rg, z, _) = rg_and_targets(&spec, 3);
    assert!((linear_r2(&rg, &z) - 1.0).abs() < 1e-9);
}

#[test]
fn opposite_regimes_hide_the_geometry_effect_from_a_pooled_fit() {
    let spec = SynthSpec {
        samples: 2000,
        regimes: 2,
        bilinear: 0.0,
        noise: 0.0,
        ..SynthSpec::default()
    };
    let (rg, z, regimes) = rg_and_targets(&spec, 11);
    assert!(linear_r2(&rg, &z) < 0.05, "pooled r2 {}", linear_r2(&rg, &z));
    for g in 0..2 {
        let pick = |v: &[f64]| v.iter().zip(&regimes).filter(|(_, &r)| r == g).map(|(a, _)| *a).collect::<Vec<_>>();
        assert!(linear_r2(&pick(&rg), &pick(&z)) > 0.999);
    }
}

#[test]
fn bilinear_feature_carries_the_substrate_effect() {
    let spec = SynthSpec {
        samples: 500,
        geometry: 0.0,
        noise: 0.0,
        ..SynthSpec::default()
    };
    let data = gen_synth(&spec, 2).unwrap();
    let bil: Vec<f64> = data.features.iter().map(|f| f.0).collect();
    let z: Vec<f64> = data.records.iter().map(|r| r.target()).collect();
    assert!((linear_r2(&bil, &z) - 1.0).abs() < 1e-9);
    assert!(bil.iter().any(|&b| b > 0.5) && bil.iter().any(|&b| b < -0.5));
}

#[test]
fn heteroscedastic_noise_grows_with_regime() {
    let spec = SynthSpec {
        samples: 3000,
        heteroscedastic: true,
        bilinear: 0.0,
        geometry: 0.0,
        noise: 0.5,
        ..SynthSpec::default()
    };
    let data = gen_synth(&spec, 4).unwrap();
    let var = |g: usize| {
        let z: Vec<f64> = data
            .records
            .iter()
            .zip(&data.regimes)
            .filter(|(_, &r)| r == g)
            .map(|(r, _)| r.target())
            .collect();
        let m = z.iter().sum::<f64>() / z.len() as f64;
        z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / z.len() as f64
    };
    let (v0, v2) = (var(0), var(2));
    // Expected variances 0.25 and 1.0.
    assert!((v0 - 0.25).abs() < 0.05, "{v0}");
    assert!((v2 - 1.0).abs() < 0.15, "{v2}");
}

#[test]
fn written_dataset_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synth(&SynthSpec { samples: 12, ..SynthSpec::default() }, 9).unwrap();
    write_synth(dir.path(), &data).unwrap();
    let back = parse_dataset(&dir.path().join("data.tsv")).unwrap();
    assert_eq!(back.len(), 12);
    for (a, b) in back.iter().zip(&data.records) {
        assert_eq!((&a.id, &a.sequence, &a.smiles, &a.pocket, a.value), (&b.id, &b.sequence, &b.smiles, &b.pocket, b.value));
        assert!(a.coords.max_abs_diff(&b.coords) < 1e-4);
    }
    let regimes = std::fs::read_to_string(dir.path().join("regimes.tsv")).unwrap();
    assert_eq!(regimes.lines().count(), 13);
}
