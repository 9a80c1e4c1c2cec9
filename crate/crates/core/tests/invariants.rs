//! Property tests for the structural guarantees of the fusion stages.

use erba_core::backbone::{GeometryEncoder, GeometryInput};
use erba_core::esda::mmd2_rows;
use erba_core::gmoe::{balance_loss, expert_forward, route, GateReport, GmoeParams, PocketIndexSet, Routing};
use erba_core::init::Initializer;
use erba_core::mrca::{mrca_forward, MrcaParams};
use erba_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn rbf(a: &[f64], b: &[f64], sigma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Straight double loop over every ordered pair, diagonals skipped.
fn mmd2_oracle(a: &Tensor, b: &Tensor, sigma: f64) -> f64 {
    let (na, nb) = (a.rows(), b.rows());
    let mut aa = 0.0;
    for i in 0..na {
        for j in 0..na {
            if i != j {
                aa += rbf(a.row(i), a.row(j), sigma);
            }
        }
    }
    let mut bb = 0.0;
    for i in 0..nb {
        for j in 0..nb {
            if i != j {
                bb += rbf(b.row(i), b.row(j), sigma);
            }
        }
    }
    let mut ab = 0.0;
    for i in 0..na {
        for j in 0..nb {
            ab += rbf(a.row(i), b.row(j), sigma);
        }
    }
    let (na, nb) = (na as f64, nb as f64);
    aa / (na * na) + bb / (nb * nb) - 2.0 * ab / (na * nb)
}

fn random_pocket(init: &mut Initializer, len: usize) -> PocketIndexSet {
    let mut idx: Vec<usize> = (0..len).filter(|_| init.next_u64() % 2 == 0).collect();
    if idx.is_empty() {
        idx.push((init.next_u64() % len as u64) as usize);
    }
    PocketIndexSet::new(idx, len).unwrap()
}

/// Rotation matrix from an (unnormalized) quaternion.
fn rotation(q: [f64; 4]) -> [[f64; 3]; 3] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Householder reflection through `v` followed by a shift, applied to every row.
fn rigid_motion(x: &Tensor, v: &[f64], shift: &[f64]) -> Tensor {
    let vv: f64 = v.iter().map(|a| a * a).sum();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let dot: f64 = x.row(r).iter().zip(v).map(|(a, b)| a * b).sum();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = x.get(r, c) - 2.0 * dot / vv * v[c] + shift[c];
        }
    }
    out
}

fn matrix(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Tensor> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-3.0f64..3.0, r * cols).prop_map(move |d| Tensor::new(r, cols, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn experts_leave_non_pocket_rows_bitwise_untouched(
        seed in any::<u64>(),
        len in 1usize..12,
        d in 1usize..6,
        r in 1usize..4,
    ) {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let p = GmoeParams::init(&mut store, "gmoe", d, 4, 2, r, Routing::Geometry, &mut init).unwrap();
        let h1 = init.uniform(len, d, 5.0);
        let hg = init.uniform(3, d, 5.0);
        let pocket = random_pocket(&mut init, len);
        for i in 0..4 {
            let out = expert_forward(&store, &p, i, &h1, &hg, &pocket).unwrap();
            for row in (0..len).filter(|&j| !pocket.contains(j)) {
                let same = out.row(row).iter().zip(h1.row(row)).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same, "expert {i} changed non-pocket row {row}");
            }
        }
    }

    #[test]
    fn routing_keeps_k_gates_summing_to_one(
        seed in any::<u64>(),
        n in 1usize..7,
        k_pick in 0usize..7,
        shift in -20.0f64..20.0,
        plain in any::<bool>(),
    ) {
        let k = 1 + k_pick % n;
        let routing = if plain { Routing::Plain } else { Routing::Geometry };
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let p = GmoeParams::init(&mut store, "gmoe", 4, n, k, 2, routing, &mut init).unwrap();
        store.value_mut(p.gate_b).data_mut().iter_mut().for_each(|b| *b = init.next_u64() as f64 / u64::MAX as f64);
        let h1 = init.uniform(6, 4, 2.0);
        let hg = init.uniform(3, 4, 2.0);
        let pocket = random_pocket(&mut init, 6);
        let rep = route(&store, &p, &h1, &hg, &pocket).unwrap();
        prop_assert_eq!(rep.alpha_tilde.iter().filter(|&&a| a != 0.0).count(), k);
        prop_assert!((rep.alpha_tilde.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        if k == n {
            for (a, b) in rep.alpha.iter().zip(&rep.alpha_tilde) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        // Adding the same constant to every logit must not change the choice.
        let mut shifted = store.clone();
        shifted.value_mut(p.gate_b).data_mut().iter_mut().for_each(|b| *b += shift);
        let rep2 = route(&shifted, &p, &h1, &hg, &pocket).unwrap();
        prop_assert_eq!(rep.selected, rep2.selected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mmd_matches_double_loop_oracle(
        a in matrix(2..=64, 3),
        b in matrix(2..=64, 3),
        sigma in 0.2f64..5.0,
    ) {
        let fast = mmd2_rows(&a, &b, sigma).unwrap();
        prop_assert!((fast - mmd2_oracle(&a, &b, sigma)).abs() <= 1e-12);
        prop_assert!((fast - mmd2_rows(&b, &a, sigma).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn mmd_of_a_set_with_itself(a in matrix(2..=64, 4), sigma in 0.2f64..5.0) {
        let v = mmd2_rows(&a, &a, sigma).unwrap();
        prop_assert!((v + 2.0 / a.rows() as f64).abs() <= 1e-12);
    }

    #[test]
    fn mmd_is_invariant_to_rigid_motion(
        a in matrix(2..=32, 3),
        b in matrix(2..=32, 3),
        v in prop::array::uniform3(0.1f64..1.0),
        t in prop::array::uniform3(-5.0f64..5.0),
        sigma in 0.5f64..5.0,
    ) {
        let before = mmd2_rows(&a, &b, sigma).unwrap();
        let after = mmd2_rows(&rigid_motion(&a, &v, &t), &rigid_motion(&b, &v, &t), sigma).unwrap();
        prop_assert!((before - after).abs() <= 1e-12);
    }

    #[test]
    fn geometry_encoding_ignores_rotation_and_translation(
        seed in any::<u64>(),
        n in 1usize..9,
        q in prop::array::uniform4(-1.0f64..1.0),
        t in prop::array::uniform3(-20.0f64..20.0),
    ) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-3);
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let enc = GeometryEncoder::init(&mut store, 8, &mut init);
        let coords = init.uniform(n, 3, 8.0);
        let residues: Vec<u8> = (0..n).map(|i| (i * 7 % 20) as u8).collect();
        let rot = rotation(q);
        let mut moved = coords.clone();
        for r in 0..n {
            let p = coords.row(r);
            for c in 0..3 {
                moved.set(r, c, (0..3).map(|j| rot[c][j] * p[j]).sum::<f64>() + t[c]);
            }
        }
        let encode = |x: &Tensor| {
            let mut g = Graph::new();
            let out = enc.encode(&mut g, &store, &GeometryInput::new(x.clone(), residues.clone()).unwrap()).unwrap();
            g.value(out).clone()
        };
        prop_assert!(encode(&coords).max_abs_diff(&encode(&moved)) <= 1e-9);
    }

    #[test]
    fn cross_attention_is_permutation_equivariant(
        seed in any::<u64>(),
        le in 1usize..8,
        lm in 1usize..8,
        post_norm in any::<bool>(),
    ) {
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::new();
        let p = MrcaParams::init(&mut store, "mrca", 6, 6, post_norm, &mut init);
        let he = init.uniform(le, 6, 2.0);
        let hm = init.uniform(lm, 6, 2.0);
        let (h1, _) = mrca_forward(&store, &p, &he, &hm).unwrap();

        // Reversing the residues reverses the output rows.
        let rev: Vec<Vec<f64>> = (0..le).rev().map(|r| he.row(r).to_vec()).collect();
        let (h1_rev, _) = mrca_forward(&store, &p, &Tensor::from_rows(&rev).unwrap(), &hm).unwrap();
        for r in 0..le {
            for c in 0..6 {
                prop_assert!((h1.get(r, c) - h1_rev.get(le - 1 - r, c)).abs() <= 1e-12);
            }
        }
        // Rotating the substrate tokens changes nothing.
        let rot: Vec<Vec<f64>> = (0..lm).map(|r| hm.row((r + 1) % lm).to_vec()).collect();
        let (h1_rot, _) = mrca_forward(&store, &p, &he, &Tensor::from_rows(&rot).unwrap()).unwrap();
        prop_assert!(h1.max_abs_diff(&h1_rot) <= 1e-12);
    }
}

fn report(alpha_tilde: Vec<f64>) -> GateReport {
    GateReport {
        alpha: alpha_tilde.clone(),
        selected: alpha_tilde.iter().enumerate().filter(|(_, &a)| a > 0.0).map(|(i, _)| i).collect(),
        alpha_tilde,
        routing: Tensor::zeros(1, 2),
    }
}

#[test]
fn balance_loss_reference_values() {
    assert_eq!(balance_loss(&[report(vec![0.25; 4])], 4, 4).unwrap(), 0.0);
    let degenerate = balance_loss(&[report(vec![1.0, 0.0, 0.0, 0.0])], 4, 1).unwrap();
    assert!((degenerate - 1.5).abs() <= 1e-12);
}
