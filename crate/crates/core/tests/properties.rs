use pgcn_core::data::{generate_synthetic, make_windows, Scaler, SplitSpec, SyntheticSpec};
use pgcn_core::graph::{normalize_window, progressive_adjacency_values};
use pgcn_core::training::historical_average_baseline;
use pgcn_core::Tensor;
use proptest::prelude::*;

fn windows(b: usize, n: usize, t: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-50.0f64..120.0, b * n * t)
        .prop_map(move |v| Tensor::new([b, n, t], v).unwrap())
}

fn square(t: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f64..1.0, t * t).prop_map(move |v| Tensor::new([t, t], v).unwrap())
}

proptest! {
    #[test]
    fn adjacency_rows_are_distributions(x in windows(2, 5, 6), w in square(6)) {
        let (_, a) = progressive_adjacency_values(&x, &w).unwrap();
        for row in a.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn symmetric_adjustor_gives_symmetric_scores(x in windows(1, 4, 5), w in square(5)) {
        let sym = Tensor::new([5, 5], (0..25).map(|k| {
            let (i, j) = (k / 5, k % 5);
            0.5 * (w.get(&[i, j]) + w.get(&[j, i]))
        }).collect()).unwrap();
        let (s, _) = progressive_adjacency_values(&x, &sym).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((s.get(&[0, i, j]) - s.get(&[0, j, i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_ignores_affine_rescaling(v in prop::collection::vec(0.0f64..80.0, 12), a in 0.1f64..10.0, b in -20.0f64..20.0) {
        let base = normalize_window(&v);
        let moved: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        for (p, q) in base.iter().zip(normalize_window(&moved)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn scaler_round_trip(v in prop::collection::vec(-100.0f64..100.0, 2..40)) {
        prop_assume!(v.iter().any(|&x| x != v[0]));
        let s = Scaler::fit(&v, false).unwrap();
        for &x in &v {
            prop_assert!((s.invert(s.apply(x)) - x).abs() < 1e-9);
        }
        let z: Vec<f64> = v.iter().map(|&x| s.apply(x)).collect();
        prop_assert!(z.iter().sum::<f64>().abs() < 1e-9 * v.len() as f64);
    }

    #[test]
    fn split_spec_text_round_trip(a in 1u32..80, b in 1u32..10) {
        let text = format!("days:{a},{b},{a}");
        let spec: SplitSpec = text.parse().unwrap();
        prop_assert_eq!(spec.to_string().parse::<SplitSpec>().unwrap(), spec);
    }

    #[test]
    fn ha_of_constant_window_is_constant(c in 0.0f64..100.0, t in 2usize..13, out in 1usize..13) {
        let w = Tensor::new([1, t, 3], vec![c; t * 3]).unwrap();
        let p = historical_average_baseline(&w, out).unwrap();
        prop_assert!(p.data().iter().all(|&v| (v - c).abs() < 1e-9));
    }
}

#[test]
fn window_count_matches_table_length() {
    let data = generate_synthetic(&SyntheticSpec::new(3, 1, 100, 0.1, 1)).unwrap();
    let ds = make_windows(data.table, 12, 6, false).unwrap();
    assert_eq!(ds.num_samples(), 100 - 12 - 6 + 1);
}

#[test]
fn noiseless_synthetic_neighbours_share_a_group() {
    let spec = SyntheticSpec::new(8, 2, 1200, 0.0, 3);
    let data = generate_synthetic(&spec).unwrap();
    let ds = make_windows(data.table.clone(), 12, 12, false).unwrap();
    let eye = Tensor::eye(12).unwrap();
    let mut checked = 0;
    for s in 0..ds.num_samples() {
        let rows = ds.input_rows(s);
        if !data.single_regime(rows.clone()) {
            continue;
        }
        let groups = data.groups_at(rows.start);
        let n = spec.nodes;
        let mut x = Vec::with_capacity(n * 12);
        for node in 0..n {
            x.extend(rows.clone().map(|r| data.table.value(r, node)));
        }
        let (_, a) =
            progressive_adjacency_values(&Tensor::new([1, n, 12], x).unwrap(), &eye).unwrap();
        for i in 0..n {
            let best = (0..n)
                .filter(|&j| j != i)
                .max_by(|&p, &q| a.get(&[0, i, p]).total_cmp(&a.get(&[0, i, q])))
                .unwrap();
            assert_eq!(groups[best], groups[i], "window {s}, node {i}");
        }
        checked += 1;
    }
    assert!(checked > 1000);
}
