use hdyolo_web::{attention_matrix, hypergraph_view, synth_preview_image};

#[test]
fn hypergraph_of_three_points() {
    let v = hypergraph_view(&[0.0, 0.0, 1.0, 0.0, 5.0, 5.0], 1.5).unwrap();
    assert_eq!(v.n_vertices, 3);
    assert_eq!(v.edges, vec![vec![0, 1], vec![0, 1], vec![2]]);
    assert_eq!(v.vertex_degrees, vec![2, 2, 1]);
    assert_eq!(v.degree_histogram.get(&2), Some(&2));
    let wide = hypergraph_view(&[0.0, 0.0, 1.0, 0.0, 5.0, 5.0], 100.0).unwrap();
    assert!(wide.edges.iter().all(|e| e.len() == 3));
}

#[test]
fn odd_coordinate_count_is_rejected() {
    assert!(hypergraph_view(&[0.0, 1.0, 2.0], 1.0).is_err());
    assert!(attention_matrix(&[0.0, 1.0], 0.0).is_err());
}

#[test]
fn attention_is_exp_of_negative_distance() {
    let a = attention_matrix(&[0.0, 0.0, 3.0, 4.0], 0.5).unwrap();
    assert_eq!(a.len(), 4);
    assert_eq!(a[0], 1.0);
    assert!((a[1] - (-2.5f64).exp()).abs() < 1e-15);
    assert_eq!(a[1], a[2]);
}

#[test]
fn preview_matches_regime_and_is_deterministic() {
    let p = synth_preview_image("tiny", 64, 3).unwrap();
    assert_eq!(p.rgba_bytes().len(), 64 * 64 * 4);
    assert!(!p.boxes().is_empty());
    assert!(p.boxes().iter().all(|b| b.area_fraction <= 0.01));
    assert_eq!(p.rgba_bytes(), synth_preview_image("tiny", 64, 3).unwrap().rgba_bytes());
    let l = synth_preview_image("large", 64, 3).unwrap();
    assert!(l.boxes().iter().all(|b| b.area_fraction >= 0.1));
    assert!(synth_preview_image("medium", 64, 3).is_err());
}
