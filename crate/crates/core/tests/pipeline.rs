use std::collections::BTreeMap;

use hdyolo_core::data::{load_yolo_dataset, synth_generate, Regime, SynthSpec};
use hdyolo_core::hypergraph::{
    construct_hypergraph, hyperconv_matrix, hyperconv_message_passing, HyperConvWeights, VertexSet,
};
use hdyolo_core::metrics::{evaluate, EvalOptions};
use hdyolo_core::model::{load_checkpoint, save_checkpoint, Checkpoint, DetectionBox, Model, ModelConfig};

#[test]
fn two_clusters_give_two_edge_shapes() {
    let vs = VertexSet::from_rows(&[vec![0.0, 0.0], vec![0.5, 0.0], vec![9.0, 9.0]]).unwrap();
    let hg = construct_hypergraph(&vs, 1.0).unwrap();
    assert_eq!(hg.vertex_degrees(), &[2, 2, 1]);
    assert_eq!(hg.edge_members(2).collect::<Vec<_>>(), vec![2]);

    let w = HyperConvWeights::new(2, 2, vec![0.3, -0.1, 0.2, 0.5]).unwrap();
    let a = hyperconv_matrix(&vs, &hg, &w).unwrap();
    let (b, _) = hyperconv_message_passing(&vs, &hg, &w).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn synth_load_detect_and_checkpoint_roundtrip() {
    let d = tempfile::tempdir().unwrap();
    let data_dir = d.path().join("data");
    synth_generate(&SynthSpec::new(Regime::Tiny, 3, 64, 5), &data_dir).unwrap();
    let data = load_yolo_dataset(&data_dir).unwrap();
    assert_eq!(data.len(), 3);

    let cfg = ModelConfig::micro();
    let model = Model::new(cfg.clone(), 1).unwrap();
    let (x, _) = data.batch(&[0, 1, 2], cfg.input_size).unwrap();
    let dets = model.detect(&x, 0.001, 0.6).unwrap();
    assert_eq!(dets.len(), 3);

    let ck_path = d.path().join("m.ckpt");
    save_checkpoint(&ck_path, &Checkpoint::from_model(&model, None, 0, 1)).unwrap();
    let again = load_checkpoint(&ck_path).unwrap().to_model().unwrap();
    let (p, q) = (model.predict(&x).unwrap(), again.predict(&x).unwrap());
    for (a, b) in p.iter().zip(&q) {
        assert_eq!(a.data(), b.data());
    }

    // ground truth fed back as predictions scores a perfect mAP
    let gts = data.ground_truth();
    let preds: BTreeMap<String, Vec<DetectionBox>> = gts
        .iter()
        .map(|g| {
            let boxes = g
                .records
                .iter()
                .map(|r| {
                    let [cx, cy, w, h] = r.to_pixels(g.width, g.height);
                    DetectionBox {
                        class_id: r.class_id,
                        confidence: 0.9,
                        cx,
                        cy,
                        w,
                        h,
                    }
                })
                .collect();
            (g.image_id.clone(), boxes)
        })
        .collect();
    let r = evaluate(&preds, &gts, EvalOptions::default()).unwrap();
    assert_eq!(r.map50, 1.0);
    assert_eq!(r.counts.fp, 0);
}
