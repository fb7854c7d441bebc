use qcnn::{logits, rotation_invariance_error};
use qcnn_core::layers::{Model, ModelSpec};
use qcnn_core::training::{rng_for, stream};

fn cycles() -> Vec<Vec<[f64; 3]>> {
    (0..3)
        .map(|k| (0..100).map(|i| [(i as f64 * 0.1).sin(), k as f64 * 0.3, (i as f64 * 0.07).cos()]).collect())
        .collect()
}

#[test]
fn logits_have_one_row_per_cycle() {
    let model = Model::new(ModelSpec::compact_qcnn(5), &mut rng_for(1, stream::INIT)).unwrap();
    let rows = logits(&model, cycles()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.len() == 5));
}

#[test]
fn qcnn_logits_ignore_rotation() {
    let model = Model::new(ModelSpec::compact_qcnn(5), &mut rng_for(2, stream::INIT)).unwrap();
    assert!(rotation_invariance_error(&model, cycles(), 5, 3).unwrap() < 1e-8);
    let cnn = Model::new(ModelSpec::compact_cnn(5), &mut rng_for(2, stream::INIT)).unwrap();
    assert!(rotation_invariance_error(&cnn, cycles(), 5, 3).unwrap() > 1e-3);
}
