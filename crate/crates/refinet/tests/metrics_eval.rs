//! Evaluation metrics against independent references, and determinism of
//! the evaluate pipeline.

use refinet::backend::{SeededRng, Shape, Tensor};
use refinet::metrics::{evaluate, psnr};
use refinet::training::{TrainConfig, TrainState};

#[test]
fn psnr_matches_scalar_mse_oracle() {
    let mut rng = SeededRng::new(31);
    for _ in 0..10 {
        let shape = Shape::new(1, 3, 8, 8);
        let a: Vec<f32> = (0..shape.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f32> = (0..shape.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let mut mse = 0.0f64;
        for i in 0..a.len() {
            let d = a[i] as f64 - b[i] as f64;
            mse += d * d;
        }
        mse /= a.len() as f64;
        let want = 10.0 * (2.0f64 * 2.0 / mse).log10();

        let got = psnr(
            &Tensor::from_vec(shape, a).unwrap(),
            &Tensor::from_vec(shape, b).unwrap(),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");
    }
}

#[test]
fn evaluate_writes_nothing_on_a_bad_input() {
    let state = TrainState::new(TrainConfig {
        batch_size: 2,
        total_steps: 1,
        seed: 3,
        target_res: 16,
        lowest_res: 8,
        base_filters: 4,
        embedding_dim: 8,
        convs_per_block: 1,
        ..Default::default()
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs");
    refinet::data::toy::write_toy_pngs(&inputs, 2, 16, 21).unwrap();
    // one oversized straggler; its name sorts after the good files
    let big = refinet::data::toy::toy_image(32, 21, 9);
    refinet::data::tensor_to_image(&big, 0)
        .unwrap()
        .save(inputs.join("zz_wrong.png"))
        .unwrap();

    let out_dir = dir.path().join("out");
    assert!(evaluate(&state, &inputs, &out_dir).is_err());
    assert!(!out_dir.exists(), "partial outputs were written");
}

#[test]
fn evaluate_is_deterministic_for_fixed_inputs() {
    let state = TrainState::new(TrainConfig {
        batch_size: 2,
        total_steps: 1,
        seed: 3,
        target_res: 16,
        lowest_res: 8,
        base_filters: 4,
        embedding_dim: 8,
        convs_per_block: 1,
        ..Default::default()
    })
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs");
    refinet::data::toy::write_toy_pngs(&inputs, 3, 16, 21).unwrap();

    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let rec_a = evaluate(&state, &inputs, &out_a).unwrap();
    let rec_b = evaluate(&state, &inputs, &out_b).unwrap();
    assert_eq!(rec_a, rec_b);
    assert_eq!(
        std::fs::read(out_a.join("eval.csv")).unwrap(),
        std::fs::read(out_b.join("eval.csv")).unwrap()
    );
    for r in &rec_a {
        let name = format!("{}_refined.png", r.id);
        assert_eq!(
            std::fs::read(out_a.join(&name)).unwrap(),
            std::fs::read(out_b.join(&name)).unwrap()
        );
    }
}
