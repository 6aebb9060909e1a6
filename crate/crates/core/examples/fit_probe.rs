// quick probe: vary lr/epochs for the linear-teacher fit
use std::sync::Arc;
use hflab::features::{FeatureDataset, MidMode, WindowSet, FEATURE_DIM};
use hflab::models::{ModelKind, ModelSpec};
use hflab::train::{split_windows, train, window_targets, TrainConfig};
use rand::{Rng, SeedableRng};

fn teacher_dataset(n_rows: usize, look_back: usize, seed: u64) -> Arc<FeatureDataset> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<f64> = (0..n_rows * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tau = 1;
    let weights: Vec<f64> = (0..FEATURE_DIM).map(|i| ((i as f64) * 0.37).sin() * 0.01).collect();
    let ds = FeatureDataset::from_parts(rows.clone(), vec![0.0; n_rows - tau], tau, MidMode::Literal).unwrap();
    let ws = WindowSet::build(Arc::new(ds), look_back, 1).unwrap();
    let mut targets = vec![0.0; n_rows - tau];
    for i in 0..ws.len() {
        let w = ws.window(i);
        let last = w.rows.row(look_back - 1);
        targets[ws.end_row(i)] = last.iter().zip(&weights).map(|(a, b)| a * b).sum();
    }
    Arc::new(FeatureDataset::from_parts(rows, targets, tau, MidMode::Literal).unwrap())
}

fn main() {
    let look_back = 6;
    let ds = teacher_dataset(700, look_back, 2);
    let ws = WindowSet::build(ds, look_back, 1).unwrap();
    let (tr, va, _) = split_windows(&ws, 0.8, 0.2).unwrap();
    let zero_mse: f64 = window_targets(&va).iter().map(|t| t * t).sum::<f64>() / va.len() as f64;
    println!("zero-pred mse {zero_mse:.6e}");
    for (lr, epochs, bs, wd) in [(0.01, 200, 32, 0.0), (0.015, 200, 32, 0.0), (0.01, 300, 32, 0.0)] {
        let mut spec = ModelSpec::hfformer(look_back, 1);
        spec.d_model = 16; spec.heads = 2; spec.head_dim = 8; spec.ffn_inner = 32;
        let cfg = TrainConfig { epochs, batch_size: bs, learning_rate: lr, weight_decay: wd, seed: 3, patience: epochs, ..TrainConfig::for_kind(ModelKind::Hfformer) };
        let t0 = std::time::Instant::now();
        match train(&spec, &tr, &va, &cfg) {
            Ok((tm, _)) => println!("lr={lr} e={epochs} bs={bs}: best val {:.3e} ratio {:.4} ({:.1}s)", tm.meta.best_val_loss, tm.meta.best_val_loss / zero_mse, t0.elapsed().as_secs_f64()),
            Err(e) => println!("lr={lr} e={epochs}: ERR {e}"),
        }
    }
}
