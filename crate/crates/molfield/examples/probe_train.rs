// Dev probe: desk-scale single-molecule overfit + generation quality.
use molfield::diffusion::{cosine_schedule, generate, DEFAULT_SCHEDULE_OFFSET};
use molfield::fieldgen::{distance_sample, sample_query_points, FieldKind, GridSpec};
use molfield::fixtures;
use molfield::hypernet::HypernetConfig;
use molfield::mnf::{mnf_eval, SirenArch, DEFAULT_OMEGA0};
use molfield::trainer::{init_train_state, train, TrainConfig};
use std::time::Instant;

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let m = fixtures::methane();
    let vocab = fixtures::methane_vocab();
    let arch = SirenArch::new(vec![64, 64, 64], vocab.k(), DEFAULT_OMEGA0).unwrap();
    let hcfg = HypernetConfig::desk(vocab.clone(), arch, FieldKind::Direction);
    let grid = GridSpec::for_conformer(&m, 3, 8, 2.0);
    let schedule = cosine_schedule(100, DEFAULT_SCHEDULE_OFFSET);
    let tcfg = TrainConfig {
        epochs: steps / 10,
        steps_per_epoch: 10,
        lr,
        ..Default::default()
    };
    let mut state = init_train_state(&hcfg, &tcfg).unwrap();
    let t0 = Instant::now();
    train(&mut state, &[m.clone()], &grid, &schedule, &tcfg).unwrap();
    let elapsed = t0.elapsed();
    let h = &state.history;
    let avg = |lo: usize, hi: usize| -> f64 {
        h[lo..hi].iter().map(|r| r.total).sum::<f64>() / (hi - lo) as f64
    };
    println!(
        "lr {lr:.0e} steps {steps}: loss@50 {:.4} @500 {:.4} @2000 {:.4} @end {:.4}  ({:.0} ms/step)",
        avg(45, 55),
        avg(495, 505),
        if steps >= 2000 { avg(1995, 2005) } else { f64::NAN },
        avg(steps - 10, steps),
        elapsed.as_millis() as f64 / steps as f64
    );

    // generation quality: predicted distance field of θ_final vs truth
    let (theta, _) = generate(&state.phi, &grid, &schedule, 12345).unwrap();
    let q = sample_query_points(&grid, 999);
    let truth = distance_sample(&q, &m, &vocab);
    let pred = mnf_eval(&theta, &q).unwrap();
    let err = (&pred.values - &truth.values).mapv(f64::abs).mean().unwrap();
    println!("generated field mean |err| = {err:.4} Å");
}
