//! Learning-dynamics probe; run with --ignored.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skygrid_core::channel::{ChannelParams, FadingMode};
use skygrid_core::clustering::kmeans;
use skygrid_core::marl::{run_training, TrainConfig, TrainingScenario};
use skygrid_core::scenario::{generate_ues, FieldConfig};

fn scenario_for(k: usize, seed: u64) -> TrainingScenario {
    let field = FieldConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ues = generate_ues(&mut rng, &field).unwrap();
    let assignment = kmeans(&ues, k, &mut rng, 10, 300, 1e-4 * field.side_len).unwrap();
    TrainingScenario::assemble(field, ChannelParams::dense_urban(), ues, assignment).unwrap()
}

#[test]
#[ignore]
fn desk_scale_learning_curve_k5() {
    let scenario = scenario_for(5, 42);
    let config = TrainConfig::default(); // 100 episodes x 200 steps
    let start = std::time::Instant::now();
    let run = run_training(&scenario, &config, FadingMode::Sampled, 0).unwrap();
    println!("wall: {:.0}s", start.elapsed().as_secs_f64());
    for (i, ep) in run.episodes.iter().enumerate() {
        if i % 5 == 0 || i >= 95 {
            println!(
                "ep {i:3}: reward {:8.3}  served {:5.2}  power {:.3}",
                ep.mean_reward, ep.mean_served, ep.mean_power_fraction
            );
        }
    }
    let first: f64 = run.episodes[..10].iter().map(|e| e.mean_reward).sum::<f64>() / 10.0;
    let last: f64 = run.episodes[80..].iter().map(|e| e.mean_reward).sum::<f64>() / 20.0;
    println!("first-10% mean {first:.3}  last-20% mean {last:.3}  improved: {}", last > first);
}

#[test]
#[ignore]
fn short_run_power_trend_k25() {
    let scenario = scenario_for(25, 42);
    let config = TrainConfig {
        episodes: 25,
        steps_per_episode: 200,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let run = run_training(&scenario, &config, FadingMode::Sampled, 0).unwrap();
    println!("wall: {:.0}s", start.elapsed().as_secs_f64());
    for (i, ep) in run.episodes.iter().enumerate() {
        println!(
            "ep {i:3}: reward {:8.3}  served {:5.2}  power {:.3}",
            ep.mean_reward, ep.mean_served, ep.mean_power_fraction
        );
    }
}
