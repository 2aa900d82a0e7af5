use std::time::Instant;

use termnmt::annotate::Factor;
use termnmt::model::{corpus_loss, train, Example, ModelConfig, TrainConfig, Transformer};

fn corpus16() -> Vec<Example> {
    (0..16u32)
        .map(|i| {
            let len = 3 + (i % 4) as usize;
            let src: Vec<u32> = (0..len as u32).map(|k| 4 + (i * 7 + k * 3) % 40).collect();
            let tgt: Vec<u32> = src.iter().rev().map(|&s| 44 + (s * 5) % 40).collect();
            Example {
                factors: vec![Factor::Source; src.len()],
                src,
                tgt,
            }
        })
        .collect()
}

#[test]
fn desk_model_overfits_sixteen_pairs() {
    let corpus = corpus16();
    let config = ModelConfig {
        label_smoothing: 0.0,
        ..ModelConfig::desk(84)
    };
    let mut model = Transformer::<f32>::new(config).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        warmup_steps: 20,
        min_epochs: 1,
        max_epochs: 200,
        patience: 200,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut reached = None;
    let state = train(&mut model, &corpus, &corpus, &cfg, |r| {
        if reached.is_none() && r.dev_loss < 0.1 {
            reached = Some(r.epoch);
        }
    })
    .unwrap();
    let loss = corpus_loss(&model, &corpus).unwrap();
    eprintln!(
        "overfit: loss {loss:.4} after {} epochs, first < 0.1 at {reached:?}, {:.1}s",
        state.epoch,
        start.elapsed().as_secs_f64()
    );
    assert!(loss < 0.1, "per-token training loss {loss}");
}

#[test]
fn smoothed_loss_floor_is_positive() {
    let pair = vec![Example {
        src: vec![5, 6, 7],
        factors: vec![Factor::Source; 3],
        tgt: vec![8, 9],
    }];
    let vocab = 12;
    let base = ModelConfig {
        model_size: 32,
        attention_heads: 2,
        feed_forward_hidden: 64,
        factor_embed_size: 4,
        dropout: 0.0,
        ..ModelConfig::desk(vocab)
    };
    let cfg = TrainConfig {
        batch_size: 1,
        learning_rate: 3e-3,
        warmup_steps: 0,
        min_epochs: 150,
        max_epochs: 150,
        ..TrainConfig::default()
    };
    let eps = 0.1f64;
    let floor_per_token = -(1.0 - eps) * (1.0 - eps).ln() - eps * (eps / (vocab - 1) as f64).ln();
    let tokens = 3.0;

    let mut plain = Transformer::<f64>::new(ModelConfig {
        label_smoothing: 0.0,
        ..base.clone()
    })
    .unwrap();
    train(&mut plain, &pair, &pair, &cfg, |_| {}).unwrap();
    let plain_loss = plain.loss(&pair[0], 0.0).unwrap();
    assert!(plain_loss < 0.01, "{plain_loss}");

    let mut smooth = Transformer::<f64>::new(ModelConfig {
        label_smoothing: eps,
        ..base
    })
    .unwrap();
    train(&mut smooth, &pair, &pair, &cfg, |_| {}).unwrap();
    let smooth_loss = smooth.loss(&pair[0], eps).unwrap();
    assert!(smooth_loss >= floor_per_token * tokens - 1e-9);
    assert!(
        smooth_loss < floor_per_token * tokens + 0.25,
        "{smooth_loss} vs floor {}",
        floor_per_token * tokens
    );
}
