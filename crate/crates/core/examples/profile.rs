//! Rough per-phase timing of one training example; used to keep the
//! desk-scale runtime budget honest. Run with `cargo run --example profile`.

use std::time::Instant;

use pfsr_core::model::{ChannelMode, Model, ModelConfig};
use pfsr_core::tensor::Graph;

fn main() {
    let model = Model::new(ModelConfig {
        embed_dim: 32,
        state_size: 16,
        conv_kernel: 4,
        expansion: 4,
        num_blocks: 1,
        dropout: 0.1,
        max_seq_len: 50,
        vocab_size: 300,
    })
    .unwrap();
    let params = model.init_parameters(1);
    let seq: Vec<u32> = (0..14).map(|i| (i * 13 % 300 + 1) as u32).collect();

    let reps = 2000;

    let t = Instant::now();
    for _ in 0..reps {
        let mut graph = Graph::new();
        let _ = model.leaves(&mut graph, &params).unwrap();
    }
    println!(
        "leaves only:      {:8.1} us",
        t.elapsed().as_secs_f64() / reps as f64 * 1e6
    );

    let t = Instant::now();
    for _ in 0..reps {
        let mut graph = Graph::new();
        let leaves = model.leaves(&mut graph, &params).unwrap();
        let _ = model
            .encode(&mut graph, &leaves, &seq, false, None, ChannelMode::Both)
            .unwrap();
    }
    println!(
        "forward:          {:8.1} us",
        t.elapsed().as_secs_f64() / reps as f64 * 1e6
    );

    let t = Instant::now();
    for _ in 0..reps {
        let mut graph = Graph::new();
        let leaves = model.leaves(&mut graph, &params).unwrap();
        let loss = model
            .example_loss(&mut graph, &leaves, &seq, 7, false, None)
            .unwrap();
        graph.backward(loss).unwrap();
    }
    println!(
        "forward+backward: {:8.1} us",
        t.elapsed().as_secs_f64() / reps as f64 * 1e6
    );

    let mut grad = vec![0.0; params.len()];
    let t = Instant::now();
    for _ in 0..reps {
        let mut graph = Graph::new();
        let leaves = model.leaves(&mut graph, &params).unwrap();
        let loss = model
            .example_loss(&mut graph, &leaves, &seq, 7, false, None)
            .unwrap();
        graph.backward(loss).unwrap();
        model.accumulate_grads(&graph, &leaves, &mut grad).unwrap();
    }
    println!(
        "full example:     {:8.1} us",
        t.elapsed().as_secs_f64() / reps as f64 * 1e6
    );
}
