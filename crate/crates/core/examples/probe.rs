use flsn_core::graph::{BatchInput, BatchOutput};
use flsn_core::optim::{train, LossKind, SampleInput, Target, TrainConfig, TrainSet};
use flsn_core::zoo::build_detector;
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
    let mut set = TrainSet::default();
    let mut patches = Vec::new();
    for i in 0..24 {
        let bright = i % 2 == 0;
        let base = if bright { 0.8f32 } else { 0.1 };
        let data: Vec<f32> = (0..96 * 96).map(|_| base + rng.gen_range(0.0..0.1)).collect();
        let patch = flsn_core::Tensor::new(vec![1, 96, 96], data).unwrap();
        patches.push((patch.clone(), bright));
        set.push(SampleInput::Single(patch), Target::Dual { objectness: if bright { 0.9 } else { 0.0 }, class: if bright { 3 } else { 10 } });
    }
    let mut net = build_detector(11, &mut rng).unwrap();
    let probe = |net: &flsn_core::graph::NetworkGraph, tag: &str, patches: &[(flsn_core::Tensor, bool)]| {
        let inputs: Vec<flsn_core::Tensor> = patches.iter().map(|(p, _)| p.clone()).collect();
        match net.infer_batch(&BatchInput::Single(&inputs)).unwrap() {
            BatchOutput::Dual { objectness, .. } => {
                let b: Vec<f32> = objectness.iter().zip(patches).filter(|(_, (_, br))| *br).map(|(t, _)| t.data()[0]).collect();
                let d: Vec<f32> = objectness.iter().zip(patches).filter(|(_, (_, br))| !*br).map(|(t, _)| t.data()[0]).collect();
                println!("{tag}: bright mean {:.4} dark mean {:.4}",
                    b.iter().sum::<f32>() / b.len() as f32, d.iter().sum::<f32>() / d.len() as f32);
            }
            _ => unreachable!(),
        }
    };
    probe(&net, "init", &patches);
    for round in 0..5 {
        let cfg = TrainConfig::new(8, 3, LossKind::CategoricalCe).with_seed(2 + round).with_lr(0.003).with_gamma(0.0);
        let log = train(&mut net, &set, Some(&set), &cfg).unwrap();
        let last = log.rows.last().unwrap();
        println!("round {round}: train_loss {:.4} val_loss {:.4}", last.train_loss, last.val_loss);
        probe(&net, &format!("after round {round}"), &patches);
    }
}
