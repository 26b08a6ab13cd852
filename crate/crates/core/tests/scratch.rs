//! Temporary calibration probe. Deleted before the workspace is final.

use dhl_core::data::{self, generate_synthetic, load_dialogs_str, SyntheticConfig};
use dhl_core::model::{self, DhlModelParams, ModelConfig};
use dhl_core::tensor::Tape;
use dhl_core::train::{train, TrainConfig, TrainMode, WeightNet};

#[test]
#[ignore]
fn soft_probability_mass_diagnostics() {
    let corpus = generate_synthetic(&SyntheticConfig {
        n_types: 5,
        n_entities: 20,
        n_attributes: 0,
        n_dialogs: 2000,
        len_range: (6, 12),
        drift: 0.3,
        seed: 42,
    })
    .unwrap();
    let dataset = load_dialogs_str(&corpus).unwrap();
    let prepared = data::prepare(&dataset, (0.15, 0.10, 0.75), 1e-3, 42).unwrap();
    let seed = 0u64;

    for s0 in [0.0, 0.32] {
        let model_config = ModelConfig {
            embed_dim: 8,
            hidden_dim: 8,
            levels: 2,
            vocab_sizes: prepared.vocab_sizes.clone(),
            soft_s0: s0,
            ..ModelConfig::default()
        };
        let train_config = TrainConfig {
            model_lr: 5e-3,
            epochs: 40,
            batch_size: 32,
            seed,
            mode: TrainMode::Bilevel,
            ..TrainConfig::default()
        };
        let params = DhlModelParams::init(&model_config, seed).unwrap();
        let net = WeightNet::init(seed.wrapping_add(1));
        let out = train(
            &prepared.train,
            &prepared.dev,
            &prepared.adjacency,
            &model_config,
            &train_config,
            params,
            net,
        )
        .unwrap();

        // bucket by prefix length: mean P(final), mean P(top), LS, flips
        let mut by_l: std::collections::BTreeMap<usize, (f64, f64, usize, usize)> =
            std::collections::BTreeMap::new();
        for chunk in prepared.test.chunks(256) {
            let mut tape = Tape::new();
            let staged = model::stage_model(&mut tape, &out.params, &prepared.adjacency).unwrap();
            for inst in chunk {
                let trace =
                    model::forward_staged(&mut tape, &staged, &model_config, &inst.prefixes)
                        .unwrap();
                let logits = &trace.post_logits[1];
                let mut t2 = Tape::new();
                let probs = t2.softmax_rows(logits).unwrap();
                let p_final = probs.data()[inst.finals[1]];
                let pred = logits.argmax();
                let p_top = probs.data()[pred];
                let e = by_l.entry(inst.prefix_len.min(11)).or_insert((0.0, 0.0, 0, 0));
                e.0 += p_final;
                e.1 += p_top;
                e.2 += 1;
                if pred == inst.finals[1] {
                    e.3 += 1;
                }
            }
        }
        println!("--- s0 = {s0}");
        for (l, (pf, pt, n, hits)) in &by_l {
            println!(
                "L={l:2} n={n:5} mean P(final)={:.4} mean P(top)={:.4} LS={:.4}",
                pf / *n as f64,
                pt / *n as f64,
                *hits as f64 / *n as f64
            );
        }
    }
}
