use genni_core::data::{build_sequences, five_core_filter, split_leave_one_out, EvalCase, Split};
use genni_core::encoder::final_states;
use genni_core::evaluation::evaluate;
use genni_core::sampler::{inspect_informative_negatives, SamplerSpec};
use genni_core::synthetic::{generate, SyntheticSpec, Transition};
use genni_core::training::{train, EncoderHyper, TrainConfig, TrainData};

struct Prepared {
    split: Split,
    n_items: usize,
    popularity: Vec<u64>,
    item_index: Box<dyn Fn(&str) -> u32>,
}

fn prepare(spec: &SyntheticSpec, max_len: usize) -> Prepared {
    let data = generate(spec).unwrap();
    let log = five_core_filter(&data.log).unwrap();
    let seqs = build_sequences(&log, max_len).unwrap();
    let split = split_leave_one_out(&seqs.items);
    let mut popularity = vec![0u64; seqs.vocab.len() + 1];
    for s in &split.train {
        for &i in s {
            popularity[i as usize] += 1;
        }
    }
    let vocab = seqs.vocab.clone();
    Prepared {
        split,
        n_items: seqs.vocab.len(),
        popularity,
        item_index: Box::new(move |id| vocab.index_of(id).unwrap()),
    }
}

fn small_config(sampler: SamplerSpec, epochs: usize) -> TrainConfig {
    TrainConfig {
        sampler,
        max_epochs: epochs,
        patience: epochs,
        lr: 0.002,
        encoder: EncoderHyper {
            max_len: 20,
            dim: 32,
            layers: 1,
            heads: 1,
            ff_dim: 64,
            dropout: 0.2,
            final_layer_norm: true,
        },
        ..TrainConfig::default()
    }
}

#[test]
fn smoke_training_improves_validation_ndcg() {
    let p = prepare(&SyntheticSpec::markov(2000, 200, 20.0, 11), 20);
    let data = TrainData {
        train: &p.split.train,
        valid: &p.split.valid,
        n_items: p.n_items,
        popularity: &p.popularity,
    };
    let out = train::<f32>(&small_config(SamplerSpec::genni(1.0, 1.0, 1), 5), &data).unwrap();
    let ndcg: Vec<f64> = out.metrics.epochs.iter().map(|e| e.ndcg10).collect();
    assert_eq!(ndcg.len(), 5);
    assert!(ndcg.windows(2).all(|w| w[1] > w[0]), "{ndcg:?}");
    let test = evaluate(&out.best, &p.split.test, &[10], false).unwrap();
    assert!(test.ndcg_at(10) > 0.0 && test.ndcg_at(10) <= 1.0);
}

#[test]
fn planted_pair_is_the_top_informative_negative() {
    let mut spec = SyntheticSpec::markov(3000, 100, 15.0, 5);
    spec.transition = Transition::PlantedConfounder {
        temperature: 1.0,
        held_out: 0.1,
    };
    let raw = generate(&spec).unwrap();
    let (first, second) = raw.pair.clone().unwrap();
    let p = prepare(&spec, 20);
    let (first, second) = ((p.item_index)(&first), (p.item_index)(&second));
    let data = TrainData {
        train: &p.split.train,
        valid: &p.split.valid,
        n_items: p.n_items,
        popularity: &p.popularity,
    };
    let out = train::<f32>(&small_config(SamplerSpec::genni(1.0, 1.0, 1), 10), &data).unwrap();

    // held-out users end on [first, x]: their test context ends on `first`
    let cases: Vec<&EvalCase> = p
        .split
        .test
        .iter()
        .filter(|c| c.context.last() == Some(&first) && c.target != second)
        .collect();
    assert!(cases.len() >= 100, "{} held-out test cases", cases.len());
    let contexts: Vec<&[u32]> = cases.iter().map(|c| c.context.as_slice()).collect();
    let d = out.best.config.dim;
    let states = final_states(&out.best, &contexts).unwrap();
    let mut top_is_second = 0;
    for (i, case) in cases.iter().enumerate() {
        let h = &states[i * d..(i + 1) * d];
        let top = inspect_informative_negatives(h, &out.best.item_embeddings, 1.0, Some(case.target), 3).unwrap();
        if top[0].0 == second {
            top_is_second += 1;
        }
    }
    assert!(
        top_is_second * 10 >= cases.len() * 9,
        "second item ranked first for {top_is_second} of {} contexts",
        cases.len()
    );
}
