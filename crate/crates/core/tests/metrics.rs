mod common;

use common::{check_metric_instance, metric_oracle_trials, MetricInstance};
use proptest::prelude::*;
use zscode::evaluation::{confusion_counts, prf1, GoldMatrix, Mode, PredictionMatrix};

#[test]
fn thousand_random_instances_match_oracles() {
    let bad = metric_oracle_trials(1000, 17);
    assert!(bad.is_empty(), "{} mismatches, first: {}", bad.len(), bad[0]);
}

fn instance() -> impl Strategy<Value = MetricInstance> {
    (1usize..=10)
        .prop_flat_map(|docs| (Just(docs), 1usize..=100 / docs))
        .prop_flat_map(|(docs, codes)| {
            let n = docs * codes;
            (
                Just(docs),
                Just(codes),
                prop::collection::vec((0u8..=10).prop_map(|s| s as f64 / 10.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_map(|(docs, codes, scores, gold)| MetricInstance {
            docs,
            codes,
            scores,
            gold,
            threshold: 0.5,
        })
}

fn micro_f1(inst: &MetricInstance, order: &[usize]) -> f64 {
    let doc_ids: Vec<String> = (0..inst.docs).map(|i| format!("d{i}")).collect();
    let codes: Vec<String> = order.iter().map(|l| format!("c{l:03}")).collect();
    let scores = ndarray::Array2::from_shape_fn((inst.docs, inst.codes), |(i, k)| {
        inst.scores[i * inst.codes + order[k]]
    });
    let labels = ndarray::Array2::from_shape_fn((inst.docs, inst.codes), |(i, k)| {
        inst.gold[i * inst.codes + order[k]]
    });
    let pred = PredictionMatrix::new(doc_ids.clone(), codes.clone(), scores, inst.threshold).unwrap();
    let gold = GoldMatrix {
        doc_ids,
        codes: codes.clone(),
        labels,
    };
    prf1(&confusion_counts(&pred, &gold, &codes).unwrap(), Mode::Micro).f1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_oracles(inst in instance()) {
        prop_assert_eq!(check_metric_instance(&inst), Ok(()));
    }

    #[test]
    fn micro_f1_ignores_code_order(inst in instance(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..inst.codes).collect();
        let base = micro_f1(&inst, &order);
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(base.to_bits(), micro_f1(&inst, &order).to_bits());
    }
}
