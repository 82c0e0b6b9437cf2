mod common;

use reportgen::decode::{
    check_structure, generate_many, generate_report, generate_reports, DecodeConfig,
};
use reportgen::tokenizer::{EOS, IMPRESSION, NEXT};

fn cfg() -> DecodeConfig {
    DecodeConfig {
        k: 4,
        n: 4,
        max_len: 96,
        ..DecodeConfig::default()
    }
}

#[test]
fn forcing_invariant_over_a_thousand_untrained_generations() {
    let t = common::tiny(1);
    let studies: Vec<&[Vec<f64>]> = t
        .corpus
        .train
        .iter()
        .take(10)
        .map(|s| s.views.as_slice())
        .collect();
    let packed = t.model.pack(&studies).unwrap();
    let requests: Vec<(usize, u64)> = (0..1000).map(|i| (i % 10, i as u64)).collect();
    let gens = generate_many(&t.model, &packed, &requests, &cfg()).unwrap();
    for g in &gens {
        check_structure(&g.tokens, 4).unwrap();
        let ids = g.tokens.ids();
        let fourth = ids
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == NEXT)
            .nth(3)
            .unwrap()
            .0;
        assert!(!ids[..fourth].contains(&IMPRESSION) && !ids[..fourth].contains(&EOS));
        assert!(ids.len() <= 96);
    }
}

#[test]
fn lockstep_batch_equals_one_at_a_time() {
    let t = common::tiny(2);
    let studies: Vec<&[Vec<f64>]> = t
        .corpus
        .train
        .iter()
        .take(3)
        .map(|s| s.views.as_slice())
        .collect();
    let packed = t.model.pack(&studies).unwrap();
    let requests = [(0, 11), (2, 12), (1, 13), (0, 14)];
    let together = generate_many(&t.model, &packed, &requests, &cfg()).unwrap();
    for (g, &(study, seed)) in together.iter().zip(&requests) {
        let alone = generate_many(&t.model, &packed.select(study), &[(0, seed)], &cfg()).unwrap();
        assert_eq!(&alone[0], g);
    }
}

#[test]
fn best_of_n_picks_the_top_value_and_is_reproducible() {
    let t = common::tiny(3);
    let studies: Vec<&[Vec<f64>]> = t.corpus.test.iter().map(|s| s.views.as_slice()).collect();
    let packed = t.model.pack(&studies).unwrap();
    let seeds: Vec<u64> = (0..studies.len() as u64).collect();
    let a = generate_reports(&t.model, Some(&t.model), &packed, &seeds, &cfg()).unwrap();
    let b = generate_reports(&t.model, Some(&t.model), &packed, &seeds, &cfg()).unwrap();
    assert_eq!(a, b);
    for (i, r) in a.iter().enumerate() {
        let max = r.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.scores[r.chosen], max);
        let seqs: Vec<&[usize]> = r.candidates.iter().map(|c| c.tokens.ids()).collect();
        assert_eq!(
            t.model.final_values(&seqs, &packed.select(i)).unwrap(),
            r.scores
        );
    }
    let one = DecodeConfig { n: 1, ..cfg() };
    let single = generate_report(&t.model, None, &packed.select(0), &one, 0).unwrap();
    assert_eq!(single.chosen, 0);
    assert_eq!(single.candidates.len(), 1);
    assert_eq!(single.candidates[0], a[0].candidates[0]);
}

#[test]
fn full_scale_preset_forces_ten_sentences() {
    let c = DecodeConfig::full_scale();
    assert_eq!(c.k, 10);
    c.validate().unwrap();
}
