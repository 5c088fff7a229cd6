mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use docqa::metrics::{anls, levenshtein, rouge_l, token_f1, ANLS_TAU};

use common::{random_answer, ref_anls, ref_f1, ref_levenshtein, ref_rouge_l};

#[test]
fn agree_with_reference_implementations() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..2000 {
        let p = random_answer(&mut rng);
        let g = random_answer(&mut rng);
        let gs = vec![g.clone()];
        let (pc, gc): (Vec<char>, Vec<char>) = (p.chars().collect(), g.chars().collect());
        assert_eq!(levenshtein(&pc, &gc), ref_levenshtein(&pc, &gc));
        assert!((anls(&p, &gs, ANLS_TAU) - ref_anls(&p, &g)).abs() < 1e-9, "{p:?} {g:?}");
        assert!((token_f1(&p, &gs) - ref_f1(&p, &g)).abs() < 1e-9, "{p:?} {g:?}");
        assert!((rouge_l(&p, &gs) - ref_rouge_l(&p, &g)).abs() < 1e-9, "{p:?} {g:?}");
    }
}

#[test]
fn multiple_golds_take_the_best() {
    let golds = vec!["nothing alike".to_string(), "hello".to_string()];
    assert!((anls("helo", &golds, ANLS_TAU) - 0.8).abs() < 1e-12);
    assert_eq!(token_f1("hello", &golds), 1.0);
}
