use std::collections::HashMap;

use proctrain::diagnostics::*;
use proctrain::rng;
use proctrain::tensor::Tensor;
use proctrain::Error;
use rand::Rng;

const SAMPLES: usize = 10_000;

fn number(ds: &[u32], reversed: bool) -> u128 {
    let mut ds = ds.to_vec();
    if reversed {
        ds.reverse();
    }
    ds.iter().fold(0u128, |acc, &d| {
        assert!(d < 10, "non-digit {d}");
        acc * 10 + u128::from(d)
    })
}

fn check_mask(e: &proctrain::episode::Episode) {
    let n_in = e.input.len();
    assert!(e.loss_mask[..n_in].iter().all(|&m| !m));
    assert!(e.loss_mask[n_in..].iter().all(|&m| m));
}

#[test]
fn haystack_matches_lookup_oracle() {
    let mut rng = rng::stream(0, "test/haystack");
    for _ in 0..SAMPLES {
        let e = gen_haystack(30, &mut rng).unwrap();
        assert_eq!(e.input.len(), 61);
        let mut map = HashMap::new();
        for pair in e.input[..60].chunks(2) {
            assert!((haystack::VALUES..haystack::VALUES + haystack::MARKERS).contains(&pair[0]));
            assert!(pair[1] < haystack::VALUES);
            assert!(map.insert(pair[0], pair[1]).is_none(), "marker repeated");
        }
        assert_eq!(e.target, vec![map[&e.input[60]]]);
        check_mask(&e);
        assert_eq!(e.len(), DiagnosticTask::HAYSTACK.episode_len());
    }
    let one = gen_haystack(1, &mut rng).unwrap();
    assert_eq!(one.target[0], one.input[1]);
    assert!(gen_haystack(0, &mut rng).is_err());
    assert!(gen_haystack(51, &mut rng).is_err());
}

#[test]
fn addition_examples() {
    let e = arithmetic_episode(12345, 1, arith::PLUS, 5, 12346, 6, false);
    assert_eq!(e.input, vec![1, 2, 3, 4, 5, arith::PLUS, 0, 0, 0, 0, 1, arith::EQUALS]);
    assert_eq!(e.target, vec![0, 1, 2, 3, 4, 6]);
    // ab + cd = efg encodes input b a d c and output g f e.
    let r = arithmetic_episode(47, 85, arith::PLUS, 2, 132, 3, true);
    assert_eq!(r.input, vec![7, 4, arith::PLUS, 5, 8, arith::EQUALS]);
    assert_eq!(r.target, vec![2, 3, 1]);
    let z = arithmetic_episode(0, 0, arith::PLUS, 5, 0, 6, false);
    assert_eq!(z.target, vec![0; 6]);
}

#[test]
fn arithmetic_matches_integer_oracle() {
    let mut rng = rng::stream(1, "test/arith");
    for i in 0..SAMPLES {
        let reversed = i % 2 == 1;
        let n = if reversed { 10 } else { 5 };
        let e = gen_addition(n, reversed, &mut rng).unwrap();
        let a = number(&e.input[..n], reversed);
        let b = number(&e.input[n + 1..2 * n + 1], reversed);
        assert_eq!(e.input[n], arith::PLUS);
        assert_eq!(e.target.len(), n + 1);
        assert_eq!(number(&e.target, reversed), a + b);
        check_mask(&e);

        let m = gen_multiplication(5, &mut rng).unwrap();
        let a = number(&m.input[..5], false) as u64;
        let b = number(&m.input[6..11], false) as u64;
        assert_eq!(m.input[5], arith::TIMES);
        assert_eq!(m.target.len(), 10);
        assert_eq!(number(&m.target, false) as u64, a * b);
    }
    let one = arithmetic_episode(1, 1, arith::TIMES, 5, 1, 10, false);
    assert_eq!(one.target, vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
}

#[test]
fn sorting_matches_sort_oracle() {
    let mut rng = rng::stream(2, "test/sort");
    for _ in 0..SAMPLES {
        let e = gen_sorting(10, 100, &mut rng).unwrap();
        assert_eq!(e.input[10], 100);
        let mut oracle = e.input[..10].to_vec();
        oracle.sort();
        assert_eq!(e.target, oracle);
        check_mask(&e);
    }
    assert!(gen_sorting(0, 100, &mut rng).is_err());
    assert!(gen_sorting(3, 1, &mut rng).is_err());
}

#[test]
fn vocab_layouts() {
    let s = DiagnosticTask::SORTING.vocab();
    assert_eq!((s.size, s.separator, s.pad), (102, Some(100), Some(101)));
    let a = DiagnosticTask::ADDITION.vocab();
    assert_eq!((a.size, a.separator, a.pad), (14, Some(12), Some(13)));
    assert_eq!(DiagnosticTask::HAYSTACK.vocab().size, 100);
    assert_eq!(DiagnosticTask::LANGUAGE_MODELLING.vocab().size, 2002);
    for t in DiagnosticTask::ALGORITHMIC {
        assert_eq!(DiagnosticTask::parse(t.name()).unwrap(), t);
    }
}

#[test]
fn episodes_fit_their_context() {
    let mut rng = rng::stream(3, "test/ctx");
    for t in DiagnosticTask::ALGORITHMIC.into_iter().chain([DiagnosticTask::MULTIPLICATION]) {
        let e = t.episode(&mut rng).unwrap();
        assert_eq!(e.len(), t.episode_len());
        assert_eq!(e.len() - 1, t.context_length());
        assert!(e.tokens().iter().all(|&x| (x as usize) < t.vocab().size));
    }
}

#[test]
fn lm_dataset_rules() {
    let one = LmDataset::build(&"hop ".repeat(130), 2000, 64).unwrap();
    assert_eq!(one.words, vec!["hop"]);
    assert_eq!(one.windows.len(), 2);
    assert!(one.windows.iter().flatten().all(|&t| t == 0));
    assert_eq!(one.episode(0).target, vec![0]);

    // Ranks: a(3) b(2) c(1); with V=2, `c` becomes UNK.
    let d = LmDataset::build("a a a b b c", 2, 2).unwrap();
    assert_eq!(d.words, vec!["a", "b"]);
    assert_eq!(d.windows, vec![vec![0, 0], vec![0, 1], vec![1, 2]]);
    assert_eq!((d.unk, d.pad, d.vocab_size()), (2, 3, 4));

    let text: String = (0..1000).map(|i| format!("w{} ", i % 37)).collect();
    let ds = LmDataset::build(&text, 2000, 64).unwrap();
    assert_eq!(ds.windows.len(), 1000 / 64);

    assert!(matches!(
        LmDataset::build("too short", 2000, 64),
        Err(Error::CorpusTooShort { tokens: 2, needed: 64 })
    ));
    assert_eq!(tokenize_words("Tom's dog, ran."), vec!["Tom's", "dog", ",", "ran", "."]);
}

#[test]
fn accuracy_metric() {
    let logits = Tensor::from_rows(&[vec![0.1, 0.9], vec![0.8, 0.2], vec![0.5, 0.5], vec![0.0, 1.0]]);
    assert_eq!(token_accuracy(&logits, &[1, 0, 0, 1], &[true; 4]).unwrap(), 1.0);
    assert_eq!(token_accuracy(&logits, &[1, 1, 1, 1], &[true; 4]).unwrap(), 0.5);
    assert_eq!(token_accuracy(&logits, &[0, 0, 0, 0], &[false, true, false, false]).unwrap(), 1.0);
    assert!(token_accuracy(&logits, &[0; 4], &[false; 4]).is_err());
    assert!(token_accuracy(&logits, &[0; 3], &[true; 3]).is_err());
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
}

#[test]
fn uniform_logits_give_chance_accuracy() {
    let mut rng = rng::stream(4, "test/chance");
    let n = 10_000;
    let logits = Tensor::zeros(&[n, 100]);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..100)).collect();
    let acc = token_accuracy(&logits, &targets, &vec![true; n]).unwrap();
    assert!((acc - 0.01).abs() < 0.005, "{acc}");
}
