use std::collections::HashSet;

use proctrain::procgen::*;
use proctrain::rng;
use proctrain::Error;
use proptest::prelude::*;
use rand::Rng;

const SAMPLES: usize = 10_000;

fn dyck_open(t: u32, k: u32) -> Option<bool> {
    (t < 2 * k).then_some(t < k)
}

#[test]
fn dyck_sweep_is_valid() {
    let p = DyckParams::dyck(4);
    let mut rng = rng::stream(0, "test/dyck");
    for _ in 0..SAMPLES {
        let s = gen_dyck(&p, &mut rng);
        assert_eq!(s.len(), 128);
        assert!(is_valid_dyck(&s, 4).unwrap());
    }
}

#[test]
fn dyck_open_fraction_in_band() {
    let p = DyckParams::dyck(4);
    let mut rng = rng::stream(1, "test/dyck-frac");
    let (mut open, mut total) = (0usize, 0usize);
    while total < 1_000_000 {
        for t in gen_dyck(&p, &mut rng) {
            open += dyck_open(t, 4).unwrap() as usize;
            total += 1;
        }
    }
    let frac = open as f64 / total as f64;
    assert!((0.45..=0.50).contains(&frac), "open fraction {frac}");
}

#[test]
fn dyck_examples() {
    // ( [ { } ] ) with k = 3: opens 0..3, closes 3..6.
    assert!(is_valid_dyck(&[0, 1, 2, 5, 4, 3], 3).unwrap());
    // ( [ ) ] crosses.
    assert!(!is_valid_dyck(&[0, 1, 3, 4], 3).unwrap());
    assert!(is_valid_shuffle(&[0, 1, 3, 4], 3).unwrap());
    assert!(!is_valid_dyck(&[0], 3).unwrap());
    assert!(!is_valid_shuffle(&[0], 3).unwrap());
    assert!(matches!(is_valid_dyck(&[6], 3), Err(Error::TokenOutOfRange { .. })));
    assert!(is_valid_shuffle(&[9], 3).is_err());
}

#[test]
fn dyck_can_produce_nested_shape() {
    let p = DyckParams::new(3, 6, 0.49).unwrap();
    let mut rng = rng::stream(2, "test/dyck-shape");
    let found = (0..200_000).any(|_| {
        let s = gen_dyck(&p, &mut rng);
        s[..3].iter().all(|&t| t < 3) && s[3..].iter().all(|&t| t >= 3)
    });
    assert!(found);
}

#[test]
fn shuffle_prefixes_never_over_close() {
    let p = DyckParams::shuffle(16);
    let mut rng = rng::stream(3, "test/shuffle");
    for _ in 0..SAMPLES {
        let s = gen_dyck_shuffle(&p, &mut rng);
        assert_eq!(s.len(), 128);
        let mut open = [0i32; 16];
        for &t in &s {
            let ty = (t % 16) as usize;
            open[ty] += if t < 16 { 1 } else { -1 };
            assert!(open[ty] >= 0);
        }
    }
}

#[test]
fn closed_shuffle_always_valid_and_crosses() {
    let p = DyckParams::new(3, 16, 0.5).unwrap();
    let mut rng = rng::stream(4, "test/shuffle-closed");
    let mut crossing = false;
    for _ in 0..SAMPLES {
        let s = gen_dyck_shuffle_closed(&p, &mut rng);
        assert!(is_valid_shuffle(&s, 3).unwrap());
        crossing |= !is_valid_dyck(&s, 3).unwrap();
    }
    assert!(crossing, "no crossing matches produced");
}

fn stack_oracle(ops: &[u32]) -> Vec<u32> {
    let mut st = Vec::new();
    for &op in ops {
        if op == stack_vocab::POP {
            st.pop().expect("pop on empty stack");
        } else {
            assert!(!st.contains(&op), "duplicate push");
            st.push(op);
        }
    }
    st.into_iter().rev().collect()
}

#[test]
fn stack_matches_oracle() {
    let mut rng = rng::stream(5, "test/stack");
    for i in 0..SAMPLES {
        let len = 4 + (i % 17);
        let e = gen_stack_episode(len, &mut rng).unwrap();
        assert_eq!(e.input.len(), len + 1);
        assert_eq!(*e.input.last().unwrap(), stack_vocab::SEP);
        assert_eq!(e.target, stack_oracle(&e.input[..len]));
        assert!(e.tokens().iter().all(|&t| (t as usize) < stack_vocab::SIZE));
        let first = e.loss_mask.iter().position(|&m| m).unwrap_or(e.len());
        assert_eq!(first, len + 1);
    }
}

#[test]
fn stack_rejects_bad_lengths() {
    let mut rng = rng::stream(0, "x");
    assert!(gen_stack_episode(1, &mut rng).is_err());
    assert!(gen_stack_episode(101, &mut rng).is_err());
}

#[test]
fn stack_push_rate_by_region() {
    let mut rng = rng::stream(6, "test/stack-rate");
    let (mut early, mut early_n, mut late, mut late_n) = (0, 0, 0, 0);
    for _ in 0..SAMPLES {
        let e = gen_stack_episode(30, &mut rng).unwrap();
        for (i, &op) in e.input[..30].iter().enumerate() {
            let push = (op != stack_vocab::POP) as usize;
            if i < 20 {
                early += push;
                early_n += 1;
            } else {
                late += push;
                late_n += 1;
            }
        }
    }
    let (pe, pl) = (early as f64 / early_n as f64, late as f64 / late_n as f64);
    // Forced pushes on an empty stack lift both rates a little.
    assert!((0.74..0.80).contains(&pe), "early push rate {pe}");
    assert!((0.24..0.40).contains(&pl), "late push rate {pl}");
}

#[test]
fn identity_and_set_match_oracles() {
    let mut rng = rng::stream(7, "test/seq");
    for i in 0..SAMPLES {
        let len = 1 + i % 20;
        let e = gen_identity_episode(len, &mut rng).unwrap();
        assert_eq!(&e.input[..len], &e.target[..]);
        assert_eq!(e.input[len], seq_vocab::SEP);

        let s = gen_set_episode(len, &mut rng).unwrap();
        let mut seen = HashSet::new();
        let oracle: Vec<u32> = s.input[..len].iter().copied().filter(|t| seen.insert(*t)).collect();
        assert_eq!(s.target, oracle);
        assert_eq!(s.loss_mask.iter().filter(|&&m| m).count(), s.target.len());
    }
}

fn truth_table_oracle(l: u8, c: u8, r: u8, rule: u32) -> u8 {
    let n = 4 * l + 2 * c + r;
    ((rule >> n) & 1) as u8
}

#[test]
fn rule_110_truth_table() {
    let expected = [0, 1, 1, 1, 0, 1, 1, 0];
    for n in 0..8u8 {
        let (l, c, r) = (n >> 2 & 1, n >> 1 & 1, n & 1);
        // Width-3 periodic state whose middle cell sees (l, c, r).
        let next = eca_step(&[l, c, r], 110).unwrap();
        assert_eq!(next[1], expected[n as usize], "neighbourhood {n:03b}");
    }
    assert_eq!(eca_step(&[0, 0, 1, 0, 0], 110).unwrap(), vec![0, 1, 1, 0, 0]);
    assert_eq!(eca_step(&[1, 0, 1, 1, 0, 1], 0).unwrap(), vec![0; 6]);
}

#[test]
fn eca_matches_oracle_for_all_rules() {
    let mut rng = rng::stream(8, "test/eca");
    for i in 0..1000 {
        let rule = (i % 256) as u32;
        let w = rng.random_range(3..40);
        let s: Vec<u8> = (0..w).map(|_| rng.random_range(0..2)).collect();
        let next = eca_step(&s, rule).unwrap();
        for j in 0..w {
            let l = s[(j + w - 1) % w];
            let r = s[(j + 1) % w];
            assert_eq!(next[j], truth_table_oracle(l, s[j], r, rule));
        }
    }
    assert!(eca_step(&[0, 1, 0], 256).is_err());
    assert!(eca_step(&[0, 1], 110).is_err());
}

#[test]
fn eca_traces() {
    let p = EcaParams::default();
    let mut rng = rng::stream(9, "test/trace");
    let rows = gen_eca_trace(&p, &mut rng).unwrap();
    assert_eq!(rows.len(), 60);
    assert!(rows.iter().all(|r| r.len() == 100));
    for w in rows.windows(2) {
        assert_eq!(w[1], eca_step(&w[0], 110).unwrap());
    }
    let zeros = eca_evolve(vec![0; 100], 110, 10).unwrap();
    assert!(zeros.iter().all(|r| r.iter().all(|&b| b == 0)));
    assert_eq!(eca_dump(&[vec![0, 1, 1]]).trim(), "011");
}

#[test]
fn curriculum_rule() {
    let s = CurriculumState::new(4, 20, 2);
    let s = curriculum_advance(s, 0.992);
    assert_eq!(s.current_len, 6);
    let s = curriculum_advance(s, 0.98);
    assert_eq!((s.current_len, s.checks_without_improvement), (6, 1));
    let mut cap = CurriculumState::new(4, 20, 2);
    cap.current_len = 20;
    let cap = curriculum_advance(cap, 1.0);
    assert_eq!(cap.current_len, 20);
    assert!(cap.at_cap());
}

#[test]
fn task_names_round_trip() {
    for name in ["4-dyck", "16-dyck-shuffle", "stack", "identity", "set", "eca"] {
        assert_eq!(ProceduralTask::parse(name).unwrap().name(), name);
    }
    assert!(ProceduralTask::parse("queue").is_err());
}

proptest! {
    #[test]
    fn generators_are_pure_in_seed(seed in any::<u64>(), len in 2usize..20) {
        let a = gen_stack_episode(len, &mut rng::stream(seed, "p")).unwrap();
        let b = gen_stack_episode(len, &mut rng::stream(seed, "p")).unwrap();
        prop_assert_eq!(a, b);
        let p = DyckParams::dyck(2);
        prop_assert_eq!(gen_dyck(&p, &mut rng::stream(seed, "d")), gen_dyck(&p, &mut rng::stream(seed, "d")));
    }

    #[test]
    fn curriculum_stays_in_bounds(accs in proptest::collection::vec(0.0f64..=1.0, 0..60)) {
        let mut s = CurriculumState::new(4, 20, 2);
        for a in accs {
            s = curriculum_advance(s, a);
            prop_assert!((4..=20).contains(&s.current_len));
        }
    }
}
