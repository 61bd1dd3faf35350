use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn shuffled_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    l.shuffle(rng);
    l
}

fn brute_means(x: &Tensor, labels: &[usize], n: usize) -> Vec<Vec<f64>> {
    let d = x.shape()[1];
    let mut sums = vec![vec![0.0; d]; n];
    let mut counts = vec![0usize; n];
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..d {
            sums[l][j] += x.get2(i, j);
        }
        counts[l] += 1;
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *c as f64);
    }
    sums
}

#[test]
fn single_shot_prototypes_are_the_support() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, 4, 3);
    let p = compute_prototypes(&x, &[0, 1, 2, 3]).unwrap();
    assert_eq!(p.prototypes, x);
    assert_eq!(p.class_order, vec![0, 1, 2, 3]);
}

#[test]
fn hand_means() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 2.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
    let p = compute_prototypes(&x, &[0, 1, 0, 1]).unwrap();
    assert_eq!(p.prototypes.data(), &[0.5, 0.5, 1.0, 1.0]);
}

#[test]
fn prototypes_match_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels = shuffled_labels(&mut rng, 4, 5);
    let x = rand_tensor(&mut rng, 20, 256);
    let p = compute_prototypes(&x, &labels).unwrap();
    for (i, row) in brute_means(&x, &labels, 4).iter().enumerate() {
        for (a, b) in p.prototypes.row(i).iter().zip(row) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn unbalanced_support_is_rejected() {
    let x = Tensor::zeros(&[3, 2]);
    assert!(matches!(compute_prototypes(&x, &[0, 0, 1]), Err(Error::Parameter(_))));
    assert!(matches!(compute_prototypes(&x, &[0, 2, 2]), Err(Error::Parameter(_))));
}

#[test]
fn classify_examples() {
    let cfg = ProtoConfig::default();
    let protos = PrototypeSet {
        prototypes: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        class_order: vec![0, 1],
    };
    let l = classify(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &protos, &cfg).unwrap();
    assert_eq!(l.data(), &[10.0, 0.0]);
    assert_eq!(predict(&l), vec![0]);

    let l = classify(&Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap(), &protos, &cfg).unwrap();
    assert!((l.data()[1] - cfg.temperature).abs() < 1e-12);
    assert_eq!(predict(&l), vec![1]);

    // orthogonal to both prototypes in 3-D: zero logits, tie to index 0
    let p3 = PrototypeSet {
        prototypes: Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap(),
        class_order: vec![0, 1],
    };
    let l = classify(&Tensor::from_rows(&[vec![0.0, 0.0, 2.0]]).unwrap(), &p3, &cfg).unwrap();
    assert_eq!(l.data(), &[0.0, 0.0]);
    assert_eq!(predict(&l), vec![0]);
}

#[test]
fn zero_norm_is_degenerate() {
    let cfg = ProtoConfig::default();
    let protos = PrototypeSet {
        prototypes: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
        class_order: vec![0, 1],
    };
    let q = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    assert!(matches!(classify(&q, &protos, &cfg), Err(Error::DegenerateEmbedding(_))));
    let ok = PrototypeSet {
        prototypes: Tensor::identity(2),
        class_order: vec![0, 1],
    };
    let zq = Tensor::zeros(&[1, 2]);
    assert!(matches!(classify(&zq, &ok, &cfg), Err(Error::DegenerateEmbedding(_))));
    // tiny but nonzero norms are floored, not rejected
    let tiny = Tensor::from_rows(&[vec![1e-300, 0.0]]).unwrap();
    assert!(classify(&tiny, &ok, &cfg).is_ok());
}

#[test]
fn bad_temperature_and_dimension() {
    let ok = PrototypeSet {
        prototypes: Tensor::identity(2),
        class_order: vec![0, 1],
    };
    let q = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
    assert!(matches!(
        classify(&q, &ok, &ProtoConfig { temperature: 0.0 }),
        Err(Error::Config(_))
    ));
    let q3 = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
    assert!(matches!(classify(&q3, &ok, &ProtoConfig::default()), Err(Error::Dimension(_))));
}

fn loss_and_acc(support: &Tensor, sl: &[usize], query: &Tensor, ql: &[usize]) -> (f64, f64) {
    let mut tape = Tape::new();
    let s = tape.constant(support.clone());
    let q = tape.constant(query.clone());
    let (l, a) = episode_loss(&mut tape, EpisodeEmbeddings { support: s, query: q }, sl, ql, &ProtoConfig::default()).unwrap();
    (tape.value(l).data()[0], a)
}

#[test]
fn separated_clusters_are_classified_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let centers = Tensor::identity(4);
    let draw = |rng: &mut ChaCha8Rng, labels: &[usize]| {
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| centers.row(l).iter().map(|c| c * 5.0 + rng.random_range(-0.1..0.1)).collect::<Vec<_>>())
            .collect();
        Tensor::matrix(labels.len(), 4, data).unwrap()
    };
    let sl = shuffled_labels(&mut rng, 4, 5);
    let ql = shuffled_labels(&mut rng, 4, 12);
    let s = draw(&mut rng, &sl);
    let q = draw(&mut rng, &ql);
    let (_, acc) = loss_and_acc(&s, &sl, &q, &ql);
    assert_eq!(acc, 1.0);
}

#[test]
fn random_embeddings_score_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0.0;
    let episodes = 1000;
    for _ in 0..episodes {
        let sl = shuffled_labels(&mut rng, 4, 5);
        let ql = shuffled_labels(&mut rng, 4, 12);
        let s = rand_tensor(&mut rng, 20, 16);
        let q = rand_tensor(&mut rng, 48, 16);
        total += loss_and_acc(&s, &sl, &q, &ql).1;
    }
    let mean = total / episodes as f64;
    assert!((mean - 0.25).abs() < 0.02, "{mean}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sl = shuffled_labels(&mut rng, 3, 2);
    let ql = shuffled_labels(&mut rng, 3, 2);
    let s = rand_tensor(&mut rng, 6, 4);
    let q = rand_tensor(&mut rng, 6, 4);

    let mut tape = Tape::new();
    let sv = tape.param(s.clone());
    let qv = tape.param(q.clone());
    let (l, _) = episode_loss(&mut tape, EpisodeEmbeddings { support: sv, query: qv }, &sl, &ql, &ProtoConfig::default()).unwrap();
    let g = tape.backward(l).unwrap();
    for (var, base, is_query) in [(qv, &q, true), (sv, &s, false)] {
        let analytic = g.get(var).unwrap();
        for i in 0..base.len() {
            let mut up = base.clone();
            up.data_mut()[i] += 1e-6;
            let mut down = base.clone();
            down.data_mut()[i] -= 1e-6;
            let f = |t: &Tensor| {
                if is_query {
                    loss_and_acc(&s, &sl, t, &ql).0
                } else {
                    loss_and_acc(t, &sl, &q, &ql).0
                }
            };
            let numeric = (f(&up) - f(&down)) / 2e-6;
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {numeric}");
        }
    }
}

#[test]
fn query_label_without_prototype_is_rejected() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::identity(2));
    let q = tape.constant(Tensor::identity(2));
    let r = episode_loss(&mut tape, EpisodeEmbeddings { support: s, query: q }, &[0, 1], &[0, 2], &ProtoConfig::default());
    assert!(matches!(r, Err(Error::Parameter(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn query_scale_invariance(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = rand_tensor(&mut rng, 8, 5);
        let q = rand_tensor(&mut rng, 3, 5);
        let cfg = ProtoConfig::default();
        let p = compute_prototypes(&s, &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let base = classify(&q, &p, &cfg).unwrap();
        let scaled = classify(&q.map(|v| v * c), &p, &cfg).unwrap();
        prop_assert!(base.max_abs_diff(&scaled) < 1e-12);
        let both = PrototypeSet { prototypes: p.prototypes.map(|v| v * c), class_order: p.class_order.clone() };
        let all = classify(&q.map(|v| v * c), &both, &cfg).unwrap();
        prop_assert!(base.max_abs_diff(&all) < 1e-12);
    }

    #[test]
    fn label_permutation_permutes_columns(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let labels = shuffled_labels(&mut rng, n, 3);
        let s = rand_tensor(&mut rng, 12, 6);
        let q = rand_tensor(&mut rng, 5, 6);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let relabelled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let cfg = ProtoConfig::default();
        let a = classify(&q, &compute_prototypes(&s, &labels).unwrap(), &cfg).unwrap();
        let b = classify(&q, &compute_prototypes(&s, &relabelled).unwrap(), &cfg).unwrap();
        for m in 0..5 {
            for (c, &pc) in perm.iter().enumerate() {
                prop_assert_eq!(a.get2(m, c), b.get2(m, pc));
            }
        }
    }

    #[test]
    fn duplicated_support_gives_same_prototypes(seed in any::<u64>(), n in 2usize..5, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = shuffled_labels(&mut rng, n, k);
        let s = rand_tensor(&mut rng, n * k, 7);
        let mut rows: Vec<Vec<f64>> = (0..n * k).map(|i| s.row(i).to_vec()).collect();
        rows.extend(rows.clone());
        let doubled = Tensor::from_rows(&rows).unwrap();
        let dl: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        let a = compute_prototypes(&s, &labels).unwrap();
        let b = compute_prototypes(&doubled, &dl).unwrap();
        prop_assert!(a.prototypes.max_abs_diff(&b.prototypes) < 1e-12);
    }

    #[test]
    fn prototypes_match_brute_force(seed in any::<u64>(), n in 2usize..=5, k in 1usize..=8, d in 1usize..=64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = shuffled_labels(&mut rng, n, k);
        let s = rand_tensor(&mut rng, n * k, d);
        let p = compute_prototypes(&s, &labels).unwrap();
        for (i, row) in brute_means(&s, &labels, n).iter().enumerate() {
            for (a, b) in p.prototypes.row(i).iter().zip(row) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
