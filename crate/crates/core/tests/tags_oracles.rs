mod common;

use common::*;
use proptest::prelude::*;
use rca::model::{cosine, Embedding};
use rca::tags::{rank_tags, split_pos_neg, subsample, subsample_count, DEFAULT_TOP_M};

fn unit(v: Vec<f64>) -> Embedding {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Embedding::new(v.into_iter().map(|x| x / n).collect()).unwrap()
}

#[test]
fn top_fifty_of_hundred_matches_full_sort() {
    let mut r = rng(50);
    let vocab: Vec<(String, Embedding)> = gaussian_rows(&mut r, 100, 8, 1.0)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (format!("tag{i:03}"), unit(v)))
        .collect();
    let image = unit(gaussian_rows(&mut r, 1, 8, 1.0).remove(0));

    let mut all: Vec<(f64, String)> = vocab
        .iter()
        .map(|(id, e)| (cosine(image.as_slice(), e.as_slice()).unwrap(), id.clone()))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let list = rank_tags(&image, &vocab, DEFAULT_TOP_M).unwrap();
    assert_eq!(list.len(), 50);
    for (c, (score, id)) in list.candidates().iter().zip(&all) {
        assert_eq!(&c.tag_id, id);
        assert_eq!(c.global_score, *score);
    }
    let (p, n) = split_pos_neg(&list);
    assert_eq!((p.len(), n.len()), (25, 25));
}

#[test]
fn half_of_twenty_five_is_reproducible() {
    let pos: Vec<usize> = (0..25).collect();
    let neg: Vec<usize> = (100..125).collect();
    let (a, b) = subsample(&pos, &neg, 0.5, 7).unwrap();
    let (c, d) = subsample(&pos, &neg, 0.5, 7).unwrap();
    assert_eq!((a.len(), b.len()), (13, 13));
    assert_eq!((&a, &b), (&c, &d));
    assert!(a.iter().all(|x| pos.contains(x)));
    assert!(b.iter().all(|x| neg.contains(x)));
    let (e, _) = subsample(&pos, &neg, 0.5, 8).unwrap();
    assert_ne!(a, e);
}

proptest! {
    #[test]
    fn ranking_invariants(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..30),
        image in prop::collection::vec(0.1f64..1.0, 3),
        half in 1usize..=2,
    ) {
        let vocab: Vec<(String, Embedding)> = rows.into_iter().enumerate()
            .filter(|(_, v)| v.iter().any(|x| x.abs() > 1e-3))
            .map(|(i, v)| (format!("t{i}"), Embedding::new(v).unwrap()))
            .collect();
        let m = 2 * half;
        prop_assume!(vocab.len() >= m);
        let image = Embedding::new(image).unwrap();
        let list = rank_tags(&image, &vocab, m).unwrap();
        let scores: Vec<f64> = list.candidates().iter().map(|c| c.global_score).collect();
        prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
        let last = *scores.last().unwrap();
        for (id, e) in &vocab {
            if !list.candidates().iter().any(|c| &c.tag_id == id) {
                prop_assert!(cosine(image.as_slice(), e.as_slice()).unwrap() <= last);
            }
        }
        let (p, n) = split_pos_neg(&list);
        let joined: Vec<_> = p.iter().chain(n).cloned().collect();
        prop_assert_eq!(joined.as_slice(), list.candidates());
    }

    #[test]
    fn subsample_is_an_ordered_subset(k in 1usize..40, fraction in 0.001f64..=1.0, seed in any::<u64>()) {
        let pos: Vec<usize> = (0..k).collect();
        let neg: Vec<usize> = (1000..1000 + k).collect();
        let (a, b) = subsample(&pos, &neg, fraction, seed).unwrap();
        let want = subsample_count(k, fraction);
        prop_assert_eq!(a.len(), want);
        prop_assert_eq!(b.len(), want);
        prop_assert!(want >= 1 && want as f64 >= fraction * k as f64 - 1e-9);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(b.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(b.iter().all(|x| (1000..1000 + k).contains(x)));
    }
}
