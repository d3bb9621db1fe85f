use proptest::prelude::*;
use steerkit::metrics::generative_scores;
use steerkit::{accuracy_f1, chair_hal_cover, Answer, MentionExtraction};

const CATS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

fn arb_extraction() -> impl Strategy<Value = MentionExtraction> {
    (prop::sample::subsequence(CATS.to_vec(), 0..=6), prop::sample::subsequence(CATS.to_vec(), 0..=6)).prop_map(|(m, g)| MentionExtraction {
        response: m.join(" "),
        mentioned: m.into_iter().map(String::from).collect(),
        gold: g.into_iter().map(String::from).collect(),
    })
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

proptest! {
    #[test]
    fn generative_metrics_are_bounded_and_order_free(mut corpus in prop::collection::vec(arb_extraction(), 1..10)) {
        let (chair, hal, cover) = chair_hal_cover(&corpus);
        prop_assert!(in_unit(chair) && in_unit(hal) && in_unit(cover));
        let s = generative_scores(&corpus);
        if s.mentions > 0 {
            let clean = (s.mentions - s.hallucinated) as f64 / s.mentions as f64;
            prop_assert!((chair + clean - 1.0).abs() < 1e-12);
        }
        corpus.reverse();
        prop_assert_eq!(chair_hal_cover(&corpus), (chair, hal, cover));
    }

    #[test]
    fn binary_metrics_are_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
        let pred: Vec<Answer> = pairs.iter().map(|p| Answer::from_bool(p.0)).collect();
        let gold: Vec<Answer> = pairs.iter().map(|p| Answer::from_bool(p.1)).collect();
        let (acc, f1) = accuracy_f1(&pred, &gold).unwrap();
        prop_assert!(in_unit(acc) && in_unit(f1));
    }
}

#[test]
fn empty_response_covers_nothing() {
    let e = MentionExtraction {
        response: String::new(),
        mentioned: vec![],
        gold: ["a".to_string()].into_iter().collect(),
    };
    assert_eq!(chair_hal_cover(&[e]), (0.0, 0.0, 0.0));
}
