use kgcrs::corpus::{expand_turns, split, Dialogue, Speaker, Utterance};
use proptest::prelude::*;

fn utt(speaker: Speaker, text: &str, entities: &[&str]) -> Utterance {
    Utterance {
        speaker,
        text: text.into(),
        entities: entities.iter().map(|s| s.to_string()).collect(),
        items: vec![],
    }
}

fn numbered(n: usize) -> Vec<Dialogue> {
    (0..n)
        .map(|i| Dialogue {
            id: format!("d{i}"),
            utterances: vec![utt(Speaker::Seeker, "hi", &[]), utt(Speaker::Recommender, "hello", &[])],
        })
        .collect()
}

#[test]
fn hundred_and_one_dialogues_split_80_10_11() {
    let s = split(&numbered(101), 9).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 11));
}

#[test]
fn splits_are_disjoint_and_cover() {
    let s = split(&numbered(57), 1).unwrap();
    let mut ids: Vec<String> = s.train.iter().chain(&s.valid).chain(&s.test).map(|d| d.id.clone()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 57);
}

#[test]
fn six_turn_contexts_are_prefixes() {
    let speakers = [Speaker::Seeker, Speaker::Recommender];
    let d = Dialogue {
        id: "x".into(),
        utterances: (0..6).map(|i| utt(speakers[i % 2], &format!("u{i}"), &[])).collect(),
    };
    let ex = expand_turns(&d);
    assert_eq!(ex.len(), 3);
    // Prefix enumeration: every prefix ending just before a recommender turn.
    let prefixes: Vec<Vec<Utterance>> = (1..6)
        .filter(|&i| d.utterances[i].speaker == Speaker::Recommender)
        .map(|i| d.utterances[..i].to_vec())
        .collect();
    let contexts: Vec<Vec<Utterance>> = ex.iter().map(|e| e.context.clone()).collect();
    assert_eq!(contexts, prefixes);
}

fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
    let names = prop::sample::select(vec!["A", "B", "C", "D"]);
    let u = (any::<bool>(), prop::collection::vec(names, 0..4)).prop_map(|(s, es)| {
        utt(if s { Speaker::Seeker } else { Speaker::Recommender }, "text", &es)
    });
    prop::collection::vec(u, 1..10).prop_map(|utterances| Dialogue { id: "p".into(), utterances })
}

proptest! {
    #[test]
    fn expansion_is_pure(d in arb_dialogue()) {
        prop_assert_eq!(expand_turns(&d), expand_turns(&d));
    }

    #[test]
    fn mentions_are_unique_and_in_first_seen_order(d in arb_dialogue()) {
        for e in expand_turns(&d) {
            let mut seen = Vec::new();
            for u in &e.context {
                for n in u.entities.iter().chain(&u.items) {
                    if !seen.contains(n) {
                        seen.push(n.clone());
                    }
                }
            }
            prop_assert_eq!(&e.mentioned_entities, &seen);
        }
    }

    #[test]
    fn context_lengths_grow(d in arb_dialogue()) {
        let lens: Vec<usize> = expand_turns(&d).iter().map(|e| e.context.len()).collect();
        prop_assert!(lens.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn split_is_deterministic(n in 10usize..200, seed in any::<u64>()) {
        let ds = numbered(n);
        prop_assert_eq!(split(&ds, seed).unwrap(), split(&ds, seed).unwrap());
    }
}
