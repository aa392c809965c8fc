use std::collections::HashSet;

use gaprag_core::llm::TemplateSet;
use gaprag_core::supervision::{seeded_permutation, split_dataset};
use gaprag_core::{
    build_query, exact_match, f1, normalize_answer, parse_verdict, segment_sentences, Bm25Index, Bm25Params,
    Corpus, Document, GapCategory, GapItem, JudgeVerdict,
};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn answer_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(
        prop_oneof![
            Just("the"),
            Just("a"),
            Just("Cold"),
            Just("spring"),
            Just("District"),
            Just("x-y"),
            Just("1982."),
            Just("é")
        ],
        0..6,
    )
    .prop_map(|w| w.join(" "))
}

fn category() -> impl Strategy<Value = GapCategory> {
    proptest::sample::select(GapCategory::ALL.to_vec())
}

fn gap() -> impl Strategy<Value = GapItem> {
    (category(), ".{0,12}", ".{0,12}", ".{0,20}").prop_map(|(c, t, s, d)| GapItem::new(c, &t, &s, &d))
}

proptest! {
    #[test]
    fn f1_bounds_and_em(pred in answer_text(), gold in answer_text()) {
        let golds = vec![gold];
        let f = f1(&pred, &golds).unwrap();
        let em = exact_match(&pred, &golds).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        if em == 1.0 && !normalize_answer(&pred).is_empty() {
            prop_assert_eq!(f, 1.0);
        }
    }

    #[test]
    fn f1_symmetric_and_alias_max(a in answer_text(), b in answer_text(), c in answer_text()) {
        let ab = f1(&a, std::slice::from_ref(&b)).unwrap();
        prop_assert!((ab - f1(&b, std::slice::from_ref(&a)).unwrap()).abs() < 1e-12);
        let both = f1(&a, &[b, c.clone()]).unwrap();
        prop_assert!(both >= ab && both >= f1(&a, &[c]).unwrap());
    }

    #[test]
    fn normalization_idempotent(s in ".{0,40}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    #[test]
    fn sentences_reconstruct_text(words in proptest::collection::vec("[A-Za-z]{1,6}[.!?]?", 1..30)) {
        let text = words.join(" ");
        let sentences = segment_sentences(&text);
        prop_assert!(sentences.iter().all(|s| !s.is_empty()));
        let squash = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        prop_assert_eq!(squash(&sentences.join(" ")), squash(&text));
    }

    #[test]
    fn verdict_wire_round_trip(gaps in proptest::collection::vec(gap(), 0..4), sufficient in any::<bool>()) {
        match JudgeVerdict::new(sufficient, gaps.clone()) {
            Ok(v) => prop_assert_eq!(parse_verdict(&v.to_wire()).unwrap(), v),
            Err(_) => prop_assert!(sufficient && !gaps.is_empty()),
        }
    }

    #[test]
    fn split_is_a_partition(n in 1usize..400, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let (train, val) = split_dataset(&items, frac, seed).unwrap();
        prop_assert_eq!(train.len(), (n as f64 * frac).floor() as usize);
        let mut all: Vec<usize> = train.into_iter().chain(val).collect();
        all.sort_unstable();
        prop_assert_eq!(all, items);
        prop_assert_eq!(seeded_permutation(n, seed), seeded_permutation(n, seed));
    }

    #[test]
    fn dedup_search_respects_exclusions(
        texts in proptest::collection::vec("(alpha|beta|gamma|delta)( (alpha|beta|gamma|delta)){0,6}", 1..25),
        k in 1usize..6,
        excluded in proptest::collection::hash_set(0usize..25, 0..10),
    ) {
        let docs = texts.iter().enumerate().map(|(i, t)| Document {
            doc_id: format!("d{i}"),
            title: format!("T{}", i % 7),
            text: t.clone(),
        });
        let corpus = Corpus::from_documents(docs).0;
        let index = Bm25Index::build(&corpus, Bm25Params::default()).unwrap();
        let ex: HashSet<String> = excluded.iter().map(|i| format!("T{i}")).collect();
        let hits = index.search_dedup("alpha gamma", k, &ex);
        prop_assert!(hits.len() <= k);
        let titles: HashSet<&str> = hits.iter().map(|h| h.title.as_str()).collect();
        prop_assert_eq!(titles.len(), hits.len());
        prop_assert!(hits.iter().all(|h| !ex.contains(&h.title)));
        prop_assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn query_falls_back_without_usable_gaps(q in "[a-z ]{1,30}") {
        let unusable = GapItem::new(GapCategory::Other, "", "", "  ");
        let built = build_query(&q, &[unusable], 2);
        prop_assert!(built.is_fallback());
        prop_assert_eq!(built.text.trim(), q.trim());
    }
}

#[test]
fn prompt_templates_are_pinned() {
    let pinned = [
        (TemplateSet::V1.judge, "a3ff79551c773de2a3284240fa48b46d04677891ae508bc69040cc71cebabe91"),
        (TemplateSet::V1.teacher, "ae3de857a0a5b3aceeb868de3277b9ae6053dc891b18d5fd8ce45ce5bb2126fa"),
        (TemplateSet::V1.extractor, "e7435a6d01d24465fd0c4325758b5fe0124da2fc07bea6a1434813aed0db9646"),
        (TemplateSet::V1.reasoner, "b553914d0af3c7628e50fede9bb7deb051883fb4b1fef3ed1f2ecbba518826eb"),
    ];
    for (text, want) in pinned {
        assert_eq!(hex::encode(Sha256::digest(text.as_bytes())), want);
    }
}
