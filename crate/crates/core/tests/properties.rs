use codecorpus::bpe::{BpeVocab, SpecialToken};
use codecorpus::fim::{pack_sequences, FimConfig, FimDocument, FimSplit};
use codecorpus::recall::{promote_domains, PageObservation, RecallConfig};
use proptest::prelude::*;

fn byte_vocab() -> BpeVocab {
    BpeVocab::byte_level()
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn any_cut_pair_partitions(doc in "\\PC{0,60}", a in 0usize..100, b in 0usize..100) {
        let n = doc.chars().count();
        let (a, b) = (a % (n + 1), b % (n + 1));
        let (lo, hi) = (a.min(b), a.max(b));
        let split = FimSplit::from_cuts(&doc, lo, hi).unwrap();
        prop_assert_eq!(split.reassemble(), doc);
        prop_assert_eq!(split.middle.chars().count(), hi - lo);
    }

    #[test]
    fn byte_level_round_trip(s in any::<String>()) {
        let vocab = byte_vocab();
        let seq = vocab.encode(&s);
        prop_assert_eq!(vocab.decode(&seq.ids).unwrap(), s.clone());
        prop_assert_eq!(seq.offsets.last().map_or(0, |o| o.1), s.len());
        let eos = vocab.special_id(SpecialToken::Eos);
        prop_assert!(!seq.ids.contains(&eos));
    }

    #[test]
    fn packing_conserves_tokens(lens in prop::collection::vec(0usize..90, 1..30), ctx in 5usize..64) {
        let vocab = byte_vocab();
        let eos = vocab.special_id(SpecialToken::Eos);
        let docs: Vec<FimDocument> = lens
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut ids: Vec<u32> = (0..n as u32).map(|k| k % 200).collect();
                ids.push(eos);
                FimDocument { doc_id: format!("d{i}"), ids, was_fim: false }
            })
            .collect();
        let cfg = FimConfig { context_length: ctx, ..FimConfig::default() };
        let seqs = pack_sequences(&docs, &cfg, &vocab).unwrap();
        let stitched: Vec<u32> = seqs.iter().flat_map(|s| s.ids[..ctx - s.padding].to_vec()).collect();
        let expected: Vec<u32> = docs.iter().flat_map(|d| d.ids.clone()).collect();
        prop_assert_eq!(stitched, expected);
        prop_assert!(seqs.iter().all(|s| s.ids.len() == ctx));
        prop_assert!(seqs[..seqs.len() - 1].iter().all(|s| s.padding == 0));
    }

    #[test]
    fn promotion_ignores_page_order(
        pages in prop::collection::vec((0usize..6, any::<bool>()), 0..200),
        rotate in 0usize..200,
    ) {
        let names = ["a.com", "b.org", "c.net", "d.io", "e.dev", "f.edu"];
        let obs: Vec<PageObservation<'_>> = pages
            .iter()
            .map(|&(d, collected)| PageObservation { domain: names[d], collected })
            .collect();
        let mut shuffled = obs.clone();
        if !shuffled.is_empty() {
            let k = rotate % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
        }
        let cfg = RecallConfig::default();
        prop_assert_eq!(promote_domains(obs, &cfg), promote_domains(shuffled, &cfg));
    }
}
