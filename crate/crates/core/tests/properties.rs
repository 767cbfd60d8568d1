use std::collections::BTreeMap;

use proptest::prelude::*;

use agex_core::artifact::{generate_candidate_boxes, top_k_count};
use agex_core::dataset::{SplitSpec, TaskTag};
use agex_core::explain::{check_grounded_text, parse_step4, to_interleaved, Segment};
use agex_core::fict::{load_manifest, ConceptId, ConceptTree};
use agex_core::mask::{rle_decode, rle_encode, BitMask};
use agex_core::metrics::{lcs_len, meteor_lite, rouge_l, tokenize, TextPair};

fn mask_from(bits: &[bool], w: usize) -> BitMask {
    BitMask::from_bools(w, bits.len() / w, bits)
}

/// Expected parse of a generated summary, built alongside the text.
#[derive(Debug, Clone)]
enum Piece {
    Plain(String),
    Span(usize, String),
}

fn piece() -> impl Strategy<Value = Piece> {
    prop_oneof![
        "[a-z ,.]{1,12}".prop_map(Piece::Plain),
        (0usize..6, "[a-z][a-z ']{0,10}[a-z]").prop_map(|(k, p)| Piece::Span(k, p)),
    ]
}

/// Walks the text character by character, tracking the open index.
fn naive_scan(text: &str) -> Vec<(usize, String)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let mut current: Option<(usize, String)> = None;
    while i < chars.len() {
        if chars[i] == '<' {
            let close = chars.get(i + 1) == Some(&'/');
            let mut j = i + 1 + usize::from(close);
            let mut num = String::new();
            while j < chars.len() && chars[j].is_ascii_digit() {
                num.push(chars[j]);
                j += 1;
            }
            if !num.is_empty() && chars.get(j) == Some(&'>') {
                let k: usize = num.parse().unwrap();
                if close {
                    let (_, p) = current.take().unwrap();
                    out.push((k, p.trim().to_string()));
                } else {
                    current = Some((k, String::new()));
                }
                i = j + 1;
                continue;
            }
        }
        if let Some((_, p)) = current.as_mut() {
            p.push(chars[i]);
        }
        i += 1;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rle_round_trips(w in 1usize..30, bits in prop::collection::vec(any::<bool>(), 1..600)) {
        let bits = &bits[..bits.len() / w * w];
        prop_assume!(!bits.is_empty());
        let m = mask_from(bits, w);
        let r = rle_encode(&m);
        prop_assert_eq!(r.counts.iter().sum::<u64>(), m.len() as u64);
        prop_assert!(r.counts.iter().skip(1).all(|c| *c > 0));
        prop_assert_eq!(r.area(), m.count_ones());
        prop_assert_eq!(rle_decode(&r).unwrap(), m);
        let back: agex_core::mask::RleMask = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        prop_assert_eq!(back, r);
    }

    #[test]
    fn top_k_is_clamped_ceiling(n in 1usize..100_000, pct in 1u32..=100) {
        let k = top_k_count(pct as f64 / 100.0, n);
        prop_assert_eq!(k, (pct as usize * n).div_ceil(100).clamp(1, n));
    }

    #[test]
    fn candidate_boxes_stay_inside(seed in any::<u64>(), w in 10usize..400, h in 10usize..400, n in 0usize..40) {
        let boxes = generate_candidate_boxes(seed, n, w, h, 0.1);
        prop_assert_eq!(boxes.len(), n);
        for b in &boxes {
            prop_assert!(b.x0 < b.x1 && b.y0 < b.y1);
            prop_assert!(b.x1 as usize <= w && b.y1 as usize <= h);
            prop_assert!((b.x1 - b.x0) as usize >= (w as f64 * 0.1).ceil() as usize);
            let nb = b.normalized(w, h);
            prop_assert!(nb.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn step4_parse_matches_naive_scan(pieces in prop::collection::vec(piece(), 1..10)) {
        let mut text = String::new();
        for p in &pieces {
            match p {
                Piece::Plain(s) => text.push_str(s),
                Piece::Span(k, s) => text.push_str(&format!(" <{k}> {s} </{k}> ")),
            }
        }
        let map: BTreeMap<usize, ConceptId> = (0..6).map(|i| (i, ConceptId::new(format!("concept_{i}")))).collect();
        let n = parse_step4(&text, &map).unwrap();
        let got: Vec<(usize, String)> = n.grounded().map(|(c, p)| (map.iter().find(|(_, v)| *v == c).unwrap().0.to_owned(), p.to_string())).collect();
        prop_assert_eq!(&got, &naive_scan(&text));
        let adjacent_plain = n.segments.windows(2).any(|w| matches!(w, [Segment::Plain { .. }, Segment::Plain { .. }]));
        prop_assert!(!adjacent_plain);

        let masks: BTreeMap<ConceptId, BitMask> = map.values().map(|c| (c.clone(), BitMask::ones(3, 2))).collect();
        let il = to_interleaved(&n, &masks).unwrap();
        prop_assert_eq!(il.masks.len(), got.len());
        prop_assert!(check_grounded_text(&il.text, il.masks.len()));
    }

    #[test]
    fn tokenizer_is_idempotent(s in "\\PC{0,60}") {
        let t = tokenize(&s);
        prop_assert_eq!(tokenize(&t.join(" ")), t);
    }

    #[test]
    fn text_scores_are_bounded(a in "[a-d ]{1,30}", b in "[a-d ]{1,30}") {
        let pair = TextPair::new(&a, &[b.as_str()]);
        prop_assume!(!pair.candidate.is_empty() && !pair.references[0].is_empty());
        let l = lcs_len(&pair.candidate, &pair.references[0]);
        prop_assert!(l <= pair.candidate.len().min(pair.references[0].len()));
        prop_assert_eq!(l, lcs_len(&pair.references[0], &pair.candidate));
        for v in [rouge_l(&pair).unwrap(), meteor_lite(&pair).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn split_follows_group_prefix(group in "[a-z0-9]{1,12}", a in "[a-z_/]{1,10}", b in "[a-z_/]{1,10}") {
        let spec = SplitSpec::default();
        prop_assert_eq!(spec.assign(&format!("{group}/{a}")), spec.assign(&format!("{group}/{b}")));
    }
}

#[test]
fn manifest_round_trips() {
    let tree = ConceptTree::default_tree();
    let again = load_manifest(&tree.to_manifest()).unwrap();
    assert_eq!(again.to_manifest(), tree.to_manifest());
    assert_eq!((again.atomic_count(), again.parent_count()), (112, 72));
}

#[test]
fn task_tags_parse_their_own_names() {
    for t in TaskTag::ALL {
        assert_eq!(t.as_str().parse::<TaskTag>().unwrap(), t);
    }
}
