//! Decoding: CTC greedy search, CTC prefix beam search, and attention
//! rescoring of an n-best list.

use std::collections::BTreeMap;

use crate::error::{HydraError, Result};
use crate::model::{decode_step, BoundParams, DecoderConfig, Direction};
use crate::objectives::LossWeights;
use crate::tensor::Tensor;
use crate::tokens::{eos_id, TokenSeq, BLANK_ID};

/// Collapse a frame-label path: merge repeats, then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev != Some(k) && k != BLANK_ID {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Per-frame argmax (ties to the lower token id), collapsed.
pub fn ctc_greedy(log_probs: &Tensor) -> Result<TokenSeq> {
    let sh = log_probs.shape();
    if sh.len() != 2 {
        return Err(HydraError::Dimension(format!(
            "ctc_greedy expects (T', V), got {sh:?}"
        )));
    }
    let (t, v) = (sh[0], sh[1]);
    let lp = log_probs.data();
    let mut path = Vec::with_capacity(t);
    for r in 0..t {
        let row = &lp[r * v..(r + 1) * v];
        let mut best = 0usize;
        for k in 1..v {
            if row[k] > row[best] {
                best = k;
            }
        }
        path.push(best);
    }
    Ok(TokenSeq::from_raw(collapse_path(&path)))
}

/// One n-best hypothesis: tokens, CTC log-probability, and the rescored
/// total once rescoring has run.
#[derive(Clone, Debug)]
pub struct NBestEntry {
    pub tokens: TokenSeq,
    pub ctc_score: f64,
    pub rescored: Option<f64>,
}

/// Hypotheses sorted descending by the active score (CTC until rescoring).
#[derive(Clone, Debug, Default)]
pub struct NBestList {
    pub entries: Vec<NBestEntry>,
}

impl NBestList {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Standard CTC prefix beam search tracking blank-/non-blank-ending mass
/// per prefix. With a beam at least the size of the reachable hypothesis
/// space the scores are exact label-sequence log-probabilities.
pub fn ctc_prefix_beam(log_probs: &Tensor, beam: usize) -> Result<NBestList> {
    if beam == 0 {
        return Err(HydraError::Usage("beam must be >= 1".to_string()));
    }
    let sh = log_probs.shape();
    if sh.len() != 2 {
        return Err(HydraError::Dimension(format!(
            "ctc_prefix_beam expects (T', V), got {sh:?}"
        )));
    }
    let (t_len, v) = (sh[0], sh[1]);
    let lp = log_probs.data();
    let neg = f64::NEG_INFINITY;

    // prefix -> (log P ending in blank, log P ending in its last token)
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, neg));

    for t in 0..t_len {
        let row = &lp[t * v..(t + 1) * v];
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = lse2(pb, pnb);
            if total == neg {
                continue;
            }
            // blank keeps the prefix, now blank-terminated
            {
                let e = next.entry(prefix.clone()).or_insert((neg, neg));
                e.0 = lse2(e.0, total + row[BLANK_ID]);
            }
            for (k, &p_k) in row.iter().enumerate().skip(1) {
                if prefix.last() == Some(&k) {
                    // repeat absorbed into the same prefix
                    if pnb != neg {
                        let e = next.entry(prefix.clone()).or_insert((neg, neg));
                        e.1 = lse2(e.1, pnb + p_k);
                    }
                    // a blank-separated repeat extends the prefix
                    if pb != neg {
                        let mut ext = prefix.clone();
                        ext.push(k);
                        let e = next.entry(ext).or_insert((neg, neg));
                        e.1 = lse2(e.1, pb + p_k);
                    }
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((neg, neg));
                    e.1 = lse2(e.1, total + p_k);
                }
            }
        }
        if next.len() > beam {
            let mut scored: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
            // stable on the BTreeMap's lexicographic order, so ties keep
            // the smaller prefix
            scored.sort_by(|a, b| {
                lse2(b.1 .0, b.1 .1).partial_cmp(&lse2(a.1 .0, a.1 .1)).unwrap()
            });
            scored.truncate(beam);
            next = scored.into_iter().collect();
        }
        beams = next;
    }

    let mut entries: Vec<NBestEntry> = beams
        .into_iter()
        .filter_map(|(prefix, (pb, pnb))| {
            let score = lse2(pb, pnb);
            (score != neg).then(|| NBestEntry {
                tokens: TokenSeq::from_raw(prefix),
                ctc_score: score,
                rescored: None,
            })
        })
        .collect();
    entries.sort_by(|a, b| {
        b.ctc_score
            .partial_cmp(&a.ctc_score)
            .unwrap()
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    entries.truncate(beam);
    Ok(NBestList { entries })
}

/// Teacher-forced decoder log-probability of a candidate (including eos).
fn candidate_score(
    params: &BoundParams,
    cfg: &DecoderConfig,
    c: &Tensor,
    enc_len: usize,
    tokens: &TokenSeq,
    direction: Direction,
) -> Result<f64> {
    let logits = decode_step(params, cfg, c, &[enc_len], std::slice::from_ref(tokens), direction)?;
    let rows = tokens.len() + 1;
    let v = cfg.vocab_size;
    let lp = logits.reshape(&[rows, v])?.log_softmax()?;
    let ordered = match direction {
        Direction::LeftToRight => tokens.clone(),
        Direction::RightToLeft => tokens.reversed(),
    };
    let mut next = ordered.ids().to_vec();
    next.push(eos_id(v));
    let mut acc = 0.0;
    for (r, &id) in next.iter().enumerate() {
        acc += lp.data()[r * v + id];
    }
    Ok(acc)
}

/// final = att + ctc_weight * ctc, the decoder term optionally divided by
/// the number of teacher-forced positions.
fn combined_score(
    att: f64,
    ctc_score: f64,
    ctc_weight: f64,
    positions: usize,
    length_normalize: bool,
) -> f64 {
    let att = if length_normalize { att / positions as f64 } else { att };
    att + ctc_weight * ctc_score
}

/// Preference order for rescored entries: higher final score, then higher
/// CTC score, then the lexicographically smaller token sequence.
fn rescore_order(a: &NBestEntry, b: &NBestEntry) -> std::cmp::Ordering {
    b.rescored
        .partial_cmp(&a.rescored)
        .unwrap()
        .then_with(|| b.ctc_score.partial_cmp(&a.ctc_score).unwrap())
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Fills every entry's `rescored` total and re-sorts the list by it:
/// final = (1-beta) * logP_l2r + beta * logP_r2l + ctc_weight * ctc_score,
/// with the decoder term optionally divided by the number of teacher-forced
/// positions (`length_normalize`; off by default since candidates from one
/// utterance have similar lengths).
#[allow(clippy::too_many_arguments)]
pub fn rescore_nbest(
    params: &BoundParams,
    cfg: &DecoderConfig,
    c: &Tensor,
    enc_len: usize,
    nbest: &NBestList,
    weights: &LossWeights,
    ctc_weight: f64,
    length_normalize: bool,
) -> Result<NBestList> {
    if nbest.is_empty() {
        return Err(HydraError::Usage("rescoring an empty n-best list".to_string()));
    }
    let beta = weights.r2l_weight;
    let mut entries = Vec::with_capacity(nbest.entries.len());
    for entry in &nbest.entries {
        let l2r = candidate_score(params, cfg, c, enc_len, &entry.tokens, Direction::LeftToRight)?;
        let att = if beta > 0.0 {
            let r2l =
                candidate_score(params, cfg, c, enc_len, &entry.tokens, Direction::RightToLeft)?;
            (1.0 - beta) * l2r + beta * r2l
        } else {
            l2r
        };
        entries.push(NBestEntry {
            tokens: entry.tokens.clone(),
            ctc_score: entry.ctc_score,
            rescored: Some(combined_score(
                att,
                entry.ctc_score,
                ctc_weight,
                entry.tokens.len() + 1,
                length_normalize,
            )),
        });
    }
    entries.sort_by(rescore_order);
    Ok(NBestList { entries })
}

/// Re-ranks an n-best list and returns the winning hypothesis: the head
/// entry under [`rescore_nbest`]'s preference order.
pub fn attention_rescore(
    params: &BoundParams,
    cfg: &DecoderConfig,
    c: &Tensor,
    enc_len: usize,
    nbest: &NBestList,
    weights: &LossWeights,
    ctc_weight: f64,
) -> Result<TokenSeq> {
    let rescored = rescore_nbest(params, cfg, c, enc_len, nbest, weights, ctc_weight, false)?;
    Ok(rescored.entries.into_iter().next().unwrap().tokens)
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Micro-averaged token accuracy: 1 - total edits / total reference tokens.
pub fn token_accuracy<'a>(pairs: impl Iterator<Item = (&'a [usize], &'a [usize])>) -> f64 {
    let mut edits = 0usize;
    let mut total = 0usize;
    for (hyp, reference) in pairs {
        edits += edit_distance(hyp, reference);
        total += reference.len();
    }
    if total == 0 {
        return if edits == 0 { 1.0 } else { 0.0 };
    }
    1.0 - edits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lp(t: usize, v: usize, rows: Vec<Vec<f64>>) -> Tensor {
        let mut data = Vec::new();
        for row in rows {
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|p| (p / s).ln()));
        }
        Tensor::constant(&[t, v], data).unwrap()
    }

    #[test]
    fn greedy_collapses_blanks_and_repeats() {
        // argmaxes: blank, a, a, blank, b  -> "ab"
        let t = lp(
            5,
            3,
            vec![
                vec![0.8, 0.1, 0.1],
                vec![0.1, 0.8, 0.1],
                vec![0.1, 0.8, 0.1],
                vec![0.8, 0.1, 0.1],
                vec![0.1, 0.1, 0.8],
            ],
        );
        assert_eq!(ctc_greedy(&t).unwrap().ids(), &[1, 2]);
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let t = lp(3, 2, vec![vec![0.9, 0.1]; 3]);
        assert!(ctc_greedy(&t).unwrap().is_empty());
    }

    #[test]
    fn greedy_blank_separates_repeats() {
        // a, blank, a -> "aa"
        let t = lp(
            3,
            2,
            vec![vec![0.1, 0.9], vec![0.9, 0.1], vec![0.1, 0.9]],
        );
        assert_eq!(ctc_greedy(&t).unwrap().ids(), &[1, 1]);
    }

    #[test]
    fn greedy_ties_break_to_lower_id() {
        let t = Tensor::constant(&[1, 3], vec![(1.0f64 / 3.0).ln(); 3]).unwrap();
        assert!(ctc_greedy(&t).unwrap().is_empty()); // blank wins the tie
    }

    #[test]
    fn collapse_fixes_canonical_sequences() {
        // Collapsing an already-collapsed sequence (no blanks, no adjacent
        // repeats) is the identity.
        let canonical: Vec<Vec<usize>> = vec![
            vec![],
            vec![1],
            vec![1, 2, 1],
            vec![3, 2, 3, 1],
        ];
        for seq in canonical {
            assert_eq!(collapse_path(&seq), seq);
        }
        // and every collapse output re-stabilizes after one more pass
        for path in [vec![0, 1, 1, 0, 2], vec![1, 0, 1], vec![0, 0, 0], vec![3, 3, 2, 0, 2, 2]] {
            let second = collapse_path(&collapse_path(&path));
            assert_eq!(collapse_path(&second), second);
        }
    }

    fn exhaustive_label_scores(data: &[f64], t: usize, v: usize) -> BTreeMap<Vec<usize>, f64> {
        let mut acc: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        for code in 0..v.pow(t as u32) {
            let mut c = code;
            let mut path = Vec::with_capacity(t);
            for _ in 0..t {
                path.push(c % v);
                c /= v;
            }
            let label = collapse_path(&path);
            let logp: f64 = path.iter().enumerate().map(|(i, &k)| data[i * v + k]).sum();
            let e = acc.entry(label).or_insert(f64::NEG_INFINITY);
            *e = lse2(*e, logp);
        }
        acc
    }

    #[test]
    fn prefix_beam_matches_exhaustive_enumeration() {
        let mut seed = 7u64;
        for (t, v) in [(3usize, 3usize), (4, 4), (5, 3), (6, 4), (6, 2)] {
            let mut data = Vec::with_capacity(t * v);
            for _ in 0..t {
                let mut row = Vec::with_capacity(v);
                let mut s = 0.0;
                for _ in 0..v {
                    seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let p = ((seed >> 33) as f64 / (1u64 << 31) as f64) + 0.05;
                    row.push(p);
                    s += p;
                }
                data.extend(row.into_iter().map(|p| (p / s).ln()));
            }
            let tensor = Tensor::constant(&[t, v], data.clone()).unwrap();
            let nbest = ctc_prefix_beam(&tensor, 100_000).unwrap();
            let oracle = exhaustive_label_scores(&data, t, v);
            assert_eq!(nbest.entries.len(), oracle.len());
            for e in &nbest.entries {
                let want = oracle.get(e.tokens.ids()).expect("missing label");
                assert!(
                    (e.ctc_score - want).abs() < 1e-9,
                    "T={t} V={v} {:?}: {} vs {}",
                    e.tokens.ids(),
                    e.ctc_score,
                    want
                );
            }
            // probabilities of disjoint label sequences sum to at most one
            let total: f64 = nbest.entries.iter().map(|e| e.ctc_score.exp()).sum();
            assert!(total <= 1.0 + 1e-9, "{total}");
        }
    }

    #[test]
    fn prefix_beam_one_agrees_with_greedy_on_peaked_rows() {
        let t = lp(
            4,
            3,
            vec![
                vec![0.001, 0.997, 0.002],
                vec![0.997, 0.002, 0.001],
                vec![0.001, 0.002, 0.997],
                vec![0.997, 0.002, 0.001],
            ],
        );
        let greedy = ctc_greedy(&t).unwrap();
        let beam = ctc_prefix_beam(&t, 1).unwrap();
        assert_eq!(beam.entries[0].tokens, greedy);
    }

    #[test]
    fn prefix_beam_scores_are_non_increasing() {
        let t = lp(
            4,
            3,
            vec![
                vec![0.5, 0.3, 0.2],
                vec![0.2, 0.5, 0.3],
                vec![0.3, 0.3, 0.4],
                vec![0.4, 0.4, 0.2],
            ],
        );
        let nbest = ctc_prefix_beam(&t, 8).unwrap();
        for w in nbest.entries.windows(2) {
            assert!(w[0].ctc_score >= w[1].ctc_score);
        }
    }

    fn entry(ids: &[usize], ctc: f64, rescored: f64) -> NBestEntry {
        NBestEntry { tokens: TokenSeq::from_raw(ids.to_vec()), ctc_score: ctc, rescored: Some(rescored) }
    }

    #[test]
    fn rescore_combination_hand_arithmetic() {
        // att = [-1, -2], ctc = [-5, -1], ctc_weight = 0.5
        // final = [-3.5, -2.5]: candidate 2 wins
        let f1 = combined_score(-1.0, -5.0, 0.5, 2, false);
        let f2 = combined_score(-2.0, -1.0, 0.5, 3, false);
        assert_eq!(f1, -3.5);
        assert_eq!(f2, -2.5);
        let mut entries = [entry(&[1], -5.0, f1), entry(&[2], -1.0, f2)];
        entries.sort_by(rescore_order);
        assert_eq!(entries[0].tokens.ids(), &[2]);

        // overwhelming ctc weight: ordering follows the ctc scores
        let g1 = combined_score(-1.0, -5.0, 1e6, 2, false);
        let g2 = combined_score(-2.0, -1.0, 1e6, 3, false);
        let mut entries = [entry(&[1], -5.0, g1), entry(&[2], -1.0, g2)];
        entries.sort_by(rescore_order);
        assert_eq!(entries[0].tokens.ids(), &[2]);

        // length normalization divides the decoder term by the positions
        assert_eq!(combined_score(-3.0, -1.0, 0.0, 3, true), -1.0);
    }

    #[test]
    fn rescore_selection_tie_breaks() {
        // identical finals; higher ctc wins
        let mut entries = [entry(&[2], -2.0, -3.0), entry(&[1], -1.0, -3.0)];
        entries.sort_by(rescore_order);
        assert_eq!(entries[0].tokens.ids(), &[1]);
        // fully tied: lexicographically smaller sequence wins
        let mut entries = [entry(&[2], -1.0, -3.0), entry(&[1], -1.0, -3.0)];
        entries.sort_by(rescore_order);
        assert_eq!(entries[0].tokens.ids(), &[1]);
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[2, 2], &[2, 3]), 1);
    }

    #[test]
    fn attention_rescore_on_a_real_model() {
        use crate::frontend::FrontendConfig;
        use crate::model::{DecoderConfig, EncoderConfig, ModelState};

        let m = ModelState::init(
            FrontendConfig::new(&[4], false, 80, 16).unwrap(),
            EncoderConfig { num_blocks: 0, model_dim: 16, heads: 2, ffn_dim: 24, depthwise_kernel: 3, dropout: 0.0 },
            DecoderConfig { num_blocks_l2r: 1, num_blocks_r2l: 1, model_dim: 16, heads: 2, ffn_dim: 24, vocab_size: 8 },
            12,
        )
        .unwrap();
        let c_data: Vec<f64> = (0..5 * 16).map(|i| ((i * 17 % 31) as f64 / 15.0 - 1.0) * 0.4).collect();
        let c = Tensor::constant(&[1, 5, 16], c_data).unwrap();
        let bound = m.bind(false);
        let weights = crate::objectives::LossWeights::default();

        // single candidate comes back unchanged
        let single = NBestList {
            entries: vec![NBestEntry { tokens: TokenSeq::from_raw(vec![2, 1]), ctc_score: -1.0, rescored: None }],
        };
        let got = attention_rescore(&bound, &m.decoder, &c, 5, &single, &weights, 0.3).unwrap();
        assert_eq!(got.ids(), &[2, 1]);

        // overwhelming ctc weight follows the ctc ordering regardless of
        // what the (untrained) decoder prefers
        let pair = NBestList {
            entries: vec![
                NBestEntry { tokens: TokenSeq::from_raw(vec![1]), ctc_score: -0.2, rescored: None },
                NBestEntry { tokens: TokenSeq::from_raw(vec![3, 2]), ctc_score: -7.0, rescored: None },
            ],
        };
        let got = attention_rescore(&bound, &m.decoder, &c, 5, &pair, &weights, 1e6).unwrap();
        assert_eq!(got.ids(), &[1]);

        let err = attention_rescore(&bound, &m.decoder, &c, 5, &NBestList::default(), &weights, 0.3);
        assert!(err.is_err());

        // rescore_nbest fills every entry and sorts by the new score
        let out = rescore_nbest(&bound, &m.decoder, &c, 5, &pair, &weights, 0.3, false).unwrap();
        assert!(out.entries.iter().all(|e| e.rescored.is_some()));
        for w in out.entries.windows(2) {
            assert!(w[0].rescored.unwrap() >= w[1].rescored.unwrap());
        }
        // normalized and unnormalized decoder terms relate by the length
        let raw = rescore_nbest(&bound, &m.decoder, &c, 5, &single, &weights, 0.0, false).unwrap();
        let norm = rescore_nbest(&bound, &m.decoder, &c, 5, &single, &weights, 0.0, true).unwrap();
        let positions = (single.entries[0].tokens.len() + 1) as f64;
        assert!(
            (raw.entries[0].rescored.unwrap() / positions - norm.entries[0].rescored.unwrap()).abs()
                < 1e-12
        );
    }

    proptest! {
        #[test]
        fn prop_collapse_output_is_blank_free_and_stabilizes(
            path in proptest::collection::vec(0usize..5, 0..24)
        ) {
            let once = collapse_path(&path);
            prop_assert!(once.iter().all(|&k| k != BLANK_ID));
            // canonical sequences (no blanks, no adjacent repeats) are fixed
            // points, and one more pass always reaches one
            let twice = collapse_path(&once);
            prop_assert!(twice.windows(2).all(|w| w[0] != w[1]));
            prop_assert_eq!(collapse_path(&twice), twice.clone());
        }
    }
}
