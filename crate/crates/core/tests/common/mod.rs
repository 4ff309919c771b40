//! Oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use evolver_core::data_model::InstructionRecord;
use evolver_core::gateway::{Gateway, MockBackend, MockRule, MockScript, RetryPolicy};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn mock_gateway(rules: Vec<MockRule>, workers: usize) -> (Gateway, Arc<MockBackend>) {
    let backend = Arc::new(MockBackend::new(MockScript::new(rules)).unwrap());
    let gw = Gateway::new(backend.clone())
        .with_retry(RetryPolicy::no_delay(0))
        .with_max_in_flight(workers);
    (gw, backend)
}

/// Reference tokenizer written independently of the library: a char walk
/// that lowercases and breaks on anything not alphanumeric.
pub fn oracle_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Quadratic n-gram intersection: compares every window of every user turn
/// with every window of every test item.
pub fn brute_force_matches(records: &[InstructionRecord], test_set: &[String], n: usize) -> Vec<String> {
    let test_tokens: Vec<Vec<String>> = test_set.iter().map(|t| oracle_tokens(t)).collect();
    let mut matched = Vec::new();
    'records: for r in records {
        for turn in r.user_turns() {
            let toks = oracle_tokens(turn);
            if toks.len() < n {
                continue;
            }
            for i in 0..=toks.len() - n {
                for t in &test_tokens {
                    if t.len() < n {
                        continue;
                    }
                    for j in 0..=t.len() - n {
                        if toks[i..i + n] == t[j..j + n] {
                            matched.push(r.id.clone());
                            continue 'records;
                        }
                    }
                }
            }
        }
    }
    matched
}

pub struct Corpus {
    pub records: Vec<InstructionRecord>,
    pub test_set: Vec<String>,
    pub planted: BTreeSet<String>,
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// `size` evolved records drawn from one vocabulary and 40 test items from a
/// disjoint one; `planted` records receive a copy of a run of 8 to `span`
/// consecutive test tokens. Punctuation and case noise are sprinkled in.
pub fn synthetic_corpus(seed: u64, size: usize, planted: usize, span: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rec_vocab = words("alpha", 300);
    let test_vocab = words("omega", 300);
    let test_set: Vec<String> = (0..40)
        .map(|i| {
            // some items are exactly `span` tokens so the overlap spans the whole item
            let len = if i % 5 == 0 { span } else { rng.random_range(span..span + 30) };
            (0..len).map(|_| test_vocab.choose(&mut rng).unwrap().clone()).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let mut ids: Vec<usize> = (0..size).collect();
    ids.shuffle(&mut rng);
    let planted_idx: BTreeSet<usize> = ids[..planted].iter().copied().collect();
    let mut planted_ids = BTreeSet::new();
    let records = (0..size)
        .map(|i| {
            let len = rng.random_range(5..40);
            let mut toks: Vec<String> = (0..len).map(|_| rec_vocab.choose(&mut rng).unwrap().clone()).collect();
            if planted_idx.contains(&i) {
                let item: Vec<&str> = test_set.choose(&mut rng).unwrap().split(' ').collect();
                let run_len = rng.random_range(8..=span);
                let start = rng.random_range(0..=item.len() - run_len);
                let at = rng.random_range(0..=toks.len());
                let run: Vec<String> = item[start..start + run_len]
                    .iter()
                    .enumerate()
                    .map(|(k, w)| if k % 3 == 0 { w.to_uppercase() } else { w.to_string() })
                    .collect();
                toks.splice(at..at, run);
                planted_ids.insert(format!("rec-{i:03}"));
            }
            let text = toks.join(if i % 2 == 0 { " " } else { ", " });
            InstructionRecord::seed(format!("rec-{i:03}"), format!("{text}?"), "synthetic")
        })
        .collect();
    Corpus {
        records,
        test_set,
        planted: planted_ids,
    }
}

/// Dev records `Item 01`..`Item n`.
pub fn item_dev(n: usize) -> Vec<InstructionRecord> {
    (1..=n).map(|i| InstructionRecord::seed(format!("dev-{i:02}"), format!("Item {i:02}"), "dev")).collect()
}
