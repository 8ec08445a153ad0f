//! Lexical overlap metrics on normalized whitespace tokens.

use std::collections::{BTreeMap, HashMap};

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// Lowercases, turns every non-alphanumeric character into a space and
/// collapses runs of whitespace.
pub fn normalize(text: &str) -> String {
    let mapped: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokens(text: &str) -> Vec<String> {
    normalize(text).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub(crate) fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&tokens(candidate), &tokens(reference))
}

pub fn rouge_l_tokens(c: &[String], r: &[String]) -> RougeScore {
    let zero = RougeScore {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    if c.is_empty() || r.is_empty() {
        return zero;
    }
    let lcs = lcs_len(c, r) as f64;
    if lcs == 0.0 {
        return zero;
    }
    let precision = lcs / c.len() as f64;
    let recall = lcs / r.len() as f64;
    RougeScore {
        precision,
        recall,
        f1: 2.0 * precision * recall / (precision + recall),
    }
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams of order `n`.
pub fn modified_precision(c: &[String], r: &[String], n: usize) -> (usize, usize) {
    let cand = ngram_counts(c, n);
    let refs = ngram_counts(r, n);
    let clipped = cand
        .iter()
        .map(|(g, k)| (*k).min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, c.len().saturating_sub(n - 1))
}

/// Sentence BLEU with uniform weights over orders `1..=max_n` and no
/// smoothing: any order without a clipped match scores 0.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> f64 {
    bleu_tokens(&tokens(candidate), &tokens(reference), max_n)
}

pub fn bleu_tokens(c: &[String], r: &[String], max_n: usize) -> f64 {
    assert!(max_n >= 1, "BLEU needs at least unigrams");
    if c.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (matched, total) = modified_precision(c, r, n);
        if matched == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let (cl, rl) = (c.len() as f64, r.len() as f64);
    let bp = if cl < rl { (1.0 - rl / cl).exp() } else { 1.0 };
    bp * (log_sum / max_n as f64).exp()
}

thread_local! {
    static STEMMER: Stemmer = Stemmer::create(Algorithm::English);
}

pub fn stem(token: &str) -> String {
    STEMMER.with(|s| s.stem(token).into_owned())
}

/// Node budget for the chunk-minimizing alignment search. Sentences that
/// exhaust it keep the best alignment found so far.
pub const ALIGNMENT_NODE_BUDGET: usize = 200_000;

/// Result of aligning candidate to reference unigrams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    /// `pairs[k] = (candidate position, reference position)`, ascending in
    /// candidate position.
    pub pairs: Vec<(usize, usize)>,
    pub chunks: usize,
    /// False when the search budget ran out before optimality was proven.
    pub exhaustive: bool,
}

/// Runs of consecutive candidate positions mapped to consecutive reference
/// positions.
pub fn count_chunks(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    let mut prev: Option<(usize, usize)> = None;
    for &(i, j) in pairs {
        match prev {
            Some((pi, pj)) if i == pi + 1 && j == pj + 1 => {}
            _ => chunks += 1,
        }
        prev = Some((i, j));
    }
    chunks
}

struct Search<'a> {
    cls_c: &'a [usize],
    cls_r: &'a [usize],
    target: Vec<usize>,
    matched: Vec<usize>,
    remaining: Vec<usize>,
    used: Vec<bool>,
    pairs: Vec<(usize, usize)>,
    best: Option<(usize, Vec<(usize, usize)>)>,
    nodes: usize,
    budget: usize,
}

impl Search<'_> {
    fn run(&mut self, i: usize, chunks: usize) {
        self.nodes += 1;
        if let Some((best, _)) = &self.best {
            if chunks >= *best {
                return;
            }
        }
        if i == self.cls_c.len() {
            self.best = Some((chunks, self.pairs.clone()));
            return;
        }
        if self.nodes > self.budget && self.best.is_some() {
            return;
        }
        let c = self.cls_c[i];
        self.remaining[c] -= 1;
        if self.matched[c] < self.target[c] {
            // Try the continuing reference position first so good
            // alignments are found early.
            let cont = self.pairs.last().filter(|(pi, _)| *pi + 1 == i).map(|(_, pj)| pj + 1);
            let mut order: Vec<usize> = (0..self.cls_r.len())
                .filter(|&j| !self.used[j] && self.cls_r[j] == c)
                .collect();
            if let Some(k) = cont.and_then(|cj| order.iter().position(|&j| j == cj)) {
                let j = order.remove(k);
                order.insert(0, j);
            }
            for j in order {
                let extends = cont == Some(j);
                self.used[j] = true;
                self.matched[c] += 1;
                self.pairs.push((i, j));
                self.run(i + 1, chunks + usize::from(!extends));
                self.pairs.pop();
                self.matched[c] -= 1;
                self.used[j] = false;
            }
        }
        // Skipping stays feasible only if later tokens can still fill the class.
        if self.matched[c] + self.remaining[c] >= self.target[c] {
            self.run(i + 1, chunks);
        }
        self.remaining[c] += 1;
    }
}

/// Maximum-match alignment with the fewest chunks. Tokens match when their
/// stems agree (which includes exact matches).
pub fn align(c: &[String], r: &[String], budget: usize) -> Alignment {
    let mut classes: BTreeMap<String, usize> = BTreeMap::new();
    let mut class_of = |t: &String| {
        let n = classes.len();
        *classes.entry(stem(t)).or_insert(n)
    };
    let cls_c: Vec<usize> = c.iter().map(&mut class_of).collect();
    let cls_r: Vec<usize> = r.iter().map(&mut class_of).collect();
    let k = classes.len();
    let mut count_c = vec![0usize; k];
    let mut count_r = vec![0usize; k];
    cls_c.iter().for_each(|&x| count_c[x] += 1);
    cls_r.iter().for_each(|&x| count_r[x] += 1);
    let target: Vec<usize> = (0..k).map(|x| count_c[x].min(count_r[x])).collect();
    let mut search = Search {
        cls_c: &cls_c,
        cls_r: &cls_r,
        target,
        matched: vec![0; k],
        remaining: count_c,
        used: vec![false; r.len()],
        pairs: Vec::new(),
        best: None,
        nodes: 0,
        budget,
    };
    search.run(0, 0);
    let exhaustive = search.nodes <= budget;
    let (chunks, pairs) = search.best.expect("the first descent always completes an alignment");
    Alignment {
        pairs,
        chunks,
        exhaustive,
    }
}

/// METEOR from an alignment's match and chunk counts.
pub fn meteor_from_counts(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 {
        return 0.0;
    }
    let m = matches as f64;
    let p = m / cand_len as f64;
    let r = m / ref_len as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    fmean * (1.0 - penalty)
}

/// METEOR with exact and stem matching only (no synonym stage).
pub fn meteor_lite(candidate: &str, reference: &str) -> f64 {
    meteor_lite_tokens(&tokens(candidate), &tokens(reference))
}

pub fn meteor_lite_tokens(c: &[String], r: &[String]) -> f64 {
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let a = align(c, r, ALIGNMENT_NODE_BUDGET);
    meteor_from_counts(a.pairs.len(), a.chunks, c.len(), r.len())
}
