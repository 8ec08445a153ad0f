//! Answer scoring, the patch-vote baseline and the evaluation harness.

mod baseline;
mod eval;
mod text;

pub use baseline::{majority_vote_baseline, vote_prompt, BaselineError, PatchVote, VoteOutcome};
pub use eval::{
    load_dataset, run_eval, Aggregates, AnswerRunner, Counts, DatasetError, EvalError, EvalReport, OpenScores,
    QaRecord, QuestionKind, RecordResult, RunnerAnswer,
};
pub use text::{
    align, bleu, bleu_tokens, count_chunks, meteor_from_counts, meteor_lite, meteor_lite_tokens, modified_precision,
    normalize, rouge_l, rouge_l_tokens, stem, tokens, Alignment, RougeScore, ALIGNMENT_NODE_BUDGET,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedOutcome {
    pub correct: bool,
    /// `None` only for an empty prediction.
    pub chosen: Option<String>,
    pub empty_prediction: bool,
}

/// Index of the option a free-text prediction refers to: an exact
/// normalized match if any, else the highest ROUGE-L F1 (first wins ties).
pub fn choose_option(prediction: &str, options: &[String]) -> Option<usize> {
    let pred = normalize(prediction);
    if pred.is_empty() || options.is_empty() {
        return None;
    }
    if let Some(i) = options.iter().position(|o| normalize(o) == pred) {
        return Some(i);
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, o) in options.iter().enumerate() {
        let f = rouge_l(prediction, o).f1;
        if f > best.1 {
            best = (i, f);
        }
    }
    Some(best.0)
}

pub fn closed_accuracy(prediction: &str, options: &[String], gold: &str) -> ClosedOutcome {
    match choose_option(prediction, options) {
        None => ClosedOutcome {
            correct: false,
            chosen: None,
            empty_prediction: normalize(prediction).is_empty(),
        },
        Some(i) => ClosedOutcome {
            correct: options[i] == gold,
            chosen: Some(options[i].clone()),
            empty_prediction: false,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(o: &[&str]) -> Vec<String> {
        o.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn closed_examples() {
        let grades = opts(&["Grade I/III", "Grade II/III", "Grade III/III"]);
        let r = closed_accuracy("Grade III/III", &grades, "Grade III/III");
        assert!(r.correct);
        assert_eq!(r.chosen.as_deref(), Some("Grade III/III"));

        let types = opts(&["invasive ductal carcinoma", "invasive lobular carcinoma"]);
        let r = closed_accuracy("the tumor is invasive ductal carcinoma", &types, "invasive ductal carcinoma");
        assert_eq!(r.chosen.as_deref(), Some("invasive ductal carcinoma"));

        let r = closed_accuracy("alpha", &opts(&["alpha beta", "alpha gamma"]), "alpha gamma");
        assert_eq!(r.chosen.as_deref(), Some("alpha beta"));
        assert!(!r.correct);

        let r = closed_accuracy("  ?! ", &grades, "Grade I/III");
        assert!(!r.correct && r.empty_prediction && r.chosen.is_none());
    }

    #[test]
    fn casing_and_trailing_punctuation_do_not_matter() {
        let grades = opts(&["Grade I/III", "Grade II/III", "Grade III/III"]);
        for p in ["grade ii/iii", "GRADE II/III.", "Grade II/III!!", "The answer is grade II/III."] {
            assert_eq!(closed_accuracy(p, &grades, "Grade II/III").chosen.as_deref(), Some("Grade II/III"), "{p}");
        }
    }
}
