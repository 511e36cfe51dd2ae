//! Word error rate.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::bail;
use crate::{Result, Scalar};

/// Levenshtein distance with unit insertion, deletion and substitution costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Word-level edits between whitespace-separated transcripts.
pub fn word_errors(reference: &str, hypothesis: &str) -> usize {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    edit_distance(&r, &h)
}

/// Word edits divided by the reference length.
pub fn wer(reference: &str, hypothesis: &str) -> Result<Scalar> {
    let n = reference.split_whitespace().count();
    if n == 0 {
        bail!(Input, "empty reference transcript");
    }
    Ok(word_errors(reference, hypothesis) as Scalar / n as Scalar)
}

/// Corpus WER: total edits over total reference words.
pub fn corpus_wer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Scalar> {
    let (mut edits, mut words) = (0, 0);
    for (r, h) in pairs {
        edits += word_errors(r, h);
        words += r.split_whitespace().count();
    }
    if words == 0 {
        bail!(Input, "empty reference transcripts");
    }
    Ok(edits as Scalar / words as Scalar)
}
