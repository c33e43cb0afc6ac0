//! Conversion between BIO tag sequences and word-level spans.

use crate::types::{BioTag, ValidationError};

/// Converts a tag sequence into maximal inclusive spans.
///
/// A span opens at `B` and extends through the following `I` run. A stray `I`
/// (sequence-initial or after `O`) opens a new span instead of being dropped.
pub fn bio_to_spans(tags: &[BioTag]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            BioTag::B => {
                if let Some(start) = open.take() {
                    spans.push((start, i - 1));
                }
                open = Some(i);
            }
            BioTag::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            BioTag::O => {
                if let Some(start) = open.take() {
                    spans.push((start, i - 1));
                }
            }
        }
    }
    if let Some(start) = open {
        spans.push((start, tags.len() - 1));
    }
    spans
}

/// Renders disjoint spans as a BIO sequence of the given length.
pub fn spans_to_bio(spans: &[(usize, usize)], length: usize) -> Result<Vec<BioTag>, ValidationError> {
    let mut sorted = spans.to_vec();
    sorted.sort_unstable();
    for &(start, end) in &sorted {
        if start > end || end >= length {
            return Err(ValidationError::SpanOutsideSequence { start, end, len: length });
        }
    }
    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b.0 <= a.1 {
            return Err(ValidationError::OverlappingSpans(a.0, a.1, b.0, b.1));
        }
    }
    let mut tags = vec![BioTag::O; length];
    for (start, end) in sorted {
        tags[start] = BioTag::B;
        for tag in &mut tags[start + 1..=end] {
            *tag = BioTag::I;
        }
    }
    Ok(tags)
}

/// True when no `I` follows `O` and the sequence does not start with `I`.
pub fn is_well_formed(tags: &[BioTag]) -> bool {
    let mut prev = BioTag::O;
    for &tag in tags {
        if tag == BioTag::I && prev == BioTag::O {
            return false;
        }
        prev = tag;
    }
    true
}
