//! Tokenization shared by the caption decoder and the metrics, so training
//! and evaluation see identical tokens: lowercase, whitespace split, every
//! punctuation character its own token.

pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut out);
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            out.push(ch.to_string());
        }
    }
    flush(&mut word, &mut out);
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

fn attaches_left(tok: &str) -> bool {
    matches!(tok, "." | "," | "!" | "?" | ";" | ":" | ")" | "]" | "%")
}

fn attaches_right(tok: &str) -> bool {
    matches!(tok, "(" | "[")
}

/// Joins tokens with single spaces, without a space before closing
/// punctuation or after an opening bracket.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_opens = false;
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !attaches_left(t) && !prev_opens {
            out.push(' ');
        }
        out.push_str(t);
        prev_opens = attaches_right(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Great shot!"), vec!["great", "shot", "!"]);
        assert_eq!(tokenize("  Soft,  warm light. "), vec!["soft", ",", "warm", "light", "."]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize::<&str>(&[]), "");
    }

    #[test]
    fn detokenize_canonical_spacing() {
        assert_eq!(detokenize(&["great", "shot", "!"]), "great shot!");
        assert_eq!(detokenize(&["a", "(", "b", ")", "c"]), "a (b) c");
    }

    proptest! {
        #[test]
        fn round_trip_up_to_whitespace(words in prop::collection::vec("[a-z]{1,6}|[.,!?]", 0..12)) {
            let text = words.join(" ");
            let toks = tokenize(&text);
            prop_assert_eq!(tokenize(&detokenize(&toks)), toks);
        }
    }
}
