//! Lowercase whitespace/punctuation tokenisation and value normalisation.

/// Splits on whitespace and emits every ASCII punctuation character as its
/// own token. Letters are lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_ascii_punctuation() {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Canonical form of a slot value: its tokens joined by single spaces.
pub fn normalize_value(value: &str) -> String {
    tokenize(value).join(" ")
}

/// Start index of the first occurrence of `needle` inside `haystack`.
pub fn find_span<S: AsRef<str>>(haystack: &[S], needle: &[S]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .find(|&i| needle.iter().zip(&haystack[i..]).all(|(a, b)| a.as_ref() == b.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("Book it, please!"), vec!["book", "it", ",", "please", "!"]);
        assert_eq!(tokenize("hotel-pricerange"), vec!["hotel", "-", "pricerange"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn normalisation_collapses_whitespace() {
        assert_eq!(normalize_value("  Acorn   Guest House "), "acorn guest house");
        assert_eq!(normalize_value("b&b"), "b & b");
    }

    #[test]
    fn span_search() {
        let hay = ["a", "cheap", "hotel", "cheap"];
        assert_eq!(find_span(&hay, &["cheap"]), Some(1));
        assert_eq!(find_span(&hay, &["cheap", "hotel"]), Some(1));
        assert_eq!(find_span(&hay, &["hotel", "a"]), None);
    }
}
