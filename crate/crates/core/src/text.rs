//! Small text utilities shared by the response parsers.

/// Lowercases, trims and collapses internal whitespace runs to one space.
pub(crate) fn canonical(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Returns the first balanced block opened by `open` and closed by `close`,
/// skipping delimiters inside JSON string literals.
pub(crate) fn first_balanced(s: &str, open: char, close: char) -> Option<&str> {
    let mut search_from = 0;
    while let Some(rel) = s[search_from..].find(open) {
        let start = search_from + rel;
        if let Some(end) = balanced_end(&s[start..], open, close) {
            return Some(&s[start..start + end]);
        }
        search_from = start + open.len_utf8();
    }
    None
}

fn balanced_end(s: &str, open: char, close: char) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == open {
            depth += 1;
        } else if c == close {
            depth -= 1;
            if depth == 0 {
                return Some(i + c.len_utf8());
            }
        }
    }
    None
}

pub(crate) fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Case-insensitive containment.
pub(crate) fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}
