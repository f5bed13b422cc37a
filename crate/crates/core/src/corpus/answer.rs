const BOXED_OPEN: &str = "\\boxed{";

/// Canonical form of a final answer used for voting and correctness checks.
///
/// Lowercases, strips enclosing `\boxed{...}` wrappers, collapses runs of
/// whitespace and drops trailing fractional zeros from plain decimals
/// (`"3.50"` becomes `"3.5"`, `"2.0"` becomes `"2"`).
pub fn normalize_answer(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let mut s = lowered.trim();
    while let Some(inner) = strip_boxed(s) {
        s = inner.trim();
    }
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if is_plain_decimal(&collapsed) && collapsed.contains('.') {
        let mut t = collapsed.trim_end_matches('0').trim_end_matches('.').to_string();
        if !t.bytes().any(|b| b.is_ascii_digit()) {
            t.push('0');
        }
        return t;
    }
    collapsed
}

/// Returns the wrapper contents when `s` is exactly one `\boxed{...}` group.
fn strip_boxed(s: &str) -> Option<&str> {
    let body = s.strip_prefix(BOXED_OPEN)?;
    if !body.ends_with('}') {
        return None;
    }
    let mut depth = 1usize;
    for (i, c) in body.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    // the wrapper must close on the final character
                    return (i == body.len() - 1).then(|| &body[..i]);
                }
            }
            _ => {}
        }
    }
    None
}

fn is_plain_decimal(s: &str) -> bool {
    let digits = s.strip_prefix(['-', '+']).unwrap_or(s);
    let mut seen_digit = false;
    let mut seen_dot = false;
    for c in digits.chars() {
        match c {
            '0'..='9' => seen_digit = true,
            '.' if !seen_dot => seen_dot = true,
            _ => return false,
        }
    }
    seen_digit
}
