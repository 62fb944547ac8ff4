/// Lowercases `text`, splits on whitespace and makes every ASCII punctuation
/// character a token of its own.
///
/// ```
/// assert_eq!(cada::corpus::tokenize("Hi, Peter!"), ["hi", ",", "peter", "!"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if c.is_ascii_punctuation() {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_string());
        } else {
            current.extend(c.to_lowercase());
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

/// Joins tokens back into a display string.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join(" ")
}
