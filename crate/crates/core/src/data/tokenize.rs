const LEADING: &[char] = &['(', '[', '{', '"', '\'', '`'];
const TRAILING: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '}', '"', '\''];

/// Splits on whitespace, then peels punctuation off the ends of each word.
///
/// A trailing period stays attached when the word already contains a period
/// (`U.S.`), and all-punctuation chunks such as `...` are kept whole.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk.chars().all(|c| !c.is_alphanumeric()) {
            out.push(chunk.to_string());
            continue;
        }
        let mut word = chunk;
        while let Some(c) = word.chars().next().filter(|c| LEADING.contains(c)) {
            out.push(c.to_string());
            word = &word[c.len_utf8()..];
        }
        let mut tail = Vec::new();
        let stem = word.trim_end_matches('.');
        if word.len() - stem.len() >= 2 && !stem.is_empty() {
            tail.push(word[stem.len()..].to_string());
            word = stem;
        }
        while let Some(c) = word.chars().next_back().filter(|c| TRAILING.contains(c)) {
            let rest = &word[..word.len() - c.len_utf8()];
            if c == '.' && rest.contains('.') {
                break;
            }
            tail.push(c.to_string());
            word = rest;
        }
        if !word.is_empty() {
            out.push(word.to_string());
        }
        out.extend(tail.into_iter().rev());
    }
    out
}
