//! Parsers turning free-form completions into verdicts and topic lists.

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("ambiguous verdict: {0:?}")]
pub struct AmbiguousVerdict(pub String);

/// Reads a yes/no answer from the start of a completion.
pub fn parse_boolean(text: &str) -> Result<bool, AmbiguousVerdict> {
    let trimmed = text.trim_start_matches(|c: char| {
        c.is_whitespace() || matches!(c, '*' | '"' | '\'' | '`' | '[' | '(' | '“' | '「')
    });
    if trimmed.starts_with('是') || trimmed.starts_with('对') {
        return Ok(true);
    }
    if trimmed.starts_with('否') || trimmed.starts_with('不') {
        return Ok(false);
    }
    let word: String = trimmed
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" | "true" => Ok(true),
        "no" | "false" => Ok(false),
        _ => Err(AmbiguousVerdict(text.chars().take(80).collect())),
    }
}

fn strip_marker(item: &str) -> &str {
    let item = item.trim();
    let item = item.trim_start_matches(['-', '*', '•', '·']).trim_start();
    // "1." "2)" "(3)" "4、"
    let without_paren = item.strip_prefix('(').unwrap_or(item);
    let digits = without_paren.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &without_paren[digits..];
        for sep in ['.', ')', '、', ':', '：'] {
            if let Some(r) = rest.strip_prefix(sep) {
                return r.trim();
            }
        }
    }
    item
}

fn clean(item: &str) -> String {
    strip_marker(item)
        .trim_matches(|c: char| c.is_whitespace() || matches!(c, '"' | '\'' | '`' | '“' | '”'))
        .trim_end_matches(['.', '。', ';', '；', ',', '，'])
        .trim()
        .to_string()
}

/// One topic per line, or a single delimited line. Trims list markers, drops
/// empties and keeps the first of each duplicate.
pub fn parse_topic_list(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let raw: Vec<&str> = if lines.len() == 1 {
        lines[0].split([',', ';', '，', '；', '、']).collect()
    } else {
        lines
    };
    let mut out: Vec<String> = Vec::new();
    for item in raw {
        let topic = clean(item);
        if !topic.is_empty() && !out.contains(&topic) {
            out.push(topic);
        }
    }
    out
}
