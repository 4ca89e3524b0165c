//! Versioned prompt templates.

/// A prompt template with `{name}` placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub version: &'static str,
    pub body: &'static str,
}

pub const CNM_EXTRACT: Template = Template {
    name: "cnm_extract",
    version: "v1",
    body: include_str!("../prompts/cnm_extract.v1.txt"),
};

pub const CONTINUITY: Template = Template {
    name: "continuity",
    version: "v1",
    body: include_str!("../prompts/continuity.v1.txt"),
};

pub const ANSWER: Template = Template {
    name: "answer",
    version: "v1",
    body: include_str!("../prompts/answer.v1.txt"),
};

pub const ALL: [Template; 3] = [CNM_EXTRACT, CONTINUITY, ANSWER];

impl Template {
    pub fn tag(&self) -> String {
        format!("{}/{}", self.name, self.version)
    }

    /// Substitutes placeholders in a single pass, so values that happen to
    /// contain `{other}` are inserted literally. Unknown `{...}` groups are
    /// left untouched.
    pub fn fill(&self, values: &[(&str, &str)]) -> String {
        let body = self.body;
        let mut out = String::with_capacity(body.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = body;
        'scan: while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open..];
            for (key, value) in values {
                let needle_len = key.len() + 2;
                if tail.len() >= needle_len
                    && tail[1..].starts_with(key)
                    && tail[1 + key.len()..].starts_with('}')
                {
                    out.push_str(value);
                    rest = &tail[needle_len..];
                    continue 'scan;
                }
            }
            out.push('{');
            rest = &tail[1..];
        }
        out.push_str(rest);
        out
    }
}

/// First `n` characters of `text`.
pub fn truncate_chars(text: &str, n: usize) -> &str {
    match text.char_indices().nth(n) {
        Some((byte, _)) => &text[..byte],
        None => text,
    }
}

/// Last `n` characters of `text`.
pub fn tail_chars(text: &str, n: usize) -> &str {
    let count = text.chars().count();
    if count <= n {
        return text;
    }
    let (byte, _) = text.char_indices().nth(count - n).expect("index within text");
    &text[byte..]
}
