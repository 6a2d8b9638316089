//! Declaration-header extraction for signatures-only snapshots.
//!
//! This is a line grammar, not a parser. A trimmed line opens a declaration if
//! it matches one of:
//!
//! - kotlin: `<modifiers> fun [<T>] [Receiver.]name(...)`
//! - python: `[async] def name(...)`
//! - java: `[@Annotation] <modifiers> <type> name(...)`
//!
//! The signature is the line text up to the parenthesis that closes the
//! parameter list. Lines whose parameter list does not close on the same line
//! are skipped.

const KOTLIN_MODIFIERS: &[&str] = &[
    "public", "private", "protected", "internal", "override", "open", "abstract", "final",
    "suspend", "inline", "infix", "operator", "tailrec", "external", "actual", "expect",
];

const JAVA_NON_DECL_STARTS: &[&str] = &[
    "return", "new", "throw", "if", "for", "while", "switch", "catch", "else", "do", "try",
    "case", "synchronized", "assert", "yield", "super", "this", "import", "package",
];

/// Declaration headers in source order. Never fails; unknown syntax yields
/// an empty or partial list.
pub fn extract_signatures(source: &str, language_hint: &str) -> Vec<String> {
    let matcher: fn(&str) -> Option<usize> = match language_hint {
        "kotlin" => kotlin_decl,
        "python" => python_decl,
        "java" => java_decl,
        _ => generic_decl,
    };
    source
        .lines()
        .filter_map(|line| {
            let trimmed = line.trim();
            matcher(trimmed).map(|end| trimmed[..end].to_owned())
        })
        .collect()
}

fn generic_decl(line: &str) -> Option<usize> {
    kotlin_decl(line)
        .or_else(|| python_decl(line))
        .or_else(|| java_decl(line))
}

fn is_ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_' || c == '$'
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if is_ident_start(c))
        && chars.all(|c| c.is_alphanumeric() || c == '_' || c == '$')
}

/// Byte index just past the `)` matching the `(` at `open`.
fn close_paren(line: &str, open: usize) -> Option<usize> {
    let mut depth = 0usize;
    for (i, c) in line[open..].char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return Some(open + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn kotlin_decl(line: &str) -> Option<usize> {
    let fun_at = find_keyword(line, "fun")?;
    // everything before `fun` must be modifiers
    if !line[..fun_at]
        .split_whitespace()
        .all(|tok| KOTLIN_MODIFIERS.contains(&tok))
    {
        return None;
    }
    let mut rest = line[fun_at + 3..].trim_start();
    if !line[fun_at + 3..].starts_with(char::is_whitespace) {
        return None;
    }
    if rest.starts_with('<') {
        let end = matching_angle(rest)?;
        rest = rest[end..].trim_start();
    }
    let open_rel = rest.find('(')?;
    let name = rest[..open_rel].trim_end();
    let name_ok = (name.starts_with('`') && name.ends_with('`') && name.len() > 2)
        || kotlin_name_ok(name);
    if !name_ok {
        return None;
    }
    let open = line.len() - rest.len() + open_rel;
    close_paren(line, open)
}

/// `name` or `Receiver<T>.name`.
fn kotlin_name_ok(name: &str) -> bool {
    let (receiver, simple) = match name.rfind('.') {
        Some(dot) => (&name[..dot], &name[dot + 1..]),
        None => ("", name),
    };
    is_ident(simple)
        && receiver
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '.' | '<' | '>' | ',' | ' ' | '?' | '*'))
}

fn python_decl(line: &str) -> Option<usize> {
    let rest = line.strip_prefix("async ").map(str::trim_start).unwrap_or(line);
    let rest = rest.strip_prefix("def")?;
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    let rest = rest.trim_start();
    let open_rel = rest.find('(')?;
    if !is_ident(rest[..open_rel].trim_end()) {
        return None;
    }
    let open = line.len() - rest.len() + open_rel;
    close_paren(line, open)
}

fn java_decl(line: &str) -> Option<usize> {
    let open = line.find('(')?;
    let prefix = &line[..open];
    if prefix.contains(['=', '.', ';', '"', '\'', '+', '-', '*', '/', '!', '|', '&', '{', '}']) {
        return None;
    }
    let mut tokens = split_top_level(prefix);
    while tokens.first().is_some_and(|t| t.starts_with('@')) {
        tokens.remove(0);
    }
    if tokens.len() < 2 {
        return None;
    }
    if JAVA_NON_DECL_STARTS.contains(&tokens[0]) {
        return None;
    }
    let name = tokens.last()?;
    if !is_ident(name) {
        return None;
    }
    let type_ok = tokens[..tokens.len() - 1].iter().all(|t| {
        t.chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '_' | '$' | '<' | '>' | '[' | ']' | '?' | ' ' | ','))
    });
    if !type_ok {
        return None;
    }
    close_paren(line, open)
}

/// Split on whitespace outside `<...>`.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start: Option<usize> = None;
    for (i, c) in s.char_indices() {
        match c {
            '<' => depth += 1,
            '>' => depth -= 1,
            _ => {}
        }
        if c.is_whitespace() && depth == 0 {
            if let Some(st) = start.take() {
                out.push(&s[st..i]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(st) = start {
        out.push(&s[st..]);
    }
    out
}

fn matching_angle(s: &str) -> Option<usize> {
    let mut depth = 0;
    for (i, c) in s.char_indices() {
        match c {
            '<' => depth += 1,
            '>' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// Position of `kw` as a whole word.
fn find_keyword(line: &str, kw: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = line[from..].find(kw) {
        let at = from + rel;
        let before_ok = at == 0 || line[..at].ends_with(char::is_whitespace);
        let after_ok = line[at + kw.len()..].starts_with(char::is_whitespace);
        if before_ok && after_ok {
            return Some(at);
        }
        from = at + kw.len();
    }
    None
}
