use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum Tok {
    Ident(String),
    Int(u64),
    Float(f64, bool),
    Punct(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
pub struct Token {
    pub tok: Tok,
    pub line: u32,
    pub col: u32,
}

// Longest first so that greedy matching works.
const PUNCTS: &[&str] = &[
    "<<=", ">>=", "&&", "||", "==", "!=", "<=", ">=", "<<", ">>", "++", "--", "+=", "-=", "*=",
    "/=", "%=", "&=", "|=", "^=", "(", ")", "{", "}", ";", ",", "+", "-", "*", "/", "%", "&", "|",
    "^", "~", "!", "<", ">", "=",
];

pub fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let mut at_line_start = true;

    macro_rules! bump {
        () => {{
            if bytes[i] == b'\n' {
                line += 1;
                col = 1;
                at_line_start = true;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' || c.is_ascii_whitespace() {
            bump!();
            continue;
        }
        // Preprocessor lines are skipped whole.
        if c == b'#' && at_line_start {
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            continue;
        }
        at_line_start = false;
        if c == b'/' && bytes.get(i + 1) == Some(&b'/') {
            while i < bytes.len() && bytes[i] != b'\n' {
                bump!();
            }
            continue;
        }
        if c == b'/' && bytes.get(i + 1) == Some(&b'*') {
            let (l0, c0) = (line, col);
            bump!();
            bump!();
            loop {
                if i >= bytes.len() {
                    return Err(ParseError::new(l0, c0, "unterminated comment"));
                }
                if bytes[i] == b'*' && bytes.get(i + 1) == Some(&b'/') {
                    bump!();
                    bump!();
                    break;
                }
                bump!();
            }
            continue;
        }
        let (tl, tc) = (line, col);
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                bump!();
            }
            out.push(Token {
                tok: Tok::Ident(src[start..i].to_string()),
                line: tl,
                col: tc,
            });
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            let tok = if c == b'0' && matches!(bytes.get(i + 1), Some(b'x') | Some(b'X')) {
                bump!();
                bump!();
                let hs = i;
                while i < bytes.len() && bytes[i].is_ascii_hexdigit() {
                    bump!();
                }
                let v = u64::from_str_radix(&src[hs..i], 16)
                    .map_err(|_| ParseError::new(tl, tc, "bad hex literal"))?;
                Tok::Int(v)
            } else {
                let mut is_float = false;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    bump!();
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    is_float = true;
                    bump!();
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        bump!();
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    is_float = true;
                    bump!();
                    if i < bytes.len() && (bytes[i] == b'+' || bytes[i] == b'-') {
                        bump!();
                    }
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        bump!();
                    }
                }
                let text = &src[start..i];
                if is_float {
                    let v: f64 = text
                        .parse()
                        .map_err(|_| ParseError::new(tl, tc, "bad float literal"))?;
                    let single = i < bytes.len() && (bytes[i] == b'f' || bytes[i] == b'F');
                    if single {
                        bump!();
                    }
                    Tok::Float(v, single)
                } else {
                    let v: u64 = text
                        .parse()
                        .map_err(|_| ParseError::new(tl, tc, "integer literal too large"))?;
                    Tok::Int(v)
                }
            };
            // Integer suffixes carry no meaning here.
            if matches!(tok, Tok::Int(_)) {
                while i < bytes.len() && matches!(bytes[i], b'u' | b'U' | b'l' | b'L') {
                    bump!();
                }
            }
            if i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                return Err(ParseError::new(tl, tc, "malformed numeric literal"));
            }
            out.push(Token { tok, line: tl, col: tc });
            continue;
        }
        if c == b'\'' {
            bump!();
            let v = match bytes.get(i) {
                Some(b'\\') => {
                    bump!();
                    let e = *bytes
                        .get(i)
                        .ok_or_else(|| ParseError::new(tl, tc, "unterminated char literal"))?;
                    bump!();
                    match e {
                        b'n' => b'\n',
                        b't' => b'\t',
                        b'r' => b'\r',
                        b'0' => 0,
                        b'\\' => b'\\',
                        b'\'' => b'\'',
                        _ => return Err(ParseError::new(tl, tc, "unknown escape")),
                    }
                }
                Some(&b) if b != b'\'' && b != b'\n' => {
                    bump!();
                    b
                }
                _ => return Err(ParseError::new(tl, tc, "bad char literal")),
            };
            if bytes.get(i) != Some(&b'\'') {
                return Err(ParseError::new(tl, tc, "unterminated char literal"));
            }
            bump!();
            out.push(Token {
                tok: Tok::Int(u64::from(v)),
                line: tl,
                col: tc,
            });
            continue;
        }
        let rest = &src[i..];
        match PUNCTS.iter().find(|p| rest.starts_with(**p)) {
            Some(p) => {
                for _ in 0..p.len() {
                    bump!();
                }
                out.push(Token {
                    tok: Tok::Punct(p),
                    line: tl,
                    col: tc,
                });
            }
            None => {
                return Err(ParseError::new(
                    tl,
                    tc,
                    format!("unexpected character {:?}", rest.chars().next().unwrap()),
                ))
            }
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}
