//! Line-oriented lexers for Python-like and Java-like source text.
//!
//! Each token carries a coarse [`SyntaxType`]. Comments and blank lines are
//! dropped, string literals are kept whole (quotes included), and every
//! remaining physical line becomes one logical line of tokens. Indentation
//! is not tokenized and implicit joining inside brackets is not performed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coarse syntactic class of a lexeme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SyntaxType {
    Keyword,
    Identifier,
    Operator,
    Literal,
    Separator,
    Other,
}

impl SyntaxType {
    pub const ALL: [SyntaxType; 6] = [
        SyntaxType::Keyword,
        SyntaxType::Identifier,
        SyntaxType::Operator,
        SyntaxType::Literal,
        SyntaxType::Separator,
        SyntaxType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntaxType::Keyword => "Keyword",
            SyntaxType::Identifier => "Identifier",
            SyntaxType::Operator => "Operator",
            SyntaxType::Literal => "Literal",
            SyntaxType::Separator => "Separator",
            SyntaxType::Other => "Other",
        }
    }
}

impl fmt::Display for SyntaxType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntaxType {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SyntaxType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| LexError::UnknownSyntaxType(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[serde(alias = "python-like")]
    Python,
    #[serde(alias = "java-like")]
    Java,
}

impl FromStr for Language {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "python" | "py" | "pythonlike" => Ok(Language::Python),
            "java" | "javalike" => Ok(Language::Java),
            other => Err(LexError::UnsupportedLanguage(other.to_string())),
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Python => "python",
            Language::Java => "java",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub stype: SyntaxType,
    /// 1-based physical line on which the token starts.
    pub line_no: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexedFile {
    pub language: Language,
    pub lines: Vec<Vec<Token>>,
}

impl LexedFile {
    pub fn line_count(&self) -> usize {
        self.lines.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated string literal starting on line {line}")]
    UnterminatedString { line: usize },
    #[error("unsupported language: {0}")]
    UnsupportedLanguage(String),
    #[error("unknown syntax type: {0}")]
    UnknownSyntaxType(String),
}

const PYTHON_KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class",
    "continue", "def", "del", "elif", "else", "except", "finally", "for", "from", "global",
    "if", "import", "in", "is", "lambda", "nonlocal", "not", "or", "pass", "raise", "return",
    "try", "while", "with", "yield",
];

const JAVA_KEYWORDS: &[&str] = &[
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const",
    "continue", "default", "do", "double", "else", "enum", "extends", "final", "finally",
    "float", "for", "goto", "if", "implements", "import", "instanceof", "int", "interface",
    "long", "native", "new", "package", "private", "protected", "public", "return", "short",
    "static", "strictfp", "super", "switch", "synchronized", "this", "throw", "throws",
    "transient", "try", "void", "volatile", "while",
];

// Java's boolean and null literals are not reserved words.
const JAVA_LITERAL_WORDS: &[&str] = &["true", "false", "null"];

const PYTHON_OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "->", "+=", "-=", "*=", "/=", "%=", "@=", "&=", "|=", "^=",
    "**", "//", "<<", ">>", "<=", ">=", "==", "!=", ":=", "+", "-", "*", "/", "%", "@", "&",
    "|", "^", "~", "<", ">", "=",
];

const PYTHON_SEPARATORS: &[&str] = &["...", "(", ")", "[", "]", "{", "}", ",", ":", ";", "."];

const JAVA_OPERATORS: &[&str] = &[
    ">>>=", "<<=", ">>=", ">>>", "->", "::", "++", "--", "&&", "||", "==", "!=", "<=", ">=",
    "+=", "-=", "*=", "/=", "&=", "|=", "^=", "%=", "<<", ">>", "=", ">", "<", "!", "~", "?",
    ":", "+", "-", "*", "/", "&", "|", "^", "%",
];

const JAVA_SEPARATORS: &[&str] = &["...", "(", ")", "{", "}", "[", "]", ";", ",", ".", "@"];

struct Tables {
    keywords: &'static [&'static str],
    literal_words: &'static [&'static str],
    operators: &'static [&'static str],
    separators: &'static [&'static str],
}

fn tables(language: Language) -> Tables {
    match language {
        Language::Python => Tables {
            keywords: PYTHON_KEYWORDS,
            literal_words: &[],
            operators: PYTHON_OPERATORS,
            separators: PYTHON_SEPARATORS,
        },
        Language::Java => Tables {
            keywords: JAVA_KEYWORDS,
            literal_words: JAVA_LITERAL_WORDS,
            operators: JAVA_OPERATORS,
            separators: JAVA_SEPARATORS,
        },
    }
}

/// True if `lexeme` is in the language's reserved-word table.
pub fn is_keyword(lexeme: &str, language: Language) -> bool {
    tables(language).keywords.contains(&lexeme)
}

fn is_ident_start(c: char, language: Language) -> bool {
    c == '_' || c.is_alphabetic() || (language == Language::Java && c == '$')
}

fn is_ident_continue(c: char, language: Language) -> bool {
    c == '_' || c.is_alphanumeric() || (language == Language::Java && c == '$')
}

fn is_word(lexeme: &str, language: Language) -> bool {
    let mut chars = lexeme.chars();
    match chars.next() {
        Some(c) if is_ident_start(c, language) => chars.all(|c| is_ident_continue(c, language)),
        _ => false,
    }
}

fn looks_numeric(lexeme: &str) -> bool {
    let mut chars = lexeme.chars();
    match chars.next() {
        Some(c) if c.is_ascii_digit() => true,
        Some('.') => chars.next().is_some_and(|c| c.is_ascii_digit()),
        _ => false,
    }
}

fn looks_string(lexeme: &str, language: Language) -> bool {
    let body = match language {
        Language::Python => lexeme.trim_start_matches(|c: char| "rRbBuUfF".contains(c)),
        Language::Java => lexeme,
    };
    let quote = match body.chars().next() {
        Some(q @ ('"' | '\'')) => q,
        _ => return false,
    };
    body.len() >= 2 && body.ends_with(quote)
}

/// Classify a single lexeme. Keywords take precedence over the identifier
/// rule; anything unrecognised is [`SyntaxType::Other`].
pub fn syntax_type_of(lexeme: &str, language: Language) -> SyntaxType {
    let t = tables(language);
    if t.keywords.contains(&lexeme) {
        SyntaxType::Keyword
    } else if t.literal_words.contains(&lexeme) || looks_numeric(lexeme) {
        SyntaxType::Literal
    } else if looks_string(lexeme, language) {
        SyntaxType::Literal
    } else if is_word(lexeme, language) {
        SyntaxType::Identifier
    } else if t.operators.contains(&lexeme) {
        SyntaxType::Operator
    } else if t.separators.contains(&lexeme) {
        SyntaxType::Separator
    } else {
        SyntaxType::Other
    }
}

/// A non-fatal problem found while lexing in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: usize,
    pub error: LexError,
}

/// Lex `source` strictly: the first unterminated string is an error.
pub fn lex(source: &str, language: Language) -> Result<LexedFile, LexError> {
    let (file, diags) = lex_impl(source, language);
    match diags.into_iter().next() {
        Some(d) => Err(d.error),
        None => Ok(file),
    }
}

/// Lex `source`, skipping any line that holds an unterminated string.
pub fn lex_lenient(source: &str, language: Language) -> (LexedFile, Vec<Diagnostic>) {
    lex_impl(source, language)
}

/// Parse a language name and lex with it.
pub fn lex_named(source: &str, language: &str) -> Result<LexedFile, LexError> {
    lex(source, language.parse()?)
}

/// Join token texts with single spaces.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

struct Scanner {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    language: Language,
    tables: Tables,
}

enum Scan {
    Token(String, SyntaxType),
    Newline,
    Skip,
    Unterminated { start_line: usize },
}

impl Scanner {
    fn peek(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).copied()
    }

    fn starts_with(&self, s: &str) -> bool {
        s.chars().enumerate().all(|(i, c)| self.peek(i) == Some(c))
    }

    fn next(&mut self) -> Option<Scan> {
        let c = self.peek(0)?;
        if c == '\n' {
            self.pos += 1;
            self.line += 1;
            return Some(Scan::Newline);
        }
        if c.is_whitespace() {
            self.pos += 1;
            return Some(Scan::Skip);
        }
        match self.language {
            Language::Python if c == '#' => {
                self.skip_to_eol();
                return Some(Scan::Skip);
            }
            Language::Java if self.starts_with("//") => {
                self.skip_to_eol();
                return Some(Scan::Skip);
            }
            Language::Java if self.starts_with("/*") => {
                return Some(self.block_comment());
            }
            _ => {}
        }
        if let Some(prefix_len) = self.string_start() {
            return Some(self.string(prefix_len));
        }
        if c.is_ascii_digit() || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit())) {
            return Some(self.number());
        }
        if is_ident_start(c, self.language) {
            let start = self.pos;
            while self.peek(0).is_some_and(|c| is_ident_continue(c, self.language)) {
                self.pos += 1;
            }
            let text: String = self.chars[start..self.pos].iter().collect();
            let stype = syntax_type_of(&text, self.language);
            return Some(Scan::Token(text, stype));
        }
        // Operator and separator tables are disjoint; take the longest match.
        let op = longest_match(self.tables.operators, self);
        let sep = longest_match(self.tables.separators, self);
        let best = match (op, sep) {
            (Some(o), Some(s)) if s.len() > o.len() => Some((s, SyntaxType::Separator)),
            (Some(o), _) => Some((o, SyntaxType::Operator)),
            (None, Some(s)) => Some((s, SyntaxType::Separator)),
            (None, None) => None,
        };
        if let Some((text, stype)) = best {
            self.pos += text.chars().count();
            return Some(Scan::Token(text.to_string(), stype));
        }
        self.pos += 1;
        Some(Scan::Token(c.to_string(), SyntaxType::Other))
    }

    fn skip_to_eol(&mut self) {
        while self.peek(0).is_some_and(|c| c != '\n') {
            self.pos += 1;
        }
    }

    /// A comment spanning lines still ends the logical line it started on.
    fn block_comment(&mut self) -> Scan {
        self.pos += 2;
        let mut crossed = false;
        while let Some(c) = self.peek(0) {
            if c == '*' && self.peek(1) == Some('/') {
                self.pos += 2;
                break;
            }
            if c == '\n' {
                self.line += 1;
                crossed = true;
            }
            self.pos += 1;
        }
        // An unclosed block comment swallows the rest of the input.
        if crossed {
            Scan::Newline
        } else {
            Scan::Skip
        }
    }

    /// Returns the prefix length if a string literal starts here.
    fn string_start(&self) -> Option<usize> {
        let c = self.peek(0)?;
        if c == '"' || c == '\'' {
            return Some(0);
        }
        if self.language != Language::Python {
            return None;
        }
        let mut n = 0;
        while n < 2 && self.peek(n).is_some_and(|c| "rRbBuUfF".contains(c)) {
            n += 1;
            if matches!(self.peek(n), Some('"' | '\'')) {
                return Some(n);
            }
        }
        None
    }

    fn string(&mut self, prefix_len: usize) -> Scan {
        let start = self.pos;
        let start_line = self.line;
        self.pos += prefix_len;
        let quote = self.peek(0).unwrap_or('"');
        let triple = self.peek(1) == Some(quote) && self.peek(2) == Some(quote);
        let triple_allowed = match self.language {
            Language::Python => true,
            Language::Java => quote == '"',
        };
        if triple && triple_allowed {
            self.pos += 3;
            let mut text: String = self.chars[start..self.pos].iter().collect();
            loop {
                match self.peek(0) {
                    None => return Scan::Unterminated { start_line },
                    Some('\\') => {
                        text.push('\\');
                        self.pos += 1;
                        match self.peek(0) {
                            Some('\n') => {
                                text.push('n');
                                self.line += 1;
                            }
                            Some(c) => text.push(c),
                            None => return Scan::Unterminated { start_line },
                        }
                        self.pos += 1;
                    }
                    Some(c) if c == quote
                        && self.peek(1) == Some(quote)
                        && self.peek(2) == Some(quote) =>
                    {
                        self.pos += 3;
                        text.extend([quote; 3]);
                        return Scan::Token(text, SyntaxType::Literal);
                    }
                    Some('\n') => {
                        // Tokens never contain newlines; keep the literal on one line.
                        text.push_str("\\n");
                        self.line += 1;
                        self.pos += 1;
                    }
                    Some(c) => {
                        text.push(c);
                        self.pos += 1;
                    }
                }
            }
        }
        self.pos += 1;
        loop {
            match self.peek(0) {
                None | Some('\n') => return Scan::Unterminated { start_line },
                Some('\\') => {
                    self.pos += 1;
                    if self.peek(0).is_some_and(|c| c != '\n') {
                        self.pos += 1;
                    }
                }
                Some(c) if c == quote => {
                    self.pos += 1;
                    let text: String = self.chars[start..self.pos].iter().collect();
                    return Scan::Token(text, SyntaxType::Literal);
                }
                Some(_) => self.pos += 1,
            }
        }
    }

    fn number(&mut self) -> Scan {
        let start = self.pos;
        let hex = self.peek(0) == Some('0') && matches!(self.peek(1), Some('x' | 'X'));
        while let Some(c) = self.peek(0) {
            if c.is_ascii_alphanumeric() || c == '_' {
                let exp = !hex && (c == 'e' || c == 'E');
                self.pos += 1;
                if exp && matches!(self.peek(0), Some('+' | '-'))
                    && self.peek(1).is_some_and(|d| d.is_ascii_digit())
                {
                    self.pos += 1;
                }
            } else if c == '.' && !hex && !self.chars[start..self.pos].contains(&'.') && {
                let next = self.peek(1);
                next.is_some_and(|d| d.is_ascii_digit())
                    || next.is_none_or(|d| d != '.' && !is_ident_start(d, self.language))
            } {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        Scan::Token(text, SyntaxType::Literal)
    }
}

fn longest_match(table: &'static [&'static str], sc: &Scanner) -> Option<&'static str> {
    table
        .iter()
        .filter(|op| sc.starts_with(op))
        .max_by_key(|op| op.len())
        .copied()
}

fn lex_impl(source: &str, language: Language) -> (LexedFile, Vec<Diagnostic>) {
    let mut sc = Scanner {
        chars: source.chars().collect(),
        pos: 0,
        line: 1,
        language,
        tables: tables(language),
    };
    let mut lines: Vec<Vec<Token>> = Vec::new();
    let mut diags = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut poisoned = false;

    let flush = |current: &mut Vec<Token>, poisoned: &mut bool, lines: &mut Vec<Vec<Token>>| {
        if !*poisoned && !current.is_empty() {
            lines.push(std::mem::take(current));
        }
        current.clear();
        *poisoned = false;
    };

    while let Some(item) = {
        let line_before = sc.line;
        sc.next().map(|s| (s, line_before))
    } {
        match item {
            (Scan::Newline, _) => flush(&mut current, &mut poisoned, &mut lines),
            (Scan::Skip, _) => {}
            (Scan::Token(text, stype), line_no) => current.push(Token { text, stype, line_no }),
            (Scan::Unterminated { start_line }, _) => {
                diags.push(Diagnostic {
                    line: start_line,
                    error: LexError::UnterminatedString { line: start_line },
                });
                poisoned = true;
                // Resume on the line after the one holding the opening quote.
                let resume = sc.chars[..]
                    .iter()
                    .enumerate()
                    .skip(0)
                    .filter(|&(_, &c)| c == '\n')
                    .map(|(i, _)| i)
                    .nth(start_line - 1);
                match resume {
                    Some(nl) => {
                        sc.pos = nl + 1;
                        sc.line = start_line + 1;
                    }
                    None => sc.pos = sc.chars.len(),
                }
                flush(&mut current, &mut poisoned, &mut lines);
            }
        }
    }
    flush(&mut current, &mut poisoned, &mut lines);
    (LexedFile { language, lines }, diags)
}
