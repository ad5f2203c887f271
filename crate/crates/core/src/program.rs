//! Functional program notation: parsing, rendering, anonymization and
//! parenthesis repair.
//!
//! Programs look like `answer (state (traverse_1 (riverid ("mississippi"))))`:
//! a symbol optionally followed by a parenthesized, comma-separated argument
//! list. Quoted segments and numerals are value literals. A symbol ending in
//! `=` is a keyword whose single argument follows without parentheses
//! (`name= LIKE (David Lax)`).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SyntaxError;

/// Symbol of the synthetic node above every program.
pub const ROOT_SYMBOL: &str = "<root>";
/// Placeholder for string literals after anonymization.
pub const STRING_CONSTANT: &str = "string";
/// Placeholder for numeric literals after anonymization.
pub const NUMBER_CONSTANT: &str = "number";

/// Per-dataset parsing options.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialect {
    #[serde(default)]
    pub name: Option<String>,
    /// Parent symbols whose bare leaf arguments are values, e.g. `LIKE` in
    /// `LIKE (David Lax)`. A value slot may hold several whitespace-separated
    /// words; they become one string literal.
    #[serde(default)]
    pub value_parents: Vec<String>,
}

impl Dialect {
    pub fn with_value_parents<I, S>(parents: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self { name: None, value_parents: parents.into_iter().map(Into::into).collect() }
    }

    fn is_value_parent(&self, symbol: &str) -> bool {
        self.value_parents.iter().any(|p| p == symbol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Function,
    /// `key=` prefix taking exactly one argument without parentheses.
    Keyword,
    ValueString,
    ValueNumber,
}

impl NodeKind {
    pub fn is_value(self) -> bool {
        matches!(self, NodeKind::ValueString | NodeKind::ValueNumber)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AstNode {
    /// Source spelling. Quoted literals keep their quotes so that rendering
    /// reproduces the program.
    pub symbol: String,
    pub kind: NodeKind,
    pub children: Vec<AstNode>,
}

impl AstNode {
    fn leaf(symbol: impl Into<String>, kind: NodeKind) -> Self {
        Self { symbol: symbol.into(), kind, children: Vec::new() }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_into(&mut out);
        out
    }

    fn render_into(&self, out: &mut String) {
        out.push_str(&self.symbol);
        match self.kind {
            NodeKind::Keyword => {
                for child in &self.children {
                    out.push(' ');
                    child.render_into(out);
                }
            }
            _ if !self.children.is_empty() => {
                out.push_str(" (");
                for (i, child) in self.children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    child.render_into(out);
                }
                out.push(')');
            }
            _ => {}
        }
    }

    fn anonymized(&self) -> AstNode {
        let symbol = match self.kind {
            NodeKind::ValueString => STRING_CONSTANT.to_string(),
            NodeKind::ValueNumber => NUMBER_CONSTANT.to_string(),
            _ => self.symbol.clone(),
        };
        AstNode { symbol, kind: self.kind, children: self.children.iter().map(AstNode::anonymized).collect() }
    }

    fn collect_symbols<'a>(&'a self, out: &mut Vec<&'a str>) {
        out.push(&self.symbol);
        for child in &self.children {
            child.collect_symbols(out);
        }
    }
}

/// A parsed program hanging under a synthetic [`ROOT_SYMBOL`] node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramAst {
    root: AstNode,
    source_text: String,
}

impl ProgramAst {
    fn new(body: AstNode, source_text: String) -> Self {
        Self {
            root: AstNode { symbol: ROOT_SYMBOL.to_string(), kind: NodeKind::Function, children: vec![body] },
            source_text,
        }
    }

    /// The synthetic root; its only child is [`ProgramAst::body`].
    pub fn root(&self) -> &AstNode {
        &self.root
    }

    pub fn body(&self) -> &AstNode {
        &self.root.children[0]
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    /// Canonical text: `f (a, b)` spacing, keywords as `key= arg`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.body().render_into(&mut out);
        out
    }

    /// Program symbols in pre-order, root excluded.
    pub fn symbols(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.body().collect_symbols(&mut out);
        out
    }

    pub fn symbol_count(&self) -> usize {
        self.symbols().len()
    }
}

impl fmt::Display for ProgramAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Rendered anonymized program. Equal templates mean structural duplicates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Template(pub String);

impl Template {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn anonymize(ast: &ProgramAst) -> ProgramAst {
    let body = ast.body().anonymized();
    let text = {
        let mut s = String::new();
        body.render_into(&mut s);
        s
    };
    ProgramAst::new(body, text)
}

pub fn to_template(ast: &ProgramAst) -> Template {
    Template(anonymize(ast).render())
}

// ---------------------------------------------------------------------------
// Lexing and parsing

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Comma,
    Ident(&'a str),
    Quoted(&'a str),
}

fn is_delimiter(c: char) -> bool {
    c == '(' || c == ')' || c == ',' || c == '"' || c.is_whitespace()
}

fn lex(text: &str) -> Result<Vec<(usize, Token<'_>)>, SyntaxError> {
    let mut tokens = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        match c {
            '(' => {
                tokens.push((pos, Token::Open));
                chars.next();
            }
            ')' => {
                tokens.push((pos, Token::Close));
                chars.next();
            }
            ',' => {
                tokens.push((pos, Token::Comma));
                chars.next();
            }
            '"' => {
                chars.next();
                let mut end = None;
                let mut escaped = false;
                for (i, ch) in chars.by_ref() {
                    if escaped {
                        escaped = false;
                    } else if ch == '\\' {
                        escaped = true;
                    } else if ch == '"' {
                        end = Some(i);
                        break;
                    }
                }
                let end = end.ok_or_else(|| SyntaxError::new(pos, "unterminated string literal"))?;
                tokens.push((pos, Token::Quoted(&text[pos..=end])));
            }
            c if c.is_whitespace() => {
                chars.next();
            }
            _ => {
                let mut end = text.len();
                while let Some(&(i, ch)) = chars.peek() {
                    if is_delimiter(ch) {
                        end = i;
                        break;
                    }
                    chars.next();
                }
                tokens.push((pos, Token::Ident(&text[pos..end])));
            }
        }
    }
    Ok(tokens)
}

fn is_numeral(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    let mut parts = digits.splitn(2, '.');
    let int = parts.next().unwrap_or("");
    let frac = parts.next();
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

struct Parser<'t, 'd> {
    tokens: Vec<(usize, Token<'t>)>,
    pos: usize,
    end: usize,
    dialect: &'d Dialect,
}

impl<'t> Parser<'t, '_> {
    fn peek(&self) -> Option<&Token<'t>> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(p, _)| *p)
    }

    fn next(&mut self) -> Option<Token<'t>> {
        let t = self.tokens.get(self.pos).map(|(_, t)| t.clone());
        self.pos += 1;
        t
    }

    fn expr(&mut self, value_slot: bool) -> Result<AstNode, SyntaxError> {
        let at = self.offset();
        match self.next() {
            Some(Token::Quoted(raw)) => Ok(AstNode::leaf(raw, NodeKind::ValueString)),
            Some(Token::Ident(sym)) => {
                if sym.len() > 1 && sym.ends_with('=') {
                    let arg = self.expr(false)?;
                    return Ok(AstNode { symbol: sym.to_string(), kind: NodeKind::Keyword, children: vec![arg] });
                }
                match self.peek() {
                    Some(Token::Open) => self.call(sym),
                    Some(Token::Ident(_)) if value_slot => self.value_words(sym),
                    _ if value_slot && !is_numeral(sym) => Ok(AstNode::leaf(sym, NodeKind::ValueString)),
                    _ if is_numeral(sym) => Ok(AstNode::leaf(sym, NodeKind::ValueNumber)),
                    _ => Ok(AstNode::leaf(sym, NodeKind::Function)),
                }
            }
            Some(Token::Comma) | Some(Token::Close) => Err(SyntaxError::new(at, "empty argument slot")),
            Some(Token::Open) => Err(SyntaxError::new(at, "'(' without a function symbol")),
            None => Err(SyntaxError::new(at, "unexpected end of program")),
        }
    }

    /// Unquoted multi-word literal in a dialect value slot.
    fn value_words(&mut self, first: &str) -> Result<AstNode, SyntaxError> {
        let mut words = vec![first];
        while let Some(Token::Ident(w)) = self.peek() {
            words.push(w);
            self.pos += 1;
        }
        match self.peek() {
            Some(Token::Comma) | Some(Token::Close) | None => Ok(AstNode::leaf(words.join(" "), NodeKind::ValueString)),
            _ => Err(SyntaxError::new(self.offset(), "value literal followed by an argument list")),
        }
    }

    fn call(&mut self, symbol: &str) -> Result<AstNode, SyntaxError> {
        let open_at = self.offset();
        self.next(); // '('
        let value_slot = self.dialect.is_value_parent(symbol);
        let mut children = Vec::new();
        loop {
            children.push(self.expr(value_slot)?);
            let at = self.offset();
            match self.next() {
                Some(Token::Comma) => continue,
                Some(Token::Close) => break,
                Some(_) => return Err(SyntaxError::new(at, "expected ',' or ')'")),
                None => return Err(SyntaxError::new(open_at, "unbalanced parentheses: '(' never closed")),
            }
        }
        Ok(AstNode { symbol: symbol.to_string(), kind: NodeKind::Function, children })
    }
}

pub fn parse_program(text: &str, dialect: &Dialect) -> Result<ProgramAst, SyntaxError> {
    let tokens = lex(text)?;
    if tokens.is_empty() {
        return Err(SyntaxError::new(0, "empty program"));
    }
    let mut parser = Parser { tokens, pos: 0, end: text.len(), dialect };
    let body = parser.expr(false)?;
    if parser.pos < parser.tokens.len() {
        let at = parser.offset();
        let msg = match parser.peek() {
            Some(Token::Close) => "unbalanced parentheses: unexpected ')'",
            _ => "trailing input after program",
        };
        return Err(SyntaxError::new(at, msg));
    }
    Ok(ProgramAst::new(body, text.to_string()))
}

/// Anonymized symbols found by lexing alone, for text that does not parse.
/// Quoted segments become `string` and numerals `number`; an unterminated
/// quote ends the scan.
pub fn scan_symbols(text: &str) -> Vec<String> {
    let tokens = match lex(text) {
        Ok(t) => t,
        Err(err) => lex(&text[..err.position]).unwrap_or_default(),
    };
    tokens
        .into_iter()
        .filter_map(|(_, t)| match t {
            Token::Quoted(_) => Some(STRING_CONSTANT.to_string()),
            Token::Ident(s) if is_numeral(s) => Some(NUMBER_CONSTANT.to_string()),
            Token::Ident(s) => Some(s.to_string()),
            _ => None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Parenthesis repair

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairStatus {
    /// Parentheses were already balanced; text untouched.
    Unchanged,
    /// Trailing close-parens were added or removed and the result parses.
    Repaired,
    /// Imbalance not confined to the end; text returned as given.
    Unrepairable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repair {
    pub text: String,
    pub status: RepairStatus,
}

/// Depth after each character, skipping quoted segments. `None` when the
/// depth goes negative or a quote is left open.
fn paren_depth(text: &str) -> Option<i64> {
    let mut depth = 0i64;
    let mut in_quote = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_quote = false;
            }
            continue;
        }
        match c {
            '"' => in_quote = true,
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return None;
                }
            }
            _ => {}
        }
    }
    (!in_quote).then_some(depth)
}

pub fn parens_balanced(text: &str) -> bool {
    paren_depth(text) == Some(0)
}

pub fn repair_parentheses(text: &str) -> Repair {
    repair_parentheses_with(text, &Dialect::default())
}

/// Adds or removes close-parens at the end of `text` so that the program
/// balances.
pub fn repair_parentheses_with(text: &str, dialect: &Dialect) -> Repair {
    let unrepairable = || Repair { text: text.to_string(), status: RepairStatus::Unrepairable };
    if parens_balanced(text) {
        return Repair { text: text.to_string(), status: RepairStatus::Unchanged };
    }
    let prefix = text.trim_end_matches(|c: char| c == ')' || c.is_whitespace());
    let Some(depth) = paren_depth(prefix) else {
        return unrepairable();
    };
    let mut fixed = prefix.to_string();
    fixed.extend(std::iter::repeat_n(')', depth as usize));
    if parse_program(&fixed, dialect).is_ok() {
        Repair { text: fixed, status: RepairStatus::Repaired }
    } else {
        unrepairable()
    }
}
