//! Recursive-descent parser with C operator precedence.

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::{ParseError, Ty};

const QUALIFIERS: &[&str] = &["const", "static", "extern", "volatile", "register", "inline"];

fn is_type_word(s: &str) -> bool {
    QUALIFIERS.contains(&s)
        || matches!(
            s,
            "bool"
                | "_Bool"
                | "char"
                | "short"
                | "int"
                | "long"
                | "float"
                | "double"
                | "void"
                | "signed"
                | "unsigned"
        )
        || Ty::from_alias(s).is_some()
}

pub struct Parser {
    toks: Vec<Token>,
    at: usize,
}

pub fn parse(src: &str) -> Result<Vec<FunctionDef>, ParseError> {
    let mut p = Parser {
        toks: tokenize(src)?,
        at: 0,
    };
    let mut out = Vec::new();
    while p.peek() != &Tok::Eof {
        out.push(p.function()?);
    }
    Ok(out)
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let i = (self.at + k).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn pos(&self) -> Pos {
        let t = &self.toks[self.at];
        Pos {
            line: t.line,
            col: t.col,
        }
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseError> {
        let p = self.pos();
        Err(ParseError::new(p.line, p.col, msg))
    }

    fn advance(&mut self) -> Tok {
        let t = self.toks[self.at].tok.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn is_punct(&self, p: &str) -> bool {
        matches!(self.peek(), Tok::Punct(q) if *q == p)
    }

    fn eat(&mut self, p: &str) -> bool {
        if self.is_punct(p) {
            self.advance();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, p: &str) -> Result<(), ParseError> {
        if self.eat(p) {
            Ok(())
        } else {
            self.err(format!("expected `{p}`, found {}", describe(self.peek())))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Ident(s) if !is_type_word(&s) && !is_keyword(&s) => {
                self.advance();
                Ok(s)
            }
            t => self.err(format!("expected identifier, found {}", describe(&t))),
        }
    }

    fn at_type(&self) -> bool {
        matches!(self.peek(), Tok::Ident(s) if is_type_word(s))
    }

    fn ty(&mut self) -> Result<Ty, ParseError> {
        let mut words: Vec<String> = Vec::new();
        while let Tok::Ident(s) = self.peek().clone() {
            if !is_type_word(&s) {
                break;
            }
            self.advance();
            if QUALIFIERS.contains(&s.as_str()) {
                continue;
            }
            if let Some(t) = Ty::from_alias(&s) {
                if words.is_empty() {
                    return Ok(t);
                }
                return self.err(format!("unexpected `{s}` in type"));
            }
            words.push(s);
        }
        let count = |w: &str| words.iter().filter(|x| *x == w).count();
        let unsigned = count("unsigned") > 0;
        if unsigned && count("signed") > 0 {
            return self.err("both signed and unsigned");
        }
        let longs = count("long");
        let base: Vec<&str> = words
            .iter()
            .map(String::as_str)
            .filter(|w| !matches!(*w, "unsigned" | "signed" | "long"))
            .collect();
        let t = match (base.as_slice(), longs) {
            ([], 0) if words.is_empty() => return self.err("expected a type"),
            (["bool"] | ["_Bool"], 0) if words.len() == 1 => Ty::Bool,
            (["char"], 0) => if unsigned { Ty::U8 } else { Ty::I8 },
            (["short"] | ["short", "int"] | ["int", "short"], 0) => {
                if unsigned { Ty::U16 } else { Ty::I16 }
            }
            ([] | ["int"], 0) => if unsigned { Ty::U32 } else { Ty::I32 },
            ([] | ["int"], 1 | 2) => if unsigned { Ty::U64 } else { Ty::I64 },
            (["float"], 0) if words.len() == 1 => Ty::F32,
            (["double"], 0 | 1) if !unsigned && count("signed") == 0 => Ty::F64,
            (["void"], 0) if words.len() == 1 => Ty::Void,
            _ => return self.err("invalid type specifier combination"),
        };
        Ok(t)
    }

    fn function(&mut self) -> Result<FunctionDef, ParseError> {
        let pos = self.pos();
        let ret = self.ty()?;
        let name = self.ident()?;
        self.expect("(")?;
        let mut params = Vec::new();
        let lone_void =
            matches!(self.peek(), Tok::Ident(s) if s == "void") && matches!(self.peek_at(1), Tok::Punct(")"));
        if lone_void {
            self.advance();
        } else if !self.is_punct(")") {
            loop {
                let t = self.ty()?;
                if t == Ty::Void {
                    return self.err("parameter of type void");
                }
                let n = self.ident()?;
                params.push((t, n));
                if !self.eat(",") {
                    break;
                }
            }
        }
        self.expect(")")?;
        let body = if self.eat(";") {
            None
        } else {
            Some(self.block()?)
        };
        Ok(FunctionDef {
            ret,
            name,
            params,
            body,
            pos,
        })
    }

    fn block(&mut self) -> Result<Vec<Stmt>, ParseError> {
        self.expect("{")?;
        let mut out = Vec::new();
        while !self.is_punct("}") {
            if self.peek() == &Tok::Eof {
                return self.err("unexpected end of input: missing `}`");
            }
            out.push(self.stmt()?);
        }
        self.expect("}")?;
        Ok(out)
    }

    fn keyword(&self) -> Option<&str> {
        match self.peek() {
            Tok::Ident(s) if is_keyword(s) => Some(s.as_str()),
            _ => None,
        }
    }

    fn stmt(&mut self) -> Result<Stmt, ParseError> {
        let pos = self.pos();
        if self.is_punct("{") {
            return Ok(Stmt::Block(self.block()?));
        }
        if self.eat(";") {
            return Ok(Stmt::Empty);
        }
        match self.keyword() {
            Some("if") => {
                self.advance();
                self.expect("(")?;
                let c = self.expr()?;
                self.expect(")")?;
                let then = Box::new(self.stmt()?);
                let els = if matches!(self.peek(), Tok::Ident(s) if s == "else") {
                    self.advance();
                    Some(Box::new(self.stmt()?))
                } else {
                    None
                };
                Ok(Stmt::If(c, then, els))
            }
            Some("while") => {
                self.advance();
                self.expect("(")?;
                let c = self.expr()?;
                self.expect(")")?;
                Ok(Stmt::While(c, Box::new(self.stmt()?)))
            }
            Some("do") => {
                self.advance();
                let body = Box::new(self.stmt()?);
                if !matches!(self.peek(), Tok::Ident(s) if s == "while") {
                    return self.err("expected `while` after do body");
                }
                self.advance();
                self.expect("(")?;
                let c = self.expr()?;
                self.expect(")")?;
                self.expect(";")?;
                Ok(Stmt::DoWhile(body, c))
            }
            Some("for") => {
                self.advance();
                self.expect("(")?;
                let init = if self.is_punct(";") {
                    None
                } else {
                    Some(Box::new(self.simple()?))
                };
                self.expect(";")?;
                let cond = if self.is_punct(";") {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.expect(";")?;
                let step = if self.is_punct(")") {
                    None
                } else {
                    Some(Box::new(self.simple()?))
                };
                self.expect(")")?;
                let body = Box::new(self.stmt()?);
                Ok(Stmt::For {
                    init,
                    cond,
                    step,
                    body,
                })
            }
            Some("break") => {
                self.advance();
                self.expect(";")?;
                Ok(Stmt::Break(pos))
            }
            Some("continue") => {
                self.advance();
                self.expect(";")?;
                Ok(Stmt::Continue(pos))
            }
            Some("return") => {
                self.advance();
                let e = if self.is_punct(";") {
                    None
                } else {
                    Some(self.expr()?)
                };
                self.expect(";")?;
                Ok(Stmt::Return(e, pos))
            }
            Some(k) => {
                let k = k.to_string();
                self.err(format!("unexpected keyword `{k}`"))
            }
            None => {
                let s = self.simple()?;
                self.expect(";")?;
                Ok(s)
            }
        }
    }

    /// Declaration, assignment, increment or expression, without the `;`.
    fn simple(&mut self) -> Result<Stmt, ParseError> {
        let pos = self.pos();
        if self.at_type() {
            let t = self.ty()?;
            if t == Ty::Void {
                return self.err("variable of type void");
            }
            let mut decls = Vec::new();
            loop {
                let dpos = self.pos();
                let name = self.ident()?;
                let init = if self.eat("=") {
                    Some(self.expr()?)
                } else {
                    None
                };
                decls.push(Declarator {
                    name,
                    init,
                    pos: dpos,
                });
                if !self.eat(",") {
                    break;
                }
            }
            return Ok(Stmt::Decl(t, decls));
        }
        if self.is_punct("++") || self.is_punct("--") {
            let inc = self.is_punct("++");
            self.advance();
            let name = self.ident()?;
            return Ok(Stmt::IncDec { name, inc, pos });
        }
        if let Tok::Ident(name) = self.peek().clone() {
            if let Tok::Punct(p) = self.peek_at(1).clone() {
                let op = match p {
                    "=" => Some(None),
                    "+=" => Some(Some(BinOp::Add)),
                    "-=" => Some(Some(BinOp::Sub)),
                    "*=" => Some(Some(BinOp::Mul)),
                    "/=" => Some(Some(BinOp::Div)),
                    "%=" => Some(Some(BinOp::Rem)),
                    "&=" => Some(Some(BinOp::BitAnd)),
                    "|=" => Some(Some(BinOp::BitOr)),
                    "^=" => Some(Some(BinOp::BitXor)),
                    "<<=" => Some(Some(BinOp::Shl)),
                    ">>=" => Some(Some(BinOp::Shr)),
                    _ => None,
                };
                if let Some(op) = op {
                    let name = self.ident().map_err(|_| {
                        ParseError::new(pos.line, pos.col, format!("cannot assign to `{name}`"))
                    })?;
                    self.advance();
                    let value = self.expr()?;
                    return Ok(Stmt::Assign {
                        name,
                        op,
                        value,
                        pos,
                    });
                }
                if p == "++" || p == "--" {
                    let name = self.ident()?;
                    self.advance();
                    return Ok(Stmt::IncDec {
                        name,
                        inc: p == "++",
                        pos,
                    });
                }
            }
        }
        Ok(Stmt::Expr(self.expr()?))
    }

    pub fn expr(&mut self) -> Result<Expr, ParseError> {
        self.binary(0)
    }

    fn binary(&mut self, level: usize) -> Result<Expr, ParseError> {
        const LEVELS: &[&[(&str, BinOp)]] = &[
            &[("||", BinOp::Or)],
            &[("&&", BinOp::And)],
            &[("|", BinOp::BitOr)],
            &[("^", BinOp::BitXor)],
            &[("&", BinOp::BitAnd)],
            &[("==", BinOp::Eq), ("!=", BinOp::Ne)],
            &[
                ("<", BinOp::Lt),
                ("<=", BinOp::Le),
                (">", BinOp::Gt),
                (">=", BinOp::Ge),
            ],
            &[("<<", BinOp::Shl), (">>", BinOp::Shr)],
            &[("+", BinOp::Add), ("-", BinOp::Sub)],
            &[("*", BinOp::Mul), ("/", BinOp::Div), ("%", BinOp::Rem)],
        ];
        if level == LEVELS.len() {
            return self.unary();
        }
        let mut lhs = self.binary(level + 1)?;
        loop {
            let pos = self.pos();
            let op = match self.peek() {
                Tok::Punct(p) => LEVELS[level].iter().find(|(s, _)| s == p).map(|x| x.1),
                _ => None,
            };
            let Some(op) = op else { break };
            self.advance();
            let rhs = self.binary(level + 1)?;
            lhs = Expr {
                kind: ExprKind::Binary(op, Box::new(lhs), Box::new(rhs)),
                pos,
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        let op = match self.peek() {
            Tok::Punct("-") => Some(UnOp::Neg),
            Tok::Punct("+") => Some(UnOp::Plus),
            Tok::Punct("~") => Some(UnOp::BitNot),
            Tok::Punct("!") => Some(UnOp::Not),
            _ => None,
        };
        if let Some(op) = op {
            self.advance();
            let e = self.unary()?;
            return Ok(Expr {
                kind: ExprKind::Unary(op, Box::new(e)),
                pos,
            });
        }
        if self.is_punct("(") && matches!(self.peek_at(1), Tok::Ident(s) if is_type_word(s)) {
            self.advance();
            let t = self.ty()?;
            self.expect(")")?;
            let e = self.unary()?;
            return Ok(Expr {
                kind: ExprKind::Cast(t, Box::new(e)),
                pos,
            });
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        let kind = match self.peek().clone() {
            Tok::Int(v) => {
                self.advance();
                ExprKind::Int(v)
            }
            Tok::Float(v, single) => {
                self.advance();
                ExprKind::Float(v, single)
            }
            Tok::Punct("(") => {
                self.advance();
                let e = self.expr()?;
                self.expect(")")?;
                return Ok(e);
            }
            Tok::Ident(s) if s == "true" || s == "false" => {
                self.advance();
                ExprKind::Bool(s == "true")
            }
            Tok::Ident(_) => {
                let name = self.ident()?;
                if self.eat("(") {
                    let mut args = Vec::new();
                    if !self.is_punct(")") {
                        loop {
                            args.push(self.expr()?);
                            if !self.eat(",") {
                                break;
                            }
                        }
                    }
                    self.expect(")")?;
                    ExprKind::Call(name, args)
                } else {
                    ExprKind::Var(name)
                }
            }
            t => return self.err(format!("expected expression, found {}", describe(&t))),
        };
        Ok(Expr { kind, pos })
    }
}

fn is_keyword(s: &str) -> bool {
    matches!(
        s,
        "if" | "else" | "while" | "do" | "for" | "break" | "continue" | "return" | "true" | "false"
    )
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Int(v) => format!("`{v}`"),
        Tok::Float(v, _) => format!("`{v}`"),
        Tok::Punct(p) => format!("`{p}`"),
        Tok::Eof => "end of input".into(),
    }
}
