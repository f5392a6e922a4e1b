//! Type checking, name resolution and Boolean-instruction numbering.
//!
//! Integer literals stay untyped until they meet a typed operand, whose type
//! they then adopt (`c ^ 7` with `char c` is a `char` xor). Constant
//! subexpressions are folded here, so they never produce records.

use std::collections::HashMap;

use super::ast::{self, BinOp, Expr, ExprKind, Pos, Stmt, UnOp};
use super::{BranchKind, ParseError, Ty};
use crate::abi::TypeTag;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Bool(bool),
    /// Sign- or zero-extended according to the static type.
    Int(i64),
    F32(f32),
    F64(f64),
    Void,
}

#[derive(Debug, Clone)]
pub struct TExpr {
    pub ty: Ty,
    pub kind: K,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Debug, Clone)]
pub enum K {
    Const(Value),
    Local(u32),
    Neg(Box<TExpr>),
    BitNot(Box<TExpr>),
    Not(Box<TExpr>),
    /// Both operands already have the result type.
    Arith(BinOp, Box<TExpr>, Box<TExpr>),
    Shift(bool, Box<TExpr>, Box<TExpr>),
    Cmp {
        uid: u32,
        op: CmpOp,
        lhs: Box<TExpr>,
        rhs: Box<TExpr>,
    },
    Logic {
        and: bool,
        lhs: Box<TExpr>,
        rhs: Box<TExpr>,
    },
    /// Numeric conversion to `ty`; the operand is never converted to bool here.
    Convert(Box<TExpr>),
    /// Numeric to bool truncation; records with value 1.
    Truth {
        uid: u32,
        arg: Box<TExpr>,
    },
    Call {
        func: u32,
        site: u32,
        args: Vec<TExpr>,
        bool_uid: Option<u32>,
    },
    Read {
        tag: TypeTag,
        bool_uid: Option<u32>,
    },
    Abort,
    Exit,
    Assume(Box<TExpr>),
    /// Evaluate and discard, from a `(void)` cast.
    Eval(Box<TExpr>),
}

#[derive(Debug, Clone)]
pub enum S {
    Set(u32, TExpr),
    Eval(TExpr),
    If {
        branch: u32,
        cond: TExpr,
        then: Vec<S>,
        els: Vec<S>,
    },
    Loop {
        branch: u32,
        cond: Option<TExpr>,
        body: Vec<S>,
        step: Vec<S>,
        test_first: bool,
    },
    Break,
    Continue,
    Return(Option<TExpr>),
}

#[derive(Debug, Clone)]
#[allow(dead_code)]
pub struct Function {
    pub name: String,
    pub params: Vec<Ty>,
    pub ret: Ty,
    pub slots: u32,
    pub body: Vec<S>,
}

/// Source location and kind of one static Boolean instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteInfo {
    pub uid: u32,
    pub kind: BranchKind,
    pub line: u32,
    pub col: u32,
    pub function: String,
}

pub struct Checked {
    pub functions: Vec<Function>,
    pub main: usize,
    pub recursive: bool,
    pub sites: Vec<SiteInfo>,
    pub branch_count: u32,
}

#[derive(Debug, Clone, Copy)]
enum Lit {
    Int(i128),
    Float(f64, bool),
}

struct Ex {
    e: TExpr,
    lit: Option<Lit>,
    pos: Pos,
}

struct Sig {
    params: Vec<Ty>,
    ret: Ty,
    index: u32,
    defined: bool,
}

struct Checker<'a> {
    sigs: HashMap<&'a str, Sig>,
    sites: Vec<SiteInfo>,
    next_site: u32,
    branches: u32,
    fname: String,
    ret: Ty,
    scopes: Vec<HashMap<String, (u32, Ty)>>,
    slots: u32,
    loop_depth: u32,
    calls: Vec<Vec<u32>>,
    current: u32,
}

fn err<T>(pos: Pos, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError::new(pos.line, pos.col, msg))
}

const BUILTINS: &[&str] = &[
    "abort",
    "reach_error",
    "__VERIFIER_error",
    "exit",
    "__VERIFIER_assume",
];

pub fn check(defs: &[ast::FunctionDef]) -> Result<Checked, ParseError> {
    let mut sigs: HashMap<&str, Sig> = HashMap::new();
    let mut order: Vec<&ast::FunctionDef> = Vec::new();
    for d in defs {
        if BUILTINS.contains(&d.name.as_str()) || nondet_kind(&d.name).is_some() {
            if d.body.is_some() {
                return err(d.pos, format!("`{}` is a built-in and cannot be defined", d.name));
            }
            continue;
        }
        let params: Vec<Ty> = d.params.iter().map(|p| p.0).collect();
        match sigs.get_mut(d.name.as_str()) {
            Some(s) => {
                if s.params != params || s.ret != d.ret {
                    return err(d.pos, format!("conflicting declarations of `{}`", d.name));
                }
                if d.body.is_some() {
                    if s.defined {
                        return err(d.pos, format!("redefinition of `{}`", d.name));
                    }
                    s.defined = true;
                    order[s.index as usize] = d;
                }
            }
            None => {
                sigs.insert(
                    &d.name,
                    Sig {
                        params,
                        ret: d.ret,
                        index: order.len() as u32,
                        defined: d.body.is_some(),
                    },
                );
                order.push(d);
            }
        }
    }
    for d in &order {
        if d.body.is_none() {
            return err(d.pos, format!("function `{}` is declared but never defined", d.name));
        }
    }
    let main = match sigs.get("main") {
        Some(s) => s.index as usize,
        None => return err(Pos { line: 1, col: 1 }, "no `main` function"),
    };
    if !order[main].params.is_empty() {
        return err(order[main].pos, "`main` must take no parameters");
    }
    let n = order.len();
    let mut c = Checker {
        sigs,
        sites: Vec::new(),
        next_site: 0,
        branches: 0,
        fname: String::new(),
        ret: Ty::Void,
        scopes: Vec::new(),
        slots: 0,
        loop_depth: 0,
        calls: vec![Vec::new(); n],
        current: 0,
    };
    let mut functions = Vec::with_capacity(n);
    for (i, d) in order.iter().enumerate() {
        functions.push(c.function(i as u32, d)?);
    }
    let recursive = has_cycle(&c.calls);
    Ok(Checked {
        functions,
        main,
        recursive,
        sites: c.sites,
        branch_count: c.branches,
    })
}

fn has_cycle(calls: &[Vec<u32>]) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    fn dfs(v: usize, calls: &[Vec<u32>], state: &mut [u8]) -> bool {
        state[v] = 1;
        for &w in &calls[v] {
            let w = w as usize;
            if state[w] == 1 || (state[w] == 0 && dfs(w, calls, state)) {
                return true;
            }
        }
        state[v] = 2;
        false
    }
    let mut state = vec![0u8; calls.len()];
    (0..calls.len()).any(|v| state[v] == 0 && dfs(v, calls, &mut state))
}

/// Maps a nondet reader name to its result type and input tag.
pub fn nondet_kind(name: &str) -> Option<(Ty, TypeTag)> {
    let suffix = name
        .strip_prefix("__VERIFIER_nondet_")
        .or_else(|| name.strip_prefix("nondet_"))
        .or(if name == "nondet" { Some("int") } else { None })?;
    let ty = match suffix {
        "bool" | "_Bool" => Ty::Bool,
        "char" | "schar" => Ty::I8,
        "uchar" | "unsigned_char" => Ty::U8,
        "short" => Ty::I16,
        "ushort" | "unsigned_short" => Ty::U16,
        "int" => Ty::I32,
        "uint" | "unsigned" | "unsigned_int" => Ty::U32,
        "long" | "longlong" => Ty::I64,
        "ulong" | "unsigned_long" | "ulonglong" => Ty::U64,
        "float" => Ty::F32,
        "double" => Ty::F64,
        "untyped8" => return Some((Ty::U8, TypeTag::Untyped8)),
        "untyped16" => return Some((Ty::U16, TypeTag::Untyped16)),
        "untyped32" => return Some((Ty::U32, TypeTag::Untyped32)),
        "untyped64" => return Some((Ty::U64, TypeTag::Untyped64)),
        other => Ty::from_alias(other)?,
    };
    Some((ty, ty.tag()?))
}

fn int_range(ty: Ty) -> (i128, i128) {
    let b = ty.bits();
    if ty.is_signed() {
        (-(1i128 << (b - 1)), (1i128 << (b - 1)) - 1)
    } else {
        (0, (1i128 << b) - 1)
    }
}

/// Wraps an integer to the representation used for `ty`.
pub fn wrap(ty: Ty, v: i64) -> i64 {
    match ty {
        Ty::I8 => v as i8 as i64,
        Ty::I16 => v as i16 as i64,
        Ty::I32 => v as i32 as i64,
        Ty::U8 => v as u8 as i64,
        Ty::U16 => v as u16 as i64,
        Ty::U32 => v as u32 as i64,
        _ => v,
    }
}

pub fn zero(ty: Ty) -> Value {
    match ty {
        Ty::Bool => Value::Bool(false),
        Ty::F32 => Value::F32(0.0),
        Ty::F64 => Value::F64(0.0),
        Ty::Void => Value::Void,
        _ => Value::Int(0),
    }
}

fn lit_type(l: Lit) -> Ty {
    match l {
        Lit::Float(_, true) => Ty::F32,
        Lit::Float(_, false) => Ty::F64,
        Lit::Int(v) if v >= i128::from(i32::MIN) && v <= i128::from(i32::MAX) => Ty::I32,
        Lit::Int(v) if v >= i128::from(i64::MIN) && v <= i128::from(i64::MAX) => Ty::I64,
        Lit::Int(_) => Ty::U64,
    }
}

fn lit_value(l: Lit, ty: Ty) -> Value {
    match (l, ty) {
        (_, Ty::Void) => Value::Void,
        (Lit::Int(v), Ty::Bool) => Value::Bool(v != 0),
        (Lit::Float(v, _), Ty::Bool) => Value::Bool(v != 0.0),
        (Lit::Int(v), Ty::F32) => Value::F32(v as f32),
        (Lit::Int(v), Ty::F64) => Value::F64(v as f64),
        (Lit::Float(v, _), Ty::F32) => Value::F32(v as f32),
        (Lit::Float(v, _), Ty::F64) => Value::F64(v),
        (Lit::Int(v), t) => Value::Int(wrap(t, v as i64)),
        (Lit::Float(v, _), t) => Value::Int(float_to_int(t, v)),
    }
}

/// Saturating float to integer conversion (NaN becomes 0).
pub fn float_to_int(ty: Ty, v: f64) -> i64 {
    let (lo, hi) = int_range(ty);
    if v.is_nan() {
        0
    } else if v <= lo as f64 {
        lo as i64
    } else if v >= hi as f64 {
        if ty == Ty::U64 {
            u64::MAX as i64
        } else {
            hi as i64
        }
    } else {
        wrap(ty, if ty == Ty::U64 { v as u64 as i64 } else { v as i64 })
    }
}

fn konst(ty: Ty, v: Value) -> TExpr {
    TExpr {
        ty,
        kind: K::Const(v),
    }
}

/// Usual arithmetic conversion of two typed operands.
fn common(a: Ty, b: Ty) -> Ty {
    let a = if a == Ty::Bool { Ty::I32 } else { a };
    let b = if b == Ty::Bool { Ty::I32 } else { b };
    if a.is_float() || b.is_float() {
        if a == Ty::F64 || b == Ty::F64 {
            Ty::F64
        } else {
            Ty::F32
        }
    } else if a.bits() != b.bits() {
        if a.bits() > b.bits() {
            a
        } else {
            b
        }
    } else if a.is_signed() && b.is_signed() {
        a
    } else if a.is_signed() {
        b
    } else {
        a
    }
}

impl<'a> Checker<'a> {
    fn site(&mut self, kind: BranchKind, pos: Pos) -> u32 {
        let uid = self.sites.len() as u32 + 1;
        self.sites.push(SiteInfo {
            uid,
            kind,
            line: pos.line,
            col: pos.col,
            function: self.fname.clone(),
        });
        uid
    }

    fn function(&mut self, index: u32, d: &ast::FunctionDef) -> Result<Function, ParseError> {
        self.fname = d.name.clone();
        self.ret = d.ret;
        self.current = index;
        self.slots = 0;
        self.scopes = vec![HashMap::new()];
        for (t, n) in &d.params {
            if self.scopes[0].contains_key(n) {
                return err(d.pos, format!("duplicate parameter `{n}`"));
            }
            let s = self.slots;
            self.slots += 1;
            self.scopes[0].insert(n.clone(), (s, *t));
        }
        let body = self.block(d.body.as_ref().unwrap())?;
        Ok(Function {
            name: d.name.clone(),
            params: d.params.iter().map(|p| p.0).collect(),
            ret: d.ret,
            slots: self.slots,
            body,
        })
    }

    fn block(&mut self, stmts: &[Stmt]) -> Result<Vec<S>, ParseError> {
        self.scopes.push(HashMap::new());
        let mut out = Vec::new();
        for s in stmts {
            self.stmt(s, &mut out)?;
        }
        self.scopes.pop();
        Ok(out)
    }

    fn sub(&mut self, s: &Stmt) -> Result<Vec<S>, ParseError> {
        match s {
            Stmt::Block(b) => self.block(b),
            other => self.block(std::slice::from_ref(other)),
        }
    }

    fn lookup(&self, name: &str, pos: Pos) -> Result<(u32, Ty), ParseError> {
        for sc in self.scopes.iter().rev() {
            if let Some(&v) = sc.get(name) {
                return Ok(v);
            }
        }
        err(pos, format!("unknown variable `{name}`"))
    }

    fn stmt(&mut self, s: &Stmt, out: &mut Vec<S>) -> Result<(), ParseError> {
        match s {
            Stmt::Empty => {}
            Stmt::Block(b) => out.extend(self.block(b)?),
            Stmt::Decl(t, ds) => {
                for d in ds {
                    let init = match &d.init {
                        Some(e) => {
                            let x = self.expr(e)?;
                            self.coerce(x, *t)?
                        }
                        None => konst(*t, zero(*t)),
                    };
                    let sc = self.scopes.last_mut().unwrap();
                    if sc.contains_key(&d.name) {
                        return err(d.pos, format!("redeclaration of `{}`", d.name));
                    }
                    let slot = self.slots;
                    self.slots += 1;
                    sc.insert(d.name.clone(), (slot, *t));
                    out.push(S::Set(slot, init));
                }
            }
            Stmt::Assign {
                name,
                op,
                value,
                pos,
            } => {
                let (slot, t) = self.lookup(name, *pos)?;
                let rhs = self.expr(value)?;
                let v = match op {
                    None => self.coerce(rhs, t)?,
                    Some(op) => {
                        let cur = Ex {
                            e: TExpr {
                                ty: t,
                                kind: K::Local(slot),
                            },
                            lit: None,
                            pos: *pos,
                        };
                        let r = self.binary(*op, cur, rhs, *pos)?;
                        self.coerce(r, t)?
                    }
                };
                out.push(S::Set(slot, v));
            }
            Stmt::IncDec { name, inc, pos } => {
                let (slot, t) = self.lookup(name, *pos)?;
                if !t.is_numeric() {
                    return err(*pos, format!("cannot increment `{name}` of type {t}"));
                }
                let cur = Ex {
                    e: TExpr {
                        ty: t,
                        kind: K::Local(slot),
                    },
                    lit: None,
                    pos: *pos,
                };
                let one = Ex {
                    e: konst(Ty::I32, Value::Int(1)),
                    lit: Some(Lit::Int(1)),
                    pos: *pos,
                };
                let op = if *inc { BinOp::Add } else { BinOp::Sub };
                let r = self.binary(op, cur, one, *pos)?;
                let v = self.coerce(r, t)?;
                out.push(S::Set(slot, v));
            }
            Stmt::Expr(e) => {
                let x = self.expr(e)?;
                out.push(S::Eval(x.e));
            }
            Stmt::If(c, then, els) => {
                let cond = self.condition(c)?;
                let branch = self.branches;
                self.branches += 1;
                let then = self.sub(then)?;
                let els = match els {
                    Some(e) => self.sub(e)?,
                    None => Vec::new(),
                };
                out.push(S::If {
                    branch,
                    cond,
                    then,
                    els,
                });
            }
            Stmt::While(c, body) => {
                let cond = self.condition(c)?;
                let branch = self.branches;
                self.branches += 1;
                self.loop_depth += 1;
                let body = self.sub(body)?;
                self.loop_depth -= 1;
                out.push(S::Loop {
                    branch,
                    cond: Some(cond),
                    body,
                    step: Vec::new(),
                    test_first: true,
                });
            }
            Stmt::DoWhile(body, c) => {
                let branch = self.branches;
                self.branches += 1;
                self.loop_depth += 1;
                let body = self.sub(body)?;
                self.loop_depth -= 1;
                let cond = self.condition(c)?;
                out.push(S::Loop {
                    branch,
                    cond: Some(cond),
                    body,
                    step: Vec::new(),
                    test_first: false,
                });
            }
            Stmt::For {
                init,
                cond,
                step,
                body,
            } => {
                self.scopes.push(HashMap::new());
                let mut pre = Vec::new();
                if let Some(i) = init {
                    self.stmt(i, &mut pre)?;
                }
                let cond = match cond {
                    Some(c) => Some(self.condition(c)?),
                    None => None,
                };
                let branch = self.branches;
                self.branches += 1;
                self.loop_depth += 1;
                let body = self.sub(body)?;
                self.loop_depth -= 1;
                let mut st = Vec::new();
                if let Some(s) = step {
                    self.stmt(s, &mut st)?;
                }
                self.scopes.pop();
                out.extend(pre);
                out.push(S::Loop {
                    branch,
                    cond,
                    body,
                    step: st,
                    test_first: true,
                });
            }
            Stmt::Break(p) | Stmt::Continue(p) => {
                if self.loop_depth == 0 {
                    return err(*p, "break/continue outside of a loop");
                }
                out.push(if matches!(s, Stmt::Break(_)) {
                    S::Break
                } else {
                    S::Continue
                });
            }
            Stmt::Return(e, p) => {
                let v = match (e, self.ret) {
                    (None, Ty::Void) => None,
                    (None, t) => Some(konst(t, zero(t))),
                    (Some(_), Ty::Void) => return err(*p, "void function returns a value"),
                    (Some(e), t) => {
                        let x = self.expr(e)?;
                        Some(self.coerce(x, t)?)
                    }
                };
                out.push(S::Return(v));
            }
        }
        Ok(())
    }

    /// Converts a value used as a condition to bool. Numeric values get an
    /// implicit `!= 0` comparison.
    fn condition(&mut self, e: &Expr) -> Result<TExpr, ParseError> {
        let x = self.expr(e)?;
        self.cond_expr(x)
    }

    fn cond_expr(&mut self, x: Ex) -> Result<TExpr, ParseError> {
        if let Some(l) = x.lit {
            return Ok(konst(Ty::Bool, lit_value(l, Ty::Bool)));
        }
        match x.e.ty {
            Ty::Bool => Ok(x.e),
            t if t.is_numeric() => {
                let uid = self.site(BranchKind::Comparison, x.pos);
                Ok(TExpr {
                    ty: Ty::Bool,
                    kind: K::Cmp {
                        uid,
                        op: CmpOp::Ne,
                        lhs: Box::new(x.e),
                        rhs: Box::new(konst(t, zero(t))),
                    },
                })
            }
            t => err(x.pos, format!("value of type {t} used as a condition")),
        }
    }

    /// Implicit conversion for assignment, argument passing and return.
    fn coerce(&mut self, x: Ex, to: Ty) -> Result<TExpr, ParseError> {
        if let Some(l) = x.lit {
            if to == Ty::Void {
                return err(x.pos, "cannot convert a constant to void");
            }
            return Ok(konst(to, lit_value(l, to)));
        }
        let from = x.e.ty;
        if from == to {
            return Ok(x.e);
        }
        if from == Ty::Void || to == Ty::Void {
            return err(x.pos, format!("cannot convert {from} to {to}"));
        }
        if to == Ty::Bool {
            let uid = self.site(BranchKind::Truncation, x.pos);
            return Ok(TExpr {
                ty: Ty::Bool,
                kind: K::Truth {
                    uid,
                    arg: Box::new(x.e),
                },
            });
        }
        Ok(TExpr {
            ty: to,
            kind: K::Convert(Box::new(x.e)),
        })
    }

    fn typed(e: TExpr, pos: Pos) -> Ex {
        Ex { e, lit: None, pos }
    }

    fn expr(&mut self, e: &Expr) -> Result<Ex, ParseError> {
        let pos = e.pos;
        match &e.kind {
            ExprKind::Int(v) => {
                let l = Lit::Int(i128::from(*v));
                Ok(Ex {
                    e: konst(lit_type(l), lit_value(l, lit_type(l))),
                    lit: Some(l),
                    pos,
                })
            }
            ExprKind::Float(v, s) => {
                let l = Lit::Float(*v, *s);
                Ok(Ex {
                    e: konst(lit_type(l), lit_value(l, lit_type(l))),
                    lit: Some(l),
                    pos,
                })
            }
            ExprKind::Bool(b) => Ok(Self::typed(konst(Ty::Bool, Value::Bool(*b)), pos)),
            ExprKind::Var(n) => {
                let (slot, ty) = self.lookup(n, pos)?;
                Ok(Self::typed(
                    TExpr {
                        ty,
                        kind: K::Local(slot),
                    },
                    pos,
                ))
            }
            ExprKind::Unary(op, a) => {
                let x = self.expr(a)?;
                self.unary(*op, x, pos)
            }
            ExprKind::Binary(op, a, b) => {
                let l = self.expr(a)?;
                if matches!(op, BinOp::And | BinOp::Or) {
                    let lhs = self.cond_expr(l)?;
                    let r = self.expr(b)?;
                    let rhs = self.cond_expr(r)?;
                    return Ok(Self::typed(
                        TExpr {
                            ty: Ty::Bool,
                            kind: K::Logic {
                                and: *op == BinOp::And,
                                lhs: Box::new(lhs),
                                rhs: Box::new(rhs),
                            },
                        },
                        pos,
                    ));
                }
                let r = self.expr(b)?;
                self.binary(*op, l, r, pos)
            }
            ExprKind::Cast(t, a) => {
                let x = self.expr(a)?;
                if *t == Ty::Void {
                    return Ok(Self::typed(
                        TExpr {
                            ty: Ty::Void,
                            kind: K::Eval(Box::new(x.e)),
                        },
                        pos,
                    ));
                }
                let e = self.coerce(x, *t)?;
                Ok(Self::typed(e, pos))
            }
            ExprKind::Call(name, args) => self.call(name, args, pos),
        }
    }

    fn call(&mut self, name: &str, args: &[Expr], pos: Pos) -> Result<Ex, ParseError> {
        let argc = |n: usize| -> Result<(), ParseError> {
            if args.len() != n {
                err(pos, format!("`{name}` expects {n} argument(s), got {}", args.len()))
            } else {
                Ok(())
            }
        };
        if let Some((ty, tag)) = nondet_kind(name) {
            argc(0)?;
            let bool_uid = if ty == Ty::Bool {
                Some(self.site(BranchKind::BoolCall, pos))
            } else {
                None
            };
            return Ok(Self::typed(
                TExpr {
                    ty,
                    kind: K::Read { tag, bool_uid },
                },
                pos,
            ));
        }
        match name {
            "abort" | "reach_error" | "__VERIFIER_error" => {
                argc(0)?;
                return Ok(Self::typed(
                    TExpr {
                        ty: Ty::Void,
                        kind: K::Abort,
                    },
                    pos,
                ));
            }
            "exit" => {
                argc(1)?;
                let x = self.expr(&args[0])?;
                let _ = self.coerce(x, Ty::I32)?;
                return Ok(Self::typed(
                    TExpr {
                        ty: Ty::Void,
                        kind: K::Exit,
                    },
                    pos,
                ));
            }
            "__VERIFIER_assume" => {
                argc(1)?;
                let x = self.expr(&args[0])?;
                let c = self.coerce(x, Ty::Bool)?;
                return Ok(Self::typed(
                    TExpr {
                        ty: Ty::Void,
                        kind: K::Assume(Box::new(c)),
                    },
                    pos,
                ));
            }
            _ => {}
        }
        let (params, ret, index) = match self.sigs.get(name) {
            Some(s) => (s.params.clone(), s.ret, s.index),
            None => return err(pos, format!("unknown function `{name}`")),
        };
        argc(params.len())?;
        let mut targs = Vec::with_capacity(args.len());
        for (a, t) in args.iter().zip(&params) {
            let x = self.expr(a)?;
            targs.push(self.coerce(x, *t)?);
        }
        self.next_site += 1;
        let site = self.next_site;
        self.calls[self.current as usize].push(index);
        let bool_uid = if ret == Ty::Bool {
            Some(self.site(BranchKind::BoolCall, pos))
        } else {
            None
        };
        Ok(Self::typed(
            TExpr {
                ty: ret,
                kind: K::Call {
                    func: index,
                    site,
                    args: targs,
                    bool_uid,
                },
            },
            pos,
        ))
    }

    fn unary(&mut self, op: UnOp, x: Ex, pos: Pos) -> Result<Ex, ParseError> {
        if let Some(l) = x.lit {
            let folded = match (op, l) {
                (UnOp::Plus, l) => Some(l),
                (UnOp::Neg, Lit::Int(v)) => Some(Lit::Int(-v)),
                (UnOp::Neg, Lit::Float(v, s)) => Some(Lit::Float(-v, s)),
                (UnOp::BitNot, Lit::Int(v)) => Some(Lit::Int(!(v as i64) as i128)),
                (UnOp::Not, l) => {
                    let Value::Bool(b) = lit_value(l, Ty::Bool) else { unreachable!() };
                    return Ok(Self::typed(konst(Ty::Bool, Value::Bool(!b)), pos));
                }
                _ => None,
            };
            if let Some(l) = folded {
                let t = lit_type(l);
                return Ok(Ex {
                    e: konst(t, lit_value(l, t)),
                    lit: Some(l),
                    pos,
                });
            }
        }
        let t = x.e.ty;
        match op {
            UnOp::Not => {
                let c = self.cond_expr(x)?;
                Ok(Self::typed(
                    TExpr {
                        ty: Ty::Bool,
                        kind: K::Not(Box::new(c)),
                    },
                    pos,
                ))
            }
            UnOp::Plus | UnOp::Neg | UnOp::BitNot => {
                if !t.is_numeric() && t != Ty::Bool {
                    return err(pos, format!("invalid operand of type {t}"));
                }
                if op == UnOp::BitNot && t.is_float() {
                    return err(pos, "bitwise not on a floating-point value");
                }
                let rt = if t == Ty::Bool { Ty::I32 } else { t };
                let a = self.coerce(x, rt)?;
                let kind = match op {
                    UnOp::Plus => return Ok(Self::typed(a, pos)),
                    UnOp::Neg => K::Neg(Box::new(a)),
                    _ => K::BitNot(Box::new(a)),
                };
                Ok(Self::typed(TExpr { ty: rt, kind }, pos))
            }
        }
    }

    fn fold(op: BinOp, a: Lit, b: Lit, pos: Pos) -> Result<Lit, ParseError> {
        use BinOp::*;
        if let (Lit::Int(x), Lit::Int(y)) = (a, b) {
            let (x, y) = (x as i64, y as i64);
            let v = match op {
                Add => x.wrapping_add(y),
                Sub => x.wrapping_sub(y),
                Mul => x.wrapping_mul(y),
                Div | Rem if y == 0 => return err(pos, "division by zero in a constant"),
                Div => x.wrapping_div(y),
                Rem => x.wrapping_rem(y),
                BitAnd => x & y,
                BitOr => x | y,
                BitXor => x ^ y,
                Shl => x.wrapping_shl(y as u32),
                Shr => x.wrapping_shr(y as u32),
                _ => unreachable!(),
            };
            return Ok(Lit::Int(i128::from(v)));
        }
        let single = matches!((a, b), (Lit::Float(_, true), Lit::Float(_, true)))
            || matches!((a, b), (Lit::Float(_, true), Lit::Int(_)) | (Lit::Int(_), Lit::Float(_, true)));
        let f = |l: Lit| match l {
            Lit::Int(v) => v as f64,
            Lit::Float(v, _) => v,
        };
        let (x, y) = (f(a), f(b));
        let v = match op {
            Add => x + y,
            Sub => x - y,
            Mul => x * y,
            Div => x / y,
            _ => return err(pos, "invalid operator on floating-point constants"),
        };
        Ok(Lit::Float(v, single))
    }

    fn binary(&mut self, op: BinOp, l: Ex, r: Ex, pos: Pos) -> Result<Ex, ParseError> {
        if let (Some(a), Some(b)) = (l.lit, r.lit) {
            if op.is_comparison() {
                let f = |x: Lit| match x {
                    Lit::Int(v) => v as f64,
                    Lit::Float(v, _) => v,
                };
                let (x, y) = (f(a), f(b));
                let v = match op {
                    BinOp::Eq => x == y,
                    BinOp::Ne => x != y,
                    BinOp::Lt => x < y,
                    BinOp::Le => x <= y,
                    BinOp::Gt => x > y,
                    _ => x >= y,
                };
                return Ok(Self::typed(konst(Ty::Bool, Value::Bool(v)), pos));
            }
            let lv = Self::fold(op, a, b, pos)?;
            let t = lit_type(lv);
            return Ok(Ex {
                e: konst(t, lit_value(lv, t)),
                lit: Some(lv),
                pos,
            });
        }
        for x in [&l, &r] {
            if x.e.ty == Ty::Void {
                return err(x.pos, "void value used in an expression");
            }
        }
        let adopt = |x: &Ex, other: &Ex| -> Ty {
            match x.lit {
                Some(Lit::Int(_)) if other.lit.is_none() => {
                    if other.e.ty == Ty::Bool {
                        Ty::I32
                    } else {
                        other.e.ty
                    }
                }
                _ => x.e.ty,
            }
        };
        let lt = adopt(&l, &r);
        let rt = adopt(&r, &l);
        if matches!(op, BinOp::Shl | BinOp::Shr) {
            if lt.is_float() || rt.is_float() {
                return err(pos, "shift of a floating-point value");
            }
            let res = if lt == Ty::Bool { Ty::I32 } else { lt };
            let amount_ty = if rt == Ty::Bool { Ty::I32 } else { rt };
            let a = self.coerce(l, res)?;
            let b = self.coerce(r, amount_ty)?;
            return Ok(Self::typed(
                TExpr {
                    ty: res,
                    kind: K::Shift(op == BinOp::Shl, Box::new(a), Box::new(b)),
                },
                pos,
            ));
        }
        let ct = common(lt, rt);
        if op.is_comparison() {
            // Two bools compare as bools; anything else in the common type.
            let ct = if l.e.ty == Ty::Bool && r.e.ty == Ty::Bool {
                Ty::Bool
            } else {
                ct
            };
            let a = self.coerce_num(l, ct)?;
            let b = self.coerce_num(r, ct)?;
            let uid = self.site(BranchKind::Comparison, pos);
            let cop = match op {
                BinOp::Eq => CmpOp::Eq,
                BinOp::Ne => CmpOp::Ne,
                BinOp::Lt => CmpOp::Lt,
                BinOp::Le => CmpOp::Le,
                BinOp::Gt => CmpOp::Gt,
                _ => CmpOp::Ge,
            };
            return Ok(Self::typed(
                TExpr {
                    ty: Ty::Bool,
                    kind: K::Cmp {
                        uid,
                        op: cop,
                        lhs: Box::new(a),
                        rhs: Box::new(b),
                    },
                },
                pos,
            ));
        }
        if ct.is_float() && matches!(op, BinOp::Rem | BinOp::BitAnd | BinOp::BitOr | BinOp::BitXor) {
            return err(pos, "integer operator applied to a floating-point value");
        }
        let a = self.coerce_num(l, ct)?;
        let b = self.coerce_num(r, ct)?;
        Ok(Self::typed(
            TExpr {
                ty: ct,
                kind: K::Arith(op, Box::new(a), Box::new(b)),
            },
            pos,
        ))
    }

    /// Like `coerce` but bool operands widen to integers without a record.
    fn coerce_num(&mut self, x: Ex, to: Ty) -> Result<TExpr, ParseError> {
        if x.lit.is_none() && x.e.ty == Ty::Bool && to != Ty::Bool {
            return Ok(TExpr {
                ty: to,
                kind: K::Convert(Box::new(x.e)),
            });
        }
        self.coerce(x, to)
    }
}
