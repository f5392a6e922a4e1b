//! Tree-walking interpreter over the checked program.

use super::check::{float_to_int, wrap, CmpOp, Function, TExpr, Value, K, S};
use super::ast::BinOp;
use super::{Program, Ty, VmLimits};
use crate::abi::{
    context_hash_empty, fnv32_step, ConditionRecord, ExecutionConfig, ExecutionId,
    ExecutionResult, Termination, TypeTag,
};

/// One decision of an `if` or loop condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchEvent {
    pub branch: u32,
    pub taken: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Crash,
    Timeout,
    Boundary,
    Exit,
}

enum Flow {
    Next,
    Break,
    Continue,
    Return(Value),
}

struct Vm<'a, 'e> {
    prog: &'a Program,
    input: &'a [u8],
    fill: u8,
    limits: VmLimits,
    bytes: Vec<u8>,
    tags: Vec<TypeTag>,
    trace: Vec<ConditionRecord>,
    xor: bool,
    steps: u64,
    /// Context hash per active frame; index 0 is `main`.
    ctx: Vec<u32>,
    events: Option<&'e mut Vec<BranchEvent>>,
}

const STACK_PER_FRAME: usize = 64 * 1024;
const MAX_THREAD_STACK: usize = 1 << 30;

pub fn run(
    prog: &Program,
    config: &ExecutionConfig,
    limits: &VmLimits,
    events: Option<&mut Vec<BranchEvent>>,
) -> ExecutionResult {
    if !prog.recursive {
        return run_inline(prog, config, limits, events);
    }
    // Recursive targets may nest deeply; give them a dedicated stack.
    let stack = (limits.max_stack_size as usize)
        .saturating_mul(STACK_PER_FRAME)
        .saturating_add(1 << 20)
        .min(MAX_THREAD_STACK);
    std::thread::scope(|s| {
        std::thread::Builder::new()
            .stack_size(stack)
            .spawn_scoped(s, || run_inline(prog, config, limits, events))
            .expect("spawn interpreter thread")
            .join()
            .expect("interpreter thread panicked")
    })
}

fn run_inline(
    prog: &Program,
    config: &ExecutionConfig,
    limits: &VmLimits,
    events: Option<&mut Vec<BranchEvent>>,
) -> ExecutionResult {
    let mut vm = Vm {
        prog,
        input: &config.input,
        fill: config.fill_byte.get(),
        limits: *limits,
        bytes: Vec::new(),
        tags: Vec::new(),
        trace: Vec::new(),
        xor: false,
        steps: 0,
        ctx: vec![context_hash_empty()],
        events,
    };
    let termination = if limits.max_stack_size == 0 {
        Termination::BoundaryConditionViolation
    } else {
        match vm.invoke(prog.main, Vec::new()) {
            Ok(_) | Err(Stop::Exit) => Termination::Normal,
            Err(Stop::Crash) => Termination::Crash,
            Err(Stop::Timeout) => Termination::Timeout,
            Err(Stop::Boundary) => Termination::BoundaryConditionViolation,
        }
    };
    ExecutionResult {
        termination,
        bytes_read: vm.bytes,
        type_tags: vm.tags,
        trace: vm.trace,
    }
}

fn as_bool(v: Value) -> bool {
    match v {
        Value::Bool(b) => b,
        Value::Int(i) => i != 0,
        Value::F32(f) => f != 0.0,
        Value::F64(f) => f != 0.0,
        Value::Void => false,
    }
}

fn to_f64(v: Value, ty: Ty) -> f64 {
    match v {
        Value::Bool(b) => f64::from(u8::from(b)),
        Value::Int(i) if ty == Ty::U64 => i as u64 as f64,
        Value::Int(i) => i as f64,
        Value::F32(f) => f64::from(f),
        Value::F64(f) => f,
        Value::Void => 0.0,
    }
}

fn convert(v: Value, from: Ty, to: Ty) -> Value {
    match to {
        Ty::Bool => Value::Bool(as_bool(v)),
        Ty::F32 => Value::F32(match v {
            Value::Int(i) if from == Ty::U64 => i as u64 as f32,
            Value::Int(i) => i as f32,
            Value::Bool(b) => f32::from(u8::from(b)),
            Value::F32(f) => f,
            Value::F64(f) => f as f32,
            Value::Void => 0.0,
        }),
        Ty::F64 => Value::F64(to_f64(v, from)),
        Ty::Void => Value::Void,
        t => Value::Int(match v {
            Value::Int(i) => wrap(t, i),
            Value::Bool(b) => i64::from(b),
            Value::F32(f) => float_to_int(t, f64::from(f)),
            Value::F64(f) => float_to_int(t, f),
            Value::Void => 0,
        }),
    }
}

fn int(v: Value) -> i64 {
    match v {
        Value::Int(i) => i,
        Value::Bool(b) => i64::from(b),
        _ => 0,
    }
}

impl<'a, 'e> Vm<'a, 'e> {
    fn tick(&mut self) -> Result<(), Stop> {
        self.steps += 1;
        if self.steps > self.limits.step_budget {
            Err(Stop::Timeout)
        } else {
            Ok(())
        }
    }

    fn emit(&mut self, uid: u32, direction: bool, value: f64) -> Result<(), Stop> {
        if self.trace.len() >= self.limits.max_trace_length as usize {
            return Err(Stop::Boundary);
        }
        let ctx = *self.ctx.last().unwrap();
        self.trace.push(ConditionRecord::new(
            ExecutionId::new(uid, ctx),
            direction,
            value,
            self.xor,
            self.bytes.len() as u32,
        ));
        Ok(())
    }

    fn read(&mut self, tag: TypeTag) -> Result<u64, Stop> {
        let w = tag.byte_width();
        let start = self.bytes.len();
        if start + w > self.limits.max_input_bytes as usize {
            return Err(Stop::Boundary);
        }
        let mut buf = [0u8; 8];
        for (k, b) in buf.iter_mut().enumerate().take(w) {
            *b = self.input.get(start + k).copied().unwrap_or(self.fill);
        }
        self.bytes.extend_from_slice(&buf[..w]);
        self.tags.push(tag);
        Ok(u64::from_le_bytes(buf))
    }

    fn invoke(&mut self, func: usize, args: Vec<Value>) -> Result<Value, Stop> {
        let f: &Function = &self.prog.functions[func];
        let mut frame = vec![Value::Void; f.slots as usize];
        for (slot, a) in frame.iter_mut().zip(args) {
            *slot = a;
        }
        match self.block(&f.body, &mut frame)? {
            Flow::Return(v) => Ok(v),
            _ => Ok(super::check::zero(f.ret)),
        }
    }

    fn block(&mut self, body: &[S], frame: &mut [Value]) -> Result<Flow, Stop> {
        for s in body {
            match self.stmt(s, frame)? {
                Flow::Next => {}
                other => return Ok(other),
            }
        }
        Ok(Flow::Next)
    }

    fn branch_event(&mut self, branch: u32, taken: bool) {
        if let Some(ev) = self.events.as_deref_mut() {
            ev.push(BranchEvent { branch, taken });
        }
    }

    fn stmt(&mut self, s: &S, frame: &mut [Value]) -> Result<Flow, Stop> {
        self.tick()?;
        match s {
            S::Set(slot, e) => {
                frame[*slot as usize] = self.eval(e, frame)?;
            }
            S::Eval(e) => {
                self.eval(e, frame)?;
            }
            S::If {
                branch,
                cond,
                then,
                els,
            } => {
                let b = as_bool(self.eval(cond, frame)?);
                self.branch_event(*branch, b);
                self.xor = false;
                let flow = self.block(if b { then } else { els }, frame)?;
                self.xor = false;
                if !matches!(flow, Flow::Next) {
                    return Ok(flow);
                }
            }
            S::Loop {
                branch,
                cond,
                body,
                step,
                test_first,
            } => {
                let mut first = true;
                loop {
                    if !first {
                        self.tick()?;
                    }
                    if *test_first || !first {
                        if let Some(c) = cond {
                            let b = as_bool(self.eval(c, frame)?);
                            self.branch_event(*branch, b);
                            self.xor = false;
                            if !b {
                                break;
                            }
                        }
                    }
                    first = false;
                    match self.block(body, frame)? {
                        Flow::Break => {
                            self.xor = false;
                            break;
                        }
                        Flow::Return(v) => return Ok(Flow::Return(v)),
                        Flow::Next | Flow::Continue => {}
                    }
                    self.block(step, frame)?;
                    self.xor = false;
                }
                self.xor = false;
            }
            S::Break => return Ok(Flow::Break),
            S::Continue => return Ok(Flow::Continue),
            S::Return(e) => {
                let v = match e {
                    Some(e) => self.eval(e, frame)?,
                    None => Value::Void,
                };
                return Ok(Flow::Return(v));
            }
        }
        Ok(Flow::Next)
    }

    fn eval(&mut self, e: &TExpr, frame: &mut [Value]) -> Result<Value, Stop> {
        let ty = e.ty;
        Ok(match &e.kind {
            K::Const(v) => *v,
            K::Local(slot) => frame[*slot as usize],
            K::Neg(a) => match self.eval(a, frame)? {
                Value::F32(f) => Value::F32(-f),
                Value::F64(f) => Value::F64(-f),
                v => Value::Int(wrap(ty, int(v).wrapping_neg())),
            },
            K::BitNot(a) => {
                let v = int(self.eval(a, frame)?);
                Value::Int(wrap(ty, !v))
            }
            K::Not(a) => Value::Bool(!as_bool(self.eval(a, frame)?)),
            K::Arith(op, a, b) => {
                let x = self.eval(a, frame)?;
                let y = self.eval(b, frame)?;
                if *op == BinOp::BitXor {
                    self.xor = true;
                }
                arith(*op, ty, x, y)?
            }
            K::Shift(left, a, b) => {
                let x = int(self.eval(a, frame)?);
                let n = (int(self.eval(b, frame)?) as u64 & u64::from(ty.bits() - 1)) as u32;
                Value::Int(if *left {
                    wrap(ty, x.wrapping_shl(n))
                } else if ty.is_signed() {
                    x >> n
                } else {
                    ((x as u64) >> n) as i64
                })
            }
            K::Cmp { uid, op, lhs, rhs } => {
                let ot = lhs.ty;
                let x = self.eval(lhs, frame)?;
                let y = self.eval(rhs, frame)?;
                let dir = compare(*op, ot, x, y);
                let value = to_f64(x, ot) - to_f64(y, ot);
                self.emit(*uid, dir, value)?;
                Value::Bool(dir)
            }
            K::Logic { and, lhs, rhs } => {
                let a = as_bool(self.eval(lhs, frame)?);
                self.xor = false;
                let r = if a == *and {
                    as_bool(self.eval(rhs, frame)?)
                } else {
                    a
                };
                self.xor = false;
                Value::Bool(r)
            }
            K::Convert(a) => {
                let from = a.ty;
                let v = self.eval(a, frame)?;
                convert(v, from, ty)
            }
            K::Truth { uid, arg } => {
                let b = as_bool(self.eval(arg, frame)?);
                self.emit(*uid, b, 1.0)?;
                Value::Bool(b)
            }
            K::Call {
                func,
                site,
                args,
                bool_uid,
            } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(self.eval(a, frame)?);
                }
                if self.ctx.len() >= self.limits.max_stack_size as usize {
                    return Err(Stop::Boundary);
                }
                self.tick()?;
                let top = *self.ctx.last().unwrap();
                let next = if self.ctx.len() - 1 < self.limits.context_depth {
                    fnv32_step(top, *site)
                } else {
                    top
                };
                self.ctx.push(next);
                self.xor = false;
                let r = self.invoke(*func as usize, vals);
                self.ctx.pop();
                self.xor = false;
                let v = r?;
                if let Some(uid) = bool_uid {
                    self.emit(*uid, as_bool(v), 1.0)?;
                }
                v
            }
            K::Read { tag, bool_uid } => {
                let raw = self.read(*tag)?;
                let v = match ty {
                    Ty::Bool => Value::Bool(raw != 0),
                    Ty::F32 => Value::F32(f32::from_bits(raw as u32)),
                    Ty::F64 => Value::F64(f64::from_bits(raw)),
                    t => Value::Int(wrap(t, raw as i64)),
                };
                if let Some(uid) = bool_uid {
                    self.emit(*uid, as_bool(v), 1.0)?;
                }
                v
            }
            K::Abort => return Err(Stop::Crash),
            K::Exit => return Err(Stop::Exit),
            K::Assume(c) => {
                if !as_bool(self.eval(c, frame)?) {
                    return Err(Stop::Exit);
                }
                Value::Void
            }
            K::Eval(a) => {
                self.eval(a, frame)?;
                Value::Void
            }
        })
    }
}

fn compare(op: CmpOp, ty: Ty, x: Value, y: Value) -> bool {
    use std::cmp::Ordering;
    let ord = match (x, y) {
        (Value::F32(a), Value::F32(b)) => a.partial_cmp(&b),
        (Value::F64(a), Value::F64(b)) => a.partial_cmp(&b),
        (Value::Bool(a), Value::Bool(b)) => Some(a.cmp(&b)),
        _ if ty.is_signed() => Some(int(x).cmp(&int(y))),
        _ => Some((int(x) as u64).cmp(&(int(y) as u64))),
    };
    match (op, ord) {
        (CmpOp::Ne, None) => true,
        (_, None) => false,
        (CmpOp::Eq, Some(o)) => o == Ordering::Equal,
        (CmpOp::Ne, Some(o)) => o != Ordering::Equal,
        (CmpOp::Lt, Some(o)) => o == Ordering::Less,
        (CmpOp::Le, Some(o)) => o != Ordering::Greater,
        (CmpOp::Gt, Some(o)) => o == Ordering::Greater,
        (CmpOp::Ge, Some(o)) => o != Ordering::Less,
    }
}

fn arith(op: BinOp, ty: Ty, x: Value, y: Value) -> Result<Value, Stop> {
    match (x, y) {
        (Value::F32(a), Value::F32(b)) => Ok(Value::F32(match op {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            _ => a / b,
        })),
        (Value::F64(a), Value::F64(b)) => Ok(Value::F64(match op {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            _ => a / b,
        })),
        _ => {
            let (a, b) = (int(x), int(y));
            let r = match op {
                BinOp::Add => a.wrapping_add(b),
                BinOp::Sub => a.wrapping_sub(b),
                BinOp::Mul => a.wrapping_mul(b),
                BinOp::BitAnd => a & b,
                BinOp::BitOr => a | b,
                BinOp::BitXor => a ^ b,
                BinOp::Div | BinOp::Rem if b == 0 => return Err(Stop::Crash),
                BinOp::Div if ty.is_signed() => a.wrapping_div(b),
                BinOp::Rem if ty.is_signed() => a.wrapping_rem(b),
                BinOp::Div => ((a as u64) / (b as u64)) as i64,
                BinOp::Rem => ((a as u64) % (b as u64)) as i64,
                _ => unreachable!("non-arithmetic operator"),
            };
            Ok(Value::Int(wrap(ty, r)))
        }
    }
}
