use super::*;
use crate::abi::{ExecutionConfig, FillByte, Termination, TypeTag};

fn run(src: &str, input: &[u8]) -> ExecutionResult {
    let p = parse_program(src).unwrap();
    let cfg = ExecutionConfig {
        input: input.to_vec(),
        ..Default::default()
    };
    execute(&p, &cfg, &VmLimits::for_config(&cfg, 100_000))
}

const SENS: &str = "
int main() {
    char c = __VERIFIER_nondet_char();
    c = c & 7;
    bool bi0 = ((c ^ 7) * (c ^ 1)) != 0;
    if (bi0) return 0;
    bool bi1 = c > 2;
    return 0;
}";

#[test]
fn trivial_program_has_no_boolean_instructions() {
    let p = parse_program("int main(){ return 0; }").unwrap();
    assert!(p.boolean_instructions().is_empty());
    let r = run("int main(){ return 0; }", &[]);
    assert_eq!(r.termination, Termination::Normal);
    assert!(r.trace.is_empty());
}

#[test]
fn one_comparison_site() {
    let p = parse_program("int main(){ int x = nondet_int(); bool b = x < 123456789; return 0; }")
        .unwrap();
    assert_eq!(p.boolean_instructions().len(), 1);
    assert_eq!(p.boolean_instructions()[0].kind, BranchKind::Comparison);
    assert_eq!(p.boolean_instructions()[0].uid, 1);
}

#[test]
fn unbalanced_braces_rejected() {
    assert!(parse_program("int main(){ if (1) { return 0; }").is_err());
    let e = parse_program("int main() { return 0; }}").unwrap_err();
    assert_eq!(e.line, 1);
}

#[test]
fn branching_values() {
    assert_eq!(branching_value(0.0, 123456789.0, BranchKind::Comparison), -123456789.0);
    assert_eq!(branching_value(5.0, -3.0, BranchKind::Truncation), 1.0);
    assert_eq!(branching_value(5.0, -3.0, BranchKind::BoolCall), 1.0);
    assert_eq!(branching_value(42.0, 42.0, BranchKind::Comparison), 0.0);
}

#[test]
fn empty_input_reads_fill_bytes() {
    let r = run(
        "int main(){ int x = __VERIFIER_nondet_int(); bool b = x < 123456789; return 0; }",
        &[],
    );
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.trace[0].value, -123456789.0);
    assert!(r.trace[0].direction);
    assert_eq!(r.trace[0].nbytes, 4);
    assert_eq!(r.bytes_read, vec![0; 4]);
    assert_eq!(r.type_tags, vec![TypeTag::Sint32]);
}

#[test]
fn fill_byte_85_is_used() {
    let p = parse_program("int main(){ uchar x = nondet_uchar(); bool b = x == 85; return 0; }")
        .unwrap();
    let cfg = ExecutionConfig {
        fill_byte: FillByte::ALTERNATING,
        ..Default::default()
    };
    let r = execute(&p, &cfg, &VmLimits::for_config(&cfg, 1000));
    assert_eq!(r.bytes_read, vec![85]);
    assert!(r.trace[0].direction);
}

#[test]
fn sensitivity_example_values() {
    // Only bi0 is recorded for c = 0 because `if (bi0)` tests a bool.
    let r = run(SENS, &[0x00]);
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.trace[0].value, 7.0);
    assert_eq!(r.trace[0].nbytes, 1);
    assert!(r.trace[0].xor);
    let mut seen: Vec<f64> = (0..=255u8).map(|b| run(SENS, &[b]).trace[0].value).collect();
    seen.sort_by(f64::total_cmp);
    seen.dedup();
    assert_eq!(seen, vec![0.0, 7.0, 8.0, 15.0]);
    // c == 7 reaches bi1 with f = 5, c == 1 with f = -1.
    let r = run(SENS, &[0x07]);
    assert_eq!(r.trace.len(), 2);
    assert_eq!(r.trace[1].value, 5.0);
    assert!(!r.trace[1].xor);
    assert_eq!(run(SENS, &[0x01]).trace[1].value, -1.0);
}

#[test]
fn loop_past_trace_limit_is_boundary_violation() {
    let p = parse_program("int main(){ int i = 0; while (i < 1000000) { i++; } return 0; }")
        .unwrap();
    let cfg = ExecutionConfig {
        max_trace_length: 50,
        ..Default::default()
    };
    let r = execute(&p, &cfg, &VmLimits::for_config(&cfg, 1 << 30));
    assert_eq!(r.termination, Termination::BoundaryConditionViolation);
    assert_eq!(r.trace.len(), 50);
}

#[test]
fn step_budget_gives_timeout() {
    let p = parse_program("int main(){ while (true) { } return 0; }").unwrap();
    let cfg = ExecutionConfig::default();
    let r = execute(&p, &cfg, &VmLimits::for_config(&cfg, 1000));
    assert_eq!(r.termination, Termination::Timeout);
    assert!(r.trace.is_empty());
}

#[test]
fn input_limit_gives_boundary_violation() {
    let p = parse_program("int main(){ while (true) { int x = nondet_int(); } return 0; }").unwrap();
    let cfg = ExecutionConfig {
        max_input_bytes: 10,
        ..Default::default()
    };
    let r = execute(&p, &cfg, &VmLimits::for_config(&cfg, 1 << 20));
    assert_eq!(r.termination, Termination::BoundaryConditionViolation);
    assert_eq!(r.bytes_read.len(), 8);
}

#[test]
fn recursion_depth_limit() {
    let src = "int f(int n){ if (n > 0) return f(n - 1); return 0; }
               int main(){ return f(nondet_int()); }";
    let p = parse_program(src).unwrap();
    let mk = |n: i32, stack| {
        let cfg = ExecutionConfig {
            input: n.to_le_bytes().to_vec(),
            max_stack_size: stack,
            ..Default::default()
        };
        execute(&p, &cfg, &VmLimits::for_config(&cfg, 1 << 20))
    };
    // main plus 11 frames of f for n = 10.
    assert_eq!(mk(10, 12).termination, Termination::Normal);
    assert_eq!(mk(10, 11).termination, Termination::BoundaryConditionViolation);
    assert_eq!(mk(200, 256).termination, Termination::Normal);
}

#[test]
fn abort_and_division_by_zero_crash() {
    assert_eq!(run("int main(){ abort(); return 0; }", &[]).termination, Termination::Crash);
    assert_eq!(
        run("int main(){ int x = nondet_int(); return 10 / x; }", &[]).termination,
        Termination::Crash
    );
    assert_eq!(
        run("int main(){ int x = nondet_int(); return 10 / x; }", &[2, 0, 0, 0]).termination,
        Termination::Normal
    );
    assert_eq!(run("int main(){ exit(3); abort(); }", &[]).termination, Termination::Normal);
}

#[test]
fn calling_context_distinguishes_call_sites() {
    let src = "void foo(int x) { if (x < 0) abort(); }
               int main() { int a = nondet_int(); int b = nondet_int(); foo(a); foo(b); return 0; }";
    let r = run(src, &[1, 0, 0, 0, 1, 0, 0, 0]);
    assert_eq!(r.trace.len(), 2);
    assert_eq!(r.trace[0].id.uid, r.trace[1].id.uid);
    assert_ne!(r.trace[0].id.ctx, r.trace[1].id.ctx);
    assert_ne!(r.trace[0].id.ctx, crate::abi::context_hash_empty());
}

#[test]
fn xor_flag_resets_at_control_transfer() {
    let src = "int main() {
        char x = nondet_char();
        char y = x ^ 3;
        if (y == 0) { }
        if (x == 1) { }
        return 0; }";
    let r = run(src, &[0]);
    assert!(r.trace[0].xor);
    assert!(!r.trace[1].xor);
}

#[test]
fn truncation_and_bool_calls_record_one() {
    let src = "bool pos(int v) { return v > 0; }
        int main() {
            int x = nondet_int();
            bool t = (bool)x;
            bool p = pos(x);
            bool q = nondet_bool();
            return 0; }";
    let p = parse_program(src).unwrap();
    let kinds: Vec<BranchKind> = p.boolean_instructions().iter().map(|s| s.kind).collect();
    assert_eq!(
        kinds,
        vec![
            BranchKind::Comparison,
            BranchKind::Truncation,
            BranchKind::BoolCall,
            BranchKind::BoolCall
        ]
    );
    let r = run(src, &[5, 0, 0, 0, 1]);
    let vals: Vec<f64> = r.trace.iter().map(|t| t.value).collect();
    assert_eq!(vals, vec![1.0, 5.0, 1.0, 1.0]);
    assert!(r.trace.iter().all(|t| t.direction));
}

#[test]
fn numeric_condition_is_implicit_comparison() {
    let r = run("int main(){ int x = nondet_int(); if (x) { } return 0; }", &[9, 0, 0, 0]);
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.trace[0].value, 9.0);
    assert!(r.trace[0].direction);
    // A constant condition produces nothing.
    let r = run("int main(){ int i = 0; while (1) { i++; if (i == 3) break; } return 0; }", &[]);
    assert_eq!(r.trace.len(), 3);
}

#[test]
fn read_order_and_tags() {
    let r = run(
        "int main(){ char a = __VERIFIER_nondet_char(); float f = __VERIFIER_nondet_float();
          short s = __VERIFIER_nondet_short(); return 0; }",
        &[],
    );
    assert_eq!(r.bytes_read.len(), 7);
    assert_eq!(r.type_tags, vec![TypeTag::Sint8, TypeTag::Float32, TypeTag::Sint16]);
}

#[test]
fn bit_swap_line_swaps_lsb_and_bit_three() {
    let src = "int main() {
        char x = __VERIFIER_nondet_char() & 15;
        x = ((x & 1) << 3) | (x & 6) | (x & 8) >> 3;
        bool bi = x == 4;
        return 0; }";
    for v in 0u8..16 {
        let r = run(src, &[v]);
        let swapped = ((v & 1) << 3) | (v & 6) | ((v & 8) >> 3);
        assert_eq!(r.trace[0].value, f64::from(swapped) - 4.0);
    }
}

#[test]
fn integer_semantics() {
    let r = run(
        "int main(){ uchar u = nondet_uchar(); uchar w = u + 1; bool a = w == 0;
                     int m = nondet_int(); bool b = -m < 0; unsigned int k = 0; k = k - 1;
                     bool c = k > 5; long s = -8; bool d = (s >> 1) == -4; return 0; }",
        &[255, 0, 0, 0, 0x80],
    );
    let d: Vec<bool> = r.trace.iter().map(|t| t.direction).collect();
    // m = INT_MIN so -m wraps to INT_MIN.
    assert_eq!(d, vec![true, true, true, true]);
}

#[test]
fn floats_and_casts() {
    let r = run(
        "int main(){ double d = nondet_double(); bool a = d > 0.5; int i = (int)d;
                     bool b = i == 1; float f = (float)d; bool c = f < 2.0f; return 0; }",
        &1.75f64.to_le_bytes(),
    );
    assert_eq!(r.trace[0].value, 1.25);
    assert!(r.trace[1].direction);
    assert!(r.trace[2].direction);
}

#[test]
fn untyped_reads() {
    let r = run(
        "int main(){ u8 b = __VERIFIER_nondet_untyped8(); bool t = b == 3; return 0; }",
        &[3],
    );
    assert_eq!(r.type_tags, vec![TypeTag::Untyped8]);
    assert!(r.trace[0].direction);
}

#[test]
fn type_errors_report_position() {
    let e = parse_program("int main(){\n  return y; }").unwrap_err();
    assert_eq!((e.line, e.col), (2, 10));
    assert!(parse_program("int main(){ break; }").is_err());
    assert!(parse_program("int f(){ return 0; }").is_err());
    assert!(parse_program("int main(){ g(); return 0; }").is_err());
}

#[test]
fn branch_events_reported() {
    let src = "int main(){ int x = nondet_int(); bool b = x == 1; if (b) { } else { } return 0; }";
    let p = parse_program(src).unwrap();
    let cfg = ExecutionConfig::default();
    let (_, ev) = execute_with_branches(&p, &cfg, &VmLimits::for_config(&cfg, 1000));
    assert_eq!(ev, vec![BranchEvent { branch: 0, taken: false }]);
    assert_eq!(p.branch_count(), 1);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    const PROG: &str = "
        int g(int v) { if (v % 3 == 1) return v / 2; return v * 3; }
        int main() {
            int n = nondet_int() & 15;
            int acc = 0;
            for (int i = 0; i < n; i++) {
                short s = nondet_short();
                if (s > 100) acc = acc + g(s); else acc = acc - 1;
            }
            double d = nondet_double();
            if (d < acc) return 1;
            return 0;
        }";

    fn cfg(input: Vec<u8>, trace: u32) -> ExecutionConfig {
        ExecutionConfig {
            input,
            max_trace_length: trace,
            ..Default::default()
        }
    }

    proptest! {
        #[test]
        fn deterministic_and_well_formed(input in proptest::collection::vec(any::<u8>(), 0..48),
                                         trace in 1u32..60) {
            let p = parse_program(PROG).unwrap();
            let c = cfg(input, trace);
            let l = VmLimits::for_config(&c, 10_000);
            let a = execute(&p, &c, &l);
            let b = execute(&p, &c, &l);
            prop_assert_eq!(&a, &b);
            prop_assert!(a.is_well_formed(&c));
            let n = a.bytes_read.len().min(c.input.len());
            prop_assert_eq!(&a.bytes_read[..n], &c.input[..n]);
        }

        #[test]
        fn prefix_stability(input in proptest::collection::vec(any::<u8>(), 0..48),
                            extra in proptest::collection::vec(any::<u8>(), 0..16)) {
            let p = parse_program(PROG).unwrap();
            let u = cfg(input.clone(), 10_000);
            let ru = execute(&p, &u, &VmLimits::for_config(&u, 100_000));
            let mut longer = ru.bytes_read.clone();
            longer.extend(extra);
            let v = cfg(longer, 10_000);
            let rv = execute(&p, &v, &VmLimits::for_config(&v, 100_000));
            if rv.bytes_read.len() <= ru.bytes_read.len() {
                prop_assert_eq!(ru, rv);
            }
        }

        #[test]
        fn comparison_sign_matches_direction(a in any::<i32>(), b in any::<i32>()) {
            let src = "int main(){ int x = nondet_int(); int y = nondet_int();
                bool p = x < y; bool q = x >= y; bool r = x == y; bool s = x > y; return 0; }";
            let mut input = a.to_le_bytes().to_vec();
            input.extend(b.to_le_bytes());
            let t = run(src, &input).trace;
            prop_assert_eq!(t[0].direction, t[0].value < 0.0);
            prop_assert_eq!(t[1].direction, t[1].value >= 0.0);
            prop_assert_eq!(t[2].direction, t[2].value == 0.0);
            prop_assert_eq!(t[3].direction, t[3].value > 0.0);
        }
    }
}
