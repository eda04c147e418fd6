//! Independent re-evaluation of generated records: a recursive-descent
//! infix evaluator and a stack machine written without the generator code.

use mergelab::data::TaskKind;

/// Recursive-descent evaluator with standard precedence.
pub fn eval_infix(src: &str) -> i64 {
    fn atom(s: &[u8], i: &mut usize) -> i64 {
        if s[*i] == b'(' {
            *i += 1;
            let v = sum(s, i);
            assert_eq!(s[*i], b')');
            *i += 1;
            v
        } else {
            let start = *i;
            while *i < s.len() && s[*i].is_ascii_digit() {
                *i += 1;
            }
            std::str::from_utf8(&s[start..*i]).unwrap().parse().unwrap()
        }
    }
    fn product(s: &[u8], i: &mut usize) -> i64 {
        let mut v = atom(s, i);
        while *i < s.len() && s[*i] == b'*' {
            *i += 1;
            v *= atom(s, i);
        }
        v
    }
    fn sum(s: &[u8], i: &mut usize) -> i64 {
        let mut v = product(s, i);
        while *i < s.len() && (s[*i] == b'+' || s[*i] == b'-') {
            let op = s[*i];
            *i += 1;
            let r = product(s, i);
            v = if op == b'+' { v + r } else { v - r };
        }
        v
    }
    let mut i = 0;
    let v = sum(src.as_bytes(), &mut i);
    assert_eq!(i, src.len(), "trailing input in {src:?}");
    v
}

/// Returns (stack after each word, printed values).
pub fn run_stack(src: &str) -> (Vec<String>, Vec<i64>) {
    let mut st: Vec<i64> = Vec::new();
    let mut snaps = Vec::new();
    let mut out = Vec::new();
    for w in src.split_whitespace() {
        match w {
            "add" | "sub" | "mul" => {
                let b = st.pop().unwrap();
                let a = st.pop().unwrap();
                st.push(match w {
                    "add" => a + b,
                    "sub" => a - b,
                    _ => a * b,
                });
            }
            "dup" => st.push(*st.last().unwrap()),
            "swap" => {
                let b = st.pop().unwrap();
                let a = st.pop().unwrap();
                st.push(b);
                st.push(a);
            }
            "print" => out.push(st.pop().unwrap()),
            lit => st.push(lit.parse().unwrap()),
        }
        let inner: Vec<String> = st.iter().map(|v| v.to_string()).collect();
        snaps.push(format!("[{}]", inner.join(" ")));
    }
    (snaps, out)
}

pub fn numbers_in(s: &str) -> Vec<i64> {
    s.split(|c: char| !c.is_ascii_digit())
        .filter(|w| !w.is_empty())
        .map(|w| w.parse().unwrap())
        .collect()
}

/// Re-derives every answer a record states; `Err` describes the mismatch.
pub fn check_record(kind: TaskKind, line: &str) -> Result<(), String> {
    let bad = || format!("{}: {line}", kind.name());
    let parse = |s: &str| s.trim().parse::<i64>().map_err(|_| bad());
    match kind {
        TaskKind::Math => {
            let (q, rest) = line.split_once("? ").ok_or_else(bad)?;
            let (expr, tail) = rest.split_once('=').ok_or_else(bad)?;
            let v = eval_infix(expr);
            if numbers_in(tail) != vec![v, v] || numbers_in(q) != numbers_in(expr) {
                return Err(bad());
            }
        }
        TaskKind::Code | TaskKind::IndomainA => {
            let body = line.strip_prefix("run ").ok_or_else(bad)?;
            let (prog, rest) = body.split_once(" ; ").ok_or_else(bad)?;
            let (trace, out) = rest.split_once(" => ").ok_or_else(bad)?;
            let (snaps, printed) = run_stack(prog);
            if trace != snaps.join(" ") || printed != vec![parse(out)?] {
                return Err(bad());
            }
        }
        TaskKind::Crossdomain => {
            let (_, rest) = line.split_once(" run ").ok_or_else(bad)?;
            let (prog, out) = rest.split_once(" => ").ok_or_else(bad)?;
            if run_stack(prog).1 != vec![parse(out)?] {
                return Err(bad());
            }
        }
        TaskKind::IndomainB | TaskKind::IndomainAdapt2 => {
            let body = line.strip_prefix("compile ").ok_or_else(bad)?;
            let (expr, rest) = body.split_once(" : ").ok_or_else(bad)?;
            let (prog, value) = match rest.split_once(" => ") {
                Some((p, v)) => (p, Some(parse(v)?)),
                None => (rest, None),
            };
            let printed = run_stack(prog).1;
            if printed != vec![eval_infix(expr)] || value.is_some_and(|v| printed != vec![v]) {
                return Err(bad());
            }
        }
        TaskKind::IndomainAdapt1 => {
            let (prog, out) = line
                .strip_prefix("run ")
                .ok_or_else(bad)?
                .split_once(" => ")
                .ok_or_else(bad)?;
            if run_stack(prog).1 != vec![parse(out)?] {
                return Err(bad());
            }
        }
        TaskKind::PretrainMix => {}
    }
    Ok(())
}
