//! Generated corpora checked by an independent parser, evaluator and stack
//! machine that share no code with the generators.

use std::collections::{BTreeMap, HashSet};

mod common;
use common::oracle::{eval_infix, numbers_in, run_stack};

use mergelab::data::{build_tokenizer, generate_text, Corpus, Split, SyntheticTaskSpec, TaskKind, Tokenizer};

/// Complete records only; the last line may be cut at the size limit.
fn lines(kind: TaskKind, size: usize, seed: u64) -> Vec<String> {
    let text = generate_text(&SyntheticTaskSpec::new(kind, size, seed));
    let mut v: Vec<String> = text.lines().map(str::to_string).collect();
    v.pop();
    v
}

/// Deterministic 1% sample (at least one record).
fn sample(v: &[String]) -> Vec<&String> {
    let step = 100.min(v.len());
    v.iter().step_by(step).collect()
}

#[test]
fn math_answers_reevaluate() {
    let all = lines(TaskKind::Math, 200_000, 1);
    let picked = sample(&all);
    assert!(picked.len() >= 20);
    for line in picked {
        let (q, rest) = line.split_once("? ").unwrap();
        let (expr, tail) = rest.split_once('=').unwrap();
        let stated = numbers_in(tail);
        let value = eval_infix(expr);
        assert_eq!(stated, vec![value, value], "{line}");
        assert_eq!(numbers_in(q), numbers_in(expr), "{line}");
    }
}

#[test]
fn code_traces_reexecute() {
    for (kind, size) in [(TaskKind::Code, 200_000), (TaskKind::IndomainA, 50_000)] {
        let all = lines(kind, size, 2);
        for line in sample(&all) {
            let body = line.strip_prefix("run ").unwrap();
            let (prog, rest) = body.split_once(" ; ").unwrap();
            let (trace, out) = rest.split_once(" => ").unwrap();
            let (snaps, printed) = run_stack(prog);
            assert_eq!(trace, snaps.join(" "), "{line}");
            assert_eq!(printed, vec![out.parse::<i64>().unwrap()], "{line}");
        }
    }
}

#[test]
fn crossdomain_programs_answer_the_question() {
    let all = lines(TaskKind::Crossdomain, 200_000, 3);
    for line in sample(&all) {
        let (q, rest) = line.split_once(" run ").unwrap();
        let (prog, out) = rest.split_once(" => ").unwrap();
        let literals: Vec<i64> = prog.split_whitespace().filter_map(|w| w.parse().ok()).collect();
        assert_eq!(numbers_in(q), literals, "{line}");
        let ops: Vec<&str> = prog
            .split_whitespace()
            .filter(|w| matches!(*w, "add" | "sub" | "mul"))
            .collect();
        let infix: String = literals
            .iter()
            .enumerate()
            .map(|(i, v)| match i {
                0 => v.to_string(),
                _ => format!(
                    "{}{v}",
                    match ops[i - 1] {
                        "add" => '+',
                        "sub" => '-',
                        _ => '*',
                    }
                ),
            })
            .collect();
        let expected = out.parse::<i64>().unwrap();
        assert_eq!(eval_infix(&infix), expected, "{line}");
        assert_eq!(run_stack(prog).1, vec![expected], "{line}");
    }
}

#[test]
fn compile_records_agree() {
    for kind in [TaskKind::IndomainB, TaskKind::IndomainAdapt2] {
        let all = lines(kind, 100_000, 4);
        for line in sample(&all) {
            let body = line.strip_prefix("compile ").unwrap();
            let (expr, rest) = body.split_once(" : ").unwrap();
            let (prog, value) = match rest.split_once(" => ") {
                Some((p, v)) => (p, Some(v.parse::<i64>().unwrap())),
                None => (rest, None),
            };
            let printed = run_stack(prog).1;
            assert_eq!(printed, vec![eval_infix(expr)], "{line}");
            if let Some(v) = value {
                assert_eq!(printed, vec![v], "{line}");
            }
        }
    }
    let all = lines(TaskKind::IndomainAdapt1, 50_000, 4);
    for line in sample(&all) {
        let (prog, out) = line.strip_prefix("run ").unwrap().split_once(" => ").unwrap();
        assert_eq!(run_stack(prog).1, vec![out.parse::<i64>().unwrap()], "{line}");
    }
}

fn trigram_dist(text: &str) -> BTreeMap<[char; 3], f64> {
    let cs: Vec<char> = text.chars().collect();
    let mut m = BTreeMap::new();
    for w in cs.windows(3) {
        *m.entry([w[0], w[1], w[2]]).or_insert(0.0) += 1.0;
    }
    let total = (cs.len() - 2) as f64;
    m.values_mut().for_each(|v| *v /= total);
    m
}

fn js_divergence(p: &BTreeMap<[char; 3], f64>, q: &BTreeMap<[char; 3], f64>) -> f64 {
    let keys: HashSet<&[char; 3]> = p.keys().chain(q.keys()).collect();
    let mut js = 0.0;
    for k in keys {
        let a = p.get(k).copied().unwrap_or(0.0);
        let b = q.get(k).copied().unwrap_or(0.0);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    js
}

#[test]
fn math_and_code_are_distinct_domains() {
    let math = generate_text(&SyntheticTaskSpec::new(TaskKind::Math, 50_000, 5));
    let code = generate_text(&SyntheticTaskSpec::new(TaskKind::Code, 50_000, 5));
    let js = js_divergence(&trigram_dist(&math), &trigram_dist(&code));
    assert!(js > 0.05, "JS divergence {js}");
    let again = js_divergence(&trigram_dist(&math), &trigram_dist(&math));
    assert!(again.abs() < 1e-12);
}

fn fixture() -> (Corpus, Tokenizer) {
    let specs: Vec<SyntheticTaskSpec> = TaskKind::ALL
        .iter()
        .map(|&k| SyntheticTaskSpec::new(k, 20_000, 7))
        .collect();
    let tok = build_tokenizer(&specs);
    (Corpus::generate(&specs[1], &tok), tok)
}

#[test]
fn tokenizer_covers_every_generator_and_is_stable() {
    let specs: Vec<SyntheticTaskSpec> = TaskKind::ALL
        .iter()
        .map(|&k| SyntheticTaskSpec::new(k, 20_000, 7))
        .collect();
    let tok = build_tokenizer(&specs);
    assert_eq!(tok, build_tokenizer(&specs));
    assert!(tok.vocab_size() <= 128, "{}", tok.vocab_size());
    for s in &specs {
        let text = generate_text(s);
        let ids = tok.encode(&text);
        assert!(ids.iter().all(|&i| i >= 2 && i < tok.vocab_size()));
        assert_eq!(tok.decode(&ids), text);
    }
}

#[test]
fn batches_shift_by_one() {
    let (c, _) = fixture();
    for b in c.batches(Split::Train, 4, 16, 9).unwrap().take(20) {
        for r in 0..4 {
            let row = &b.tokens[r * 16..(r + 1) * 16];
            let tgt = &b.targets[r * 16..(r + 1) * 16];
            assert_eq!(&row[1..], &tgt[..15]);
            assert_eq!(tgt[15], c.tokens()[b.starts[r] + 16]);
            assert_eq!(row, &c.tokens()[b.starts[r]..b.starts[r] + 16]);
        }
        assert!(b.mask.iter().all(|&m| m == 1.0));
    }
}

#[test]
fn splits_are_disjoint() {
    let (c, _) = fixture();
    let split = c.split_offset();
    for b in c.batches(Split::Train, 8, 32, 1).unwrap().take(500) {
        assert!(b.starts.iter().all(|&s| s + 32 < split));
    }
    for b in c.batches(Split::Validation, 8, 32, 1).unwrap().take(100) {
        assert!(b.starts.iter().all(|&s| s >= split && s + 32 < c.len()));
    }
}

#[test]
fn batches_and_corpora_are_deterministic() {
    let (c, tok) = fixture();
    let first = |seed| c.batches(Split::Train, 4, 16, seed).unwrap().next().unwrap().checksum();
    assert_eq!(first(3), first(3));
    assert_ne!(first(3), first(4));
    let again = Corpus::generate(&c.spec, &tok);
    assert_eq!(again.text(), c.text());
    assert_eq!(again.spec_hash, c.spec_hash);
}
