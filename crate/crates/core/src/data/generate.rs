//! Deterministic synthetic corpora. Every answer in the emitted text is
//! computed by an exact evaluator, so targets are verifiably correct.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::stack::{execute, format_program, format_stack, Instr};
use crate::error::{Error, Result};
use crate::numerics::{seeded, Rng64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    PretrainMix,
    Math,
    Code,
    Crossdomain,
    IndomainA,
    IndomainB,
    IndomainAdapt1,
    IndomainAdapt2,
}

impl TaskKind {
    pub const ALL: [TaskKind; 8] = [
        TaskKind::PretrainMix,
        TaskKind::Math,
        TaskKind::Code,
        TaskKind::Crossdomain,
        TaskKind::IndomainA,
        TaskKind::IndomainB,
        TaskKind::IndomainAdapt1,
        TaskKind::IndomainAdapt2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PretrainMix => "pretrain_mix",
            TaskKind::Math => "math",
            TaskKind::Code => "code",
            TaskKind::Crossdomain => "crossdomain",
            TaskKind::IndomainA => "indomain_a",
            TaskKind::IndomainB => "indomain_b",
            TaskKind::IndomainAdapt1 => "indomain_adapt_1",
            TaskKind::IndomainAdapt2 => "indomain_adapt_2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    /// Corpus length in tokens (characters).
    pub size_tokens: usize,
    /// Largest literal operand drawn by the generators.
    #[serde(default = "default_max_operand")]
    pub max_operand: i64,
    /// Instruction count for generated stack programs (before the final `print`).
    #[serde(default = "default_program_len")]
    pub program_len: usize,
    /// Fraction of records drawn from the pretraining mix instead of `kind`.
    #[serde(default)]
    pub pretrain_mix_ratio: f64,
    /// Combined with the run seed by the experiment harness.
    #[serde(default)]
    pub seed: u64,
}

fn default_max_operand() -> i64 {
    20
}

fn default_program_len() -> usize {
    4
}

impl SyntheticTaskSpec {
    pub fn new(kind: TaskKind, size_tokens: usize, seed: u64) -> Self {
        Self {
            kind,
            size_tokens,
            max_operand: default_max_operand(),
            program_len: default_program_len(),
            pretrain_mix_ratio: 0.0,
            seed,
        }
    }

    pub fn validate(&self, context_length: usize) -> Result<()> {
        if self.size_tokens < 10 * context_length {
            return Err(Error::Config(format!(
                "{} corpus of {} tokens is smaller than 10 x context ({context_length})",
                self.kind.name(),
                self.size_tokens
            )));
        }
        if self.max_operand < 2 || self.program_len < 1 {
            return Err(Error::Config(format!("{}: degenerate difficulty", self.kind.name())));
        }
        if !(0.0..=1.0).contains(&self.pretrain_mix_ratio) {
            return Err(Error::Config("pretrain_mix_ratio must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

const NAMES: &[&str] = &["Ann", "Bob", "Cy", "Dee", "Eli", "Fay", "Gus", "Hal", "Ivy", "Jo"];
const OBJECTS: &[&str] = &["apple", "pen", "book", "coin", "cup", "egg", "hat", "key"];
const PLACES: &[&str] = &["market", "park", "school", "river", "shop", "farm"];
const ADJECTIVES: &[&str] = &["red", "small", "old", "new", "green", "big"];

/// One arithmetic word problem: the question text plus the structured expression.
#[derive(Clone, Debug)]
pub struct WordProblem {
    pub question: String,
    pub operands: Vec<i64>,
    /// `+`, `-` or `*` between consecutive operands, evaluated left to right.
    pub ops: Vec<char>,
    pub answer: i64,
}

impl WordProblem {
    pub fn expression(&self) -> String {
        let mut s = self.operands[0].to_string();
        for (op, v) in self.ops.iter().zip(&self.operands[1..]) {
            s.push(*op);
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn program(&self) -> Vec<Instr> {
        let mut p = vec![Instr::Push(self.operands[0])];
        for (op, v) in self.ops.iter().zip(&self.operands[1..]) {
            p.push(Instr::Push(*v));
            p.push(match op {
                '+' => Instr::Add,
                '-' => Instr::Sub,
                _ => Instr::Mul,
            });
        }
        p.push(Instr::Print);
        p
    }
}

fn word_problem(rng: &mut Rng64, max: i64) -> WordProblem {
    let n = *NAMES.choose(rng).unwrap();
    let o = *OBJECTS.choose(rng).unwrap();
    let mut a = rng.random_range(2..=max);
    let b = rng.random_range(1..=max);
    let (question, operands, ops) = match rng.random_range(0..4) {
        0 => (
            format!("{n} has {a} {o}s and gets {b} more. How many {o}s now?"),
            vec![a, b],
            vec!['+'],
        ),
        1 => {
            a = a.max(b + 1);
            (
                format!("{n} had {a} {o}s and lost {b}. How many {o}s are left?"),
                vec![a, b],
                vec!['-'],
            )
        }
        2 => {
            let a = rng.random_range(2..=max.min(9));
            let b = rng.random_range(2..=max.min(9));
            (
                format!("{n} buys {a} boxes of {b} {o}s. How many {o}s in all?"),
                vec![a, b],
                vec!['*'],
            )
        }
        _ => {
            let c = rng.random_range(1..=a + b);
            (
                format!("{n} has {a} {o}s, gets {b} more and loses {c}. How many {o}s now?"),
                vec![a, b, c],
                vec!['+', '-'],
            )
        }
    };
    let answer = eval_left_to_right(&operands, &ops);
    WordProblem {
        question,
        operands,
        ops,
        answer,
    }
}

fn eval_left_to_right(operands: &[i64], ops: &[char]) -> i64 {
    let mut acc = operands[0];
    for (op, v) in ops.iter().zip(&operands[1..]) {
        acc = match op {
            '+' => acc + v,
            '-' => acc - v,
            _ => acc * v,
        };
    }
    acc
}

/// Random well-formed program of `len` instructions, folded to one value and
/// printed. Intermediate values stay below 100 in magnitude.
pub fn random_program(rng: &mut Rng64, len: usize, max: i64) -> Vec<Instr> {
    const MAX_DEPTH: usize = 3;
    let lit = max.min(9);
    let mut prog = Vec::with_capacity(len + MAX_DEPTH + 1);
    let mut stack: Vec<i64> = Vec::new();
    for _ in 0..len {
        let d = stack.len();
        let mut choices: Vec<Instr> = Vec::new();
        if d < MAX_DEPTH {
            choices.push(Instr::Push(rng.random_range(0..=lit)));
        }
        if (1..MAX_DEPTH).contains(&d) {
            choices.push(Instr::Dup);
        }
        if d >= 2 {
            choices.extend([Instr::Add, Instr::Sub, Instr::Mul, Instr::Swap]);
        }
        let mut ins = *choices.choose(rng).unwrap();
        if d >= 2 {
            let (x, y) = (stack[d - 2], stack[d - 1]);
            let v = match ins {
                Instr::Add => x + y,
                Instr::Sub => x - y,
                Instr::Mul => x * y,
                _ => 0,
            };
            if v.abs() >= 100 {
                ins = Instr::Swap;
            }
        }
        prog.push(ins);
        stack = execute(&prog)
            .expect("generator emits valid programs")
            .trace
            .pop()
            .unwrap();
    }
    if stack.is_empty() {
        prog.push(Instr::Push(rng.random_range(0..=lit)));
    }
    for _ in 1..stack.len() {
        prog.push(Instr::Add);
    }
    prog.push(Instr::Print);
    prog
}

/// Random infix expression over small literals with its value and postfix form.
fn random_expression(rng: &mut Rng64, depth: usize) -> (String, i64, Vec<Instr>) {
    if depth == 0 || rng.random_bool(0.3) {
        let v = rng.random_range(1..=9);
        return (v.to_string(), v, vec![Instr::Push(v)]);
    }
    let (ls, lv, mut lp) = random_expression(rng, depth - 1);
    let (rs, rv, rp) = random_expression(rng, depth - 1);
    let (sym, val, ins) = match rng.random_range(0..3) {
        0 => ('+', lv + rv, Instr::Add),
        1 => ('-', lv - rv, Instr::Sub),
        _ => ('*', lv * rv, Instr::Mul),
    };
    lp.extend(rp);
    lp.push(ins);
    (format!("({ls}{sym}{rs})"), val, lp)
}

fn math_record(rng: &mut Rng64, spec: &SyntheticTaskSpec) -> String {
    let p = word_problem(rng, spec.max_operand);
    format!("{} {}={}. Answer: {}.", p.question, p.expression(), p.answer, p.answer)
}

fn code_record(rng: &mut Rng64, spec: &SyntheticTaskSpec) -> String {
    let prog = random_program(rng, spec.program_len, spec.max_operand);
    let exec = execute(&prog).unwrap();
    let trace: Vec<String> = exec.trace.iter().map(|s| format_stack(s)).collect();
    format!(
        "run {} ; {} => {}",
        format_program(&prog),
        trace.join(" "),
        exec.output[0]
    )
}

fn crossdomain_record(rng: &mut Rng64, spec: &SyntheticTaskSpec) -> String {
    let p = word_problem(rng, spec.max_operand);
    let prog = p.program();
    let out = execute(&prog).unwrap().output[0];
    debug_assert_eq!(out, p.answer);
    format!("{} run {} => {}", p.question, format_program(&prog), out)
}

fn compile_record(rng: &mut Rng64, with_value: bool) -> String {
    let (expr, val, prog) = random_expression(rng, 2);
    let mut prog = prog;
    prog.push(Instr::Print);
    if with_value {
        format!("compile {expr} : {} => {val}", format_program(&prog))
    } else {
        format!("compile {expr} : {}", format_program(&prog))
    }
}

fn run_short_record(rng: &mut Rng64, spec: &SyntheticTaskSpec) -> String {
    let prog = random_program(rng, spec.program_len + 1, spec.max_operand);
    let out = execute(&prog).unwrap().output[0];
    format!("run {} => {}", format_program(&prog), out)
}

fn pretrain_record(rng: &mut Rng64, spec: &SyntheticTaskSpec) -> String {
    let n = *NAMES.choose(rng).unwrap();
    let o = *OBJECTS.choose(rng).unwrap();
    let place = *PLACES.choose(rng).unwrap();
    let adj = *ADJECTIVES.choose(rng).unwrap();
    let a = rng.random_range(1..=spec.max_operand);
    let b = rng.random_range(1..=spec.max_operand);
    match rng.random_range(0..8) {
        0 => format!("{n} walks to the {place} and sees {a} {adj} {o}s."),
        1 => format!("The {adj} {o} is near the {place}, said {n}."),
        2 => format!("{a} plus {b} is {}.", a + b),
        3 => format!("{n} counts {a} {o}s at the {place}."),
        4 => format!("{} minus {} is {}.", a.max(b), a.min(b), a.max(b) - a.min(b)),
        5 => {
            let prog = random_program(rng, 3, spec.max_operand);
            let out = execute(&prog).unwrap().output[0];
            format!("The program {} prints {out}.", format_program(&prog))
        }
        6 => format!("To add two numbers, {n} pushes {a} and {b} and calls add."),
        _ => format!("{n} and the {adj} {o}s stay at the {place} today."),
    }
}

fn record(kind: TaskKind, rng: &mut Rng64, spec: &SyntheticTaskSpec) -> String {
    match kind {
        TaskKind::PretrainMix => pretrain_record(rng, spec),
        TaskKind::Math => math_record(rng, spec),
        TaskKind::Code | TaskKind::IndomainA => code_record(rng, spec),
        TaskKind::Crossdomain => crossdomain_record(rng, spec),
        TaskKind::IndomainB => compile_record(rng, false),
        TaskKind::IndomainAdapt1 => run_short_record(rng, spec),
        TaskKind::IndomainAdapt2 => compile_record(rng, true),
    }
}

/// Newline-separated records, truncated to exactly `size_tokens` characters.
pub fn generate_text(spec: &SyntheticTaskSpec) -> String {
    let mut rng = seeded(spec.seed, spec.kind.name());
    let mut text = String::with_capacity(spec.size_tokens + 256);
    while text.chars().count() < spec.size_tokens {
        let kind = if spec.pretrain_mix_ratio > 0.0 && rng.random_bool(spec.pretrain_mix_ratio) {
            TaskKind::PretrainMix
        } else {
            spec.kind
        };
        text.push_str(&record(kind, &mut rng, spec));
        text.push('\n');
    }
    text.chars().take(spec.size_tokens).collect()
}
