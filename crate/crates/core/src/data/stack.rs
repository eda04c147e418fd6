//! A tiny integer stack language: literals plus `add sub mul dup swap print`.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Instr {
    Push(i64),
    Add,
    Sub,
    Mul,
    Dup,
    Swap,
    Print,
}

impl Instr {
    /// Operands consumed and values produced.
    pub fn arity(self) -> (usize, usize) {
        match self {
            Instr::Push(_) => (0, 1),
            Instr::Add | Instr::Sub | Instr::Mul => (2, 1),
            Instr::Dup => (1, 2),
            Instr::Swap => (2, 2),
            Instr::Print => (1, 0),
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instr::Push(v) => write!(f, "{v}"),
            Instr::Add => f.write_str("add"),
            Instr::Sub => f.write_str("sub"),
            Instr::Mul => f.write_str("mul"),
            Instr::Dup => f.write_str("dup"),
            Instr::Swap => f.write_str("swap"),
            Instr::Print => f.write_str("print"),
        }
    }
}

pub fn parse_program(src: &str) -> Result<Vec<Instr>> {
    src.split_whitespace()
        .map(|w| match w {
            "add" => Ok(Instr::Add),
            "sub" => Ok(Instr::Sub),
            "mul" => Ok(Instr::Mul),
            "dup" => Ok(Instr::Dup),
            "swap" => Ok(Instr::Swap),
            "print" => Ok(Instr::Print),
            lit => lit
                .parse::<i64>()
                .map(Instr::Push)
                .map_err(|_| Error::contract(format!("unknown stack word {lit:?}"))),
        })
        .collect()
}

pub fn format_program(program: &[Instr]) -> String {
    program.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Result of running a program: stack snapshot after each instruction, and printed values.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Execution {
    pub trace: Vec<Vec<i64>>,
    pub output: Vec<i64>,
}

pub fn execute(program: &[Instr]) -> Result<Execution> {
    let mut stack: Vec<i64> = Vec::new();
    let mut exec = Execution::default();
    for (pc, &ins) in program.iter().enumerate() {
        let (pops, _) = ins.arity();
        if stack.len() < pops {
            return Err(Error::contract(format!("stack underflow at instruction {pc} ({ins})")));
        }
        match ins {
            Instr::Push(v) => stack.push(v),
            Instr::Add | Instr::Sub | Instr::Mul => {
                let b = stack.pop().unwrap();
                let a = stack.pop().unwrap();
                stack.push(match ins {
                    Instr::Add => a + b,
                    Instr::Sub => a - b,
                    _ => a * b,
                });
            }
            Instr::Dup => stack.push(*stack.last().unwrap()),
            Instr::Swap => {
                let n = stack.len();
                stack.swap(n - 1, n - 2);
            }
            Instr::Print => exec.output.push(stack.pop().unwrap()),
        }
        exec.trace.push(stack.clone());
    }
    Ok(exec)
}

pub fn format_stack(stack: &[i64]) -> String {
    let inner: Vec<String> = stack.iter().map(ToString::to_string).collect();
    format!("[{}]", inner.join(" "))
}
