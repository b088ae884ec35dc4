//! Synthetic modular-arithmetic tasks, the pretraining corpus and the
//! verifier.
//!
//! A prompt is `a op b [op c ...] =` over single digits, evaluated with the
//! usual precedence (`*` before `+`) modulo the digit base. The response is
//! scored on the last digit token it produces before EOS.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{TokenId, Vocab, EOS};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "*")]
    Mul,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Add => "+",
            Op::Mul => "*",
        }
    }

    pub fn swapped(self) -> Op {
        match self {
            Op::Add => Op::Mul,
            Op::Mul => Op::Add,
        }
    }
}

/// Token layout of an arithmetic vocabulary.
#[derive(Debug, Clone)]
pub struct Alphabet {
    pub base: usize,
    digits: Vec<TokenId>,
    add: TokenId,
    mul: TokenId,
    eq: TokenId,
}

impl Alphabet {
    pub fn new(vocab: &Vocab, base: usize) -> Result<Self> {
        let find = |s: &str| {
            vocab
                .id(s)
                .ok_or_else(|| LabError::Input(format!("vocab lacks arithmetic symbol {s:?}")))
        };
        let digits = (0..base).map(|d| find(&d.to_string())).collect::<Result<Vec<_>>>()?;
        Ok(Alphabet {
            base,
            digits,
            add: find("+")?,
            mul: find("*")?,
            eq: find("=")?,
        })
    }

    pub fn digit(&self, d: usize) -> TokenId {
        self.digits[d]
    }

    pub fn digit_value(&self, tok: TokenId) -> Option<usize> {
        self.digits.iter().position(|&t| t == tok)
    }

    pub fn op(&self, op: Op) -> TokenId {
        match op {
            Op::Add => self.add,
            Op::Mul => self.mul,
        }
    }

    pub fn eq(&self) -> TokenId {
        self.eq
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt: Vec<TokenId>,
    pub answer: TokenId,
}

/// Evaluates `operands[0] ops[0] operands[1] ...` with `*` binding tighter.
pub fn evaluate(operands: &[usize], ops: &[Op], modulus: usize) -> usize {
    let mut sum = 0;
    let mut term = operands[0] % modulus;
    for (op, &x) in ops.iter().zip(&operands[1..]) {
        match op {
            Op::Mul => term = term * x % modulus,
            Op::Add => {
                sum = (sum + term) % modulus;
                term = x % modulus;
            }
        }
    }
    (sum + term) % modulus
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub operands: usize,
    pub ops: Vec<Op>,
    pub digit_range: (usize, usize),
}

struct Expression {
    operands: Vec<usize>,
    ops: Vec<Op>,
}

fn enumerate(spec: &TaskSpec) -> Vec<Expression> {
    let (lo, hi) = spec.digit_range;
    let mut out = vec![Expression {
        operands: vec![],
        ops: vec![],
    }];
    for k in 0..spec.operands {
        let mut next = Vec::new();
        for e in &out {
            let op_choices: Vec<Option<Op>> = if k == 0 {
                vec![None]
            } else {
                let set: BTreeSet<Op> = spec.ops.iter().copied().collect();
                set.into_iter().map(Some).collect()
            };
            for op in op_choices {
                for d in lo..=hi {
                    let mut operands = e.operands.clone();
                    let mut ops = e.ops.clone();
                    operands.push(d);
                    ops.extend(op);
                    next.push(Expression { operands, ops });
                }
            }
        }
        out = next;
    }
    out
}

fn encode(alpha: &Alphabet, e: &Expression) -> TaskInstance {
    let mut prompt = vec![alpha.digit(e.operands[0])];
    for (op, &x) in e.ops.iter().zip(&e.operands[1..]) {
        prompt.push(alpha.op(*op));
        prompt.push(alpha.digit(x));
    }
    prompt.push(alpha.eq());
    TaskInstance {
        prompt,
        answer: alpha.digit(evaluate(&e.operands, &e.ops, alpha.base)),
    }
}

/// Number of distinct prompts the task spec can produce.
pub fn prompt_space(spec: &TaskSpec) -> usize {
    let digits = spec.digit_range.1 + 1 - spec.digit_range.0;
    let ops: BTreeSet<Op> = spec.ops.iter().copied().collect();
    digits.pow(spec.operands as u32) * ops.len().pow(spec.operands as u32 - 1)
}

/// `count` distinct prompts in a seed-determined order.
pub fn generate_tasks(alpha: &Alphabet, spec: &TaskSpec, seed: u64, count: usize) -> Result<Vec<TaskInstance>> {
    let (lo, hi) = spec.digit_range;
    if count == 0 {
        return Err(LabError::config("task.count", "must be at least 1"));
    }
    if spec.operands < 2 || spec.operands > 5 {
        return Err(LabError::config("task.operands", "must be in 2..=5"));
    }
    if spec.ops.is_empty() {
        return Err(LabError::config("task.ops", "needs at least one operator"));
    }
    if lo > hi || hi >= alpha.base {
        return Err(LabError::config("task.digit_range", format!("must satisfy lo <= hi < {}", alpha.base)));
    }
    let space = prompt_space(spec);
    if count > space {
        return Err(LabError::config(
            "task.count",
            format!("{count} distinct prompts requested but only {space} exist"),
        ));
    }
    let mut all = enumerate(spec);
    all.shuffle(&mut seed::stream(seed));
    Ok(all.iter().take(count).map(|e| encode(alpha, e)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// A wrong digit drawn uniformly.
    Uniform,
    /// The result of applying the swapped operator everywhere; when that
    /// happens to equal the truth, the next digit instead.
    OperatorSwap,
}

fn parse_prompt(alpha: &Alphabet, prompt: &[TokenId]) -> (Vec<usize>, Vec<Op>) {
    let mut operands = Vec::new();
    let mut ops = Vec::new();
    for &t in prompt {
        if let Some(d) = alpha.digit_value(t) {
            operands.push(d);
        } else if t == alpha.op(Op::Add) {
            ops.push(Op::Add);
        } else if t == alpha.op(Op::Mul) {
            ops.push(Op::Mul);
        }
    }
    (operands, ops)
}

fn wrong_answer<R: Rng>(alpha: &Alphabet, task: &TaskInstance, noise: NoiseModel, rng: &mut R) -> usize {
    let truth = alpha.digit_value(task.answer).expect("answer is a digit");
    match noise {
        NoiseModel::Uniform => {
            let k = rng.gen_range(0..alpha.base - 1);
            if k >= truth {
                k + 1
            } else {
                k
            }
        }
        NoiseModel::OperatorSwap => {
            let (operands, ops) = parse_prompt(alpha, &task.prompt);
            let swapped: Vec<Op> = ops.iter().map(|o| o.swapped()).collect();
            let alt = evaluate(&operands, &swapped, alpha.base);
            if alt == truth {
                (truth + 1) % alpha.base
            } else {
                alt
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub lines: usize,
    pub correct_lines: usize,
    pub answer_accuracy: f64,
    pub tasks: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub lines: Vec<Vec<TokenId>>,
    pub stats: CorpusStats,
}

/// `copies` lines per task, each `prompt answer EOS`. Exactly
/// `round(correct_fraction * lines)` lines carry the true answer; which ones
/// is a seeded shuffle.
pub fn build_pretrain_corpus(
    alpha: &Alphabet,
    tasks: &[TaskInstance],
    copies: usize,
    correct_fraction: f64,
    noise: NoiseModel,
    seed: u64,
) -> Result<Corpus> {
    if !(correct_fraction > 0.0 && correct_fraction <= 1.0) {
        return Err(LabError::config("pretrain.correct_fraction", "must lie in (0, 1]"));
    }
    if tasks.is_empty() || copies == 0 {
        return Err(LabError::config("pretrain.copies_per_task", "corpus would be empty"));
    }
    let total = tasks.len() * copies;
    let n_correct = ((correct_fraction * total as f64).round() as usize).min(total);
    let mut flags: Vec<bool> = (0..total).map(|i| i < n_correct).collect();
    let mut rng = seed::stream(seed);
    flags.shuffle(&mut rng);
    let mut lines = Vec::with_capacity(total);
    for (i, &correct) in flags.iter().enumerate() {
        let task = &tasks[i / copies];
        let digit = if correct {
            task.answer
        } else {
            alpha.digit(wrong_answer(alpha, task, noise, &mut rng))
        };
        let mut line = task.prompt.clone();
        line.push(digit);
        line.push(EOS);
        lines.push(line);
    }
    Ok(Corpus {
        stats: CorpusStats {
            lines: total,
            correct_lines: n_correct,
            answer_accuracy: n_correct as f64 / total as f64,
            tasks: tasks.len(),
        },
        lines,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub correct_reward: f64,
    pub incorrect_reward: f64,
    pub overlong_soft: usize,
    pub overlong_max: usize,
    pub overlong_penalty: f64,
}

impl Default for RewardSpec {
    // Response lengths scaled to toy sequences.
    fn default() -> Self {
        RewardSpec {
            correct_reward: 1.0,
            incorrect_reward: 0.0,
            overlong_soft: 8,
            overlong_max: 12,
            overlong_penalty: 0.5,
        }
    }
}

impl RewardSpec {
    /// Linear ramp from 0 at `overlong_soft` to `overlong_penalty` at `overlong_max`.
    pub fn overlong(&self, len: usize) -> f64 {
        if len <= self.overlong_soft {
            0.0
        } else if len >= self.overlong_max {
            self.overlong_penalty
        } else {
            let span = (self.overlong_max - self.overlong_soft) as f64;
            self.overlong_penalty * (len - self.overlong_soft) as f64 / span
        }
    }
}

/// The last digit token before EOS (or the end of the response).
pub fn extract_answer(alpha: &Alphabet, response: &[TokenId]) -> Option<TokenId> {
    let end = response.iter().position(|&t| t == EOS).unwrap_or(response.len());
    response[..end].iter().rev().copied().find(|&t| alpha.digit_value(t).is_some())
}

pub fn is_correct(alpha: &Alphabet, task: &TaskInstance, response: &[TokenId]) -> bool {
    extract_answer(alpha, response) == Some(task.answer)
}

/// Correctness reward minus the overlong ramp, floored at 0. `len` counts
/// every response token including a closing EOS.
pub fn verify_and_reward(alpha: &Alphabet, task: &TaskInstance, response: &[TokenId], spec: &RewardSpec) -> f64 {
    let base = if is_correct(alpha, task, response) {
        spec.correct_reward
    } else {
        spec.incorrect_reward
    };
    (base - spec.overlong(response.len())).max(0.0)
}

pub fn write_tasks_jsonl(path: &Path, tasks: &[TaskInstance]) -> Result<()> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}

pub fn read_tasks_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LabError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Vocab, Alphabet) {
        let v = Vocab::arithmetic(10);
        let a = Alphabet::new(&v, 10).unwrap();
        (v, a)
    }

    fn toks(v: &Vocab, s: &str) -> Vec<TokenId> {
        s.split_whitespace().map(|x| v.id(x).unwrap()).collect()
    }

    fn two_op() -> TaskSpec {
        TaskSpec {
            operands: 2,
            ops: vec![Op::Add, Op::Mul],
            digit_range: (0, 9),
        }
    }

    #[test]
    fn arithmetic_examples() {
        assert_eq!(evaluate(&[3, 4], &[Op::Add], 10), 7);
        assert_eq!(evaluate(&[7, 8], &[Op::Mul], 10), 6);
        assert_eq!(evaluate(&[2, 3, 4], &[Op::Add, Op::Mul], 10), 4);
        assert_eq!(evaluate(&[2, 3, 4], &[Op::Mul, Op::Add], 10), 0);
    }

    #[test]
    fn generated_tasks_are_unique_and_correct() {
        let (v, a) = setup();
        let tasks = generate_tasks(&a, &two_op(), 3, 200).unwrap();
        let prompts: BTreeSet<_> = tasks.iter().map(|t| t.prompt.clone()).collect();
        assert_eq!(prompts.len(), 200);
        let t = tasks.iter().find(|t| t.prompt == toks(&v, "3 + 4 =")).unwrap();
        assert_eq!(t.answer, v.id("7").unwrap());
        let t = tasks.iter().find(|t| t.prompt == toks(&v, "7 * 8 =")).unwrap();
        assert_eq!(t.answer, v.id("6").unwrap());
        assert_eq!(tasks, generate_tasks(&a, &two_op(), 3, 200).unwrap());
        assert_ne!(tasks, generate_tasks(&a, &two_op(), 4, 200).unwrap());
        assert!(generate_tasks(&a, &two_op(), 3, 201).is_err());
        assert!(tasks.iter().all(|t| t.prompt.len() <= 12));
    }

    #[test]
    fn corpus_accuracy_and_noise() {
        let (_, a) = setup();
        let tasks = generate_tasks(&a, &two_op(), 1, 200).unwrap();
        for noise in [NoiseModel::Uniform, NoiseModel::OperatorSwap] {
            let c = build_pretrain_corpus(&a, &tasks, 50, 0.5, noise, 9).unwrap();
            assert_eq!(c.stats.lines, 10_000);
            let correct = c
                .lines
                .iter()
                .enumerate()
                .filter(|(i, l)| l[l.len() - 2] == tasks[i / 50].answer)
                .count();
            assert_eq!(correct, c.stats.correct_lines);
            assert!((correct as f64 / 1e4 - 0.5).abs() <= 0.02);
        }
    }

    #[test]
    fn operator_swap_noise_never_emits_truth() {
        let (_, a) = setup();
        let tasks = generate_tasks(&a, &two_op(), 1, 200).unwrap();
        let mut rng = seed::stream(0);
        for t in &tasks {
            for noise in [NoiseModel::Uniform, NoiseModel::OperatorSwap] {
                let w = wrong_answer(&a, t, noise, &mut rng);
                assert_ne!(a.digit(w), t.answer);
            }
        }
    }

    #[test]
    fn reward_examples() {
        let (v, a) = setup();
        let task = TaskInstance {
            prompt: toks(&v, "3 + 4 ="),
            answer: v.id("7").unwrap(),
        };
        let spec = RewardSpec::default();
        assert_eq!(verify_and_reward(&a, &task, &toks(&v, "7 <eos>"), &spec), 1.0);
        assert_eq!(verify_and_reward(&a, &task, &toks(&v, "5 <eos>"), &spec), 0.0);
        assert_eq!(verify_and_reward(&a, &task, &toks(&v, "5 7"), &spec), 1.0);
        assert_eq!(verify_and_reward(&a, &task, &toks(&v, "+ = <eos>"), &spec), 0.0);
        // length 10: midway between soft 8 and max 12
        let long = toks(&v, "+ + + + + + + + 7 <eos>");
        assert_eq!(long.len(), 10);
        assert!((verify_and_reward(&a, &task, &long, &spec) - 0.75).abs() < 1e-12);
        let wrong_long = toks(&v, "+ + + + + + + + + + + 5 <eos>");
        assert_eq!(verify_and_reward(&a, &task, &wrong_long, &spec), 0.0);
    }

    #[test]
    fn tasks_jsonl_round_trip() {
        let (_, a) = setup();
        let tasks = generate_tasks(&a, &two_op(), 1, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_tasks_jsonl(&p, &tasks).unwrap();
        assert_eq!(read_tasks_jsonl(&p).unwrap(), tasks);
    }
}
