//! Deterministic synthetic corpora.
//!
//! Two byte streams drive every experiment:
//!
//! - The *general* corpus is pseudo-English from an order-3 byte Markov
//!   chain. The chain is trained on an embedded prose sample plus a batch of
//!   correct templated sum lines generated from the same seed, so the stream
//!   mixes natural-language texture with arithmetic surface patterns — the
//!   pretraining/alignment diet.
//! - The *task* corpus is a stream of lines `<prose fragment> a+b=c` with
//!   single-digit operands, the fine-tuning target. The fragment is drawn
//!   from the same prose chain the general corpus is built on, so most of a
//!   line's perplexity measures general language capability and the tail
//!   measures the arithmetic skill itself. Single-digit sums keep that skill
//!   learnable inside a few hundred optimizer steps while staying out of
//!   reach of the order-3 chain, which never sees both operands in one
//!   context. Different seeds give disjoint RNG streams, so train/test
//!   splits are just different seeds.
//!
//! Both generators are pure functions of `(seed, length)`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Markov context length in bytes.
const ORDER: usize = 3;

/// Seed-salts keeping the two corpora on independent RNG streams even when
/// the caller passes the same top-level seed.
const GENERAL_SALT: u64 = 0x67656e; // "gen"
const TASK_SALT: u64 = 0x7461736b; // "task"

/// Number of templated sum lines mixed into the Markov training text.
const CHAIN_SUM_LINES: usize = 600;

/// Prose sample the Markov chain learns from (alongside generated sum
/// lines). Plain ASCII so the byte alphabet stays small and dense.
const SEED_TEXT: &str = "\
the quick study of numbers begins with small sums and steady practice. \
a reader adds ten and twenty, then checks the total against a written table. \
every page repeats the same quiet pattern: two numbers, a plus sign, an equals \
sign, and the answer on the right. when the answer is wrong the reader crosses \
it out and writes the correct sum above the line. the teacher says that sums \
are a kind of sentence, with the plus sign acting as the verb and the equals \
sign as a promise. thirty and forty make seventy, a promise kept. \
numbers carry their own grammar. a two digit number names its tens and then \
its ones, so fifty three sits between fifty and sixty. when two such numbers \
meet around a plus sign, the ones add first and sometimes carry into the tens. \
the carry is the only surprise the pattern allows. practice makes the carry \
quiet, and the page fills with rows of small true statements. \
in the evening the reader copies yesterday's rows and adds new ones, \
twenty five and seventeen, sixty one and thirteen, always in the same shape: \
number, plus, number, equals, answer, and a new line at the end. \
the notebook grows by a page a day, and each page holds the same promise \
that the right side equals the left. arithmetic is a patient language, \
and this corpus speaks it slowly, one byte at a time.\n";

/// Bounds on the prose fragment opening a task line, in bytes.
const FRAG_MIN: usize = 48;
const FRAG_MAX: usize = 96;

/// One exact sum equation `a+b=c` with `a, b` in `0..=9`.
fn sum_eq(rng: &mut ChaCha8Rng) -> String {
    let a: u32 = rng.gen_range(0..=9);
    let b: u32 = rng.gen_range(0..=9);
    format!("{a}+{b}={}", a + b)
}

/// Order-3 transition table over `text`, wrapped so every reachable context
/// has a continuation.
fn build_chain(text: &[u8]) -> BTreeMap<[u8; ORDER], Vec<u8>> {
    let mut chain: BTreeMap<[u8; ORDER], Vec<u8>> = BTreeMap::new();
    for i in 0..text.len() {
        let ctx = [text[i], text[(i + 1) % text.len()], text[(i + 2) % text.len()]];
        let next = text[(i + ORDER) % text.len()];
        chain.entry(ctx).or_default().push(next);
    }
    chain
}

/// Walk `chain` from `ctx`, emitting `len` bytes total (context included).
fn markov_bytes(
    chain: &BTreeMap<[u8; ORDER], Vec<u8>>,
    mut ctx: [u8; ORDER],
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&ctx);
    out.truncate(len);
    while out.len() < len {
        let options = &chain[&ctx];
        let next = options[rng.gen_range(0..options.len())];
        out.push(next);
        ctx = [ctx[1], ctx[2], next];
    }
    out
}

/// Pseudo-English general corpus of exactly `n_bytes` bytes.
pub fn synth_general(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ GENERAL_SALT);

    // Training text: prose plus seeded correct sums.
    let mut training = String::from(SEED_TEXT);
    for _ in 0..CHAIN_SUM_LINES {
        training.push_str(&sum_eq(&mut rng));
        training.push('\n');
    }
    let bytes = training.as_bytes();
    let chain = build_chain(bytes);
    markov_bytes(&chain, [bytes[0], bytes[1], bytes[2]], n_bytes, &mut rng)
}

/// Task corpus: `n_lines` lines of `<prose fragment> a+b=c`.
pub fn synth_task(seed: u64, n_lines: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ TASK_SALT);
    let text = SEED_TEXT.as_bytes();
    // Prose-only chain: fragments carry the general corpus's linguistic
    // texture but never digits, operators, or newlines of their own.
    let chain = build_chain(text);
    let mut out = String::new();
    for _ in 0..n_lines {
        let len = rng.gen_range(FRAG_MIN..=FRAG_MAX);
        let start = rng.gen_range(0..text.len());
        let ctx = [text[start], text[(start + 1) % text.len()], text[(start + 2) % text.len()]];
        let frag = markov_bytes(&chain, ctx, len, &mut rng);
        let frag = String::from_utf8(frag).expect("ascii chain").replace('\n', " ");
        out.push_str(&frag);
        out.push(' ');
        out.push_str(&sum_eq(&mut rng));
        out.push('\n');
    }
    out.into_bytes()
}

/// Grammar check for one task line (without the trailing newline): a
/// non-empty prose prefix free of digits and operators, then a final token
/// `a+b=c` with single-digit `a`, `b` and `c == a + b`.
pub fn task_line_ok(line: &str) -> bool {
    let Some((prose, eq)) = line.rsplit_once(' ') else { return false };
    if prose.trim().is_empty()
        || prose.bytes().any(|b| b == b'+' || b == b'=' || b.is_ascii_digit())
    {
        return false;
    }
    let Some((a, rest)) = eq.split_once('+') else { return false };
    let Some((b, c)) = rest.split_once('=') else { return false };
    if a.len() != 1 || b.len() != 1 || c.is_empty() || c.len() > 2 {
        return false;
    }
    if c.len() == 2 && c.starts_with('0') {
        return false;
    }
    match (a.parse::<u32>(), b.parse::<u32>(), c.parse::<u32>()) {
        (Ok(a), Ok(b), Ok(c)) => a + b == c,
        _ => false,
    }
}
