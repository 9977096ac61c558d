//! Exact Game-of-24 verifier and exhaustive solver.
//!
//! All arithmetic is on `Ratio<i64>` with checked operations: `8/(3-8/3)` is
//! exactly 24 here, while the same chain in binary floating point is not.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, CheckedMul, CheckedSub, Zero};

type Q = Ratio<i64>;

pub const TARGET: i64 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    fn apply(self, a: &Q, b: &Q) -> Option<Q> {
        match self {
            Op::Add => a.checked_add(b),
            Op::Sub => a.checked_sub(b),
            Op::Mul => a.checked_mul(b),
            Op::Div if b.is_zero() => None,
            Op::Div => a.checked_div(b),
        }
    }

    fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
            Op::Div => '/',
        }
    }

    fn from_char(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' | '\u{2212}' => Some(Op::Sub),
            '*' | '\u{00d7}' => Some(Op::Mul),
            '/' | '\u{00f7}' => Some(Op::Div),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Num(i64),
    Op(Op),
    Open,
    Close,
}

fn tokenize(expr: &str) -> Option<Vec<Token>> {
    let mut out = Vec::new();
    let mut chars = expr.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c.is_ascii_digit() {
            let mut n: i64 = 0;
            while let Some(d) = chars.peek().and_then(|c| c.to_digit(10)) {
                n = n.checked_mul(10)?.checked_add(d as i64)?;
                chars.next();
            }
            out.push(Token::Num(n));
        } else if c == '(' || c == '[' {
            out.push(Token::Open);
            chars.next();
        } else if c == ')' || c == ']' {
            out.push(Token::Close);
            chars.next();
        } else {
            out.push(Token::Op(Op::from_char(c)?));
            chars.next();
        }
    }
    Some(out)
}

/// Recursive-descent evaluation. `leaves` collects every integer literal.
struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    leaves: Vec<i64>,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Option<Q> {
        let mut acc = self.term()?;
        while let Some(Token::Op(op @ (Op::Add | Op::Sub))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            acc = op.apply(&acc, &rhs)?;
        }
        Some(acc)
    }

    fn term(&mut self) -> Option<Q> {
        let mut acc = self.factor()?;
        while let Some(Token::Op(op @ (Op::Mul | Op::Div))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.factor()?;
            acc = op.apply(&acc, &rhs)?;
        }
        Some(acc)
    }

    fn factor(&mut self) -> Option<Q> {
        match self.peek()?.clone() {
            Token::Num(n) => {
                self.pos += 1;
                self.leaves.push(n);
                Some(Q::from_integer(n))
            }
            Token::Open => {
                self.pos += 1;
                let v = self.expr()?;
                (self.peek() == Some(&Token::Close)).then_some(())?;
                self.pos += 1;
                Some(v)
            }
            _ => None,
        }
    }
}

/// Exact value of `expr` and its integer leaves, or `None` if it does not
/// parse or divides by zero anywhere.
pub fn evaluate(expr: &str) -> Option<(Q, Vec<i64>)> {
    let tokens = tokenize(expr)?;
    let mut p = Parser { tokens: &tokens, pos: 0, leaves: Vec::new() };
    let value = p.expr()?;
    (p.pos == tokens.len()).then_some((value, p.leaves))
}

/// True iff `expression` parses, uses exactly the given numbers (as a
/// multiset) and evaluates exactly to 24.
pub fn verify_game24(numbers: &[i64; 4], expression: &str) -> bool {
    let Some((value, mut leaves)) = evaluate(expression) else {
        return false;
    };
    let mut expected = numbers.to_vec();
    leaves.sort_unstable();
    expected.sort_unstable();
    leaves == expected && value == Q::from_integer(TARGET)
}

/// Exhaustive search: repeatedly combine any ordered pair of the remaining
/// values with any operator. This covers every leaf order, operator choice
/// and tree shape.
pub fn solve_game24(numbers: &[i64; 4]) -> Option<String> {
    let items: Vec<(Q, String)> = numbers
        .iter()
        .map(|n| (Q::from_integer(*n), n.to_string()))
        .collect();
    search(&items).map(|e| strip_outer_parens(&e).to_string())
}

fn search(items: &[(Q, String)]) -> Option<String> {
    if items.len() == 1 {
        return (items[0].0 == Q::from_integer(TARGET)).then(|| items[0].1.clone());
    }
    for i in 0..items.len() {
        for j in 0..items.len() {
            if i == j {
                continue;
            }
            let rest: Vec<(Q, String)> = items
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i && *k != j)
                .map(|(_, v)| v.clone())
                .collect();
            let (a, ea) = &items[i];
            let (b, eb) = &items[j];
            for op in Op::ALL {
                // Commutative ops only need one order.
                if matches!(op, Op::Add | Op::Mul) && i > j {
                    continue;
                }
                let Some(v) = op.apply(a, b) else { continue };
                let mut next = rest.clone();
                next.push((v, format!("({ea}{}{eb})", op.symbol())));
                if let Some(found) = search(&next) {
                    return Some(found);
                }
            }
        }
    }
    None
}

fn strip_outer_parens(expr: &str) -> &str {
    if !(expr.starts_with('(') && expr.ends_with(')')) {
        return expr;
    }
    let mut depth = 0i32;
    for (i, c) in expr.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            _ => {}
        }
        if depth == 0 && i < expr.len() - 1 {
            return expr;
        }
    }
    &expr[1..expr.len() - 1]
}
