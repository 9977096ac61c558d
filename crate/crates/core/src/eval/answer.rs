use crate::eval::game24::verify_game24;
use crate::model::{TaskExample, TaskKind};

const TERMINAL_PUNCTUATION: &[char] = &['.', '!', '?', ',', ';', ':', '。'];

/// Canonical answer text.
///
/// Free-form and VQA answers are case-folded, trimmed, stripped of terminal
/// punctuation and whitespace-collapsed. Game-of-24 answers yield the
/// expression after an optional `answer:` prefix; their correctness is decided
/// by [`verify_game24`], not string equality.
pub fn normalize_answer(raw: &str, kind: TaskKind) -> String {
    match kind {
        TaskKind::Game24 => game24_expression(raw),
        TaskKind::Vqa | TaskKind::Freeform => {
            let folded = raw.to_lowercase();
            let stripped = folded.trim().trim_end_matches(TERMINAL_PUNCTUATION).trim();
            stripped.split_whitespace().collect::<Vec<_>>().join(" ")
        }
    }
}

fn game24_expression(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let tail = match lower.rfind("answer:") {
        Some(pos) => {
            let rest = &raw[pos + "answer:".len()..];
            rest.lines().next().unwrap_or("")
        }
        None => raw,
    };
    let mut expr = tail.trim().trim_matches('`').trim();
    // "expr = 24" is a common way of stating the result.
    if let Some((lhs, rhs)) = expr.rsplit_once('=') {
        if rhs.trim() == "24" {
            expr = lhs.trim();
        }
    }
    expr.to_string()
}

/// Whether `final_answer` is correct for `task`.
pub fn is_correct(final_answer: &str, task: &TaskExample) -> bool {
    match task.task_kind {
        TaskKind::Game24 => match task.game24_numbers() {
            Some(numbers) => verify_game24(&numbers, &normalize_answer(final_answer, TaskKind::Game24)),
            None => false,
        },
        kind => {
            let got = normalize_answer(final_answer, kind);
            !got.is_empty() && got == normalize_answer(&task.label, kind)
        }
    }
}
