use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{QAItem, Stage};
use crate::rng::{self, streams};

/// The prototype single-step question: "Is a greater than b?".
pub fn tier1_comparison(a: i64, b: i64) -> QAItem {
    item(format!("Is {a} greater than {b}?"), yes_no(a > b), Vec::new(), Stage::Simple)
}

fn yes_no(b: bool) -> String {
    if b { "Yes" } else { "No" }.to_string()
}

fn item(question: String, answer: String, steps: Vec<String>, stage: Stage) -> QAItem {
    QAItem {
        id: String::new(),
        question,
        answer,
        rationale: if steps.is_empty() { None } else { Some(steps) },
        stage: Some(stage),
    }
}

fn tier1(rng: &mut ChaCha8Rng) -> QAItem {
    let a = rng.random_range(1..=99i64);
    let b = rng.random_range(1..=99i64);
    match rng.random_range(0..4) {
        0 => tier1_comparison(a, b),
        1 => item(format!("What is {a} + {b}?"), (a + b).to_string(), vec![], Stage::Simple),
        2 => {
            let (hi, lo) = (a.max(b), a.min(b));
            item(format!("What is {hi} - {lo}?"), (hi - lo).to_string(), vec![], Stage::Simple)
        }
        _ => item(format!("Is {a} even?"), yes_no(a % 2 == 0), vec![], Stage::Simple),
    }
}

fn tier2(rng: &mut ChaCha8Rng) -> QAItem {
    let s = Stage::Basic;
    match rng.random_range(0..3) {
        0 => {
            let (a, b, c) = (rng.random_range(1..=20i64), rng.random_range(2..=9i64), rng.random_range(2..=9i64));
            let bc = b * c;
            item(
                format!("What is {a} + {b} × {c}?"),
                (a + bc).to_string(),
                vec![format!("{b} × {c} = {bc}"), format!("{a} + {bc} = {}", a + bc)],
                s,
            )
        }
        1 => {
            let (a, b, c) = (rng.random_range(2..=20i64), rng.random_range(1..=20i64), rng.random_range(2..=9i64));
            let ab = a + b;
            item(
                format!("What is ({a} + {b}) × {c}?"),
                (ab * c).to_string(),
                vec![format!("{a} + {b} = {ab}"), format!("{ab} × {c} = {}", ab * c)],
                s,
            )
        }
        _ => {
            let (a, x, b) = (rng.random_range(2..=9i64), rng.random_range(1..=12i64), rng.random_range(1..=30i64));
            let c = a * x + b;
            item(
                format!("If {a}x + {b} = {c}, what is x?"),
                x.to_string(),
                vec![format!("{a}x = {c} - {b} = {}", a * x), format!("x = {} ÷ {a} = {x}", a * x)],
                s,
            )
        }
    }
}

fn tier3(rng: &mut ChaCha8Rng) -> QAItem {
    let s = Stage::Intermediate;
    match rng.random_range(0..3) {
        0 => {
            let (n, u, m) = (rng.random_range(2..=9i64), rng.random_range(2..=12i64), rng.random_range(2..=9i64));
            let c = n * u;
            item(
                format!("{n} pens cost {c} dollars. How much do {m} pens cost?"),
                (u * m).to_string(),
                vec![
                    format!("One pen costs {c} ÷ {n} = {u} dollars"),
                    format!("{m} pens cost {u} × {m} = {} dollars", u * m),
                    format!("The cost is {} dollars", u * m),
                ],
                s,
            )
        }
        1 => {
            let (h, d) = (rng.random_range(1..=12i64), rng.random_range(2..=11i64));
            let t = h + d;
            item(
                format!("A train leaves at {h}:00 and travels for {d} hours. At what hour does it arrive?"),
                format!("{t}:00"),
                vec![format!("It leaves at {h}:00"), format!("{h} + {d} = {t}"), format!("It arrives at {t}:00")],
                s,
            )
        }
        _ => {
            let (r, m) = (rng.random_range(2..=15i64), rng.random_range(2..=12i64));
            let k = rng.random_range(2..=4i64);
            let total = r * m * k;
            item(
                format!("A tap fills {r} liters per minute. How many liters does it fill in {m} minutes if it runs {k} times as long?"),
                total.to_string(),
                vec![
                    format!("The time is {m} × {k} = {} minutes", m * k),
                    format!("{r} × {} = {total}", m * k),
                    format!("It fills {total} liters"),
                ],
                s,
            )
        }
    }
}

fn tier4(rng: &mut ChaCha8Rng) -> QAItem {
    let s = Stage::Complex;
    if rng.random_bool(0.5) {
        let (a, b) = (rng.random_range(2..=20i64), rng.random_range(1..=10i64));
        let ben = a + b;
        let cara = 2 * ben;
        let total = a + ben + cara;
        item(
            format!("Ann has {a} apples. Ben has {b} more apples than Ann. Cara has twice as many apples as Ben. How many apples do they have in total?"),
            total.to_string(),
            vec![
                format!("Ann has {a} apples"),
                format!("Ben has {a} + {b} = {ben} apples"),
                format!("Cara has 2 × {ben} = {cara} apples"),
                format!("{a} + {ben} + {cara} = {total}"),
            ],
            s,
        )
    } else {
        let (bx, k) = (rng.random_range(2..=9i64), rng.random_range(2..=12i64));
        let p = bx * k;
        let sold = rng.random_range(1..p);
        let got = rng.random_range(1..=30i64);
        let left = p - sold;
        let now = left + got;
        item(
            format!("A shop has {bx} boxes with {k} pens each. It sells {sold} pens. Then it receives {got} pens. How many pens does it have now?"),
            now.to_string(),
            vec![
                format!("The shop starts with {bx} × {k} = {p} pens"),
                format!("After selling it has {p} - {sold} = {left} pens"),
                format!("After receiving it has {left} + {got} = {now} pens"),
                format!("The shop has {now} pens"),
            ],
            s,
        )
    }
}

/// `n` items of the given tier. Tier 1 items carry no rationale; tiers 2, 3
/// and 4 carry 2, 3 and 4 gold steps and use 1, 2 and 4 sentences.
pub fn generate_synthetic(tier: Stage, n: usize, seed: u64) -> Vec<QAItem> {
    let mut rng = rng::stream(seed, (streams::SYNTHETIC << 8) | tier.index() as u64);
    (0..n)
        .map(|i| {
            let mut it = match tier {
                Stage::Simple => tier1(&mut rng),
                Stage::Basic => tier2(&mut rng),
                Stage::Intermediate => tier3(&mut rng),
                Stage::Complex => tier4(&mut rng),
            };
            it.id = format!("{tier}-{i:05}");
            it
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{extract_features, train_complexity_classifier};

    // Recursive-descent evaluator for + - × ÷ and parentheses.
    fn eval(src: &str) -> i64 {
        let toks: Vec<char> = src.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0;
        let v = expr(&toks, &mut pos);
        assert_eq!(pos, toks.len(), "trailing input in {src:?}");
        v
    }

    fn expr(t: &[char], p: &mut usize) -> i64 {
        let mut v = term(t, p);
        while *p < t.len() && (t[*p] == '+' || t[*p] == '-') {
            let op = t[*p];
            *p += 1;
            let r = term(t, p);
            v = if op == '+' { v + r } else { v - r };
        }
        v
    }

    fn term(t: &[char], p: &mut usize) -> i64 {
        let mut v = atom(t, p);
        while *p < t.len() && (t[*p] == '×' || t[*p] == '÷') {
            let op = t[*p];
            *p += 1;
            let r = atom(t, p);
            v = if op == '×' { v * r } else { v / r };
        }
        v
    }

    fn atom(t: &[char], p: &mut usize) -> i64 {
        if t[*p] == '(' {
            *p += 1;
            let v = expr(t, p);
            assert_eq!(t[*p], ')');
            *p += 1;
            return v;
        }
        let start = *p;
        while *p < t.len() && t[*p].is_ascii_digit() {
            *p += 1;
        }
        t[start..*p].iter().collect::<String>().parse().unwrap()
    }

    #[test]
    fn prototype_question() {
        let it = tier1_comparison(15, 10);
        assert_eq!(it.question, "Is 15 greater than 10?");
        assert_eq!(it.answer, "Yes");
        assert!(it.rationale.is_none());
    }

    #[test]
    fn tier2_answers_match_expression_evaluator() {
        for it in generate_synthetic(Stage::Basic, 300, 4) {
            if let Some(e) = it.question.strip_prefix("What is ").and_then(|q| q.strip_suffix('?')) {
                assert_eq!(eval(e).to_string(), it.answer, "{}", it.question);
            } else {
                let eq = it.question.strip_prefix("If ").unwrap().split(',').next().unwrap();
                let (lhs, rhs) = eq.split_once(" = ").unwrap();
                let x: i64 = it.answer.parse().unwrap();
                let lhs = lhs.replacen('x', &format!("×{x}"), 1);
                assert_eq!(eval(&lhs), rhs.parse::<i64>().unwrap(), "{}", it.question);
            }
        }
    }

    #[test]
    fn tier1_arithmetic_is_correct() {
        for it in generate_synthetic(Stage::Simple, 200, 1) {
            if let Some(e) = it.question.strip_prefix("What is ").and_then(|q| q.strip_suffix('?')) {
                assert_eq!(eval(e).to_string(), it.answer);
            }
        }
    }

    #[test]
    fn rationale_lengths_by_tier() {
        for (tier, want) in [(Stage::Simple, 0), (Stage::Basic, 2), (Stage::Intermediate, 3)] {
            for it in generate_synthetic(tier, 50, 2) {
                assert_eq!(it.gold_steps().len(), want);
            }
        }
        for it in generate_synthetic(Stage::Complex, 50, 2) {
            assert!(it.gold_steps().len() >= 3);
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(generate_synthetic(Stage::Complex, 20, 5), generate_synthetic(Stage::Complex, 20, 5));
        assert_ne!(generate_synthetic(Stage::Complex, 20, 5), generate_synthetic(Stage::Complex, 20, 6));
    }

    #[test]
    fn classifier_recovers_generator_tiers() {
        let mut train = Vec::new();
        for s in Stage::ALL {
            for it in generate_synthetic(s, 100, 11) {
                train.push((extract_features(&it), s));
            }
        }
        let model = train_complexity_classifier(&train).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for s in Stage::ALL {
            for it in generate_synthetic(s, 100, 12) {
                total += 1;
                if model.predict(&extract_features(&it)) == s {
                    correct += 1;
                }
            }
        }
        assert!(correct as f64 / total as f64 >= 0.9, "{correct}/{total}");
    }
}
