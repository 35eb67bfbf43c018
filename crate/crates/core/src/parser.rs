//! Recursive-descent parser for templated explanations.
//!
//! ```text
//! EXPL := "If " COND ", then " [QUANT " "] ["not "] LABEL
//! COND := TERM {(" and " | " or ") TERM}      -- one junction kind per level
//! TERM := ["not "] (LEAF | "(" COND ")")
//! LEAF := ATTR OP VALUE
//! OP   := "equal to" | "not equal to" | "greater than" | "less than"
//!       | "at least" | "at most"
//! ```

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::explanation::{Comparison, ConditionNode, Explanation, Operator, Value};
use crate::quantifier::Quantifier;

const MAX_NESTING: usize = 64;

/// Words that cannot be attribute names, values, or labels.
pub const RESERVED_WORDS: [&str; 13] = [
    "If", "then", "and", "or", "not", "equal", "to", "greater", "less", "than", "at", "least",
    "most",
];

#[derive(Clone, Debug, PartialEq)]
enum Tok<'a> {
    Word(&'a str),
    Open,
    Close,
    Comma,
}

#[derive(Clone, Debug)]
struct Token<'a> {
    tok: Tok<'a>,
    pos: usize,
}

fn tokenize<'a>(text: &'a str) -> Vec<Token<'a>> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let flush = |start: &mut Option<usize>, end: usize, out: &mut Vec<Token<'a>>| {
        if let Some(s) = start.take() {
            out.push(Token {
                tok: Tok::Word(&text[s..end]),
                pos: s,
            });
        }
    };
    for (i, c) in text.char_indices() {
        let punct = match c {
            '(' => Some(Tok::Open),
            ')' => Some(Tok::Close),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(p) = punct {
            flush(&mut start, i, &mut out);
            out.push(Token { tok: p, pos: i });
        } else if c.is_whitespace() {
            flush(&mut start, i, &mut out);
        } else if start.is_none() {
            start = Some(i);
        }
    }
    flush(&mut start, text.len(), &mut out);
    out
}

/// Token-level canonical form: single spaces between words, no space before
/// `,` or `)` and none after `(`.
pub fn canonical_form(text: &str) -> String {
    let mut out = String::new();
    let mut prev: Option<Tok<'_>> = None;
    for t in tokenize(text) {
        let space = match (&prev, &t.tok) {
            (None, _) => false,
            (_, Tok::Comma | Tok::Close) => false,
            (Some(Tok::Open), _) => false,
            _ => true,
        };
        if space {
            out.push(' ');
        }
        match t.tok {
            Tok::Word(w) => out.push_str(w),
            Tok::Open => out.push('('),
            Tok::Close => out.push(')'),
            Tok::Comma => out.push(','),
        }
        prev = Some(t.tok);
    }
    out
}

struct Parser<'a> {
    tokens: Vec<Token<'a>>,
    cursor: usize,
    end: usize,
    depth: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok<'a>> {
        self.tokens.get(self.cursor).map(|t| &t.tok)
    }

    fn peek_word(&self) -> Option<&'a str> {
        match self.peek() {
            Some(Tok::Word(w)) => Some(w),
            _ => None,
        }
    }

    fn position(&self) -> usize {
        self.tokens.get(self.cursor).map_or(self.end, |t| t.pos)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            position: self.position(),
            message: message.into(),
        })
    }

    fn describe_next(&self) -> String {
        match self.peek() {
            None => "end of input".into(),
            Some(Tok::Word(w)) => format!("`{w}`"),
            Some(Tok::Open) => "`(`".into(),
            Some(Tok::Close) => "`)`".into(),
            Some(Tok::Comma) => "`,`".into(),
        }
    }

    fn expect_word(&mut self, word: &str) -> Result<()> {
        if self.peek_word() == Some(word) {
            self.cursor += 1;
            Ok(())
        } else {
            self.error(format!("expected `{word}`, found {}", self.describe_next()))
        }
    }

    fn expect(&mut self, tok: Tok<'static>, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.cursor += 1;
            Ok(())
        } else {
            self.error(format!("expected {what}, found {}", self.describe_next()))
        }
    }

    fn content_word(&mut self, role: &str) -> Result<&'a str> {
        match self.peek_word() {
            Some(w) if !RESERVED_WORDS.contains(&w) => {
                self.cursor += 1;
                Ok(w)
            }
            _ => self.error(format!("expected {role}, found {}", self.describe_next())),
        }
    }

    fn cond(&mut self) -> Result<ConditionNode> {
        self.depth += 1;
        if self.depth > MAX_NESTING {
            return self.error("condition nested too deeply");
        }
        let first = self.term()?;
        let mut terms = vec![first];
        let mut junction: Option<&str> = None;
        while let Some(w @ ("and" | "or")) = self.peek_word() {
            if junction.is_some_and(|j| j != w) {
                return self.error("mixed `and`/`or` at one level needs parentheses");
            }
            junction = Some(w);
            self.cursor += 1;
            terms.push(self.term()?);
        }
        self.depth -= 1;
        Ok(match junction {
            None => terms.pop().expect("one term"),
            Some("and") => ConditionNode::And(terms),
            Some(_) => ConditionNode::Or(terms),
        })
    }

    fn term(&mut self) -> Result<ConditionNode> {
        if self.peek_word() == Some("not") {
            self.cursor += 1;
            return Ok(ConditionNode::negate(self.atom()?));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<ConditionNode> {
        if self.peek() == Some(&Tok::Open) {
            self.cursor += 1;
            let inner = self.cond()?;
            self.expect(Tok::Close, "`)`")?;
            return Ok(inner);
        }
        self.leaf()
    }

    fn leaf(&mut self) -> Result<ConditionNode> {
        let start = self.cursor;
        let attribute = self.content_word("attribute name")?;
        let operator = match self.peek_word() {
            Some("equal") => {
                self.cursor += 1;
                self.expect_word("to")?;
                Operator::Equal
            }
            Some("not") => {
                self.cursor += 1;
                self.expect_word("equal")?;
                self.expect_word("to")?;
                Operator::NotEqual
            }
            Some("greater") => {
                self.cursor += 1;
                self.expect_word("than")?;
                Operator::Greater
            }
            Some("less") => {
                self.cursor += 1;
                self.expect_word("than")?;
                Operator::Less
            }
            Some("at") => {
                self.cursor += 1;
                let op = match self.peek_word() {
                    Some("least") => Operator::GreaterOrEqual,
                    Some("most") => Operator::LessOrEqual,
                    _ => return self.error("expected `least` or `most` after `at`"),
                };
                self.cursor += 1;
                op
            }
            _ => {
                return self.error(format!(
                    "expected a comparison operator, found {}",
                    self.describe_next()
                ))
            }
        };
        let value_pos = self.position();
        let value = Value::from_token(self.content_word("value")?);
        Comparison::new(attribute, operator, value)
            .map(ConditionNode::Leaf)
            .map_err(|e| match e {
                Error::TypeMismatch(what) => Error::Syntax {
                    position: value_pos,
                    message: format!("ordering comparison needs a numeric value: `{what}`"),
                },
                _ => Error::Syntax {
                    position: self.tokens[start].pos,
                    message: e.to_string(),
                },
            })
    }
}

/// Parses a templated explanation. The label must be one of `known_labels`.
pub fn parse_explanation(text: &str, known_labels: &HashSet<String>) -> Result<Explanation> {
    if known_labels.is_empty() {
        return Err(Error::Config("known label set is empty".into()));
    }
    let mut p = Parser {
        tokens: tokenize(text),
        cursor: 0,
        end: text.len(),
        depth: 0,
    };
    p.expect_word("If")?;
    let condition = p.cond()?;
    p.expect(Tok::Comma, "`,`")?;
    p.expect_word("then")?;

    let mut words = Vec::new();
    let conclusion_pos = p.position();
    while let Some(t) = p.tokens.get(p.cursor) {
        match t.tok {
            Tok::Word(w) => words.push((w, t.pos)),
            _ => return p.error(format!("unexpected {} after `then`", p.describe_next())),
        }
        p.cursor += 1;
    }
    let (quantifier, label_negated, label) = match words.as_slice() {
        [(label, _)] => (None, false, *label),
        [("not", _), (label, _)] => (None, true, *label),
        [(q, _), (label, _)] => (Some(*q), false, *label),
        [(q, _), ("not", _), (label, _)] => (Some(*q), true, *label),
        [] => {
            return Err(Error::Syntax {
                position: conclusion_pos,
                message: "missing label".into(),
            })
        }
        [.., (_, pos)] => {
            return Err(Error::Syntax {
                position: *pos,
                message: "expected `[QUANTIFIER] [not] LABEL` after `then`".into(),
            })
        }
    };
    let quantifier = quantifier.map(|w| w.parse::<Quantifier>()).transpose()?;
    if RESERVED_WORDS.contains(&label) || !known_labels.contains(label) {
        return Err(Error::UnknownLabel(label.to_string()));
    }
    Ok(Explanation {
        condition,
        quantifier,
        label: label.to_string(),
        label_negated,
        source_text: text.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(ls: &[&str]) -> HashSet<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn leaf(a: &str, v: i64) -> ConditionNode {
        ConditionNode::leaf(a, Operator::Equal, Value::Int(v)).unwrap()
    }

    #[test]
    fn simple_rule() {
        let e = parse_explanation("If head equal to 1, then dax", &labels(&["dax", "wug"])).unwrap();
        assert_eq!(e.condition, leaf("head", 1));
        assert_eq!(e.quantifier, None);
        assert_eq!(e.label, "dax");
        assert!(!e.label_negated);
    }

    #[test]
    fn negated_label() {
        let e = parse_explanation("If head equal to 1, then not dax", &labels(&["dax"])).unwrap();
        assert_eq!(e.condition, leaf("head", 1));
        assert!(e.label_negated);
    }

    #[test]
    fn quantified_conjunction() {
        let text = "If head equal to 1 and tail equal to 0, then usually dax";
        let e = parse_explanation(text, &labels(&["dax"])).unwrap();
        assert_eq!(e.condition, ConditionNode::And(vec![leaf("head", 1), leaf("tail", 0)]));
        assert_eq!(e.quantifier.map(|q| q.word()), Some("usually"));
        assert_eq!(e.render(), text);
    }

    #[test]
    fn all_operators_and_nesting() {
        let text = "If not (a at least 2 or b at most 1.5) and c not equal to blue and d greater than -1, then often not wug";
        let e = parse_explanation(text, &labels(&["wug"])).unwrap();
        assert_eq!(e.render(), text);
        assert_eq!(parse_explanation(&e.render(), &labels(&["wug"])).unwrap(), e);
    }

    #[test]
    fn sloppy_spacing_canonicalizes() {
        let text = "If  ( a equal to 1  or b equal to 2 )and c less than 3 ,  then dax";
        let e = parse_explanation(text, &labels(&["dax"])).unwrap();
        assert_eq!(e.render(), canonical_form(text));
    }

    #[test]
    fn errors() {
        let l = labels(&["dax"]);
        let err = parse_explanation("If head equal 1, then dax", &l).unwrap_err();
        match err {
            Error::Syntax { position, .. } => assert_eq!(position, 14),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_explanation("If head equal to 1, then mostly dax", &l),
            Err(Error::UnknownQuantifier(w)) if w == "mostly"
        ));
        assert!(matches!(
            parse_explanation("If head equal to 1, then blick", &l),
            Err(Error::UnknownLabel(w)) if w == "blick"
        ));
        assert!(matches!(
            parse_explanation("If a equal to 1 and b equal to 2 or c equal to 3, then dax", &l),
            Err(Error::Syntax { .. })
        ));
        assert!(matches!(
            parse_explanation("If a greater than red, then dax", &l),
            Err(Error::Syntax { position: 18, .. })
        ));
        assert!(matches!(
            parse_explanation("If (a equal to 1, then dax", &l),
            Err(Error::Syntax { .. })
        ));
        assert!(parse_explanation("If a equal to 1, then dax", &HashSet::new()).is_err());
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let mut cond = "a equal to 1".to_string();
        for _ in 0..200 {
            cond = format!("({cond})");
        }
        let text = format!("If {cond}, then dax");
        assert!(parse_explanation(&text, &labels(&["dax"])).is_err());
    }
}
