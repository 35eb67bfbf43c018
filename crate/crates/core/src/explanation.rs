//! Explanation ASTs: condition trees over attribute comparisons, the
//! canonical surface form, three-valued evaluation, symbolic features, and
//! complexity descriptors.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantifier::{Quantifier, NUM_QUANTIFIERS};

/// Attribute values keyed by attribute name, in schema order.
pub type Attributes = IndexMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Cat(String),
}

impl Value {
    fn as_number(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Cat(_) => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        self.as_number().is_some()
    }

    /// Reads a single value token: integers, then reals, else categorical.
    pub fn from_token(token: &str) -> Value {
        if let Ok(i) = token.parse::<i64>() {
            return Value::Int(i);
        }
        let numeric_shape = token
            .chars()
            .next()
            .is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '.');
        match token.parse::<f64>() {
            Ok(r) if numeric_shape && r.is_finite() => Value::Real(r),
            _ => Value::Cat(token.to_string()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r:?}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Operator {
    Equal,
    NotEqual,
    Greater,
    Less,
    GreaterOrEqual,
    LessOrEqual,
}

impl Operator {
    pub const ALL: [Operator; 6] = [
        Operator::Equal,
        Operator::NotEqual,
        Operator::Greater,
        Operator::Less,
        Operator::GreaterOrEqual,
        Operator::LessOrEqual,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            Operator::Equal => "equal to",
            Operator::NotEqual => "not equal to",
            Operator::Greater => "greater than",
            Operator::Less => "less than",
            Operator::GreaterOrEqual => "at least",
            Operator::LessOrEqual => "at most",
        }
    }

    pub fn is_ordering(self) -> bool {
        !matches!(self, Operator::Equal | Operator::NotEqual)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub attribute: String,
    pub operator: Operator,
    pub value: Value,
}

impl Comparison {
    pub fn new(attribute: impl Into<String>, operator: Operator, value: Value) -> Result<Self> {
        let attribute = attribute.into();
        if attribute.is_empty() {
            return Err(Error::Config("comparison attribute is empty".into()));
        }
        let cmp = Comparison {
            attribute,
            operator,
            value,
        };
        if operator.is_ordering() && !cmp.value.is_numeric() {
            return Err(Error::TypeMismatch(cmp.to_string()));
        }
        Ok(cmp)
    }

    pub fn evaluate(&self, attributes: &Attributes) -> Result<Truth> {
        let Some(actual) = attributes.get(&self.attribute) else {
            return Ok(Truth::Unknown);
        };
        let equal = || match (actual.as_number(), self.value.as_number()) {
            (Some(a), Some(b)) => a == b,
            (None, None) => actual == &self.value,
            _ => false,
        };
        let ordered = |f: fn(f64, f64) -> bool| match (actual.as_number(), self.value.as_number()) {
            (Some(a), Some(b)) => Ok(f(a, b)),
            _ => Err(Error::TypeMismatch(self.to_string())),
        };
        let holds = match self.operator {
            Operator::Equal => equal(),
            Operator::NotEqual => !equal(),
            Operator::Greater => ordered(|a, b| a > b)?,
            Operator::Less => ordered(|a, b| a < b)?,
            Operator::GreaterOrEqual => ordered(|a, b| a >= b)?,
            Operator::LessOrEqual => ordered(|a, b| a <= b)?,
        };
        Ok(Truth::from(holds))
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.attribute, self.operator.phrase(), self.value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Truth {
    True,
    False,
    Unknown,
}

impl From<bool> for Truth {
    fn from(b: bool) -> Self {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }
}

impl Truth {
    pub fn not(self) -> Truth {
        match self {
            Truth::True => Truth::False,
            Truth::False => Truth::True,
            Truth::Unknown => Truth::Unknown,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConditionNode {
    Leaf(Comparison),
    Not(Box<ConditionNode>),
    /// At least two children.
    And(Vec<ConditionNode>),
    /// At least two children.
    Or(Vec<ConditionNode>),
}

impl ConditionNode {
    pub fn leaf(attribute: &str, operator: Operator, value: Value) -> Result<Self> {
        Ok(ConditionNode::Leaf(Comparison::new(attribute, operator, value)?))
    }

    pub fn negate(child: ConditionNode) -> Self {
        ConditionNode::Not(Box::new(child))
    }

    /// Kleene three-valued evaluation; attributes absent from the example
    /// evaluate to `Unknown`.
    pub fn evaluate(&self, attributes: &Attributes) -> Result<Truth> {
        match self {
            ConditionNode::Leaf(cmp) => cmp.evaluate(attributes),
            ConditionNode::Not(child) => Ok(child.evaluate(attributes)?.not()),
            ConditionNode::And(children) => {
                let mut unknown = false;
                for child in children {
                    match child.evaluate(attributes)? {
                        Truth::False => return Ok(Truth::False),
                        Truth::Unknown => unknown = true,
                        Truth::True => {}
                    }
                }
                Ok(if unknown { Truth::Unknown } else { Truth::True })
            }
            ConditionNode::Or(children) => {
                let mut unknown = false;
                for child in children {
                    match child.evaluate(attributes)? {
                        Truth::True => return Ok(Truth::True),
                        Truth::Unknown => unknown = true,
                        Truth::False => {}
                    }
                }
                Ok(if unknown { Truth::Unknown } else { Truth::False })
            }
        }
    }

    /// Junction depth: a leaf is 1, negation adds nothing, a junction adds 1.
    pub fn depth(&self) -> usize {
        match self {
            ConditionNode::Leaf(_) => 1,
            ConditionNode::Not(child) => child.depth(),
            ConditionNode::And(cs) | ConditionNode::Or(cs) => {
                1 + cs.iter().map(ConditionNode::depth).max().unwrap_or(0)
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            ConditionNode::Leaf(_) => 1,
            ConditionNode::Not(child) => child.leaf_count(),
            ConditionNode::And(cs) | ConditionNode::Or(cs) => {
                cs.iter().map(ConditionNode::leaf_count).sum()
            }
        }
    }

    pub fn junction_count(&self) -> usize {
        match self {
            ConditionNode::Leaf(_) => 0,
            ConditionNode::Not(child) => child.junction_count(),
            ConditionNode::And(cs) | ConditionNode::Or(cs) => {
                1 + cs.iter().map(ConditionNode::junction_count).sum::<usize>()
            }
        }
    }

    /// A negation node or a `not equal to` comparison anywhere in the tree.
    pub fn has_clause_negation(&self) -> bool {
        match self {
            ConditionNode::Leaf(cmp) => cmp.operator == Operator::NotEqual,
            ConditionNode::Not(_) => true,
            ConditionNode::And(cs) | ConditionNode::Or(cs) => {
                cs.iter().any(ConditionNode::has_clause_negation)
            }
        }
    }

    pub fn has_conjunction(&self) -> bool {
        match self {
            ConditionNode::Leaf(_) => false,
            ConditionNode::Not(child) => child.has_conjunction(),
            ConditionNode::And(_) => true,
            ConditionNode::Or(cs) => cs.iter().any(ConditionNode::has_conjunction),
        }
    }

    pub fn has_disjunction(&self) -> bool {
        match self {
            ConditionNode::Leaf(_) => false,
            ConditionNode::Not(child) => child.has_disjunction(),
            ConditionNode::Or(_) => true,
            ConditionNode::And(cs) => cs.iter().any(ConditionNode::has_disjunction),
        }
    }

    /// Attribute names in first-mention order.
    pub fn attributes(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_attributes(&mut out);
        out
    }

    fn collect_attributes<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            ConditionNode::Leaf(cmp) => {
                if !out.contains(&cmp.attribute.as_str()) {
                    out.push(&cmp.attribute);
                }
            }
            ConditionNode::Not(child) => child.collect_attributes(out),
            ConditionNode::And(cs) | ConditionNode::Or(cs) => {
                cs.iter().for_each(|c| c.collect_attributes(out))
            }
        }
    }

    fn render_into(&self, out: &mut String) {
        match self {
            ConditionNode::Leaf(cmp) => out.push_str(&cmp.to_string()),
            ConditionNode::Not(child) => {
                out.push_str("not ");
                if let ConditionNode::Leaf(cmp) = child.as_ref() {
                    out.push_str(&cmp.to_string());
                } else {
                    out.push('(');
                    child.render_into(out);
                    out.push(')');
                }
            }
            ConditionNode::And(cs) | ConditionNode::Or(cs) => {
                let joiner = if matches!(self, ConditionNode::And(_)) {
                    " and "
                } else {
                    " or "
                };
                for (i, child) in cs.iter().enumerate() {
                    if i > 0 {
                        out.push_str(joiner);
                    }
                    match child {
                        ConditionNode::And(_) | ConditionNode::Or(_) => {
                            out.push('(');
                            child.render_into(out);
                            out.push(')');
                        }
                        _ => child.render_into(out),
                    }
                }
            }
        }
    }
}

impl fmt::Display for ConditionNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        self.render_into(&mut s);
        f.write_str(&s)
    }
}

/// A parsed explanation. Equality is structural: `source_text` is ignored.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub condition: ConditionNode,
    pub quantifier: Option<Quantifier>,
    pub label: String,
    pub label_negated: bool,
    pub source_text: String,
}

impl PartialEq for Explanation {
    fn eq(&self, other: &Self) -> bool {
        self.condition == other.condition
            && self.quantifier == other.quantifier
            && self.label == other.label
            && self.label_negated == other.label_negated
    }
}

impl Explanation {
    /// Builds an explanation whose `source_text` is its canonical rendering.
    pub fn new(
        condition: ConditionNode,
        quantifier: Option<Quantifier>,
        label: impl Into<String>,
        label_negated: bool,
    ) -> Self {
        let mut exp = Explanation {
            condition,
            quantifier,
            label: label.into(),
            label_negated,
            source_text: String::new(),
        };
        exp.source_text = exp.render();
        exp
    }

    /// Canonical surface form: `If COND, then [QUANT ][not ]LABEL`.
    pub fn render(&self) -> String {
        let mut out = String::from("If ");
        self.condition.render_into(&mut out);
        out.push_str(", then ");
        if let Some(q) = self.quantifier {
            out.push_str(q.word());
            out.push(' ');
        }
        if self.label_negated {
            out.push_str("not ");
        }
        out.push_str(&self.label);
        out
    }

    pub fn token_count(&self) -> usize {
        self.render().split_whitespace().count()
    }

    /// Symbolic feature vector of width [`EXPLANATION_FEATURES`].
    pub fn features(&self) -> [f64; EXPLANATION_FEATURES] {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut f = [0.0; EXPLANATION_FEATURES];
        f[0] = self.token_count() as f64 / 32.0;
        f[1] = self.condition.depth() as f64 / 4.0;
        f[2] = self.condition.leaf_count() as f64 / 8.0;
        f[3] = flag(self.quantifier.is_some());
        f[4] = flag(self.condition.has_clause_negation());
        f[5] = flag(self.label_negated);
        f[6] = flag(self.condition.has_conjunction());
        f[7] = flag(self.condition.has_disjunction());
        if let Some(q) = self.quantifier {
            f[SCALAR_FEATURES + q.index()] = 1.0;
        }
        f
    }

    pub fn complexity(&self, n_labels: usize) -> ComplexityDescriptor {
        let negation = match (self.condition.has_clause_negation(), self.label_negated) {
            (false, false) => Negation::None,
            (true, false) => Negation::Clause,
            (false, true) => Negation::Label,
            (true, true) => Negation::Both,
        };
        let structure = match self.condition.junction_count() {
            0 => Structure::Simple,
            1 => Structure::SingleJunction,
            _ => Structure::Nested,
        };
        ComplexityDescriptor {
            classes: if n_labels == 2 {
                Classes::Binary
            } else {
                Classes::Multiclass
            },
            negation,
            structure,
            quantified: self.quantifier.is_some(),
        }
    }
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

const SCALAR_FEATURES: usize = 8;

/// Width of [`Explanation::features`]: 8 scalar features plus a one-hot
/// quantifier block.
pub const EXPLANATION_FEATURES: usize = SCALAR_FEATURES + NUM_QUANTIFIERS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classes {
    Binary,
    Multiclass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Negation {
    None,
    Clause,
    Label,
    Both,
}

impl Negation {
    pub fn clause(self) -> bool {
        matches!(self, Negation::Clause | Negation::Both)
    }

    pub fn label(self) -> bool {
        matches!(self, Negation::Label | Negation::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    Simple,
    SingleJunction,
    Nested,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComplexityDescriptor {
    pub classes: Classes,
    pub negation: Negation,
    pub structure: Structure,
    pub quantified: bool,
}

impl ComplexityDescriptor {
    /// The full 2 x 4 x 3 x 2 cross product in a fixed order.
    pub fn all() -> Vec<ComplexityDescriptor> {
        let mut out = Vec::with_capacity(48);
        for classes in [Classes::Binary, Classes::Multiclass] {
            for negation in [Negation::None, Negation::Clause, Negation::Label, Negation::Both] {
                for structure in [Structure::Simple, Structure::SingleJunction, Structure::Nested] {
                    for quantified in [false, true] {
                        out.push(ComplexityDescriptor {
                            classes,
                            negation,
                            structure,
                            quantified,
                        });
                    }
                }
            }
        }
        out
    }

    /// Agreement on the axes an explanation determines by itself.
    pub fn same_explanation_axes(&self, other: &ComplexityDescriptor) -> bool {
        self.negation == other.negation
            && self.structure == other.structure
            && self.quantified == other.quantified
    }
}

impl fmt::Display for ComplexityDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let classes = match self.classes {
            Classes::Binary => "binary",
            Classes::Multiclass => "multiclass",
        };
        let negation = match self.negation {
            Negation::None => "none",
            Negation::Clause => "clause",
            Negation::Label => "label",
            Negation::Both => "both",
        };
        let structure = match self.structure {
            Structure::Simple => "simple",
            Structure::SingleJunction => "single-junction",
            Structure::Nested => "nested",
        };
        let quant = if self.quantified { "quantified" } else { "plain" };
        write!(f, "{classes}/{negation}/{structure}/{quant}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs(pairs: &[(&str, Value)]) -> Attributes {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn eq(a: &str, v: i64) -> ConditionNode {
        ConditionNode::leaf(a, Operator::Equal, Value::Int(v)).unwrap()
    }

    #[test]
    fn leaf_evaluation() {
        let head = eq("head", 1);
        assert_eq!(head.evaluate(&attrs(&[("head", Value::Int(1))])).unwrap(), Truth::True);
        assert_eq!(head.evaluate(&attrs(&[("tail", Value::Int(0))])).unwrap(), Truth::Unknown);
        assert_eq!(
            head.evaluate(&attrs(&[("head", Value::Cat("x".into()))])).unwrap(),
            Truth::False
        );
    }

    #[test]
    fn conjunction_with_missing_attribute() {
        let node = ConditionNode::And(vec![eq("a", 1), eq("b", 2)]);
        assert_eq!(node.evaluate(&attrs(&[("a", Value::Int(1))])).unwrap(), Truth::Unknown);
        assert_eq!(
            node.evaluate(&attrs(&[("a", Value::Int(0)), ("b", Value::Int(2))])).unwrap(),
            Truth::False
        );
    }

    #[test]
    fn ordering_on_categorical_is_an_error() {
        assert!(ConditionNode::leaf("a", Operator::Greater, Value::Cat("x".into())).is_err());
        let node = ConditionNode::leaf("a", Operator::Less, Value::Int(3)).unwrap();
        let err = node.evaluate(&attrs(&[("a", Value::Cat("blue".into()))])).unwrap_err();
        assert!(matches!(err, Error::TypeMismatch(_)));
    }

    #[test]
    fn render_templates() {
        let e = Explanation::new(eq("head", 1), None, "dax", false);
        assert_eq!(e.render(), "If head equal to 1, then dax");
        let e = Explanation::new(eq("head", 1), None, "dax", true);
        assert_eq!(e.render(), "If head equal to 1, then not dax");
        let nested = ConditionNode::And(vec![
            ConditionNode::Or(vec![eq("a", 1), eq("b", 2)]),
            ConditionNode::negate(eq("c", 3)),
        ]);
        let e = Explanation::new(nested, "rarely".parse().ok(), "wug", false);
        assert_eq!(
            e.render(),
            "If (a equal to 1 or b equal to 2) and not c equal to 3, then rarely wug"
        );
    }

    #[test]
    fn feature_vectors() {
        let plain = Explanation::new(eq("head", 1), None, "dax", false);
        let f = plain.features();
        assert_eq!(f.len(), EXPLANATION_FEATURES);
        assert_eq!(f[3], 0.0);
        assert!(f[SCALAR_FEATURES..].iter().all(|x| *x == 0.0));
        assert_eq!(f[0], 7.0 / 32.0);

        let q = Explanation::new(eq("head", 1), "definitely".parse().ok(), "dax", false);
        let ones = q.features()[SCALAR_FEATURES..].iter().filter(|x| **x == 1.0).count();
        assert_eq!(ones, 1);
        assert_eq!(q.features(), q.clone().features());
    }

    #[test]
    fn complexity_examples() {
        let plain = Explanation::new(eq("head", 1), None, "dax", false);
        assert_eq!(
            plain.complexity(2),
            ComplexityDescriptor {
                classes: Classes::Binary,
                negation: Negation::None,
                structure: Structure::Simple,
                quantified: false
            }
        );
        let both = Explanation::new(ConditionNode::negate(eq("head", 1)), None, "dax", true);
        let c = both.complexity(3);
        assert_eq!(c.classes, Classes::Multiclass);
        assert_eq!(c.negation, Negation::Both);
        assert_eq!(c.structure, Structure::Simple);

        let nested = ConditionNode::And(vec![
            ConditionNode::Or(vec![eq("a", 1), eq("b", 2)]),
            ConditionNode::Or(vec![eq("c", 1), eq("d", 2)]),
        ]);
        let e = Explanation::new(nested, "rarely".parse().ok(), "dax", false);
        let c = e.complexity(2);
        assert_eq!(
            (c.classes, c.negation, c.structure, c.quantified),
            (Classes::Binary, Negation::None, Structure::Nested, true)
        );
    }

    #[test]
    fn forty_eight_descriptors() {
        let all = ComplexityDescriptor::all();
        assert_eq!(all.len(), 48);
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), 48);
    }

    #[test]
    fn value_tokens() {
        assert_eq!(Value::from_token("3"), Value::Int(3));
        assert_eq!(Value::from_token("-2"), Value::Int(-2));
        assert_eq!(Value::from_token("0.5"), Value::Real(0.5));
        assert_eq!(Value::from_token("blue"), Value::Cat("blue".into()));
        assert_eq!(Value::from_token("inf"), Value::Cat("inf".into()));
        assert_eq!(Value::from_token(&Value::Real(2.0).to_string()), Value::Real(2.0));
    }
}
