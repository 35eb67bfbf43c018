//! Quantifier vocabulary, learnable quantifier probabilities, and the
//! ordinal ranking loss over them.
//!
//! Each quantifier word owns one unconstrained raw parameter; its probability
//! is `logistic(raw)`, so plain gradient steps on the raw value can never leave
//! the open unit interval.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Number of quantifier words in the lexicon.
pub const NUM_QUANTIFIERS: usize = 15;

/// Quantifier words in lexicon-definition order.
pub const QUANTIFIER_WORDS: [&str; NUM_QUANTIFIERS] = [
    "always",
    "certainly",
    "definitely",
    "usually",
    "normally",
    "generally",
    "likely",
    "typically",
    "often",
    "sometimes",
    "frequently",
    "occasionally",
    "rarely",
    "seldom",
    "never",
];

/// Reference probabilities, aligned with [`QUANTIFIER_WORDS`].
pub const REFERENCE_PROBABILITIES: [f64; NUM_QUANTIFIERS] = [
    0.95, 0.95, 0.95, // always, certainly, definitely
    0.70, 0.70, 0.70, 0.70, 0.70, // usually .. typically
    0.50, // often
    0.30, 0.30, // sometimes, frequently
    0.20, // occasionally
    0.10, 0.10, // rarely, seldom
    0.05, // never
];

/// Raw parameters are clamped to this magnitude before squashing so that the
/// probability stays strictly inside (0, 1) in f64.
pub const RAW_LIMIT: f64 = 30.0;

/// Half-width of the uniform range used by [`QuantifierLexicon::random`].
pub const RANDOM_INIT_RANGE: f64 = 2.0;

pub fn logistic(raw: f64) -> f64 {
    let x = raw.clamp(-RAW_LIMIT, RAW_LIMIT);
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A quantifier word, stored as its index in [`QUANTIFIER_WORDS`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Quantifier(u8);

impl Quantifier {
    pub fn from_index(index: usize) -> Option<Self> {
        (index < NUM_QUANTIFIERS).then_some(Quantifier(index as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn word(self) -> &'static str {
        QUANTIFIER_WORDS[self.index()]
    }

    pub fn reference_probability(self) -> f64 {
        REFERENCE_PROBABILITIES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Quantifier> + Clone {
        (0..NUM_QUANTIFIERS as u8).map(Quantifier)
    }

    /// Looks up a word; `None` if it is not a quantifier.
    pub fn lookup(word: &str) -> Option<Self> {
        QUANTIFIER_WORDS
            .iter()
            .position(|w| *w == word)
            .map(|i| Quantifier(i as u8))
    }
}

impl FromStr for Quantifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quantifier::lookup(s).ok_or_else(|| Error::UnknownQuantifier(s.to_string()))
    }
}

impl fmt::Display for Quantifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl Serialize for Quantifier {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.word())
    }
}

impl<'de> Deserialize<'de> for Quantifier {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let word = String::deserialize(deserializer)?;
        word.parse().map_err(serde::de::Error::custom)
    }
}

/// Learnable quantifier probabilities.
///
/// When `frozen` is set, every gradient computed against this lexicon is
/// zero; loss values are unaffected.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantifierLexicon {
    raw: [f64; NUM_QUANTIFIERS],
    pub frozen: bool,
}

impl QuantifierLexicon {
    pub fn from_raw(raw: [f64; NUM_QUANTIFIERS]) -> Self {
        QuantifierLexicon { raw, frozen: false }
    }

    pub fn from_probabilities(probs: [f64; NUM_QUANTIFIERS]) -> Self {
        Self::from_raw(probs.map(logit))
    }

    /// Lexicon initialized at the reference probabilities.
    pub fn predefined() -> Self {
        Self::from_probabilities(REFERENCE_PROBABILITIES)
    }

    /// Raw parameters drawn i.i.d. from U[-2, 2].
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = [0.0; NUM_QUANTIFIERS];
        for r in raw.iter_mut() {
            *r = rng.gen_range(-RANDOM_INIT_RANGE..=RANDOM_INIT_RANGE);
        }
        Self::from_raw(raw)
    }

    pub fn raw(&self) -> &[f64; NUM_QUANTIFIERS] {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut [f64; NUM_QUANTIFIERS] {
        &mut self.raw
    }

    pub fn prob(&self, q: Quantifier) -> f64 {
        logistic(self.raw[q.index()])
    }

    /// Probability for a quantifier given by word.
    pub fn probability(&self, word: &str) -> Result<f64> {
        Ok(self.prob(word.parse()?))
    }

    pub fn probabilities(&self) -> [f64; NUM_QUANTIFIERS] {
        self.raw.map(logistic)
    }

    /// `(quantifier, probability, raw)` in lexicon order.
    pub fn entries(&self) -> impl Iterator<Item = (Quantifier, f64, f64)> + '_ {
        Quantifier::all().map(move |q| (q, self.prob(q), self.raw[q.index()]))
    }

    /// Derivative of `probability` with respect to the raw parameter.
    pub fn dprob_draw(&self, q: Quantifier) -> f64 {
        let p = self.prob(q);
        p * (1.0 - p)
    }

    /// Rows of `quantifier,probability,raw,frozen`, with header.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["quantifier", "probability", "raw", "frozen"])?;
        for (q, p, raw) in self.entries() {
            w.write_record([
                q.word().to_string(),
                format!("{p:?}"),
                format!("{raw:?}"),
                self.frozen.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::Io {
            path: "<csv>".into(),
            source: e,
        })?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LexiconRepr {
    probabilities: IndexMap<String, f64>,
    raw: IndexMap<String, f64>,
    frozen: bool,
}

impl Serialize for QuantifierLexicon {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let repr = LexiconRepr {
            probabilities: self
                .entries()
                .map(|(q, p, _)| (q.word().to_string(), p))
                .collect(),
            raw: self
                .entries()
                .map(|(q, _, r)| (q.word().to_string(), r))
                .collect(),
            frozen: self.frozen,
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for QuantifierLexicon {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = LexiconRepr::deserialize(deserializer)?;
        let mut raw = [0.0; NUM_QUANTIFIERS];
        for q in Quantifier::all() {
            raw[q.index()] = *repr
                .raw
                .get(q.word())
                .ok_or_else(|| D::Error::custom(format!("missing raw value for `{q}`")))?;
        }
        if let Some(extra) = repr.raw.keys().find(|k| Quantifier::lookup(k).is_none()) {
            return Err(D::Error::custom(format!("unknown quantifier `{extra}`")));
        }
        Ok(QuantifierLexicon {
            raw,
            frozen: repr.frozen,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationKind {
    StrictlyGreater,
    Equal,
}

/// `stronger` is at least as strong as `weaker`; strictly so for
/// [`RelationKind::StrictlyGreater`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdinalRelation {
    pub stronger: Quantifier,
    pub weaker: Quantifier,
    pub kind: RelationKind,
}

impl OrdinalRelation {
    pub fn new(stronger: Quantifier, weaker: Quantifier, kind: RelationKind) -> Result<Self> {
        if stronger == weaker {
            return Err(Error::Config(format!(
                "relation pairs `{stronger}` with itself"
            )));
        }
        Ok(OrdinalRelation {
            stronger,
            weaker,
            kind,
        })
    }

    /// Whether learned probabilities respect this relation. Equal pairs count
    /// as satisfied when their probabilities are within `equal_tolerance`.
    pub fn is_satisfied(&self, lexicon: &QuantifierLexicon, equal_tolerance: f64) -> bool {
        let (ps, pw) = (lexicon.prob(self.stronger), lexicon.prob(self.weaker));
        match self.kind {
            RelationKind::StrictlyGreater => ps > pw,
            RelationKind::Equal => (ps - pw).abs() <= equal_tolerance,
        }
    }
}

/// One relation per unordered pair of quantifiers, derived from the
/// reference probabilities: 105 in total.
pub fn reference_relations() -> Vec<OrdinalRelation> {
    let mut out = Vec::with_capacity(NUM_QUANTIFIERS * (NUM_QUANTIFIERS - 1) / 2);
    for a in Quantifier::all() {
        for b in Quantifier::all().filter(|b| *b > a) {
            let (pa, pb) = (a.reference_probability(), b.reference_probability());
            let rel = if pa > pb {
                OrdinalRelation::new(a, b, RelationKind::StrictlyGreater)
            } else if pb > pa {
                OrdinalRelation::new(b, a, RelationKind::StrictlyGreater)
            } else {
                OrdinalRelation::new(a, b, RelationKind::Equal)
            };
            out.push(rel.expect("distinct quantifiers"));
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingLoss {
    pub value: f64,
    /// Gradient with respect to the raw parameters; all zero when frozen.
    pub grad: [f64; NUM_QUANTIFIERS],
}

/// Sum over relations of `softplus(p_weaker - p_stronger)` for strict pairs
/// and `(p_stronger - p_weaker)^2` for equal pairs.
pub fn ranking_loss(lexicon: &QuantifierLexicon, relations: &[OrdinalRelation]) -> RankingLoss {
    let probs = lexicon.probabilities();
    let mut value = 0.0;
    // gradient with respect to probabilities first
    let mut dp = [0.0; NUM_QUANTIFIERS];
    for rel in relations {
        let (s, w) = (rel.stronger.index(), rel.weaker.index());
        let diff = probs[w] - probs[s];
        match rel.kind {
            RelationKind::StrictlyGreater => {
                value += softplus(diff);
                let d = sigmoid(diff);
                dp[w] += d;
                dp[s] -= d;
            }
            RelationKind::Equal => {
                value += diff * diff;
                dp[w] += 2.0 * diff;
                dp[s] -= 2.0 * diff;
            }
        }
    }
    let mut grad = [0.0; NUM_QUANTIFIERS];
    if !lexicon.frozen {
        for (g, (d, p)) in grad.iter_mut().zip(dp.iter().zip(probs.iter())) {
            *g = d * p * (1.0 - p);
        }
    }
    RankingLoss { value, grad }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(word: &str) -> Quantifier {
        word.parse().unwrap()
    }

    #[test]
    fn predefined_matches_reference_table() {
        let lex = QuantifierLexicon::predefined();
        assert!((lex.probability("always").unwrap() - 0.95).abs() < 1e-12);
        assert!((lex.probability("often").unwrap() - 0.50).abs() < 1e-12);
        assert!((lex.probability("never").unwrap() - 0.05).abs() < 1e-12);
        assert!((lex.probability("usually").unwrap() - 0.70).abs() < 1e-12);
        assert!(!lex.frozen);
    }

    #[test]
    fn random_lexicon_is_seeded_and_bounded() {
        let a = QuantifierLexicon::random(42);
        let b = QuantifierLexicon::random(42);
        let c = QuantifierLexicon::random(43);
        assert_eq!(a.raw().map(f64::to_bits), b.raw().map(f64::to_bits));
        assert_ne!(a.raw(), c.raw());
        for seed in 0..200 {
            for p in QuantifierLexicon::random(seed).probabilities() {
                assert!(p > 0.119 && p < 0.881, "p = {p}");
            }
        }
    }

    #[test]
    fn probability_edge_cases() {
        let mut lex = QuantifierLexicon::from_raw([0.0; NUM_QUANTIFIERS]);
        assert_eq!(lex.probability("sometimes").unwrap(), 0.5);
        lex.raw_mut()[0] = f64::INFINITY;
        lex.raw_mut()[1] = f64::NEG_INFINITY;
        let p = lex.probability("always").unwrap();
        assert!(p < 1.0, "p = {p}");
        assert!(lex.probability("certainly").unwrap() > 0.0);
        let err = lex.probability("mostly").unwrap_err();
        assert!(err.to_string().contains("mostly"));
    }

    #[test]
    fn probability_strictly_increasing_in_raw() {
        let mut prev = 0.0;
        for i in -300..=300 {
            let p = logistic(i as f64 * 0.1);
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn relation_table() {
        let rels = reference_relations();
        assert_eq!(rels.len(), 105);
        let find = |a: &str, b: &str| {
            rels.iter()
                .find(|r| {
                    (r.stronger == q(a) && r.weaker == q(b)) || (r.stronger == q(b) && r.weaker == q(a))
                })
                .copied()
                .unwrap()
        };
        let r = find("likely", "often");
        assert_eq!(r.kind, RelationKind::StrictlyGreater);
        assert_eq!(r.stronger, q("likely"));
        assert_eq!(find("usually", "normally").kind, RelationKind::Equal);
        let equal = rels.iter().filter(|r| r.kind == RelationKind::Equal).count();
        assert_eq!(equal, 15);
        assert!(OrdinalRelation::new(q("often"), q("often"), RelationKind::StrictlyGreater).is_err());
    }

    #[test]
    fn single_pair_contributions() {
        let lex = QuantifierLexicon::from_probabilities([0.7; NUM_QUANTIFIERS]);
        let eq = [OrdinalRelation::new(q("usually"), q("normally"), RelationKind::Equal).unwrap()];
        assert_eq!(ranking_loss(&lex, &eq).value, 0.0);
        let gt = [OrdinalRelation::new(q("always"), q("often"), RelationKind::StrictlyGreater).unwrap()];
        assert!((ranking_loss(&lex, &gt).value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn frozen_zeroes_gradient_only() {
        let mut lex = QuantifierLexicon::random(3);
        let rels = reference_relations();
        let live = ranking_loss(&lex, &rels);
        lex.frozen = true;
        let frozen = ranking_loss(&lex, &rels);
        assert_eq!(live.value, frozen.value);
        assert!(live.grad.iter().any(|g| *g != 0.0));
        assert!(frozen.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn serde_round_trip_keeps_order() {
        let lex = QuantifierLexicon::random(9);
        let json = serde_json::to_string(&lex).unwrap();
        assert!(json.starts_with("{\"probabilities\":{\"always\""));
        let back: QuantifierLexicon = serde_json::from_str(&json).unwrap();
        assert_eq!(back, lex);
    }
}
