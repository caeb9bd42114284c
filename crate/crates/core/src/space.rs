//! Parameters, routines, search spaces and constrained sampling.
//!
//! A [`SearchSpace`] is immutable once built: [`SearchSpace::new`] checks
//! every structural invariant (unique names, owners exist, parent links form
//! a forest, constraints only reference declared numeric parameters), so the
//! rest of the crate can rely on them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_from;

/// Consecutive rejections tolerated before sampling gives up.
pub const DEFAULT_REJECTION_BUDGET: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` is not assigned")]
    MissingParameter(String),
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("cannot parse constraint `{source_text}`: {message}")]
    ConstraintParse {
        source_text: String,
        message: String,
    },
    #[error("sampling exhausted after {0} consecutive rejections (over-constrained space?)")]
    SamplingExhausted(usize),
}

/// A parameter value. Numbers cover integer, real and ordinal kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Label(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(v) => Some(*v),
            Value::Label(_) => None,
        }
    }
}

impl fmt::Display for Value {
    /// Canonical decimal rendering: integral numbers print without a
    /// fractional part, other reals use the shortest round-trip form.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(v) if v.fract() == 0.0 && v.abs() < 1e15 => write!(f, "{}", *v as i64),
            Value::Num(v) => write!(f, "{v}"),
            Value::Label(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Num(v)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Label(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamKind {
    Integer {
        lo: i64,
        hi: i64,
        #[serde(default = "default_step")]
        step: i64,
    },
    Real {
        lo: f64,
        hi: f64,
    },
    Ordinal {
        values: Vec<f64>,
    },
    Categorical {
        labels: Vec<String>,
    },
}

fn default_step() -> i64 {
    1
}

impl ParamKind {
    pub fn is_numeric(&self) -> bool {
        !matches!(self, ParamKind::Categorical { .. })
    }

    pub fn contains(&self, value: &Value) -> bool {
        match (self, value) {
            (ParamKind::Integer { lo, hi, step }, Value::Num(v)) => {
                if v.fract() != 0.0 || *v < *lo as f64 || *v > *hi as f64 {
                    return false;
                }
                (*v as i64 - lo) % step == 0
            }
            (ParamKind::Real { lo, hi }, Value::Num(v)) => v.is_finite() && *v >= *lo && *v <= *hi,
            (ParamKind::Ordinal { values }, Value::Num(v)) => values.iter().any(|x| x == v),
            (ParamKind::Categorical { labels }, Value::Label(s)) => labels.iter().any(|l| l == s),
            _ => false,
        }
    }

    /// Numeric bounds of the domain; `None` for categoricals.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match self {
            ParamKind::Integer { lo, hi, .. } => Some((*lo as f64, *hi as f64)),
            ParamKind::Real { lo, hi } => Some((*lo, *hi)),
            ParamKind::Ordinal { values } => {
                let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                Some((lo, hi))
            }
            ParamKind::Categorical { .. } => None,
        }
    }

    /// Nearest in-domain value to `v` (numeric kinds only).
    pub fn nearest(&self, v: f64) -> Option<f64> {
        match self {
            ParamKind::Integer { lo, hi, step } => {
                let k = ((v - *lo as f64) / *step as f64).round();
                let kmax = ((hi - lo) / step) as f64;
                Some(*lo as f64 + k.clamp(0.0, kmax) * *step as f64)
            }
            ParamKind::Real { lo, hi } => Some(v.clamp(*lo, *hi)),
            ParamKind::Ordinal { values } => values
                .iter()
                .cloned()
                .min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs())),
            ParamKind::Categorical { .. } => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            ParamKind::Integer { lo, hi, step } => {
                let k = rng.random_range(0..=(hi - lo) / step);
                Value::Num((lo + k * step) as f64)
            }
            ParamKind::Real { lo, hi } => Value::Num(rng.random_range(*lo..=*hi)),
            ParamKind::Ordinal { values } => Value::Num(values[rng.random_range(0..values.len())]),
            ParamKind::Categorical { labels } => {
                Value::Label(labels[rng.random_range(0..labels.len())].clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
    pub default: Value,
    pub owner: String,
    /// All uses of the parameter must take one value (e.g. one kernel
    /// launched from several regions).
    #[serde(default)]
    pub shared_value_required: bool,
    /// Further routines that invoke the code this parameter configures.
    /// Influence on these routines is "own" influence, not cross-routine.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub used_by: Vec<String>,
}

impl ParameterSpec {
    /// Owner followed by every additional user.
    pub fn users(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.owner.as_str()).chain(self.used_by.iter().map(String::as_str))
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoutineDecl {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Whether the objective reports a metric for this routine.
    #[serde(default = "default_true")]
    pub measured: bool,
}

impl RoutineDecl {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            parent: None,
            measured: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self, lookup: &dyn Fn(&str) -> Option<f64>) -> Option<f64> {
        Some(match self {
            Expr::Num(v) => *v,
            Expr::Var(name) => lookup(name)?,
            Expr::Neg(e) => -e.eval(lookup)?,
            Expr::Add(a, b) => a.eval(lookup)? + b.eval(lookup)?,
            Expr::Sub(a, b) => a.eval(lookup)? - b.eval(lookup)?,
            Expr::Mul(a, b) => a.eval(lookup)? * b.eval(lookup)?,
        })
    }

    fn vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Num(_) => {}
            Expr::Var(name) => {
                out.insert(name.clone());
            }
            Expr::Neg(e) => e.vars(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) => {
                a.vars(out);
                b.vars(out);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CmpOp {
    Lt,
    Le,
    Eq,
    Ge,
    Gt,
}

/// A comparison between two arithmetic expressions over parameter values,
/// e.g. `nstb * nkpb * nspb <= 40`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintExpr {
    source: String,
    lhs: Expr,
    op: CmpOp,
    rhs: Expr,
}

impl ConstraintExpr {
    pub fn parse(source: &str) -> Result<Self, SpaceError> {
        let tokens = tokenize(source).map_err(|message| SpaceError::ConstraintParse {
            source_text: source.to_string(),
            message,
        })?;
        let mut parser = Parser { tokens, pos: 0 };
        let parsed = parser
            .constraint()
            .map_err(|message| SpaceError::ConstraintParse {
                source_text: source.to_string(),
                message,
            })?;
        let (lhs, op, rhs) = parsed;
        Ok(Self {
            source: source.trim().to_string(),
            lhs,
            op,
            rhs,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn variables(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.lhs.vars(&mut out);
        self.rhs.vars(&mut out);
        out
    }

    /// Evaluates the predicate; `None` if a referenced value is missing or
    /// non-numeric.
    pub fn holds(&self, config: &Configuration) -> Option<bool> {
        let lookup = |name: &str| config.get(name).and_then(Value::as_f64);
        let l = self.lhs.eval(&lookup)?;
        let r = self.rhs.eval(&lookup)?;
        Some(match self.op {
            CmpOp::Lt => l < r,
            CmpOp::Le => l <= r,
            CmpOp::Eq => l == r,
            CmpOp::Ge => l >= r,
            CmpOp::Gt => l > r,
        })
    }
}

impl Serialize for ConstraintExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}

impl<'de> Deserialize<'de> for ConstraintExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ConstraintExpr::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    LParen,
    RParen,
    Cmp(CmpOp),
}

fn tokenize(src: &str) -> Result<Vec<Token>, String> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' | '−' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' | '×' | '·' => {
                out.push(Token::Star);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '≤' => {
                out.push(Token::Cmp(CmpOp::Le));
                i += 1;
            }
            '≥' => {
                out.push(Token::Cmp(CmpOp::Ge));
                i += 1;
            }
            '<' | '>' | '=' => {
                let next_eq = chars.get(i + 1) == Some(&'=');
                let op = match (c, next_eq) {
                    ('<', true) => CmpOp::Le,
                    ('<', false) => CmpOp::Lt,
                    ('>', true) => CmpOp::Ge,
                    ('>', false) => CmpOp::Gt,
                    _ => CmpOp::Eq,
                };
                out.push(Token::Cmp(op));
                i += if next_eq { 2 } else { 1 };
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                    i += 1;
                    if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                        i += 1;
                    }
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                let text: String = chars[start..i].iter().collect();
                let v = text
                    .parse::<f64>()
                    .map_err(|_| format!("bad number `{text}`"))?;
                out.push(Token::Num(v));
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(format!("unexpected character `{other}`")),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn constraint(&mut self) -> Result<(Expr, CmpOp, Expr), String> {
        let lhs = self.sum()?;
        let op = match self.next() {
            Some(Token::Cmp(op)) => op,
            _ => return Err("expected a comparison operator".into()),
        };
        let rhs = self.sum()?;
        if self.pos != self.tokens.len() {
            return Err("trailing input after comparison".into());
        }
        Ok((lhs, op, rhs))
    }

    fn sum(&mut self) -> Result<Expr, String> {
        let mut acc = self.product()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    acc = Expr::Add(Box::new(acc), Box::new(self.product()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    acc = Expr::Sub(Box::new(acc), Box::new(self.product()?));
                }
                _ => return Ok(acc),
            }
        }
    }

    fn product(&mut self) -> Result<Expr, String> {
        let mut acc = self.unary()?;
        while let Some(Token::Star) = self.peek() {
            self.pos += 1;
            acc = Expr::Mul(Box::new(acc), Box::new(self.unary()?));
        }
        Ok(acc)
    }

    fn unary(&mut self) -> Result<Expr, String> {
        match self.next() {
            Some(Token::Minus) => Ok(Expr::Neg(Box::new(self.unary()?))),
            Some(Token::Num(v)) => Ok(Expr::Num(v)),
            Some(Token::Ident(name)) => Ok(Expr::Var(name)),
            Some(Token::LParen) => {
                let e = self.sum()?;
                match self.next() {
                    Some(Token::RParen) => Ok(e),
                    _ => Err("missing `)`".into()),
                }
            }
            _ => Err("expected a number, parameter or `(`".into()),
        }
    }
}

/// One value per declared parameter, keyed by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub BTreeMap<String, Value>);

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.0.get(name)
    }

    pub fn set(&mut self, name: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(name.into(), value.into());
    }

    pub fn num(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(Value::as_f64)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(String, Value)> for Configuration {
    fn from_iter<I: IntoIterator<Item = (String, Value)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpace {
    routines: Vec<RoutineDecl>,
    parameters: Vec<ParameterSpec>,
    #[serde(default)]
    constraints: Vec<ConstraintExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace", into = "RawSpace")]
pub struct SearchSpace {
    routines: Vec<RoutineDecl>,
    parameters: Vec<ParameterSpec>,
    constraints: Vec<ConstraintExpr>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<RawSpace> for SearchSpace {
    type Error = SpaceError;

    fn try_from(raw: RawSpace) -> Result<Self, Self::Error> {
        SearchSpace::new(raw.routines, raw.parameters, raw.constraints)
    }
}

impl From<SearchSpace> for RawSpace {
    fn from(s: SearchSpace) -> Self {
        RawSpace {
            routines: s.routines,
            parameters: s.parameters,
            constraints: s.constraints,
        }
    }
}

impl SearchSpace {
    pub fn new(
        routines: Vec<RoutineDecl>,
        parameters: Vec<ParameterSpec>,
        constraints: Vec<ConstraintExpr>,
    ) -> Result<Self, SpaceError> {
        let invalid = |m: String| Err(SpaceError::InvalidSpace(m));
        let mut routine_names = BTreeSet::new();
        for r in &routines {
            if !routine_names.insert(r.name.as_str()) {
                return invalid(format!("duplicate routine `{}`", r.name));
            }
        }
        for r in &routines {
            if let Some(p) = &r.parent {
                if !routine_names.contains(p.as_str()) {
                    return invalid(format!("routine `{}` has unknown parent `{p}`", r.name));
                }
            }
        }
        // Parent links must not cycle.
        let parent_of: HashMap<&str, &str> = routines
            .iter()
            .filter_map(|r| r.parent.as_deref().map(|p| (r.name.as_str(), p)))
            .collect();
        for r in &routines {
            let mut cur = r.name.as_str();
            let mut steps = 0;
            while let Some(p) = parent_of.get(cur) {
                cur = p;
                steps += 1;
                if steps > routines.len() {
                    return invalid(format!("parent links through `{}` form a cycle", r.name));
                }
            }
        }

        let mut index = HashMap::new();
        for (i, p) in parameters.iter().enumerate() {
            if index.insert(p.name.clone(), i).is_some() {
                return invalid(format!("duplicate parameter `{}`", p.name));
            }
            for user in p.users() {
                if !routine_names.contains(user) {
                    return invalid(format!(
                        "parameter `{}` names unknown routine `{user}`",
                        p.name
                    ));
                }
            }
            match &p.kind {
                ParamKind::Integer { lo, hi, step } if *step <= 0 || lo > hi => {
                    return invalid(format!("parameter `{}` has an empty integer range", p.name))
                }
                ParamKind::Real { lo, hi } if lo.is_nan() || hi.is_nan() || lo > hi => {
                    return invalid(format!("parameter `{}` has an empty real range", p.name))
                }
                ParamKind::Ordinal { values } if values.is_empty() => {
                    return invalid(format!("parameter `{}` has no ordinal values", p.name))
                }
                ParamKind::Categorical { labels } if labels.is_empty() => {
                    return invalid(format!("parameter `{}` has no labels", p.name))
                }
                _ => {}
            }
            if !p.kind.contains(&p.default) {
                return invalid(format!(
                    "default `{}` of parameter `{}` is outside its domain",
                    p.default, p.name
                ));
            }
        }
        for c in &constraints {
            for v in c.variables() {
                match index.get(&v) {
                    None => {
                        return invalid(format!(
                            "constraint `{}` references undeclared parameter `{v}`",
                            c.source()
                        ))
                    }
                    Some(&i) if !parameters[i].kind.is_numeric() => {
                        return invalid(format!(
                            "constraint `{}` uses categorical parameter `{v}` in arithmetic",
                            c.source()
                        ))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            routines,
            parameters,
            constraints,
            index,
        })
    }

    pub fn parameters(&self) -> &[ParameterSpec] {
        &self.parameters
    }

    pub fn routines(&self) -> &[RoutineDecl] {
        &self.routines
    }

    pub fn constraints(&self) -> &[ConstraintExpr] {
        &self.constraints
    }

    pub fn parameter(&self, name: &str) -> Option<&ParameterSpec> {
        self.index.get(name).map(|&i| &self.parameters[i])
    }

    pub fn routine(&self, name: &str) -> Option<&RoutineDecl> {
        self.routines.iter().find(|r| r.name == name)
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    pub fn measured_routines(&self) -> Vec<String> {
        self.routines
            .iter()
            .filter(|r| r.measured)
            .map(|r| r.name.clone())
            .collect()
    }

    /// Ancestors of a routine, nearest first.
    pub fn ancestors(&self, routine: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = self.routine(routine).and_then(|r| r.parent.clone());
        while let Some(p) = cur {
            cur = self.routine(&p).and_then(|r| r.parent.clone());
            out.push(p);
        }
        out
    }

    pub fn children(&self, routine: &str) -> Vec<String> {
        self.routines
            .iter()
            .filter(|r| r.parent.as_deref() == Some(routine))
            .map(|r| r.name.clone())
            .collect()
    }

    /// Depth in the parent forest (roots have depth 0).
    pub fn depth(&self, routine: &str) -> usize {
        self.ancestors(routine).len()
    }

    pub fn default_configuration(&self) -> Configuration {
        self.parameters
            .iter()
            .map(|p| (p.name.clone(), p.default.clone()))
            .collect()
    }

    /// True iff every value is in-domain and every constraint holds.
    pub fn validate(&self, config: &Configuration) -> Result<bool, SpaceError> {
        for name in config.0.keys() {
            if !self.index.contains_key(name) {
                return Err(SpaceError::UnknownParameter(name.clone()));
            }
        }
        for p in &self.parameters {
            match config.get(&p.name) {
                None => return Err(SpaceError::MissingParameter(p.name.clone())),
                Some(v) if !p.kind.contains(v) => return Ok(false),
                _ => {}
            }
        }
        Ok(self
            .constraints
            .iter()
            .all(|c| c.holds(config) == Some(true)))
    }

    /// Draws `count` valid configurations, each parameter uniform over its
    /// domain, rejecting constraint violations.
    pub fn sample_random(&self, count: usize, seed: u64) -> Result<Vec<Configuration>, SpaceError> {
        let all = self.parameter_names();
        let mut rng = rng_from(seed, &[0x5a3b]);
        let mut sampler = SubspaceSampler::new(self, &all, &Configuration::new())?;
        (0..count).map(|_| sampler.draw(&mut rng)).collect()
    }
}

/// Samples a subset of parameters while holding the rest at fixed values.
pub struct SubspaceSampler<'a> {
    space: &'a SearchSpace,
    tuned: Vec<&'a ParameterSpec>,
    base: Configuration,
    pub rejection_budget: usize,
}

impl<'a> SubspaceSampler<'a> {
    /// Parameters neither tuned nor in `fixed` take their defaults.
    pub fn new(
        space: &'a SearchSpace,
        tuned: &[String],
        fixed: &Configuration,
    ) -> Result<Self, SpaceError> {
        let mut base = space.default_configuration();
        for (k, v) in fixed.iter() {
            if space.parameter(k).is_none() {
                return Err(SpaceError::UnknownParameter(k.clone()));
            }
            base.set(k.clone(), v.clone());
        }
        let tuned = tuned
            .iter()
            .map(|n| {
                space
                    .parameter(n)
                    .ok_or_else(|| SpaceError::UnknownParameter(n.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            space,
            tuned,
            base,
            rejection_budget: DEFAULT_REJECTION_BUDGET,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Configuration, SpaceError> {
        for _ in 0..self.rejection_budget {
            let mut cfg = self.base.clone();
            for p in &self.tuned {
                cfg.set(p.name.clone(), p.kind.sample(rng));
            }
            if self.space.validate(&cfg)? {
                return Ok(cfg);
            }
        }
        Err(SpaceError::SamplingExhausted(self.rejection_budget))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn int_param(name: &str, lo: i64, hi: i64, default: f64, owner: &str) -> ParameterSpec {
        ParameterSpec {
            name: name.into(),
            kind: ParamKind::Integer { lo, hi, step: 1 },
            default: Value::Num(default),
            owner: owner.into(),
            shared_value_required: false,
            used_by: vec![],
        }
    }

    fn mpi_space() -> SearchSpace {
        SearchSpace::new(
            vec![RoutineDecl::new("mpi")],
            vec![
                int_param("nstb", 1, 64, 1.0, "mpi"),
                int_param("nkpb", 1, 4, 1.0, "mpi"),
                int_param("nspb", 1, 2, 1.0, "mpi"),
            ],
            vec![ConstraintExpr::parse("nstb * nkpb * nspb <= 40").unwrap()],
        )
        .unwrap()
    }

    fn cfg(pairs: &[(&str, f64)]) -> Configuration {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), Value::Num(*v)))
            .collect()
    }

    #[test]
    fn core_count_constraint() {
        let space = mpi_space();
        assert!(space
            .validate(&cfg(&[("nstb", 8.0), ("nkpb", 4.0), ("nspb", 1.0)]))
            .unwrap());
        assert!(!space
            .validate(&cfg(&[("nstb", 64.0), ("nkpb", 4.0), ("nspb", 1.0)]))
            .unwrap());
    }

    #[test]
    fn unconstrained_in_domain_is_valid() {
        let space = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![int_param("a", 1, 4, 2.0, "r")],
            vec![],
        )
        .unwrap();
        for v in 1..=4 {
            assert!(space.validate(&cfg(&[("a", v as f64)])).unwrap());
        }
        assert!(!space.validate(&cfg(&[("a", 5.0)])).unwrap());
        assert!(!space.validate(&cfg(&[("a", 2.5)])).unwrap());
    }

    #[test]
    fn unknown_and_missing_parameters_error() {
        let space = mpi_space();
        assert_eq!(
            space.validate(&cfg(&[
                ("nstb", 8.0),
                ("nkpb", 4.0),
                ("nspb", 1.0),
                ("bogus", 1.0)
            ])),
            Err(SpaceError::UnknownParameter("bogus".into()))
        );
        assert_eq!(
            space.validate(&cfg(&[("nstb", 8.0), ("nkpb", 4.0)])),
            Err(SpaceError::MissingParameter("nspb".into()))
        );
    }

    #[test]
    fn sampling_contract() {
        let space = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![int_param("a", 1, 4, 1.0, "r")],
            vec![],
        )
        .unwrap();
        let a = space.sample_random(4, 7).unwrap();
        let b = space.sample_random(4, 7).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        for c in &a {
            let v = c.num("a").unwrap();
            assert!((1.0..=4.0).contains(&v) && v.fract() == 0.0);
        }
    }

    #[test]
    fn unsatisfiable_space_exhausts() {
        let space = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![int_param("x", 1, 4, 1.0, "r")],
            vec![ConstraintExpr::parse("x < 0").unwrap()],
        )
        .unwrap();
        assert_eq!(
            space.sample_random(1, 3),
            Err(SpaceError::SamplingExhausted(DEFAULT_REJECTION_BUDGET))
        );
    }

    #[test]
    fn constraint_grammar() {
        let c = ConstraintExpr::parse("2*(a + b) - -c = 10").unwrap();
        assert_eq!(
            c.holds(&cfg(&[("a", 1.0), ("b", 2.0), ("c", 4.0)])),
            Some(true)
        );
        let c = ConstraintExpr::parse("tb_x · tb_sm_x ≤ 2048").unwrap();
        assert_eq!(
            c.holds(&cfg(&[("tb_x", 64.0), ("tb_sm_x", 32.0)])),
            Some(true)
        );
        assert_eq!(
            c.holds(&cfg(&[("tb_x", 128.0), ("tb_sm_x", 32.0)])),
            Some(false)
        );
        assert!(ConstraintExpr::parse("a +").is_err());
        assert!(ConstraintExpr::parse("a + b").is_err());
        assert!(ConstraintExpr::parse("a < b c").is_err());
    }

    #[test]
    fn structural_invariants_rejected() {
        let dup = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![
                int_param("a", 1, 2, 1.0, "r"),
                int_param("a", 1, 2, 1.0, "r"),
            ],
            vec![],
        );
        assert!(matches!(dup, Err(SpaceError::InvalidSpace(_))));
        let orphan = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![int_param("a", 1, 2, 1.0, "q")],
            vec![],
        );
        assert!(matches!(orphan, Err(SpaceError::InvalidSpace(_))));
        let bad_default = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![int_param("a", 1, 2, 3.0, "r")],
            vec![],
        );
        assert!(matches!(bad_default, Err(SpaceError::InvalidSpace(_))));
        let cyc = SearchSpace::new(
            vec![
                RoutineDecl {
                    name: "a".into(),
                    parent: Some("b".into()),
                    measured: true,
                },
                RoutineDecl {
                    name: "b".into(),
                    parent: Some("a".into()),
                    measured: true,
                },
            ],
            vec![],
            vec![],
        );
        assert!(matches!(cyc, Err(SpaceError::InvalidSpace(_))));
        let cat = SearchSpace::new(
            vec![RoutineDecl::new("r")],
            vec![ParameterSpec {
                name: "mode".into(),
                kind: ParamKind::Categorical {
                    labels: vec!["a".into(), "b".into()],
                },
                default: "a".into(),
                owner: "r".into(),
                shared_value_required: false,
                used_by: vec![],
            }],
            vec![ConstraintExpr::parse("mode < 2").unwrap()],
        );
        assert!(matches!(cat, Err(SpaceError::InvalidSpace(_))));
    }

    #[test]
    fn canonical_rendering() {
        assert_eq!(Value::Num(8.0).to_string(), "8");
        assert_eq!(Value::Num(-3.0).to_string(), "-3");
        assert_eq!(Value::Num(0.25).to_string(), "0.25");
        assert_eq!(Value::from("fast").to_string(), "fast");
    }

    #[test]
    fn nearest_in_domain() {
        let k = ParamKind::Integer {
            lo: 32,
            hi: 1024,
            step: 32,
        };
        assert_eq!(k.nearest(70.0), Some(64.0));
        assert_eq!(k.nearest(5000.0), Some(1024.0));
        let r = ParamKind::Real {
            lo: -50.0,
            hi: 50.0,
        };
        assert_eq!(r.nearest(55.0), Some(50.0));
        let o = ParamKind::Ordinal {
            values: vec![1.0, 2.0, 4.0, 8.0],
        };
        assert_eq!(o.nearest(5.0), Some(4.0));
    }

    #[test]
    fn space_roundtrips_through_toml() {
        let space = mpi_space();
        let text = toml::to_string(&space).unwrap();
        let back: SearchSpace = toml::from_str(&text).unwrap();
        assert_eq!(back.parameter_names(), space.parameter_names());
        assert_eq!(back.constraints()[0].source(), "nstb * nkpb * nspb <= 40");
    }
}
