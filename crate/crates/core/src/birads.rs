//! BI-RADS lesion descriptor vocabulary and binary lesion encoding.
//!
//! Each descriptor class gets a contiguous position in a fixed-length binary
//! vector. A lesion is encoded by setting the positions of its classes; a case
//! with several lesions becomes a set of such vectors, one per lesion.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DescriptorCategory {
    MassMargin,
    MassShape,
    CalcMorphology,
    CalcDistribution,
}

impl DescriptorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            DescriptorCategory::MassMargin => "mass-margin",
            DescriptorCategory::MassShape => "mass-shape",
            DescriptorCategory::CalcMorphology => "calc-morphology",
            DescriptorCategory::CalcDistribution => "calc-distribution",
        }
    }
}

impl fmt::Display for DescriptorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DescriptorCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mass-margin" => Ok(DescriptorCategory::MassMargin),
            "mass-shape" => Ok(DescriptorCategory::MassShape),
            "calc-morphology" => Ok(DescriptorCategory::CalcMorphology),
            "calc-distribution" => Ok(DescriptorCategory::CalcDistribution),
            other => Err(Error::Validation(format!("unknown descriptor category {other:?}"))),
        }
    }
}

/// The default mass/calcification descriptor classes, in index order.
pub const DEFAULT_CLASSES: [(DescriptorCategory, &str); 14] = [
    (DescriptorCategory::MassMargin, "Circumscribed"),
    (DescriptorCategory::MassMargin, "Ill-defined"),
    (DescriptorCategory::MassMargin, "Spicular"),
    (DescriptorCategory::MassMargin, "Obscured"),
    (DescriptorCategory::MassShape, "Round"),
    (DescriptorCategory::MassShape, "Oval"),
    (DescriptorCategory::MassShape, "Irregular"),
    (DescriptorCategory::CalcMorphology, "Pleomorphic"),
    (DescriptorCategory::CalcMorphology, "Amorphous"),
    (DescriptorCategory::CalcMorphology, "Linear"),
    (DescriptorCategory::CalcMorphology, "Punctate"),
    (DescriptorCategory::CalcDistribution, "Clustered"),
    (DescriptorCategory::CalcDistribution, "Scattered"),
    (DescriptorCategory::CalcDistribution, "Diffuse"),
];

/// Case-folds a token and unifies the separators seen in radiology exports
/// (`ILL_DEFINED`, `Ill defined`, `ill-defined`).
fn normalize(token: &str) -> String {
    token
        .trim()
        .to_lowercase()
        .chars()
        .map(|c| if c == '_' || c == ' ' { '-' } else { c })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DescriptorVocabulary {
    entries: Vec<(DescriptorCategory, String)>,
    index: HashMap<String, usize>,
}

impl DescriptorVocabulary {
    /// Assigns positions in input order. Tokens must be unique after
    /// case-folding (a token mapping to two positions would be ambiguous).
    pub fn build<S: AsRef<str>>(tokens: &[(DescriptorCategory, S)]) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Validation("descriptor vocabulary must be non-empty".into()));
        }
        let mut entries = Vec::with_capacity(tokens.len());
        let mut index = HashMap::new();
        for (category, token) in tokens {
            let token = token.as_ref().trim();
            let key = normalize(token);
            if key.is_empty() {
                return Err(Error::Validation("empty descriptor token".into()));
            }
            if let Some(&prev) = index.get(&key) {
                let (prev_cat, _): &(DescriptorCategory, String) = &entries[prev];
                return Err(Error::Validation(format!(
                    "duplicate descriptor token {token:?} in {category} (already in {prev_cat})"
                )));
            }
            index.insert(key, entries.len());
            entries.push((*category, token.to_string()));
        }
        Ok(DescriptorVocabulary { entries, index })
    }

    pub fn default_classes() -> Self {
        Self::build(&DEFAULT_CLASSES).expect("default vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Zero-based position of a token (case-insensitive).
    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(&normalize(token)).copied()
    }

    pub fn token(&self, position: usize) -> Option<&str> {
        self.entries.get(position).map(|(_, t)| t.as_str())
    }

    pub fn category(&self, position: usize) -> Option<DescriptorCategory> {
        self.entries.get(position).map(|(c, _)| *c)
    }

    pub fn entries(&self) -> &[(DescriptorCategory, String)] {
        &self.entries
    }

    /// Tokens of one category, in index order.
    pub fn tokens_in(&self, category: DescriptorCategory) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(c, _)| *c == category)
            .map(|(_, t)| t.as_str())
            .collect()
    }

    /// Resolves a possibly hyphen-combined token ("Circumscribed-Obscured")
    /// into vocabulary positions. Runs of parts are matched greedily, longest
    /// first, so classes that themselves contain a hyphen ("Ill-defined")
    /// still resolve.
    pub fn resolve(&self, token: &str) -> Result<Vec<usize>> {
        if let Some(p) = self.position(token) {
            return Ok(vec![p]);
        }
        let normalized = normalize(token);
        let parts: Vec<&str> = normalized.split('-').collect();
        let mut out = Vec::new();
        let mut i = 0;
        'outer: while i < parts.len() {
            for j in (i + 1..=parts.len()).rev() {
                if let Some(&p) = self.index.get(&parts[i..j].join("-")) {
                    out.push(p);
                    i = j;
                    continue 'outer;
                }
            }
            return Err(Error::Validation(format!("unknown descriptor token {:?}", token.trim())));
        }
        Ok(out)
    }

    /// One `category,token` line per class; line order is index order.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(c, t)| format!("{c},{t}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (cat, tok) = line.split_once(',').ok_or_else(|| {
                Error::Validation(format!("vocabulary line {}: expected `category,token`", n + 1))
            })?;
            tokens.push((cat.parse::<DescriptorCategory>()?, tok.trim().to_string()));
        }
        Self::build(&tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsio::write_atomic(path, self.to_text())
    }
}

/// Binary encoding of one lesion. Positions at or beyond the vocabulary size
/// are always zero.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct DescriptorVector {
    bits: Vec<u8>,
}

impl DescriptorVector {
    pub fn zeros(length: usize) -> Self {
        DescriptorVector {
            bits: vec![0; length],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn set_positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Tokens for every set position.
    pub fn decode(&self, vocab: &DescriptorVocabulary) -> Vec<String> {
        self.set_positions()
            .into_iter()
            .filter_map(|p| vocab.token(p).map(str::to_string))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

/// Descriptor vectors for every lesion of a case (K ≥ 1, shared length).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LesionDescriptorSet {
    lesions: Vec<DescriptorVector>,
}

impl LesionDescriptorSet {
    pub fn new(lesions: Vec<DescriptorVector>) -> Result<Self> {
        let Some(first) = lesions.first() else {
            return Err(Error::Validation("a case needs at least one lesion".into()));
        };
        if lesions.iter().any(|l| l.len() != first.len()) {
            return Err(Error::Validation("lesion vectors differ in length".into()));
        }
        Ok(LesionDescriptorSet { lesions })
    }

    /// The attribute input used when descriptors are withheld: a single
    /// all-zero vector.
    pub fn withheld(length: usize) -> Self {
        LesionDescriptorSet {
            lesions: vec![DescriptorVector::zeros(length)],
        }
    }

    pub fn lesions(&self) -> &[DescriptorVector] {
        &self.lesions
    }

    pub fn count(&self) -> usize {
        self.lesions.len()
    }

    pub fn length(&self) -> usize {
        self.lesions[0].len()
    }

    /// The same set with lesions in a fixed (lexicographic) order, so that
    /// anything computed from it cannot depend on the input order.
    pub fn canonical(&self) -> Self {
        let mut lesions = self.lesions.clone();
        lesions.sort();
        LesionDescriptorSet { lesions }
    }

    /// `[K, L]` matrix, one row per lesion.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.lesions.iter().flat_map(|l| l.to_f64()).collect();
        Tensor::new(&[self.count(), self.length()], data).expect("non-empty set")
    }
}

/// Encodes one lesion's descriptor tokens. Token order and repetition do not
/// matter.
pub fn encode_lesion<S: AsRef<str>>(
    tokens: &[S],
    vocab: &DescriptorVocabulary,
    length: usize,
) -> Result<DescriptorVector> {
    if length < vocab.len() {
        return Err(Error::Config(format!(
            "descriptor length {length} is shorter than the vocabulary ({})",
            vocab.len()
        )));
    }
    let mut v = DescriptorVector::zeros(length);
    for token in tokens {
        for p in vocab.resolve(token.as_ref())? {
            v.bits[p] = 1;
        }
    }
    Ok(v)
}

/// Encodes every lesion of a case, preserving lesion order.
pub fn encode_case<S: AsRef<str>>(
    lesions: &[Vec<S>],
    vocab: &DescriptorVocabulary,
    length: usize,
) -> Result<LesionDescriptorSet> {
    if lesions.is_empty() {
        return Err(Error::Validation("a case needs at least one lesion".into()));
    }
    let vectors = lesions
        .iter()
        .map(|tokens| encode_lesion(tokens, vocab, length))
        .collect::<Result<Vec<_>>>()?;
    LesionDescriptorSet::new(vectors)
}
