//! Synthetic verifiable tasks and the line-delimited dataset format.
//!
//! Three families, each with small integer answers the toy vocabulary can spell:
//!
//! | family          | prompt tokens               | label          |
//! |-----------------|-----------------------------|----------------|
//! | `mod_add`       | `a + b mod m = box:`        | `(a + b) % m`  |
//! | `digit_sum`     | `dsum d1 d2 d3 = box:`      | digit sum      |
//! | `small_product` | `a * b = box:`              | `a * b`        |
//!
//! `small_product` over single digits is the easy family; `digit_sum` with
//! three digits the hardest.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::vocab::{TokenId, Vocab, BOX_REQUEST};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ModAdd,
    DigitSum,
    SmallProduct,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ModAdd => "mod_add",
            Family::DigitSum => "digit_sum",
            Family::SmallProduct => "small_product",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "mod_add" => Ok(Family::ModAdd),
            "digit_sum" => Ok(Family::DigitSum),
            "small_product" => Ok(Family::SmallProduct),
            other => Err(Error::InvalidInput(format!("unknown task family {other:?}"))),
        }
    }
}

/// Difficulty knobs for a family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    /// Largest single-digit operand (`mod_add`, `small_product`).
    pub max_operand: u32,
    /// Moduli drawn for `mod_add`.
    pub moduli: Vec<u32>,
    /// Number of digits for `digit_sum`.
    pub digits: u32,
}

impl FamilySpec {
    pub fn new(family: Family) -> Self {
        match family {
            Family::ModAdd => Self { family, max_operand: 9, moduli: vec![7], digits: 0 },
            Family::DigitSum => Self { family, max_operand: 9, moduli: vec![], digits: 3 },
            Family::SmallProduct => Self { family, max_operand: 9, moduli: vec![], digits: 0 },
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_operand > 9 {
            return Err(Error::InvalidInput("operands must be single digits".into()));
        }
        if self.family == Family::ModAdd && (self.moduli.is_empty() || self.moduli.iter().any(|&m| !(2..=10).contains(&m))) {
            return Err(Error::InvalidInput("mod_add moduli must lie in 2..=10".into()));
        }
        if self.family == Family::DigitSum && !(1..=6).contains(&self.digits) {
            return Err(Error::InvalidInput("digit_sum needs 1..=6 digits".into()));
        }
        Ok(())
    }

    /// Every distinct (prompt tokens, label) this spec can produce, in a fixed order.
    fn instances(&self) -> Vec<(Vec<String>, String)> {
        let digit = |d: u32| d.to_string();
        let mut out = Vec::new();
        match self.family {
            Family::ModAdd => {
                for &m in &self.moduli {
                    for a in 0..=self.max_operand {
                        for b in 0..=self.max_operand {
                            let prompt = vec![digit(a), "+".into(), digit(b), "mod".into(), m.to_string(), "=".into(), BOX_REQUEST.into()];
                            let prompt = prompt.into_iter().flat_map(split_number).collect();
                            out.push((prompt, ((a + b) % m).to_string()));
                        }
                    }
                }
            }
            Family::DigitSum => {
                for n in 0..10u32.pow(self.digits) {
                    let mut prompt = vec!["dsum".to_string()];
                    prompt.extend(n.to_string().chars().map(String::from));
                    prompt.push("=".into());
                    prompt.push(BOX_REQUEST.into());
                    let sum: u32 = n.to_string().chars().map(|c| c.to_digit(10).unwrap()).sum();
                    out.push((prompt, sum.to_string()));
                }
            }
            Family::SmallProduct => {
                for a in 1..=self.max_operand {
                    for b in 1..=self.max_operand {
                        let prompt = vec![digit(a), "*".into(), digit(b), "=".into(), BOX_REQUEST.into()];
                        out.push((prompt, (a * b).to_string()));
                    }
                }
            }
        }
        out
    }
}

/// Multi-digit numbers become one token per digit.
fn split_number(tok: String) -> Vec<String> {
    if tok.len() > 1 && tok.bytes().all(|b| b.is_ascii_digit()) {
        tok.chars().map(String::from).collect()
    } else {
        vec![tok]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptExample {
    pub id: String,
    pub prompt: Vec<TokenId>,
    pub label: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    examples: Vec<PromptExample>,
    provenance: String,
}

impl Dataset {
    pub fn new(examples: Vec<PromptExample>, provenance: impl Into<String>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate example id {:?}", ex.id)));
            }
        }
        Ok(Self { examples, provenance: provenance.into() })
    }

    pub fn examples(&self) -> &[PromptExample] {
        &self.examples
    }

    pub fn examples_mut(&mut self) -> &mut [PromptExample] {
        &mut self.examples
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PromptExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.examples.iter().position(|e| e.id == id)
    }

    /// Splits into the first `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidInput(format!("cannot split {} examples at {n}", self.len())));
        }
        let (a, b) = self.examples.split_at(n);
        Ok((
            Dataset::new(a.to_vec(), format!("{} [..{n}]", self.provenance))?,
            Dataset::new(b.to_vec(), format!("{} [{n}..]", self.provenance))?,
        ))
    }
}

/// Generates `count` examples of a family with default difficulty.
pub fn generate_tasks(family: Family, count: usize, seed: u64) -> Result<Dataset> {
    generate_tasks_with(&FamilySpec::new(family), count, seed)
}

/// Draws distinct prompts while the family has unused ones, then repeats.
pub fn generate_tasks_with(spec: &FamilySpec, count: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidInput("count must be at least 1".into()));
    }
    spec.validate()?;
    let vocab = Vocab::standard();
    let pool = spec.instances();
    let mut rng = substream(seed, "tasks", &[]);
    let mut order: Vec<usize> = Vec::with_capacity(count);
    while order.len() < count {
        let mut round: Vec<usize> = (0..pool.len()).collect();
        round.shuffle(&mut rng);
        order.extend(round.into_iter().take(count - order.len()));
    }
    let examples = order
        .into_iter()
        .enumerate()
        .map(|(i, j)| {
            let (prompt, label) = &pool[j];
            Ok(PromptExample {
                id: format!("{}-{seed}-{i:04}", spec.family),
                prompt: vocab.ids_of(prompt)?,
                label: label.clone(),
                category: spec.family.name().to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, format!("generated {} count={count} seed={seed}", spec.family))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    prompt: Vec<String>,
    label: String,
    category: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    provenance: String,
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let vocab = Vocab::standard();
    let mut w = BufWriter::new(File::create(path)?);
    let header = Header { provenance: dataset.provenance.clone() };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for ex in &dataset.examples {
        let prompt = ex
            .prompt
            .iter()
            .map(|&t| vocab.token(t).map(String::from).ok_or_else(|| Error::InvalidInput(format!("token id {t} not in vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        let rec = Record { id: ex.id.clone(), prompt, label: ex.label.clone(), category: ex.category.clone() };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let vocab = Vocab::standard();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut provenance = format!("loaded from {}", path.display());
    let mut examples: Vec<PromptExample> = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if examples.is_empty() && i == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                provenance = h.provenance;
                continue;
            }
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if !seen.insert(rec.id.clone()) {
            return Err(parse_err(line_no, format!("duplicate id {:?}", rec.id)));
        }
        let prompt = vocab.ids_of(&rec.prompt).map_err(|e| parse_err(line_no, e.to_string()))?;
        examples.push(PromptExample { id: rec.id, prompt, label: rec.label, category: rec.category });
    }
    Dataset::new(examples, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::{normalize_answer, outcome_reward};

    fn render(ex: &PromptExample) -> String {
        Vocab::standard().decode(&ex.prompt).unwrap()
    }

    #[test]
    fn mod_add_labels_follow_integer_arithmetic() {
        let d = generate_tasks(Family::ModAdd, 4, 0).unwrap();
        assert_eq!(d.len(), 4);
        let prompts: HashSet<_> = d.examples().iter().map(|e| e.prompt.clone()).collect();
        assert_eq!(prompts.len(), 4);
        let v = Vocab::standard();
        for ex in d.examples() {
            let toks: Vec<&str> = ex.prompt.iter().map(|&t| v.token(t).unwrap()).collect();
            let a: u32 = toks[0].parse().unwrap();
            let b: u32 = toks[2].parse().unwrap();
            assert_eq!(toks[3], "mod");
            let m: u32 = toks[4].parse().unwrap();
            assert_eq!(ex.label, ((a + b) % m).to_string(), "{}", render(ex));
            assert_eq!(*toks.last().unwrap(), BOX_REQUEST);
        }
    }

    #[test]
    fn generation_is_seeded() {
        for fam in [Family::ModAdd, Family::DigitSum, Family::SmallProduct] {
            assert_eq!(generate_tasks(fam, 30, 5).unwrap(), generate_tasks(fam, 30, 5).unwrap());
            assert_ne!(generate_tasks(fam, 30, 5).unwrap(), generate_tasks(fam, 30, 6).unwrap());
        }
    }

    #[test]
    fn single_digit_digit_sums() {
        let spec = FamilySpec { digits: 1, ..FamilySpec::new(Family::DigitSum) };
        let d = generate_tasks_with(&spec, 10, 1).unwrap();
        let v = Vocab::standard();
        for ex in d.examples() {
            assert_eq!(v.token(ex.prompt[1]).unwrap(), ex.label);
        }
    }

    #[test]
    fn labels_are_verifiable_and_varied() {
        for fam in [Family::ModAdd, Family::DigitSum, Family::SmallProduct] {
            for seed in 0..5 {
                let d = generate_tasks(fam, 20, seed).unwrap();
                let mut answers = HashSet::new();
                for ex in d.examples() {
                    assert!(normalize_answer(&ex.label).is_numeric());
                    assert_eq!(outcome_reward(&format!("\\boxed{{{}}}", ex.label), &ex.label), 1.0);
                    answers.insert(ex.label.clone());
                }
                assert!(answers.len() >= 2, "{fam} seed {seed}");
            }
        }
    }

    #[test]
    fn oversized_requests_repeat_prompts_with_unique_ids() {
        let spec = FamilySpec { max_operand: 2, ..FamilySpec::new(Family::SmallProduct) };
        let d = generate_tasks_with(&spec, 10, 0).unwrap();
        assert_eq!(d.len(), 10);
        assert!(generate_tasks(Family::ModAdd, 0, 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let d = generate_tasks(Family::SmallProduct, 3, 2).unwrap();
        save_dataset(&d, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), d);
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let dup = dir.path().join("dup.jsonl");
        std::fs::write(
            &dup,
            "{\"id\":\"a\",\"prompt\":[\"1\"],\"label\":\"1\",\"category\":\"x\"}\n{\"id\":\"a\",\"prompt\":[\"2\"],\"label\":\"2\",\"category\":\"x\"}\n",
        )
        .unwrap();
        match load_dataset(&dup) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        let err = load_dataset(&empty).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"id\":\"a\",\"prompt\":[\"1\"],\"label\":\"1\",\"category\":\"x\"}\nnot json\n").unwrap();
        match load_dataset(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
